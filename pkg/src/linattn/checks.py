"""Numerical self-checks: finite-difference gradients and invariant suites.

``run_selftest`` backs the ``selftest`` CLI command. The finite-difference
helpers only ever call forward functions, so they stay independent of the
analytic backward passes they are used to check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

FD_STEP = 1e-5
DENOM_FLOOR = 1e-8


def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP,
                   coords=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``, perturbing ``x`` in place.

    ``coords`` restricts the check to a subset of flat indices; other
    entries of the result are NaN.
    """
    g = np.full(x.shape, np.nan) if coords is not None else np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def max_rel_error(analytic, numeric, floor: float = DENOM_FLOOR) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over finite entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _suite(name, fn) -> SuiteResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # report, do not crash the summary
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return SuiteResult(name, bool(ok), detail, time.perf_counter() - t0)


def _equivalence(seed: int, trials: int = 200):
    from linattn.attention import build_sketch_batch, build_sketch_stream, linear_attention

    rng = np.random.default_rng(seed)
    worst_rel = worst_abs = 0.0
    for _ in range(trials):
        n, k = int(rng.integers(1, 65)), int(rng.integers(1, 33))
        H = rng.standard_normal((n, k))
        q = rng.standard_normal(k)
        ref = H.T @ (H @ q)
        R = linear_attention(build_sketch_batch(H), q)
        worst_rel = max(worst_rel, float(np.max(np.abs(R - ref) / np.maximum(np.abs(ref), 1e-300))))
        diff = build_sketch_stream(H).C - build_sketch_batch(H).C
        worst_abs = max(worst_abs, float(np.max(np.abs(diff))))
    return worst_rel < 1e-10 and worst_abs < 1e-12, f"rel={worst_rel:.2e} stream-batch={worst_abs:.2e}"


def _reversibility(seed: int, n: int = 256, k: int = 16):
    from linattn.attention import ReversibleSketch, gated_update, reverse_update

    rng = np.random.default_rng(seed)
    alphas = rng.uniform(0.5, 1.0, n)
    betas = rng.uniform(0.0, 1.0, n)
    fs = rng.standard_normal((n, k))
    fs /= np.maximum(1.0, np.linalg.norm(fs, axis=1, keepdims=True))
    ref = [np.zeros((k, k))]
    chain = [ReversibleSketch.zeros(k)]
    for t in range(n):
        ref.append(gated_update(ref[-1], alphas[t], betas[t], fs[t]))
        chain.append(gated_update(chain[-1], alphas[t], betas[t], fs[t]))
    S = chain[-1]
    worst = 0.0
    exact = True
    for t in range(n - 1, -1, -1):
        S = reverse_update(S, alphas[t], betas[t], fs[t])
        exact &= S == chain[t]
        worst = max(worst, float(np.max(np.abs(S.C - ref[t]))))
    return exact and worst < 1e-8, f"bit-exact={exact} max err vs float chain={worst:.2e}"


def _grad_linear(seed: int, trials: int = 50):
    from linattn.attention import build_sketch_batch, linear_attention, linear_attention_backward

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, k = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        H, q, g = rng.standard_normal((n, k)), rng.standard_normal(k), rng.standard_normal(k)
        loss = lambda: float(g @ linear_attention(build_sketch_batch(H), q))  # noqa: E731
        grads = linear_attention_backward(H, q, g)
        worst = max(worst, max_rel_error(grads.dH, numerical_grad(loss, H)),
                    max_rel_error(grads.dq, numerical_grad(loss, q)))
    return worst < 1e-4, f"max rel err={worst:.2e}"


def _grad_gated(seed: int, trials: int = 50):
    from linattn.attention import GateParams, gated_linear_backward, gated_linear_forward

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, k = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        H, q, g = rng.standard_normal((n, k)), rng.standard_normal(k), rng.standard_normal(k)
        gp = GateParams(rng.standard_normal((k, k)), rng.standard_normal(k))
        loss = lambda: float(g @ gated_linear_forward(H, gp, q)[0])  # noqa: E731
        _, tape = gated_linear_forward(H, gp, q)
        gr = gated_linear_backward(tape, q, g, gp)
        worst = max(worst, *(max_rel_error(a, numerical_grad(loss, x))
                             for a, x in ((gr.dH, H), (gr.dq, q), (gr.dW, gp.W), (gr.db, gp.b))))
    return worst < 1e-4, f"max rel err={worst:.2e}"


def _grad_gru(seed: int, trials: int = 50):
    from linattn.rnn import GRUParams, gru_backward, gru_forward

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, d, k = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        p = GRUParams.init(d, k, rng)
        for a in (p.b_z, p.b_r, p.b_h):
            a[:] = rng.uniform(-0.5, 0.5, k)
        X = rng.standard_normal((n, d))
        G = rng.standard_normal((n, k))
        loss = lambda: float(np.sum(G * gru_forward(X, p).states))  # noqa: E731
        dX, dp, _ = gru_backward(gru_forward(X, p).cache, G, p)
        worst = max(worst, max_rel_error(dX, numerical_grad(loss, X)))
        for name in ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h"):
            worst = max(worst, max_rel_error(getattr(dp, name), numerical_grad(loss, getattr(p, name))))
    return worst < 1e-4, f"max rel err={worst:.2e}"


def _grad_model(seed: int, trials: int = 50):
    from linattn.qa.gradcheck import model_grad_error
    from linattn.qa.model import MODES

    parts, ok = [], True
    for mode in MODES:
        rng = np.random.default_rng([seed, MODES.index(mode)])
        errs = [model_grad_error(mode, rng) for _ in range(trials)]
        failed = sum(e >= 1e-4 for e in errs)
        ok &= failed == 0
        parts.append(f"{mode} {max(errs):.1e} ({failed}/{trials} over)")
    return ok, ", ".join(parts)


def run_selftest(seed: int = 0) -> list[SuiteResult]:
    suites = [
        ("kernel equivalence", lambda: _equivalence(seed)),
        ("reversibility", lambda: _reversibility(seed)),
        ("grad: linear attention", lambda: _grad_linear(seed)),
        ("grad: gated linear attention", lambda: _grad_gated(seed)),
        ("grad: GRU", lambda: _grad_gru(seed)),
        ("grad: end-to-end model", lambda: _grad_model(seed)),
    ]
    return [_suite(name, fn) for name, fn in suites]
