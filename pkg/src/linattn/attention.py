"""Attention kernels: softmax, linear (covariance sketch) and gated linear.

Every kernel broadcasts over leading batch dimensions: ``H`` has shape
``(..., n, k)``, queries ``(..., k)`` and sketches ``(..., k, k)``. The
single-document case is the plain 2-d / 1-d shape. The linear kernels also
take ``m`` queries per document as ``(..., m, k)``.

Linear attention summarises a document by ``C = H^T H`` so a lookup is a
single ``k x k`` mat-vec. Gated variants build ``C`` with the update
``C <- alpha * C + beta * f f^T`` and backpropagate by running the update in
reverse instead of storing every intermediate ``C``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from linattn.linalg import ContractViolation, sigmoid, softmax

ALPHA_MIN = 1e-3

__all__ = [
    "ALPHA_MIN",
    "Sketch",
    "ReversibleSketch",
    "GateParams",
    "StepTape",
    "AttentionGrads",
    "Gate",
    "SigmoidGate",
    "NoveltyGate",
    "softmax_attention",
    "softmax_attention_backward",
    "build_sketch_batch",
    "build_sketch_stream",
    "build_sketch_chunked",
    "linear_attention",
    "linear_attention_backward",
    "feature_grads",
    "gate_features",
    "gate_features_backward",
    "gated_update",
    "reverse_update",
    "gated_sketch",
    "gated_linear_forward",
    "gated_linear_backward",
    "general_gated_forward",
    "general_gated_backward",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Sketch:
    """Non-centered covariance ``C`` of a document's hidden states.

    ``n`` counts the source states folded into ``C``; it is informational
    only and plays no part in lookups.
    """

    C: np.ndarray
    n: int = 0

    def __post_init__(self):
        C = _frozen(self.C)
        if C.ndim < 2 or C.shape[-1] != C.shape[-2]:
            raise ContractViolation(f"sketch must be square, got {C.shape}")
        object.__setattr__(self, "C", C)

    @property
    def k(self) -> int:
        return self.C.shape[-1]

    @property
    def nbytes(self) -> int:
        return self.C.nbytes

    @classmethod
    def zeros(cls, k: int) -> "Sketch":
        return cls(np.zeros((k, k)), 0)


class ReversibleSketch:
    """Sketch held in fixed point so that gated updates invert bit-exactly.

    Undoing ``C <- alpha C + beta f f^T`` in floating point divides by
    ``alpha`` every step, which amplifies rounding by ``prod 1/alpha`` (about
    ``1e34`` over 256 steps with alpha in [0.5, 1]). Here ``C`` is stored as
    integers scaled by ``2**frac_bits``. Multiplying by ``alpha = num/den``
    (exact, since alpha is a float) would discard low-order digits; those are
    pushed onto a per-entry integer buffer instead, following the reversible
    learning scheme of Maclaurin et al. (2015). The buffer grows by about
    ``log2(1/alpha)`` bits per entry per step, far less than the 64 bits per
    entry needed to store every intermediate sketch.
    """

    __slots__ = ("X", "buf", "frac_bits", "n")

    def __init__(self, X: np.ndarray, buf: np.ndarray, frac_bits: int = 64, n: int = 0):
        self.X = X
        self.buf = buf
        self.frac_bits = frac_bits
        self.n = n

    @classmethod
    def zeros(cls, k: int, frac_bits: int = 64) -> "ReversibleSketch":
        z = np.zeros((k, k), dtype=object)
        z[...] = 0
        return cls(z, z.copy(), frac_bits)

    @property
    def k(self) -> int:
        return self.X.shape[0]

    @property
    def C(self) -> np.ndarray:
        """Float64 view of the sketch (rounded to nearest)."""
        return np.ldexp(self.X.astype(np.float64), -self.frac_bits)

    @property
    def buffer_bits(self) -> int:
        return int(sum(int(b).bit_length() for b in self.buf.flat))

    def _increment(self, beta: float, f: np.ndarray) -> np.ndarray:
        term = np.ldexp(float(beta) * _outer(f, f), self.frac_bits)
        out = np.empty(term.shape, dtype=object)
        out[...] = [[int(v) for v in row] for row in np.floor(term)]
        return out

    def updated(self, alpha: float, beta: float, f) -> "ReversibleSketch":
        num, den = float(alpha).as_integer_ratio()
        buf = self.buf
        y = self.X * num + buf % num
        buf = buf // num
        X = y // den
        buf = buf * den + y % den
        X = X + self._increment(beta, np.asarray(f, dtype=np.float64))
        return ReversibleSketch(X, buf, self.frac_bits, self.n + 1)

    def reverted(self, alpha: float, beta: float, f) -> "ReversibleSketch":
        num, den = float(alpha).as_integer_ratio()
        X = self.X - self._increment(beta, np.asarray(f, dtype=np.float64))
        buf = self.buf
        y = X * den + buf % den
        buf = buf // den
        X = y // num
        buf = buf * num + y % num
        return ReversibleSketch(X, buf, self.frac_bits, max(self.n - 1, 0))

    def __eq__(self, other) -> bool:
        return (isinstance(other, ReversibleSketch) and self.frac_bits == other.frac_bits
                and np.array_equal(self.X, other.X) and np.array_equal(self.buf, other.buf))

    __hash__ = None


@dataclass
class GateParams:
    """Weights of the sigmoid gate ``f = sigmoid(W h + b) * h``."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        k = self.b.shape[0]
        if self.b.ndim != 1 or self.W.shape != (k, k):
            raise ContractViolation(
                f"gate shapes W{self.W.shape} b{self.b.shape} are inconsistent")

    @property
    def k(self) -> int:
        return self.b.shape[0]

    @classmethod
    def init(cls, k: int, rng: np.random.Generator) -> "GateParams":
        s = 1.0 / np.sqrt(k)
        return cls(rng.uniform(-s, s, size=(k, k)), np.zeros(k))


@dataclass(frozen=True)
class StepTape:
    """What the forward pass keeps so the backward pass can invert it.

    Arrays have shape ``(..., n, k)`` for ``h`` and ``f`` and ``(..., n)``
    for ``alpha`` and ``beta``; ``C`` is the final sketch.
    """

    h: np.ndarray
    f: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    C: np.ndarray

    def __len__(self) -> int:
        return self.h.shape[-2]


@dataclass
class AttentionGrads:
    dH: np.ndarray
    dq: np.ndarray
    dW: np.ndarray | None = None
    db: np.ndarray | None = None
    params: dict[str, np.ndarray] = field(default_factory=dict)


def _check_hq(H, q, multi_ok: bool = False) -> tuple[np.ndarray, np.ndarray]:
    H = np.asarray(H, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if H.ndim < 2 or q.ndim < 1:
        raise ContractViolation(f"expected H (..., n, k) and q (..., k), got {H.shape}, {q.shape}")
    lead = q.shape[:-2] if multi_ok and q.ndim == H.ndim else q.shape[:-1]
    if H.shape[-1] != q.shape[-1] or H.shape[:-2] != lead:
        raise ContractViolation(f"H {H.shape} and q {q.shape} disagree")
    return H, q


def _is_multi(q: np.ndarray, doc_ndim: int) -> bool:
    return q.ndim == doc_ndim


def _outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u[..., :, None] * v[..., None, :]


def _mv(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (M @ v[..., None])[..., 0]


# -- softmax attention ------------------------------------------------------

def softmax_attention(H, q) -> np.ndarray:
    """``R = H^T softmax(H q)``; costs O(n k) per lookup."""
    H, q = _check_hq(H, q)
    if H.shape[-2] == 0:
        raise ContractViolation("softmax attention over an empty document")
    w = softmax(_mv(H, q))
    return (w[..., None, :] @ H)[..., 0, :]


def softmax_attention_backward(H, q, grad_R) -> AttentionGrads:
    H, q = _check_hq(H, q)
    g = np.asarray(grad_R, dtype=np.float64)
    if g.shape != q.shape:
        raise ContractViolation(f"grad_R {g.shape} does not match q {q.shape}")
    w = softmax(_mv(H, q))
    dw = _mv(H, g)
    ds = w * (dw - (w * dw).sum(axis=-1, keepdims=True))
    dH = _outer(w, g) + _outer(ds, q)
    dq = (ds[..., None, :] @ H)[..., 0, :]
    return AttentionGrads(dH=dH, dq=dq)


# -- basic linear attention -------------------------------------------------

def _mirror(C: np.ndarray) -> np.ndarray:
    upper = np.triu(C)
    return upper + np.swapaxes(np.triu(C, 1), -1, -2)


def build_sketch_batch(H) -> Sketch:
    """``C = H^T H`` from the stacked states, mirrored to exact symmetry."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim < 2:
        raise ContractViolation(f"H must be (..., n, k), got {H.shape}")
    return Sketch(_mirror(np.swapaxes(H, -1, -2) @ H), H.shape[-2])


def build_sketch_stream(hs: Iterable, k: int | None = None) -> Sketch:
    """Accumulate ``C += h h^T`` one state at a time.

    Only the running ``k x k`` matrix is held; ``hs`` may be a generator.
    Each state may carry leading batch dimensions. ``k`` is needed only
    when the stream can be empty.
    """
    C = None
    n = 0
    for h in hs:
        h = np.asarray(h, dtype=np.float64)
        if C is None:
            if h.ndim < 1 or (k is not None and h.shape[-1] != k):
                raise ContractViolation(f"state of shape {h.shape} for k={k}")
            C = np.zeros(h.shape + h.shape[-1:])
        elif h.shape != C.shape[:-1]:
            raise ContractViolation(
                f"state {n} has shape {h.shape}, stream started with {C.shape[:-1]}")
        C += _outer(h, h)
        n += 1
    if C is None:
        if k is None:
            raise ContractViolation("empty stream needs an explicit k")
        C = np.zeros((k, k))
    return Sketch(C, n)


def build_sketch_chunked(chunks: Iterable, k: int) -> Sketch:
    """Accumulate ``C += H_c^T H_c`` over blocks of states ``(n_c, k)``.

    Same result as :func:`build_sketch_stream` up to summation order, with
    one matrix product per block instead of one outer product per state.
    """
    C = np.zeros((k, k))
    n = 0
    for Hc in chunks:
        Hc = np.asarray(Hc, dtype=np.float64)
        if Hc.ndim != 2 or Hc.shape[1] != k:
            raise ContractViolation(f"chunk of shape {Hc.shape} for k={k}")
        C += Hc.T @ Hc
        n += Hc.shape[0]
    return Sketch(_mirror(C), n)


def linear_attention(C, q) -> np.ndarray:
    """``R = C q``; the cost depends on ``k`` only.

    ``q`` of shape ``(..., m, k)`` runs ``m`` lookups against each sketch.
    """
    C = C.C if isinstance(C, Sketch) else np.asarray(C, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    multi = _is_multi(q, C.ndim)
    lead = q.shape[:-2] if multi else q.shape[:-1]
    if C.shape[-1] != q.shape[-1] or C.shape[:-2] != lead:
        raise ContractViolation(f"sketch {C.shape} and q {q.shape} disagree")
    return q @ np.swapaxes(C, -1, -2) if multi else _mv(C, q)


def feature_grads(F: np.ndarray, q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient of ``g . (sum_t f_t f_t^T q)`` w.r.t. each ``f_t``.

    ``d f_t = q (f_t . g) + g (f_t . q)``; no k x k matrix is formed. With
    ``m`` queries per document (``q``, ``g`` of shape ``(..., m, k)``) the
    per-query terms are summed.
    """
    if _is_multi(q, F.ndim):
        return (F @ np.swapaxes(g, -1, -2)) @ q + (F @ np.swapaxes(q, -1, -2)) @ g
    return _outer(_mv(F, g), q) + _outer(_mv(F, q), g)


def linear_attention_backward(hs, q, grad_R) -> AttentionGrads:
    """Gradients of ``R = (sum_t h_t h_t^T) q`` given ``dL/dR``.

    Every step sees the same upstream gradient because ``R`` is a plain sum
    of per-step terms, so no intermediate sketch is needed. ``dq = C g`` is
    evaluated as ``H^T (H g)``.
    """
    H, q = _check_hq(hs, q, multi_ok=True)
    g = np.asarray(grad_R, dtype=np.float64)
    if g.shape != q.shape:
        raise ContractViolation(f"grad_R {g.shape} does not match q {q.shape}")
    dH = feature_grads(H, q, g)
    if _is_multi(q, H.ndim):
        dq = np.swapaxes(H @ np.swapaxes(g, -1, -2), -1, -2) @ H
    else:
        dq = (_mv(H, g)[..., None, :] @ H)[..., 0, :]
    return AttentionGrads(dH=dH, dq=dq)


# -- gated linear attention -------------------------------------------------

def _check_gate(h: np.ndarray, gp: GateParams):
    if h.shape[-1] != gp.k:
        raise ContractViolation(f"state dim {h.shape[-1]} but gate k={gp.k}")


def gate_features(h, gp: GateParams) -> np.ndarray:
    """``f = sigmoid(W h + b) * h``, applied along the last axis."""
    h = np.asarray(h, dtype=np.float64)
    _check_gate(h, gp)
    return sigmoid(h @ gp.W.T + gp.b) * h


def gate_features_backward(h, gp: GateParams, df) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain ``df`` through the gate; returns ``(dh, dW, db)``.

    ``dW`` and ``db`` are summed over every leading axis of ``h``.
    """
    h = np.asarray(h, dtype=np.float64)
    _check_gate(h, gp)
    s = sigmoid(h @ gp.W.T + gp.b)
    u = df * h * s * (1.0 - s)
    dh = df * s + u @ gp.W
    k = gp.k
    u2 = u.reshape(-1, k)
    dW = u2.T @ h.reshape(-1, k)
    db = u2.sum(axis=0)
    return dh, dW, db


def _check_alpha(alpha, alpha_min: float):
    if np.any(np.asarray(alpha) < alpha_min):
        raise ContractViolation(
            f"alpha={np.min(alpha)!r} below alpha_min={alpha_min}; the update would not be safely invertible")


def _unwrap(C) -> np.ndarray:
    return C.C if isinstance(C, Sketch) else np.asarray(C, dtype=np.float64)


def gated_update(C_t, alpha, beta, f, alpha_min: float = ALPHA_MIN):
    """``alpha * C_t + beta * f f^T``; alpha/beta may carry batch axes.

    A :class:`ReversibleSketch` input yields a :class:`ReversibleSketch`.
    """
    _check_alpha(alpha, alpha_min)
    if isinstance(C_t, ReversibleSketch):
        return C_t.updated(alpha, beta, f)
    C_t = _unwrap(C_t)
    f = np.asarray(f, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)[..., None, None]
    b = np.asarray(beta, dtype=np.float64)[..., None, None]
    return a * C_t + b * _outer(f, f)


def reverse_update(C_next, alpha, beta, f, alpha_min: float = ALPHA_MIN):
    """Undo :func:`gated_update`: ``(C_next - beta * f f^T) / alpha``.

    On floats the error grows like ``prod 1/alpha`` along a chain; a
    :class:`ReversibleSketch` is restored bit-exactly instead.
    """
    _check_alpha(alpha, alpha_min)
    if isinstance(C_next, ReversibleSketch):
        return C_next.reverted(alpha, beta, f)
    C_next = _unwrap(C_next)
    f = np.asarray(f, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)[..., None, None]
    b = np.asarray(beta, dtype=np.float64)[..., None, None]
    return (C_next - b * _outer(f, f)) / a


def gated_sketch(H, gp: GateParams) -> tuple[Sketch, StepTape]:
    """Sketch of the gated features with ``alpha = beta = 1``."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim < 2:
        raise ContractViolation(f"H must be (..., n, k), got {H.shape}")
    F = gate_features(H, gp)
    k = H.shape[-1]
    C = np.zeros(H.shape[:-2] + (k, k))
    for t in range(H.shape[-2]):
        C = gated_update(C, 1.0, 1.0, F[..., t, :])
    ones = np.ones(H.shape[:-1])
    sk = Sketch(C, H.shape[-2])
    return sk, StepTape(h=H, f=F, alpha=ones, beta=ones, C=sk.C)


def gated_linear_forward(H, gp: GateParams, q) -> tuple[np.ndarray, StepTape]:
    H, q = _check_hq(H, q, multi_ok=True)
    sk, tape = gated_sketch(H, gp)
    return linear_attention(sk, q), tape


def gated_linear_backward(tape: StepTape, q, grad_R, gp: GateParams) -> AttentionGrads:
    """Gradients for the sigmoid-gated sketch.

    With ``alpha`` and ``beta`` independent of ``C`` the final sketch is
    ``sum_t w_t f_t f_t^T`` with ``w_t = beta_t * prod_{s>t} alpha_s``, so
    each step only needs the rescaled feature identity.
    """
    H, q = _check_hq(tape.h, q, multi_ok=True)
    g = np.asarray(grad_R, dtype=np.float64)
    if g.shape != q.shape:
        raise ContractViolation(f"grad_R {g.shape} does not match q {q.shape}")
    _check_gate(H, gp)
    F = np.asarray(tape.f)
    if F.shape != H.shape or not np.allclose(F, gate_features(H, gp), rtol=1e-12, atol=1e-14):
        raise ContractViolation("tape was not produced with these gate parameters")
    alpha = np.asarray(tape.alpha, dtype=np.float64)
    beta = np.asarray(tape.beta, dtype=np.float64)
    # suffix products of alpha: w_t = beta_t * prod_{s>t} alpha_s
    later = np.cumprod(alpha[..., ::-1], axis=-1)[..., ::-1]
    w = beta * np.concatenate([later[..., 1:], np.ones(alpha.shape[:-1] + (1,))], axis=-1)
    dF = feature_grads(F, q, g) * w[..., None]
    dq = linear_attention(tape.C, g)  # C is symmetric
    dH, dW, db = gate_features_backward(H, gp, dF)
    return AttentionGrads(dH=dH, dq=dq, dW=dW, db=db)


# -- general gated family -----------------------------------------------------

class Gate(ABC):
    """Pluggable gate for ``C <- alpha C + beta f f^T``.

    A gate first emits a probe vector ``p`` from ``h``; it is then shown
    ``C p`` (how much of ``p`` the sketch already holds) and returns
    ``(alpha, beta, f)``. Works on a single unbatched state.
    """

    params: dict[str, np.ndarray]

    @abstractmethod
    def probe(self, h: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def probe_backward(self, h: np.ndarray, d_probe: np.ndarray) -> tuple[np.ndarray, dict]: ...

    @abstractmethod
    def __call__(self, h: np.ndarray, Cp: np.ndarray) -> tuple[float, float, np.ndarray]: ...

    @abstractmethod
    def backward(self, h, Cp, d_alpha, d_beta, d_f) -> tuple[np.ndarray, np.ndarray, dict]:
        """Return ``(dh, dCp, param_grads)``."""


class SigmoidGate(Gate):
    """``alpha``, ``beta`` fixed, ``f = sigmoid(W h + b) * h``; ignores ``C p``."""

    def __init__(self, gp: GateParams, alpha: float = 1.0, beta: float = 1.0):
        self.gp = gp
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.params = {"W": gp.W, "b": gp.b}

    def probe(self, h):
        return np.zeros_like(h)

    def probe_backward(self, h, d_probe):
        return np.zeros_like(h), {}

    def __call__(self, h, Cp):
        return self.alpha, self.beta, gate_features(h, self.gp)

    def backward(self, h, Cp, d_alpha, d_beta, d_f):
        dh, dW, db = gate_features_backward(h, self.gp, d_f)
        return dh, np.zeros_like(Cp), {"W": dW, "b": db}


class NoveltyGate(Gate):
    """Gate that writes less of what the sketch already stores.

    ``f = sigmoid(W h + b) * h`` doubles as the probe, ``nu = f . (C f)``,
    ``beta = sigmoid(c - nu)`` and ``alpha = lo + (1 - lo) sigmoid(v . h + a)``.
    """

    def __init__(self, W, b, v, a: float = 0.0, c: float = 0.0, lo: float = 0.5):
        self.params = {
            "W": np.asarray(W, dtype=np.float64),
            "b": np.asarray(b, dtype=np.float64),
            "v": np.asarray(v, dtype=np.float64),
            "a": np.array(float(a)),
            "c": np.array(float(c)),
        }
        self.lo = lo

    @classmethod
    def init(cls, k: int, rng: np.random.Generator, lo: float = 0.5) -> "NoveltyGate":
        s = 1.0 / np.sqrt(k)
        return cls(rng.uniform(-s, s, (k, k)), np.zeros(k), rng.uniform(-s, s, k), lo=lo)

    @property
    def _gp(self) -> GateParams:
        return GateParams(self.params["W"], self.params["b"])

    def probe(self, h):
        return gate_features(h, self._gp)

    def probe_backward(self, h, d_probe):
        dh, dW, db = gate_features_backward(h, self._gp, d_probe)
        return dh, {"W": dW, "b": db}

    def __call__(self, h, Cp):
        p = self.params
        f = gate_features(h, self._gp)
        nu = f @ Cp
        beta = float(sigmoid(p["c"] - nu))
        alpha = self.lo + (1.0 - self.lo) * float(sigmoid(p["v"] @ h + p["a"]))
        return alpha, beta, f

    def backward(self, h, Cp, d_alpha, d_beta, d_f):
        p = self.params
        f = gate_features(h, self._gp)
        nu = f @ Cp
        beta = float(sigmoid(p["c"] - nu))
        sa = float(sigmoid(p["v"] @ h + p["a"]))
        dz = d_alpha * (1.0 - self.lo) * sa * (1.0 - sa)
        dnu = -d_beta * beta * (1.0 - beta)
        dCp = dnu * f
        dh, dW, db = gate_features_backward(h, self._gp, d_f + dnu * Cp)
        dh = dh + dz * p["v"]
        grads = {"W": dW, "b": db, "v": dz * h, "a": np.array(dz), "c": np.array(-dnu)}
        return dh, dCp, grads


def general_gated_forward(H, gate: Gate, q, alpha_min: float = ALPHA_MIN,
                          exact: bool = False) -> tuple[np.ndarray, StepTape]:
    """Single-document forward pass of the general gated sketch.

    With ``exact=True`` the sketch is accumulated as a
    :class:`ReversibleSketch` and the tape's ``C`` holds it, so the backward
    pass reconstructs every intermediate bit-exactly.
    """
    H, q = _check_hq(H, q)
    if H.ndim != 2:
        raise ContractViolation("general gated path takes one document at a time")
    n, k = H.shape
    S = ReversibleSketch.zeros(k) if exact else np.zeros((k, k))
    F = np.empty_like(H)
    alpha = np.empty(n)
    beta = np.empty(n)
    for t in range(n):
        h = H[t]
        C = S.C if exact else S
        a, b, f = gate(h, C @ gate.probe(h))
        S = gated_update(S, a, b, f, alpha_min)
        F[t], alpha[t], beta[t] = f, a, b
    C = S.C if exact else S
    return C @ q, StepTape(h=H, f=F, alpha=alpha, beta=beta, C=S if exact else _frozen(S))


def general_gated_backward(tape: StepTape, gate: Gate, q, grad_R,
                           alpha_min: float = ALPHA_MIN) -> AttentionGrads:
    """Backward pass that recomputes each ``C_(t)`` from ``C_(t+1)``.

    Working memory is a handful of ``k x k`` matrices regardless of ``n``
    (plus the integer buffer when the tape holds a :class:`ReversibleSketch`).
    """
    H, q = _check_hq(tape.h, q)
    g = np.asarray(grad_R, dtype=np.float64)
    exact = isinstance(tape.C, ReversibleSketch)
    S = tape.C if exact else np.array(tape.C)
    dC = np.multiply.outer(g, q)
    dq = (S.C if exact else S).T @ g
    dH = np.zeros_like(H)
    grads = {name: np.zeros_like(v) for name, v in gate.params.items()}
    for t in range(H.shape[0] - 1, -1, -1):
        h, f = H[t], tape.f[t]
        a, b = tape.alpha[t], tape.beta[t]
        S = reverse_update(S, a, b, f, alpha_min)
        C_prev = S.C if exact else S
        d_alpha = float(np.sum(dC * C_prev))
        d_beta = float(f @ dC @ f)
        d_f = b * ((dC + dC.T) @ f)
        p = gate.probe(h)
        dh, dCp, gr = gate.backward(h, C_prev @ p, d_alpha, d_beta, d_f)
        dh_p, gr_p = gate.probe_backward(h, C_prev.T @ dCp)
        dH[t] = dh + dh_p
        for name, val in list(gr.items()) + list(gr_p.items()):
            grads[name] += val
        dC = a * dC + np.multiply.outer(dCp, p)
    return AttentionGrads(dH=dH, dq=dq, dW=grads.get("W"), db=grads.get("b"), params=grads)
