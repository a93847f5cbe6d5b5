"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one ``PASS``/``FAIL`` line. Run the file directly
(``python tests/test_acceptance.py``) for the lines alone.
"""

import functools
import math
import statistics
import time
import warnings

import numpy as np
import pytest

from linattn import checks
from linattn.attention import ReversibleSketch, gated_update, reverse_update
from linattn.bench import BenchConfig, bench_lookup, pin_to_one_cpu
from linattn.qa.data import PLACEHOLDER, UNK, Vocabulary
from linattn.qa.model import MODES
from linattn.qa.train import TrainConfig, train
from linattn.store import (
    Encoder,
    SketchFileError,
    decode_sketch,
    encode_corpus,
    encode_sketch,
    load_sketch,
    save_sketch,
)

SEEDS = (0, 1, 2)
N_ENTITIES = 20


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def criterion_1():
    (ok, detail), secs = _timed(lambda: checks._equivalence(seed=0, trials=200))
    return ok and secs < 5, f"200 instances, {detail}, {secs:.2f}s (< 5s)"


def criterion_2():
    suites = [("linear", checks._grad_linear), ("gated", checks._grad_gated),
              ("gru", checks._grad_gru), ("model", checks._grad_model)]
    t0 = time.perf_counter()
    ok, parts = True, []
    for name, fn in suites:
        passed, detail = fn(0, trials=50)
        ok &= passed
        parts.append(f"{name}: {detail}")
    secs = time.perf_counter() - t0
    return ok and secs < 60, f"50 instances each; {'; '.join(parts)}; {secs:.1f}s (< 60s)"


def criterion_3():
    def run():
        rng = np.random.default_rng(0)
        n, k = 256, 16
        alphas, betas = rng.uniform(0.5, 1.0, n), rng.uniform(0.0, 1.0, n)
        fs = rng.standard_normal((n, k))
        fs /= np.maximum(1.0, np.linalg.norm(fs, axis=1, keepdims=True))
        chain = [ReversibleSketch.zeros(k)]
        for t in range(n):
            chain.append(gated_update(chain[-1], alphas[t], betas[t], fs[t]))
        S, worst = chain[-1], 0.0
        for t in range(n - 1, -1, -1):
            S = reverse_update(S, alphas[t], betas[t], fs[t])
            worst = max(worst, float(np.max(np.abs(S.C - chain[t].C))))
        return worst, float(np.max(np.abs(S.C)))

    (worst, c0), secs = _timed(run)
    ok = worst < 1e-8 and c0 < 1e-8 and secs < 5
    return ok, f"max per-entry error {worst:.1e}, |C_0| {c0:.1e}, {secs:.2f}s (< 5s)"


def criterion_4():
    def run():
        pin_to_one_cpu()
        scaling = bench_lookup(BenchConfig(ks=[100], ns=[250, 1000, 4000], m=10_000, encode_ns=[250]))
        crossover = bench_lookup(BenchConfig(ks=[100], ns=[700], m=10_000, encode_ns=[250]))
        return scaling, crossover

    (scaling, crossover), secs = _timed(run)
    t = {(r.mechanism, r.n): r.lookup_ns for r in scaling + crossover}
    lin = [t["linear", n] for n in (250, 1000, 4000)]
    spread = max(lin) / min(lin) - 1.0
    growth = t["softmax", 4000] / t["softmax", 1000]
    speedup = t["softmax", 700] / t["linear", 700]
    ok = spread < 0.30 and growth >= 3.0 and speedup >= 3.0 and secs < 120
    return ok, (f"linear spread {spread:.0%} (< 30%), softmax 4000/1000 {growth:.2f}x (>= 3), "
                f"speedup at n=700 {speedup:.2f}x (>= 3, ideal n/k = 7), {secs:.1f}s (< 120s)")


def criterion_5(tmp_path):
    k = 32
    vocab = Vocabulary([PLACEHOLDER, UNK] + [f"w{i}" for i in range(50)], [])
    encoder = Encoder.random(vocab, 32, k, seed=0)
    rng = np.random.default_rng(0)
    sizes, payload_sizes = {}, {}
    for length in (10, 10_000):
        corpus = tmp_path / f"corpus{length}"
        corpus.mkdir()
        for i in range(100):
            words = (f"w{j}" for j in rng.integers(0, 50, length))
            (corpus / f"doc{i:03d}.txt").write_text(" ".join(words))
        with warnings.catch_warnings():
            # the length-10 documents are shorter than k by design
            warnings.simplefilter("ignore", UserWarning)
            index = encode_corpus(corpus, encoder, tmp_path / f"store{length}")
        sizes[length] = index.sketch_bytes()
        payload_sizes[length] = sorted({index.path_of(d).stat().st_size for d in index.entries})
    want = 100 * (8 * k * k + 21)
    ok = sizes[10] == sizes[10_000] == want and payload_sizes[10] == payload_sizes[10_000]
    return ok, f"k={k}: {sizes[10]} bytes (len 10) vs {sizes[10_000]} bytes (len 10000), expected {want}"


def criterion_8(tmp_path):
    rng = np.random.default_rng(0)
    bitwise = undetected = tried = 0
    for i in range(100):
        k = (1, 2, 16, 100)[i % 4]
        C = rng.standard_normal((k, k)) * 10.0 ** rng.integers(-200, 200)
        n = int(rng.integers(0, 100_000))
        sk = load_sketch(save_sketch(C, n, f"doc{i}", tmp_path))
        bitwise += sk.C.tobytes() == C.tobytes() and sk.n == n
        data = encode_sketch(C, n)
        # every byte for small sketches; header, trailer and a sample otherwise
        if len(data) <= 4096:
            positions = range(len(data))
        else:
            positions = list(range(21)) + list(range(len(data) - 4, len(data)))
            positions += rng.choice(len(data), 500, replace=False).tolist()
        for pos in positions:
            bad = bytearray(data)
            bad[pos] ^= int(rng.integers(1, 256))
            tried += 1
            try:
                decode_sketch(bytes(bad))
                undetected += 1
            except SketchFileError:
                pass
    ok = bitwise == 100 and undetected == 0
    return ok, f"{bitwise}/100 bitwise round trips, {undetected}/{tried} corruptions undetected"


@functools.lru_cache(maxsize=None)
def figure_runs():
    """Validation-accuracy curves for every (mode, seed) with the figure schedule."""
    t0 = time.perf_counter()
    curves = {}
    for seed in SEEDS:
        for mode in MODES:
            cfg = TrainConfig.preset("figure", mode=mode, seed=seed, n_entities=N_ENTITIES)
            _, records = train(cfg)
            curves[mode, seed] = [r["valid_acc"] for r in records]
    return curves, time.perf_counter() - t0


def criterion_6():
    curves, secs = figure_runs()
    med = {mode: statistics.median(curves[mode, s][-1] for s in SEEDS) for mode in MODES}
    ordered = med["softmax"] >= med["gated"] >= med["linear"] >= med["none"]
    gap = med["gated"] - med["none"]
    ok = ordered and gap >= 0.10 and secs < 30 * 60
    shown = ", ".join(f"{m} {med[m]:.3f}" for m in ("softmax", "gated", "linear", "none"))
    return ok, f"median final accuracy {shown}; gated - none {gap:+.3f} (>= 0.10); {secs / 60:.1f} min (< 30)"


def epochs_to(curve, threshold):
    """First epoch whose accuracy reaches ``threshold``; inf if none does."""
    return next((e for e, acc in enumerate(curve) if acc >= threshold), math.inf)


def criterion_7():
    curves, _ = figure_runs()
    threshold = 1.5 / N_ENTITIES
    med = {mode: statistics.median(epochs_to(curves[mode, s], threshold) for s in SEEDS) for mode in MODES}
    ok = all(med[m] < med["none"] for m in MODES if m != "none")
    shown = ", ".join(f"{m} {med[m]}" for m in MODES)
    return ok, f"median epochs to {threshold:.3f} accuracy: {shown}"


NAMES = {
    1: "kernel equivalence",
    2: "gradient suite",
    3: "reversibility",
    4: "complexity contract",
    5: "memory contract",
    6: "mode ordering",
    7: "convergence speed",
    8: "sketch file round trip",
}


def _line(num, ok, detail):
    return f"{'PASS' if ok else 'FAIL'} criterion {num} ({NAMES[num]}): {detail}"


@pytest.fixture
def report(capsys):
    def emit(num, result):
        ok, detail = result
        with capsys.disabled():
            print("\n" + _line(num, ok, detail))
        assert ok, detail
    return emit


def test_criterion_1_kernel_equivalence(report):
    report(1, criterion_1())


def test_criterion_2_gradient_suite(report):
    report(2, criterion_2())


def test_criterion_3_reversibility(report):
    report(3, criterion_3())


def test_criterion_4_complexity_contract(report):
    report(4, criterion_4())


def test_criterion_5_memory_contract(report, tmp_path):
    report(5, criterion_5(tmp_path))


def test_criterion_6_mode_ordering(report):
    report(6, criterion_6())


def test_criterion_7_convergence_speed(report):
    report(7, criterion_7())


def test_criterion_8_sketch_round_trip(report, tmp_path):
    report(8, criterion_8(tmp_path))


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    runners = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4,
               6: criterion_6, 7: criterion_7}
    passed = 0
    for num in sorted(NAMES):
        with tempfile.TemporaryDirectory() as tmp:
            result = runners[num]() if num in runners else {5: criterion_5, 8: criterion_8}[num](Path(tmp))
        passed += result[0]
        print(_line(num, *result), flush=True)
    print(f"{passed}/{len(NAMES)} criteria passed")
