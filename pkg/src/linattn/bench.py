"""Micro-benchmarks for lookup cost, encoding cost and representation size.

Lookups are timed one query at a time, as a real-time service would issue
them; query encoding is excluded. Every figure is the median over trials
after warmup, using the monotonic ``perf_counter_ns`` clock.
"""

from __future__ import annotations

import csv
import io
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from linattn.attention import build_sketch_batch, build_sketch_stream, linear_attention, softmax_attention
from linattn.config import int_list
from linattn.rnn import EmbeddingTable, GRUParams, embed, gru_step

MECHANISMS = ("softmax", "linear")
CSV_HEADER = ["mechanism", "n", "k", "m", "lookup_ns", "encode_ns", "repr_bytes"]
MIN_TRIAL_NS = 2_000_000


@dataclass
class BenchConfig:
    ks: list[int] = field(default_factory=lambda: [100])
    ns: list[int] = field(default_factory=lambda: [250, 1000, 4000])
    m: int = 10_000
    trials: int = 5
    warmup: int = 200
    seed: int = 0
    encode_ns: list[int] = field(default_factory=lambda: [250, 500, 1000, 2000])
    encode_k: int = 32

    def __post_init__(self):
        if self.trials < 5:
            raise ValueError("trials must be at least 5")
        if min(self.ks + self.ns + self.encode_ns + [self.m, self.encode_k]) < 1 or self.warmup < 0:
            raise ValueError("sizes must be positive")

    @classmethod
    def from_mapping(cls, values: dict) -> "BenchConfig":
        lists = {"ks", "ns", "encode_ns"}
        kw = {}
        for key, val in values.items():
            if key in lists:
                kw[key] = int_list(val)
            elif key in ("m", "trials", "warmup", "seed", "encode_k"):
                kw[key] = int(val)
            else:
                raise ValueError(f"unknown bench config key {key!r}")
        return cls(**kw)


@dataclass
class BenchRecord:
    mechanism: str
    n: int
    k: int
    m: int
    lookup_ns: float
    encode_ns: float
    repr_bytes: int

    def row(self) -> list:
        return [self.mechanism, self.n, self.k, self.m, f"{self.lookup_ns:.1f}",
                f"{self.encode_ns:.1f}", self.repr_bytes]


def pin_to_one_cpu() -> bool:
    """Restrict the process to a single logical CPU where supported."""
    if not hasattr(os, "sched_setaffinity"):
        return False
    cpus = sorted(os.sched_getaffinity(0))
    os.sched_setaffinity(0, {cpus[0]})
    return True


def repr_bytes(mechanism: str, n: int, k: int) -> int:
    """Bytes needed to store one encoded document: ``n x k`` or ``k x k`` floats."""
    return 8 * n * k if mechanism == "softmax" else 8 * k * k


def _median_ns(run, trials: int) -> float:
    """Median duration of ``run()``; repeats it when one call is too short to time."""
    reps = 1
    while True:
        t0 = time.perf_counter_ns()
        for _ in range(reps):
            run()
        if time.perf_counter_ns() - t0 >= MIN_TRIAL_NS or reps >= 1 << 20:
            break
        reps *= 2
    samples = []
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        for _ in range(reps):
            run()
        samples.append((time.perf_counter_ns() - t0) / reps)
    return statistics.median(samples)


def bench_lookup(cfg: BenchConfig) -> list[BenchRecord]:
    """Per-lookup time of each mechanism for every (n, k).

    ``encode_ns`` here is the time to build the stored representation from
    the hidden states (a copy of H, or the sketch ``H^T H``).
    """
    records = []
    for k in cfg.ks:
        for n in cfg.ns:
            rng = np.random.default_rng([cfg.seed, n, k])
            H = rng.standard_normal((n, k)) / np.sqrt(k)
            Q = rng.standard_normal((cfg.m, k)) / np.sqrt(k)
            builders = {"softmax": lambda: np.array(H), "linear": lambda: build_sketch_batch(H)}
            lookups = {"softmax": softmax_attention, "linear": linear_attention}
            for mech in MECHANISMS:
                rep = builders[mech]()
                lookup = lookups[mech]
                for q in Q[:cfg.warmup]:
                    lookup(rep, q)

                def run_all(rep=rep, lookup=lookup):
                    for q in Q:
                        lookup(rep, q)

                per_lookup = _median_ns(run_all, cfg.trials) / cfg.m
                build = _median_ns(builders[mech], cfg.trials)
                records.append(BenchRecord(mech, n, k, cfg.m, per_lookup, build, repr_bytes(mech, n, k)))
    return records


def _encode(tokens, table: EmbeddingTable, p: GRUParams, sketch: bool):
    h = np.zeros(p.k)
    if sketch:
        C = np.zeros((p.k, p.k))
        for tok in tokens:
            h, _ = gru_step(embed(tok, table), h, p)
            C += np.multiply.outer(h, h)
        return C
    H = np.empty((len(tokens), p.k))
    for t, tok in enumerate(tokens):
        h, _ = gru_step(embed(tok, table), h, p)
        H[t] = h
    return H


def bench_encoding(cfg: BenchConfig) -> list[BenchRecord]:
    """Document encoding time with (linear) and without (softmax) sketch updates.

    ``lookup_ns`` is a single lookup against the produced representation.
    """
    k = cfg.encode_k
    rng = np.random.default_rng([cfg.seed, k])
    table = EmbeddingTable.init(100, k, rng)
    p = GRUParams.init(k, k, rng)
    q = rng.standard_normal(k)
    records = []
    for n in cfg.encode_ns:
        tokens = rng.integers(0, 100, size=n)
        for mech in MECHANISMS:
            sketch = mech == "linear"
            enc = _median_ns(lambda: _encode(tokens, table, p, sketch), cfg.trials)
            rep = _encode(tokens, table, p, sketch)
            look = (lambda: linear_attention(rep, q)) if sketch else (lambda: softmax_attention(rep, q))
            records.append(BenchRecord(mech, n, k, 1, _median_ns(look, cfg.trials), enc, repr_bytes(mech, n, k)))
    return records


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def encoding_summary(records: list[BenchRecord]) -> dict:
    """Fitted growth exponents, sketch overhead ratio and the implied lambda.

    Encoding costs ``n k^2 lambda`` without and ``n k^2 (lambda + 1)`` with
    the sketch, so ``ratio = (lambda + 1) / lambda``.
    """
    out = {}
    for mech in MECHANISMS:
        rs = sorted((r for r in records if r.mechanism == mech), key=lambda r: r.n)
        out[f"{mech}_exponent"] = loglog_slope([r.n for r in rs], [r.encode_ns for r in rs])
    soft = {r.n: r.encode_ns for r in records if r.mechanism == "softmax"}
    ratios = [r.encode_ns / soft[r.n] for r in records if r.mechanism == "linear" and r.n in soft]
    ratio = statistics.median(ratios)
    out["overhead_ratio"] = ratio
    out["lambda_est"] = 1.0 / (ratio - 1.0) if ratio > 1.0 else float("inf")
    return out


def to_csv(records: list[BenchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def from_csv(text: str) -> list[BenchRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [BenchRecord(r["mechanism"], int(r["n"]), int(r["k"]), int(r["m"]), float(r["lookup_ns"]),
                        float(r["encode_ns"]), int(r["repr_bytes"])) for r in rows]


def run_bench(cfg: BenchConfig) -> tuple[list[BenchRecord], dict]:
    records = bench_lookup(cfg) + bench_encoding(cfg)
    return records, encoding_summary([r for r in records if r.k == cfg.encode_k and r.m == 1])
