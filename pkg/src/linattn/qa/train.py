"""Adam, the training loop and evaluation for the cloze reader."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from linattn.qa.data import generate_synthetic_cloze, iter_batches
from linattn.qa.model import ModelParams, canonical_mode, forward_batch, init_params, loss_and_grads
from linattn.qa.model import cross_entropy

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters and synthetic-task shape.

    ``batch_size`` counts documents; each brings its ``m`` queries.
    """

    k: int = 32
    d: int = 32
    n_docs: int = 2000
    n_valid_docs: int = 250
    doc_len: int = 60
    facts: int = 10
    m: int = 4
    n_entities: int = 20
    n_relations: int = 4
    n_words: int = 40
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    clip: float = 5.0
    embed_scale: float = 1.0
    seed: int = 0
    mode: str = "linear"

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name not in ("mode", "seed", "n_valid_docs", "n_words") and not val > 0:
                raise ValueError(f"{f.name} must be positive, got {val}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        # "figure" is the schedule used for the mode-ordering comparison
        presets = {"desk": {}, "paper": {"k": 100, "d": 100}, "figure": {"epochs": 30, "lr": 3e-3}}
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string values; an optional ``preset`` key picks the base."""
        values = dict(values)
        preset = values.pop("preset", "desk")
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        casts = {"int": int, "float": float, "str": str}
        return cls.preset(preset, **{k: casts[known[k]](v) for k, v in values.items()})


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = None
    v: dict = None


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update applied to ``params`` in place; returns both."""
    if state.m is None:
        state.m = {n: np.zeros_like(a) for n, a in params.arrays().items()}
        state.v = {n: np.zeros_like(a) for n, a in params.arrays().items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    g_all = grads.arrays()
    for name, p in params.arrays().items():
        g = g_all[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_global_norm(grads: ModelParams, max_norm: float) -> float:
    arrays = grads.arrays()
    norm = math.sqrt(sum(float(np.sum(a * a)) for a in arrays.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for a in arrays.values():
            a *= scale
    return norm


def evaluate(params: ModelParams, examples, vocab, mode: str | None = None,
             batch_size: int = 64) -> float:
    """Fraction of queries whose arg-max entity is the answer."""
    if not examples:
        return 0.0
    correct = 0
    for batch in iter_batches(examples, vocab, batch_size):
        logits, _ = forward_batch(params, batch, mode)
        correct += int(np.sum(np.argmax(logits, axis=1) == batch.answers))
    return correct / len(examples)


def mean_loss(params: ModelParams, examples, vocab, batch_size: int = 64) -> float:
    total = 0.0
    for batch in iter_batches(examples, vocab, batch_size):
        logits, _ = forward_batch(params, batch)
        total += cross_entropy(logits, batch.answers)[0] * batch.n_queries
    return total / max(len(examples), 1)


def train(cfg: TrainConfig, data=None, sink=None):
    """Train one model; returns ``(params, records)``.

    ``records`` holds one dict per epoch (epoch 0 is the untrained model)
    with keys epoch, mode, seed, train_loss, valid_acc, wall_ms. Each is
    also written as a JSON line to ``sink`` when given.
    """
    train_set, valid_set, vocab = data if data is not None else generate_synthetic_cloze(cfg)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.mode, len(vocab), len(vocab.entities), cfg.d, cfg.k, rng, cfg.embed_scale)
    state = AdamState(lr=cfg.lr)
    records = []

    def emit(epoch, train_loss, t0):
        rec = {"epoch": epoch, "mode": cfg.mode, "seed": cfg.seed, "train_loss": train_loss,
               "valid_acc": evaluate(params, valid_set, vocab),
               "wall_ms": (time.perf_counter() - t0) * 1e3}
        records.append(rec)
        log.info("epoch %d mode=%s loss=%.4f valid_acc=%.4f", epoch, cfg.mode, train_loss, rec["valid_acc"])
        if sink is not None:
            sink.write(json.dumps(rec) + "\n")
            sink.flush()

    emit(0, mean_loss(params, train_set, vocab), time.perf_counter())
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for batch in iter_batches(train_set, vocab, cfg.batch_size, rng):
            loss, grads, _ = loss_and_grads(params, batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch}, step {state.step + 1} (mode={cfg.mode}, lr={cfg.lr})")
            clip_global_norm(grads, cfg.clip)
            adam_step(params, grads, state)
            total += loss * batch.n_queries
            count += batch.n_queries
        emit(epoch, total / count, t0)
    return params, records


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
