"""Finite-difference check of the full model loss on a tiny random instance."""

from __future__ import annotations

import numpy as np

from linattn.checks import max_rel_error, numerical_grad
from linattn.qa.data import PLACEHOLDER, UNK, Batch, ClozeExample, Vocabulary
from linattn.qa.model import cross_entropy, forward_batch, init_params, loss_and_grads


def tiny_problem(mode: str, rng: np.random.Generator, k: int = 3, d: int = 3, doc_len: int = 4):
    vocab = Vocabulary([PLACEHOLDER, UNK, "e0", "e1", "e2", "r0", "w0", "w1"], ["e0", "e1", "e2"])
    params = init_params(mode, len(vocab), len(vocab.entities), d, k, rng)
    for arr in params.arrays().values():
        arr[...] = rng.uniform(-0.8, 0.8, arr.shape)
    examples = []
    for doc_id in range(2):
        doc = rng.integers(2, len(vocab), size=doc_len)
        for qlen in (2, 3):
            query = np.concatenate([rng.integers(2, len(vocab), size=qlen - 1), [vocab.placeholder_id]])
            examples.append(ClozeExample(doc_id, doc, query, int(rng.integers(2, 5))))
    return params, Batch.from_examples(examples, vocab)


def model_grads(mode: str, rng: np.random.Generator):
    """Analytic and central-difference gradients plus the loss value."""
    params, batch = tiny_problem(mode, rng)
    loss_value, grads, _ = loss_and_grads(params, batch)

    def loss():
        logits, _ = forward_batch(params, batch)
        return cross_entropy(logits, batch.answers)[0]

    numeric = {name: numerical_grad(loss, arr) for name, arr in params.arrays().items()}
    return grads.arrays(), numeric, float(loss_value)


def model_grad_error(mode: str, rng: np.random.Generator) -> float:
    """Max relative error between analytic and numerical loss gradients."""
    analytic, numeric, _ = model_grads(mode, rng)
    return max(max_rel_error(analytic[name], numeric[name]) for name in numeric)
