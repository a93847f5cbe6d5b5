"""The cloze reader: two GRU encoders, an attention block and a linear head.

All four variants share the architecture and differ only in how the
document summary ``R`` is formed:

``none``      R = q (the document is never read)
``softmax``   R = H^T softmax(H q)
``linear``    R = C q with C accumulated by the streaming builder
``gated``     R = C q with C built from sigmoid-gated states

The head is affine in ``[R; q]``. The linear variants build one sketch per
document and answer all of its queries from it; queries are laid out as
``(documents, slots, k)`` with zero padding, which contributes nothing to
either the lookups or the gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from linattn.attention import (
    GateParams,
    build_sketch_stream,
    gated_linear_backward,
    gated_linear_forward,
    linear_attention,
    linear_attention_backward,
    softmax_attention,
    softmax_attention_backward,
)
from linattn.linalg import ContractViolation
from linattn.qa.data import Batch
from linattn.rnn import EmbeddingTable, GRUParams, embed, embed_backward, gru_backward, gru_forward

MODES = ("none", "softmax", "linear", "gated")
_ALIASES = {"gated-linear": "gated", "gated_linear": "gated"}


def canonical_mode(mode: str) -> str:
    mode = _ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown attention mode {mode!r}; choose from {MODES}")
    return mode


@dataclass
class ModelParams:
    mode: str
    doc_embed: EmbeddingTable
    doc_gru: GRUParams
    query_embed: EmbeddingTable
    query_gru: GRUParams
    head_W: np.ndarray
    head_b: np.ndarray
    gate: GateParams | None = None

    @property
    def k(self) -> int:
        return self.doc_gru.k

    def arrays(self) -> dict[str, np.ndarray]:
        """Every trainable array by dotted name (views, not copies)."""
        out = {}

        def walk(obj, prefix):
            for f in fields(obj):
                val = getattr(obj, f.name)
                if isinstance(val, np.ndarray):
                    out[prefix + f.name] = val
                elif is_dataclass(val):
                    walk(val, prefix + f.name + ".")

        walk(self, "")
        return out

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            mode=self.mode,
            doc_embed=EmbeddingTable(np.zeros_like(self.doc_embed.E)),
            doc_gru=GRUParams.zeros_like(self.doc_gru),
            query_embed=EmbeddingTable(np.zeros_like(self.query_embed.E)),
            query_gru=GRUParams.zeros_like(self.query_gru),
            head_W=np.zeros_like(self.head_W),
            head_b=np.zeros_like(self.head_b),
            gate=None if self.gate is None else GateParams(np.zeros_like(self.gate.W), np.zeros_like(self.gate.b)),
        )

    def save(self, path, **extra):
        np.savez(path, __mode__=np.array(self.mode), **self.arrays(),
                 **{f"__{k}__": np.array(v) for k, v in extra.items()})

    @classmethod
    def load(cls, path) -> tuple["ModelParams", dict]:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        mode = str(data.pop("__mode__"))
        extra = {k.strip("_"): data.pop(k).item() for k in list(data) if k.startswith("__")}

        def group(prefix):
            return {k[len(prefix):]: v for k, v in data.items() if k.startswith(prefix)}

        gate = group("gate.")
        params = cls(
            mode=mode,
            doc_embed=EmbeddingTable(data["doc_embed.E"]),
            doc_gru=GRUParams(**group("doc_gru.")),
            query_embed=EmbeddingTable(data["query_embed.E"]),
            query_gru=GRUParams(**group("query_gru.")),
            head_W=data["head_W"],
            head_b=data["head_b"],
            gate=GateParams(gate["W"], gate["b"]) if gate else None,
        )
        return params, extra


def init_params(mode: str, vocab_size: int, n_entities: int, d: int, k: int,
                rng: np.random.Generator, embed_scale: float = 1.0) -> ModelParams:
    """Scaled-uniform weights, zero biases; separate document/query encoders."""
    mode = canonical_mode(mode)
    s = 1.0 / np.sqrt(2 * k)
    return ModelParams(
        mode=mode,
        doc_embed=EmbeddingTable.init(vocab_size, d, rng, embed_scale),
        doc_gru=GRUParams.init(d, k, rng),
        query_embed=EmbeddingTable.init(vocab_size, d, rng, embed_scale),
        query_gru=GRUParams.init(d, k, rng),
        head_W=rng.uniform(-s, s, size=(n_entities, 2 * k)),
        head_b=np.zeros(n_entities),
        gate=GateParams.init(k, rng) if mode == "gated" else None,
    )


@dataclass
class _Cache:
    mode: str
    batch: Batch
    doc_out: object
    query_outs: list
    q: np.ndarray
    Hq: np.ndarray | None
    feat: np.ndarray
    tape: object = None


def _slots(batch: Batch, rows: np.ndarray) -> np.ndarray:
    out = np.zeros((len(batch.docs), batch.max_queries, rows.shape[-1]))
    out[batch.doc_of, batch.slot_of] = rows
    return out


def forward_batch(params: ModelParams, batch: Batch, mode: str | None = None) -> tuple[np.ndarray, _Cache]:
    """Logits ``(M, n_entities)`` for every query in ``batch``.

    ``mode`` defaults to ``params.mode``; any mode works on any params
    except that ``gated`` needs a gate.
    """
    mode = canonical_mode(mode or params.mode)
    if mode == "gated" and params.gate is None:
        raise ContractViolation("gated mode needs gate parameters")
    k = params.k
    M = batch.n_queries
    q = np.empty((M, k))
    query_outs = []
    for pos, toks in batch.query_groups:
        out = gru_forward(embed(toks, params.query_embed), params.query_gru)
        q[pos] = out.last
        query_outs.append(out)

    doc_out = Hq = tape = None
    if mode == "none":
        R = q
    else:
        doc_out = gru_forward(embed(batch.docs, params.doc_embed), params.doc_gru)
        H = doc_out.states
        if mode == "softmax":
            Hq = H[batch.doc_of]
            R = softmax_attention(Hq, q)
        else:
            Q = _slots(batch, q)
            if mode == "linear":
                C = build_sketch_stream(np.moveaxis(H, -2, 0), k=k).C
                R = linear_attention(C, Q)
            else:
                R, tape = gated_linear_forward(H, params.gate, Q)
            R = R[batch.doc_of, batch.slot_of]
    feat = np.concatenate([R, q], axis=-1)
    logits = feat @ params.head_W.T + params.head_b
    return logits, _Cache(mode, batch, doc_out, query_outs, q, Hq, feat, tape)


def backward_batch(params: ModelParams, cache: _Cache, dlogits: np.ndarray) -> ModelParams:
    mode = cache.mode
    k = params.k
    batch = cache.batch
    grads = params.zeros_like()
    grads.head_W = dlogits.T @ cache.feat
    grads.head_b = dlogits.sum(axis=0)
    dfeat = dlogits @ params.head_W
    dR, dq = dfeat[:, :k], dfeat[:, k:].copy()

    if mode == "none":
        dq += dR
    else:
        H = cache.doc_out.states
        if mode == "softmax":
            g = softmax_attention_backward(cache.Hq, cache.q, dR)
            dq += g.dq
            dH = np.zeros_like(H)
            np.add.at(dH, batch.doc_of, g.dH)
        else:
            Q, G = _slots(batch, cache.q), _slots(batch, dR)
            if mode == "linear":
                g = linear_attention_backward(H, Q, G)
            else:
                g = gated_linear_backward(cache.tape, Q, G, params.gate)
                grads.gate = GateParams(g.dW, g.db)
            dq += g.dq[batch.doc_of, batch.slot_of]
            dH = g.dH
        dX, grads.doc_gru, _ = gru_backward(cache.doc_out.cache, dH, params.doc_gru)
        grads.doc_embed = EmbeddingTable(embed_backward(batch.docs, dX, params.doc_embed.V))

    for (pos, toks), out in zip(batch.query_groups, cache.query_outs):
        d_states = np.zeros_like(out.states)
        d_states[:, -1, :] = dq[pos]
        dX, gq, _ = gru_backward(out.cache, d_states, params.query_gru)
        for name, arr in gq.__dict__.items():
            getattr(grads.query_gru, name)[...] += arr
        grads.query_embed.E += embed_backward(toks, dX, params.query_embed.V)
    return grads


def cross_entropy_loss(logits, answer) -> float:
    """``-log softmax(logits)[answer]``; batched inputs give the mean."""
    loss, _ = cross_entropy(np.atleast_2d(logits), np.atleast_1d(answer))
    return loss


def cross_entropy(logits: np.ndarray, answers: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. ``logits``."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    M = logits.shape[0]
    loss = -float(logp[np.arange(M), answers].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(M), answers] -= 1.0
    return loss, dlogits / M


def loss_and_grads(params: ModelParams, batch: Batch, mode: str | None = None):
    """``(mean loss, grads, logits)`` on one batch."""
    logits, cache = forward_batch(params, batch, mode)
    loss, dlogits = cross_entropy(logits, batch.answers)
    return loss, backward_batch(params, cache, dlogits), logits


def model_forward(params: ModelParams, example, mode: str | None = None) -> np.ndarray:
    """Entity logits for one :class:`~linattn.qa.data.ClozeExample`."""
    logits, _ = forward_batch(params, Batch.from_examples([example]), mode)
    return logits[0]
