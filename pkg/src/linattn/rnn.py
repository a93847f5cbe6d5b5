"""Token embeddings and single-layer GRU encoders with manual backward passes.

GRU equations (Cho et al. 2014)::

    z  = sigmoid(W_z x + U_z h_prev + b_z)
    r  = sigmoid(W_r x + U_r h_prev + b_r)
    hc = tanh(W_h x + U_h (r * h_prev) + b_h)
    h  = (1 - z) * h_prev + z * hc

Inputs may carry leading batch axes; sequences are laid out ``(..., n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from linattn.linalg import ContractViolation, sigmoid

__all__ = [
    "EmbeddingTable",
    "GRUParams",
    "GRUCache",
    "EncoderOutput",
    "embed",
    "embed_backward",
    "gru_step",
    "gru_forward",
    "gru_backward",
    "encode_document",
    "encode_query",
    "iter_states",
    "iter_state_chunks",
]


@dataclass
class EmbeddingTable:
    E: np.ndarray

    @property
    def V(self) -> int:
        return self.E.shape[0]

    @property
    def d(self) -> int:
        return self.E.shape[1]

    @classmethod
    def init(cls, V: int, d: int, rng: np.random.Generator, scale: float = 1.0) -> "EmbeddingTable":
        return cls(rng.uniform(-scale, scale, size=(V, d)))


@dataclass
class GRUParams:
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_h: np.ndarray
    U_h: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        k, d = self.W_z.shape
        for f in fields(self):
            a = getattr(self, f.name)
            want = {"W": (k, d), "U": (k, k), "b": (k,)}[f.name[0]]
            if a.shape != want:
                raise ContractViolation(f"GRU {f.name} has shape {a.shape}, expected {want}")

    @property
    def k(self) -> int:
        return self.W_z.shape[0]

    @property
    def d(self) -> int:
        return self.W_z.shape[1]

    @classmethod
    def init(cls, d: int, k: int, rng: np.random.Generator) -> "GRUParams":
        """Uniform in +-1/sqrt(fan_in); zero biases."""
        sw, su = 1.0 / np.sqrt(d), 1.0 / np.sqrt(k)
        out = {}
        for gate in "zrh":
            out[f"W_{gate}"] = rng.uniform(-sw, sw, size=(k, d))
            out[f"U_{gate}"] = rng.uniform(-su, su, size=(k, k))
            out[f"b_{gate}"] = np.zeros(k)
        return cls(**out)

    @classmethod
    def zeros_like(cls, p: "GRUParams") -> "GRUParams":
        return cls(**{f.name: np.zeros_like(getattr(p, f.name)) for f in fields(p)})


@dataclass
class GRUCache:
    """Per-step activations stacked along the time axis ``(..., n, ·)``."""

    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    hc: np.ndarray


@dataclass
class EncoderOutput:
    states: np.ndarray
    cache: GRUCache

    @property
    def last(self) -> np.ndarray:
        return self.states[..., -1, :]


def embed(tokens, table: EmbeddingTable) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.V):
        raise ContractViolation(f"token id outside [0, {table.V})")
    return table.E[ids]


def embed_backward(tokens, dX: np.ndarray, V: int) -> np.ndarray:
    """Scatter-add row gradients back onto a (V, d) table gradient."""
    ids = np.asarray(tokens, dtype=np.int64).ravel()
    dE = np.zeros((V, dX.shape[-1]))
    np.add.at(dE, ids, dX.reshape(-1, dX.shape[-1]))
    return dE


def _check_step(x: np.ndarray, h_prev: np.ndarray, p: GRUParams):
    if x.shape[-1] != p.d or h_prev.shape[-1] != p.k:
        raise ContractViolation(f"GRU expects x (..., {p.d}) and h (..., {p.k}); got {x.shape}, {h_prev.shape}")


def gru_step(x, h_prev, p: GRUParams) -> tuple[np.ndarray, GRUCache]:
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    _check_step(x, h_prev, p)
    # same summation order as gru_forward
    z = sigmoid((x @ p.W_z.T + p.b_z) + h_prev @ p.U_z.T)
    r = sigmoid((x @ p.W_r.T + p.b_r) + h_prev @ p.U_r.T)
    hc = np.tanh((x @ p.W_h.T + p.b_h) + (r * h_prev) @ p.U_h.T)
    h = (1.0 - z) * h_prev + z * hc
    return h, GRUCache(x=x, h_prev=h_prev, z=z, r=r, hc=hc)


def gru_forward(X, p: GRUParams, h0=None) -> EncoderOutput:
    """Run the GRU over ``X`` of shape ``(..., n, d)`` from ``h0`` (zeros)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2 or X.shape[-1] != p.d:
        raise ContractViolation(f"GRU input must be (..., n, {p.d}), got {X.shape}")
    lead, n = X.shape[:-2], X.shape[-2]
    h = np.zeros(lead + (p.k,)) if h0 is None else np.asarray(h0, dtype=np.float64)
    # input projections for all steps at once
    Xz = X @ p.W_z.T + p.b_z
    Xr = X @ p.W_r.T + p.b_r
    Xh = X @ p.W_h.T + p.b_h
    shape = lead + (n, p.k)
    H, Hp, Z, R, Hc = (np.empty(shape) for _ in range(5))
    for t in range(n):
        Hp[..., t, :] = h
        z = sigmoid(Xz[..., t, :] + h @ p.U_z.T)
        r = sigmoid(Xr[..., t, :] + h @ p.U_r.T)
        hc = np.tanh(Xh[..., t, :] + (r * h) @ p.U_h.T)
        h = (1.0 - z) * h + z * hc
        Z[..., t, :], R[..., t, :], Hc[..., t, :], H[..., t, :] = z, r, hc, h
    return EncoderOutput(states=H, cache=GRUCache(x=X, h_prev=Hp, z=Z, r=R, hc=Hc))


def gru_backward(cache: GRUCache, d_states, p: GRUParams) -> tuple[np.ndarray, GRUParams, np.ndarray]:
    """Backpropagate gradients on every hidden state through the chain.

    Returns ``(dX, dparams, dh0)``; ``dX`` has the shape of the inputs and
    is turned into embedding-row gradients by :func:`embed_backward`.
    """
    d_states = np.asarray(d_states, dtype=np.float64)
    if d_states.shape != cache.z.shape:
        raise ContractViolation(f"state gradients {d_states.shape} do not match cache {cache.z.shape}")
    n = cache.z.shape[-2]
    dAz, dAr, dAh = (np.empty_like(cache.z) for _ in range(3))
    dh = np.zeros(cache.z.shape[:-2] + (p.k,))
    for t in range(n - 1, -1, -1):
        hp = cache.h_prev[..., t, :]
        z, r, hc = cache.z[..., t, :], cache.r[..., t, :], cache.hc[..., t, :]
        dh = dh + d_states[..., t, :]
        dz = dh * (hc - hp)
        dah = dh * z * (1.0 - hc * hc)
        dhp = dh * (1.0 - z)
        drh = dah @ p.U_h
        dar = drh * hp * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dhp = dhp + drh * r + daz @ p.U_z + dar @ p.U_r
        dAz[..., t, :], dAr[..., t, :], dAh[..., t, :] = daz, dar, dah
        dh = dhp

    k, d = p.k, p.d
    flat = lambda a, w: a.reshape(-1, w)  # noqa: E731
    X2, Hp2 = flat(cache.x, d), flat(cache.h_prev, k)
    RHp2 = flat(cache.r * cache.h_prev, k)
    gz, gr, gh = flat(dAz, k), flat(dAr, k), flat(dAh, k)
    grads = GRUParams(
        W_z=gz.T @ X2, U_z=gz.T @ Hp2, b_z=gz.sum(0),
        W_r=gr.T @ X2, U_r=gr.T @ Hp2, b_r=gr.sum(0),
        W_h=gh.T @ X2, U_h=gh.T @ RHp2, b_h=gh.sum(0),
    )
    dX = dAz @ p.W_z + dAr @ p.W_r + dAh @ p.W_h
    return dX, grads, dh


def encode_document(tokens, table: EmbeddingTable, p: GRUParams) -> EncoderOutput:
    """All hidden states of a document; an empty document gives ``(0, k)``."""
    X = embed(tokens, table)
    if X.shape[-2] == 0:
        shape = X.shape[:-2] + (0, p.k)
        empty = np.zeros(shape)
        return EncoderOutput(states=empty, cache=GRUCache(
            x=X, h_prev=empty, z=empty, r=empty, hc=empty))
    return gru_forward(X, p)


def encode_query(tokens, table: EmbeddingTable, p: GRUParams) -> np.ndarray:
    """Last hidden state of the query encoder."""
    if np.asarray(tokens).shape[-1] == 0:
        raise ContractViolation("query must contain at least one token")
    return gru_forward(embed(tokens, table), p).last


def iter_states(tokens, table: EmbeddingTable, p: GRUParams):
    """Yield hidden states one token at a time, keeping only the current one."""
    h = np.zeros(p.k)
    for tok in tokens:
        h, _ = gru_step(embed(tok, table), h, p)
        yield h


def iter_state_chunks(tokens, table: EmbeddingTable, p: GRUParams, chunk: int = 256):
    """Yield hidden states in blocks of ``chunk`` rows, carrying ``h`` across.

    Memory is O(chunk * k) however long the sequence is.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    h = np.zeros(p.k)
    for start in range(0, len(ids), chunk):
        states = gru_forward(embed(ids[start:start + chunk], table), p, h).states
        h = states[-1]
        yield states
