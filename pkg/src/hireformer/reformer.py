"""Reformer building blocks: shared-QK LSH attention, reversible residual
layers and chunked feed-forward, plus the quadratic attention they are
checked against.

Tensors follow a ``(batch, length, model_dim)`` layout and a boolean
``(batch, length)`` validity mask (False marks PAD).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .numerics import ops
from .numerics.tensor import ContractError, Tape, Tensor, get_dtype, no_grad, record, use_tape

MASK_VALUE = -1e9
SELF_VALUE = -1e5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int = 256
    n_heads: int = 8
    n_hash_rounds: int = 2
    n_buckets: Optional[int] = None  # None: chosen from sequence length
    bucket_chunk_size: int = 16
    causal: bool = False
    attention_kind: str = "lsh"
    self_exclusion: bool = True
    dropout: float = 0.0
    ffn_chunk_size: int = 128

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.n_buckets is not None and (self.n_buckets < 2 or self.n_buckets % 2):
            raise ConfigError(f"n_buckets must be even and >= 2, got {self.n_buckets}")
        if self.n_hash_rounds < 1 or self.bucket_chunk_size < 1 or self.ffn_chunk_size < 1:
            raise ConfigError("hash rounds and chunk sizes must be positive")
        if self.attention_kind not in ("lsh", "full"):
            raise ConfigError(f"attention_kind must be 'lsh' or 'full', got {self.attention_kind!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    def buckets_for(self, n: int) -> int:
        if self.n_buckets is not None:
            return self.n_buckets
        return max(2, 2 * int(round(n / self.bucket_chunk_size / 2)))

    def with_(self, **kw) -> "AttentionConfig":
        return replace(self, **kw)


# --- parameters ---------------------------------------------------------------

def init_layer(gen: np.random.Generator, d: int, ff: int, std: float = 0.02) -> dict[str, Tensor]:
    dtype = get_dtype()

    def w(*shape):
        return Tensor(gen.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    def const(value, n):
        return Tensor(np.full(n, value, dtype=dtype), requires_grad=True)

    return {
        "ln1.g": const(1.0, d), "ln1.b": const(0.0, d),
        "w_qk": w(d, d), "w_v": w(d, d), "w_o": w(d, d),
        "ln2.g": const(1.0, d), "ln2.b": const(0.0, d),
        "w1": w(d, ff), "b1": const(0.0, ff), "w2": w(ff, d), "b2": const(0.0, d),
    }


# --- hashing ------------------------------------------------------------------

@dataclass
class BucketAssignment:
    """Per-round bucket ids plus the sort permutation and its inverse.

    Arrays have shape ``(..., rounds, n)``; ``perm`` lists positions in
    ``(bucket, position)`` order and ``inverse[perm] == arange(n)``.
    """
    buckets: np.ndarray
    perm: np.ndarray
    inverse: np.ndarray
    n_buckets: int


def draw_rotations(gen: np.random.Generator, n_heads: int, n_rounds: int, head_dim: int,
                   n_buckets: int) -> np.ndarray:
    """Random projections of shape ``(heads, rounds, head_dim, n_buckets/2)``.

    Drawn round by round, so the first k rounds are the same whatever the
    total number of rounds.
    """
    half = n_buckets // 2
    rot = np.empty((n_heads, n_rounds, head_dim, half))
    for r in range(n_rounds):
        for h in range(n_heads):
            rot[h, r] = gen.standard_normal((head_dim, half))
    return rot


def hash_vectors(vectors: np.ndarray, rotations: np.ndarray, valid: Optional[np.ndarray] = None) -> BucketAssignment:
    """Bucket ``vectors[..., heads, n, head_dim]`` with ``argmax([xR, -xR])``.

    Invalid positions go to an extra trailing bucket so that they always sort
    after real positions and never shift the chunking of valid ones.
    """
    n_buckets = 2 * rotations.shape[-1]
    proj = np.einsum("...hnd,hrdk->...hrnk", vectors.astype(np.float64), rotations)
    buckets = np.argmax(np.concatenate([proj, -proj], axis=-1), axis=-1)
    if valid is not None:
        pad = ~np.asarray(valid, dtype=bool)
        pad = pad.reshape(pad.shape[:-1] + (1,) * (buckets.ndim - pad.ndim) + pad.shape[-1:])
        buckets = np.where(pad, n_buckets, buckets)
    n = buckets.shape[-1]
    keys = buckets * n + np.arange(n)
    perm = np.argsort(keys, axis=-1, kind="stable")
    inverse = np.argsort(perm, axis=-1, kind="stable")
    return BucketAssignment(buckets, perm, inverse, n_buckets)


def lsh_bucket(vectors, config: AttentionConfig, gen: np.random.Generator,
               valid: Optional[np.ndarray] = None) -> BucketAssignment:
    """Hash an ``(n, head_dim)`` array; result arrays are ``(rounds, n)``."""
    vectors = np.asarray(vectors.data if isinstance(vectors, Tensor) else vectors)
    n, dh = vectors.shape
    nb = config.buckets_for(n)
    rot = draw_rotations(gen, 1, config.n_hash_rounds, dh, nb)
    out = hash_vectors(vectors[None], rot, None if valid is None else np.asarray(valid)[None])
    return BucketAssignment(out.buckets[0], out.perm[0], out.inverse[0], nb)


def candidate_sets(assign: BucketAssignment, chunk_size: int) -> np.ndarray:
    """Boolean ``(n, n)``: key j reachable from query i in at least one round."""
    rounds, n = assign.buckets.shape
    reach = np.zeros((n, n), dtype=bool)
    for r in range(rounds):
        perm = assign.perm[r]
        chunk_of = np.empty(n, dtype=np.int64)
        chunk_of[perm] = np.arange(n) // chunk_size
        b = assign.buckets[r]
        same_bucket = b[:, None] == b[None, :]
        dc = chunk_of[:, None] - chunk_of[None, :]
        reach |= same_bucket & ((dc == 0) | (dc == 1))
    return reach


# --- attention ----------------------------------------------------------------

def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return ops.transpose(ops.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _unit(x: Tensor, eps: float = 1e-6) -> Tensor:
    norm = ops.sqrt(ops.sum(x * x, axis=-1, keepdims=True) + eps)
    return x / norm


def _attn_dropout(probs: Tensor, config: AttentionConfig, gen) -> Tensor:
    return ops.dropout(probs, config.dropout, gen)


@dataclass
class FullAttention:
    output: Tensor
    weights: Tensor      # (batch, heads, n, n)
    scores: Tensor       # masked logits, same shape


def full_attention(x: Tensor, params: dict, config: AttentionConfig, mask=None,
                   dropout_gen=None) -> FullAttention:
    """O(n^2) shared-QK attention with the same masking rules as the LSH path.

    Queries are raw projections, keys are the unit-normalized projections,
    logits are scaled by ``1/sqrt(head_dim)``.  Invalid keys are excluded, and
    a position attends to itself only when nothing else is available (unless
    ``config.self_exclusion`` is off).
    """
    x = ops._t(x)
    b, n, d = x.shape
    h, dh = config.n_heads, config.head_dim
    valid = np.ones((b, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    qk = _split_heads(ops.matmul(x, params["w_qk"]), h)
    v = _split_heads(ops.matmul(x, params["w_v"]), h)
    k = _unit(qk)
    scores = ops.matmul(qk, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    blocked = ~valid[:, None, None, :]
    if config.causal:
        blocked = blocked | np.triu(np.ones((n, n), dtype=bool), 1)[None, None]
    scores = ops.masked_fill(scores, np.broadcast_to(blocked, (b, 1, n, n)), MASK_VALUE)
    if config.self_exclusion:
        scores = ops.masked_fill(scores, np.eye(n, dtype=bool)[None, None], SELF_VALUE)
    weights = ops.softmax(scores, axis=-1)
    heads = ops.matmul(_attn_dropout(weights, config, dropout_gen), v)
    out = ops.matmul(_merge_heads(heads), params["w_o"])
    return FullAttention(out, weights, scores)


def _sort_gather(x: Tensor, perm: np.ndarray, inverse: np.ndarray) -> Tensor:
    """``x[b, h, n, :]`` -> ``x[b, h, perm[b, h, r, n], :]`` with an unsorting backward."""
    xd = x.data
    idx = perm[..., None]
    out = np.take_along_axis(xd[:, :, None], idx, axis=3)

    def bwd(g):
        unsorted = np.take_along_axis(g, inverse[..., None], axis=3)
        return (unsorted.sum(axis=2),)

    return record(out, (x,), bwd)


def _chunk(x: Tensor, n_chunks: int, size: int) -> Tensor:
    s = x.shape
    return ops.reshape(x, s[:3] + (n_chunks, size) + s[4:])


def _look_back(x: Tensor) -> Tensor:
    """Concatenate each chunk with the chunk before it (axis 3 = chunk axis)."""
    return ops.concat([x, ops.roll(x, 1, axis=3)], axis=4)


def _look_back_np(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.roll(x, 1, axis=3)], axis=4)


def lsh_attention(x: Tensor, params: dict, config: AttentionConfig, mask=None,
                  gen: Optional[np.random.Generator] = None,
                  buckets: Optional[BucketAssignment] = None, dropout_gen=None,
                  return_buckets: bool = False):
    """Shared-QK LSH attention over ``x[batch, n, d]``.

    Per head and round, positions are sorted by ``(bucket, position)`` and
    cut into chunks of ``bucket_chunk_size``; a query sees same-bucket keys in
    its own chunk and the preceding one.  Rounds are combined with weights
    ``softmax_r(logsumexp of each round's logits)``.  ``buckets`` replays a
    previous assignment instead of hashing again.
    """
    x = ops._t(x)
    b, n, d = x.shape
    h, dh, c = config.n_heads, config.head_dim, config.bucket_chunk_size
    valid = np.ones((b, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    qk = _split_heads(ops.matmul(x, params["w_qk"]), h)
    v = _split_heads(ops.matmul(x, params["w_v"]), h)

    if buckets is None:
        if gen is None:
            raise ContractError("lsh_attention needs a generator or cached buckets")
        nb = config.buckets_for(n)
        rot = draw_rotations(gen, h, config.n_hash_rounds, dh, nb)
        buckets = hash_vectors(qk.data, rot, valid[:, None, :])
    perm, inv = buckets.perm, buckets.inverse
    rounds = perm.shape[2]

    n_chunks = -(-n // c)
    n_pad = n_chunks * c
    qs = _sort_gather(qk, perm, inv)            # (b, h, r, n, dh)
    vs = _sort_gather(v, perm, inv)
    pos = perm                                  # original position of each sorted slot
    bkt = np.take_along_axis(buckets.buckets, perm, axis=-1)
    ok = np.take_along_axis(np.broadcast_to(valid[:, None, None, :], perm.shape), perm, axis=-1)
    if n_pad > n:
        extra = n_pad - n
        zeros = np.zeros(qs.shape[:3] + (extra, dh), dtype=qs.dtype)
        qs = ops.concat([qs, zeros], axis=3)
        vs = ops.concat([vs, zeros], axis=3)
        padw = ((0, 0), (0, 0), (0, 0), (0, extra))
        pos = np.pad(pos, padw, constant_values=-1)
        bkt = np.pad(bkt, padw, constant_values=-1)
        ok = np.pad(ok, padw, constant_values=False)

    q_c = _chunk(qs, n_chunks, c)                       # (b, h, r, C, c, dh)
    k_c = _look_back(_chunk(_unit(qs), n_chunks, c))    # (b, h, r, C, 2c, dh)
    v_c = _look_back(_chunk(vs, n_chunks, c))
    pos_q = pos.reshape(pos.shape[:3] + (n_chunks, c))
    pos_k = _look_back_np(pos_q)
    bkt_q = bkt.reshape(pos_q.shape)
    bkt_k = _look_back_np(bkt_q)
    ok_k = _look_back_np(ok.reshape(pos_q.shape))
    first_chunk_back = np.zeros((n_chunks, 2 * c), dtype=bool)
    first_chunk_back[0, c:] = True                      # chunk 0 has no predecessor

    scores = ops.matmul(q_c, ops.swapaxes(k_c, -1, -2)) * (1.0 / math.sqrt(dh))
    blocked = (~ok_k[..., None, :]) | first_chunk_back[:, None, :]
    blocked = blocked | (bkt_q[..., :, None] != bkt_k[..., None, :])
    if config.causal:
        blocked = blocked | (pos_k[..., None, :] > pos_q[..., :, None])
    scores = ops.masked_fill(scores, blocked, MASK_VALUE)
    if config.self_exclusion:
        is_self = (pos_q[..., :, None] == pos_k[..., None, :]) & (pos_q[..., :, None] >= 0)
        scores = ops.masked_fill(scores, is_self & ~first_chunk_back[:, None, :], SELF_VALUE)
    lse = ops.logsumexp(scores, axis=-1, keepdims=True)
    probs = ops.exp(scores - lse)
    out_c = ops.matmul(_attn_dropout(probs, config, dropout_gen), v_c)   # (b, h, r, C, c, dh)

    out_s = ops.reshape(out_c, out_c.shape[:3] + (n_pad, dh))
    lse_s = ops.reshape(lse, lse.shape[:3] + (n_pad, 1))
    if n_pad > n:
        out_s = out_s[:, :, :, :n]
        lse_s = lse_s[:, :, :, :n]
    idx = inv[..., None]
    out_r = ops.gather(out_s, np.broadcast_to(idx, out_s.shape), axis=3, unique=True)
    lse_r = ops.gather(lse_s, idx, axis=3, unique=True)
    if rounds == 1:
        heads = out_r[:, :, 0]
    else:
        w = ops.softmax(lse_r, axis=2)
        heads = ops.sum(out_r * w, axis=2)
    out = ops.matmul(_merge_heads(heads), params["w_o"])
    if return_buckets:
        return out, buckets
    return out


# --- feed-forward -----------------------------------------------------------------

def chunked_ffn(x: Tensor, w1, b1, w2, b2, chunk_size: int) -> Tensor:
    """Position-wise GELU MLP evaluated ``chunk_size`` rows at a time.

    Single-row chunks are padded to two rows before the matrix products so
    that every chunk takes the same BLAS path; the output is then bit-for-bit
    independent of ``chunk_size``.
    """
    if chunk_size < 1:
        raise ConfigError("chunk_size must be >= 1")
    x = ops._t(x)
    shape = x.shape
    flat = ops.reshape(x, (-1, shape[-1]))
    rows = flat.shape[0]
    pieces = []
    for start in range(0, rows, chunk_size):
        part = flat[start:start + chunk_size] if rows > chunk_size else flat
        single = part.shape[0] == 1
        if single:
            part = ops.concat([part, np.zeros_like(part.data)], axis=0)
        hidden = ops.gelu(ops.matmul(part, w1) + b1)
        y = ops.matmul(hidden, w2) + b2
        pieces.append(y[:1] if single else y)
        if rows <= chunk_size:
            break
    out = pieces[0] if len(pieces) == 1 else ops.concat(pieces, axis=0)
    return ops.reshape(out, shape)


# --- reversible layers ----------------------------------------------------------------

@dataclass
class LayerCache:
    """What a reversible layer keeps between forward and backward.

    Only LSH bucket assignments and dropout seeds are stored; activations are
    recomputed.  ``replay`` switches the sublayers from drawing to reusing.
    """
    buckets: Optional[BucketAssignment] = None
    seeds: dict = field(default_factory=dict)
    replay: bool = False


def _seeded(cache: LayerCache, key: str, gen) -> Optional[np.random.Generator]:
    if cache.replay:
        if key not in cache.seeds:
            return None
        return np.random.default_rng(cache.seeds[key])
    if gen is None:
        return None
    seed = int(gen.integers(0, 2**63 - 1))
    cache.seeds[key] = seed
    return np.random.default_rng(seed)


def make_sublayers(params: dict, config: AttentionConfig, mask, gen, cache: LayerCache,
                   attention_out: Optional[list] = None) -> tuple[Callable, Callable]:
    """Build ``F`` (pre-norm attention) and ``G`` (pre-norm chunked FFN)."""
    use_dropout = config.dropout > 0

    def F(x2: Tensor) -> Tensor:
        z = ops.layer_norm(x2, params["ln1.g"], params["ln1.b"])
        dgen = _seeded(cache, "attn", gen) if use_dropout else None
        if config.attention_kind == "full":
            res = full_attention(z, params, config, mask, dropout_gen=dgen)
            if attention_out is not None:
                attention_out.append((z, res))
            out = res.output
        else:
            if cache.replay and cache.buckets is None:
                raise ContractError("reversible backward needs the cached LSH buckets of this layer")
            hash_gen = None if cache.replay else gen
            out, assign = lsh_attention(z, params, config, mask, gen=hash_gen,
                                        buckets=cache.buckets, dropout_gen=dgen,
                                        return_buckets=True)
            cache.buckets = assign
        if use_dropout:
            out = ops.dropout(out, config.dropout, _seeded(cache, "attn_out", gen))
        return out

    def G(y1: Tensor) -> Tensor:
        z = ops.layer_norm(y1, params["ln2.g"], params["ln2.b"])
        out = chunked_ffn(z, params["w1"], params["b1"], params["w2"], params["b2"], config.ffn_chunk_size)
        if use_dropout:
            out = ops.dropout(out, config.dropout, _seeded(cache, "ffn", gen))
        return out

    return F, G


def reversible_forward(x1, x2, F: Callable, G: Callable):
    """``y1 = x1 + F(x2)``, ``y2 = x2 + G(y1)`` on plain arrays (nothing recorded)."""
    with no_grad():
        x1, x2 = Tensor(np.asarray(x1)), Tensor(np.asarray(x2))
        y1 = x1.data + F(x2).data
        y2 = x2.data + G(Tensor(y1)).data
    return y1, y2


def reversible_backward(y1, y2, dy1, dy2, F: Callable, G: Callable):
    """Invert one reversible layer and backpropagate through it.

    Returns ``(x1, x2, dx1, dx2)``.  Parameter gradients of ``F`` and ``G``
    accumulate into their leaf tensors.  Inputs are reconstructed as
    ``x2 = y2 - G(y1)`` and ``x1 = y1 - F(x2)``.
    """
    y1t = Tensor(y1, requires_grad=True)
    with use_tape() as tape:
        gy1 = G(y1t)
    if gy1.tape is tape:
        tape.backward(gy1, dy2)
    x2 = y2 - gy1.data
    dx1 = dy1 + (y1t.grad if y1t.grad is not None else 0.0)

    x2t = Tensor(x2, requires_grad=True)
    with use_tape() as tape:
        fx2 = F(x2t)
    if fx2.tape is tape:
        tape.backward(fx2, dx1)
    x1 = y1 - fx2.data
    dx2 = dy2 + (x2t.grad if x2t.grad is not None else 0.0)
    return x1, x2, np.asarray(dx1, dtype=y1.dtype), np.asarray(dx2, dtype=y1.dtype)


def _reversible_op(x: Tensor, layers: list[dict], config: AttentionConfig, mask, gen) -> Tensor:
    """Run the stack without a tape; record one node whose backward inverts it."""
    caches = [LayerCache() for _ in layers]
    sublayers = [make_sublayers(p, config, mask, gen, cache) for p, cache in zip(layers, caches)]
    y1, y2 = x.data, x.data
    for F, G in sublayers:
        y1, y2 = reversible_forward(y1, y2, F, G)
    out = np.stack([y1, y2])
    params = [t for p in layers for t in p.values()]

    def bwd(g):
        a1, a2 = out[0], out[1]
        d1, d2 = g[0], g[1]
        for (F, G), cache in zip(reversed(sublayers), reversed(caches)):
            cache.replay = True
            a1, a2, d1, d2 = reversible_backward(a1, a2, d1, d2, F, G)
        return (d1 + d2,) + (None,) * len(params)

    return record(out, (x, *params), bwd)


def _stored_op(x: Tensor, layers: list[dict], config: AttentionConfig, mask, gen,
               attention_out: Optional[list] = None) -> Tensor:
    y1, y2 = x, x
    for p in layers:
        F, G = make_sublayers(p, config, mask, gen, LayerCache(), attention_out)
        y1 = y1 + F(y2)
        y2 = y2 + G(y1)
    return ops.stack([y1, y2])


def reformer_stack(x, layers: list[dict], config: AttentionConfig, mask=None,
                   gen: Optional[np.random.Generator] = None, final_norm: Optional[dict] = None,
                   reversible: bool = True, attention_out: Optional[list] = None) -> Tensor:
    """Apply reversible layers to the duplicated stream ``(x, x)``.

    The two output streams are averaged and passed through the final layer
    norm ``final_norm = {"g": ..., "b": ...}`` (identity affine if omitted).
    ``reversible=False`` backpropagates through stored activations instead;
    it is the reference path and is also what exposes full-attention weights
    via ``attention_out``.
    """
    x = ops._t(x)
    d = x.shape[-1]
    if layers:
        if reversible and attention_out is None:
            streams = _reversible_op(x, layers, config, mask, gen)
        else:
            streams = _stored_op(x, layers, config, mask, gen, attention_out)
        merged = (streams[0] + streams[1]) * 0.5
    else:
        merged = x
    if final_norm is None:
        final_norm = {"g": np.ones(d, dtype=x.dtype), "b": np.zeros(d, dtype=x.dtype)}
    return ops.layer_norm(merged, final_norm["g"], final_norm["b"])
