"""Hierarchical document model: a word-level Reformer that turns each
sentence into its BOS embedding, a sentence-level Reformer over those, and
two heads on top (masked-sentence decoder, volume-direction classifier).

All learnable tensors live in one flat ``params`` dict keyed by dotted paths:
``base.*`` for the encoder, ``pretrain.*`` and ``cls.*`` for the heads.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .numerics import ops
from .numerics.checkpoint import load_checkpoint
from .numerics.rng import RngStream
from .numerics.tensor import ContractError, Tensor, get_dtype
from .reformer import AttentionConfig, init_layer, reformer_stack
from .textpipe.bpe import BOS, EOS, MASK, PAD
from .textpipe.document import MAX_SENTENCE_LEN, MAX_SENTENCES, Document

LAYER_KEYS = ("ln1.g", "ln1.b", "w_qk", "w_v", "w_o", "ln2.g", "ln2.b", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 8000
    model_dim: int = 256
    n_heads: int = 8
    ff_dim: int = 1024
    word_layers: int = 4
    sentence_layers: int = 4
    attention_kind: str = "lsh"
    n_hash_rounds: int = 2
    word_chunk: int = 16
    sentence_chunk: int = 64
    ffn_chunk: int = 128
    dropout: float = 0.1
    init_std: float = 0.02
    max_words: int = MAX_SENTENCE_LEN
    max_sentences: int = MAX_SENTENCES
    reversible: bool = True
    mask_special: bool = True      # False keeps BOS/EOS visible in masked sentences
    l1_mode: str = "alpha"         # alpha | alpha_all | scores

    def __post_init__(self):
        if self.l1_mode not in ("alpha", "alpha_all", "scores"):
            raise ValueError(f"unknown l1_mode {self.l1_mode!r}")
        AttentionConfig(model_dim=self.model_dim, n_heads=self.n_heads)

    def _attn(self, chunk: int, cap: int, **kw) -> AttentionConfig:
        base = AttentionConfig(model_dim=self.model_dim, n_heads=self.n_heads,
                               n_hash_rounds=self.n_hash_rounds, bucket_chunk_size=chunk,
                               attention_kind=self.attention_kind, dropout=self.dropout,
                               ffn_chunk_size=self.ffn_chunk)
        # bucket count fixed by the cap, not the padded batch length, so a
        # document hashes the same way alone or inside a batch
        return replace(base, n_buckets=base.buckets_for(cap), **kw)

    @property
    def word_attention(self) -> AttentionConfig:
        return self._attn(self.word_chunk, self.max_words)

    @property
    def sentence_attention(self) -> AttentionConfig:
        return self._attn(self.sentence_chunk, self.max_sentences)

    @property
    def decoder_attention(self) -> AttentionConfig:
        return self._attn(self.word_chunk, self.max_words, causal=True, attention_kind="full")

    @property
    def pooling_attention(self) -> AttentionConfig:
        return self._attn(self.sentence_chunk, self.max_sentences, attention_kind="full",
                          self_exclusion=False)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class HierModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    seed: int = 0

    def subset(self, prefix: str) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def layers(self, prefix: str) -> list[dict]:
        out = []
        i = 0
        while f"{prefix}.{i}.w_qk" in self.params:
            out.append({k: self.params[f"{prefix}.{i}.{k}"] for k in LAYER_KEYS})
            i += 1
        return out

    def norm(self, prefix: str) -> dict:
        return {"g": self.params[f"{prefix}.g"], "b": self.params[f"{prefix}.b"]}

    def lsh_generator(self) -> np.random.Generator:
        return RngStream(self.seed, "lsh").generator()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def n_parameters(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))


def _add_layer(params: dict, prefix: str, gen, cfg: ModelConfig) -> None:
    for k, v in init_layer(gen, cfg.model_dim, cfg.ff_dim, cfg.init_std).items():
        params[f"{prefix}.{k}"] = v


def _add_norm(params: dict, prefix: str, d: int) -> None:
    dtype = get_dtype()
    params[f"{prefix}.g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)


def init_model(config: ModelConfig, seed: int = 0, heads: Sequence[str] = ("pretrain", "cls")) -> HierModel:
    """Fresh parameters: N(0, init_std) weights, zero biases, unit gains."""
    d, std, dtype = config.model_dim, config.init_std, get_dtype()
    params: dict[str, Tensor] = {}

    def normal(gen, *shape):
        return Tensor(gen.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    gen = RngStream(seed, "init").generator()
    params["base.tok_emb"] = normal(gen, config.vocab_size, d)
    params["base.word_pos"] = normal(gen, config.max_words, d)
    params["base.sent_pos"] = normal(gen, config.max_sentences, d)
    for i in range(config.word_layers):
        _add_layer(params, f"base.word.{i}", gen, config)
    _add_norm(params, "base.word.final", d)
    for i in range(config.sentence_layers):
        _add_layer(params, f"base.sent.{i}", gen, config)
    _add_norm(params, "base.sent.final", d)
    if "pretrain" in heads:
        hgen = RngStream(seed, "init", (1,)).generator()
        params["pretrain.dec_pos"] = normal(hgen, config.max_words, d)
        _add_layer(params, "pretrain.dec.0", hgen, config)
        _add_norm(params, "pretrain.dec.final", d)
        params["pretrain.w_ff"] = normal(hgen, config.vocab_size, d)
        params["pretrain.b_ff"] = Tensor(np.zeros(config.vocab_size, dtype=dtype), requires_grad=True)
    if "cls" in heads:
        cgen = RngStream(seed, "init", (2,)).generator()
        _add_layer(params, "cls.pool.0", cgen, config)
        _add_norm(params, "cls.pool.final", d)
        params["cls.mlp.w1"] = normal(cgen, d, d)
        params["cls.mlp.b1"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        params["cls.mlp.w2"] = normal(cgen, d, 1)
        params["cls.mlp.b2"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
    return HierModel(config, params, seed)


def load_base(model: HierModel, path) -> list[str]:
    """Copy the ``base.*`` tensors of a checkpoint into ``model``.

    Head tensors in the file are ignored.  Returns the sorted list of
    transferred paths; shapes must agree exactly.
    """
    tensors, _ = load_checkpoint(path)
    # training checkpoints prefix parameters with "param/" next to optimizer moments
    if any(k.startswith("param/") for k in tensors):
        tensors = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    moved = []
    for key in sorted(tensors):
        if not key.startswith("base."):
            continue
        if key not in model.params:
            raise ContractError(f"checkpoint tensor {key} has no counterpart in the model")
        target = model.params[key]
        if target.shape != tensors[key].shape:
            raise ContractError(f"{key}: shape {tensors[key].shape} != model {target.shape}")
        target.data = tensors[key].astype(target.dtype)
        moved.append(key)
    missing = sorted(set(model.subset("base.")) - set(moved))
    if missing:
        raise ContractError(f"checkpoint lacks base tensors: {missing[:3]}...")
    return moved


# --- batching -----------------------------------------------------------------------

@dataclass
class DocumentEncoding:
    """Sentence-level outputs ``(batch, max_sentences_in_batch, d)`` plus validity mask."""
    vectors: Tensor
    mask: np.ndarray
    sentence_embeddings: Tensor   # word-level BOS outputs, same layout

    def for_doc(self, b: int) -> np.ndarray:
        return self.vectors.data[b, : int(self.mask[b].sum())]


def _sentences_of(doc) -> list:
    return doc.sentences if isinstance(doc, Document) else doc


def pad_ids(rows: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    return ids, ids != PAD


def base_forward(model: HierModel, docs, gen: Optional[np.random.Generator] = None,
                 dropout_gen: Optional[np.random.Generator] = None) -> DocumentEncoding:
    """Encode a batch of documents (or sentence-id lists).

    Every sentence goes through the word-level stack independently; its
    position-0 (BOS) output becomes the sentence embedding, which gets a
    sentence position embedding before the sentence-level stack.
    """
    cfg, p = model.config, model.params
    gen = model.lsh_generator() if gen is None else gen
    sents = [list(map(tuple, _sentences_of(doc))) for doc in docs]
    counts = [len(s) for s in sents]
    flat = [s for doc in sents for s in doc]
    ids, valid = pad_ids(flat)
    width = ids.shape[1]
    x = ops.embedding_lookup(p["base.tok_emb"], ids) + p["base.word_pos"][:width]
    drop = dropout_gen if cfg.dropout > 0 else None
    h = reformer_stack(x, model.layers("base.word"), cfg.word_attention, valid, gen=_gen_for(gen, drop),
                       final_norm=model.norm("base.word.final"), reversible=cfg.reversible)
    first = h[:, 0, :]                                    # (n_sent, d)
    n_doc, s_max = len(sents), max(counts)
    index = np.full((n_doc, s_max), len(flat), dtype=np.int64)
    mask = np.zeros((n_doc, s_max), dtype=bool)
    start = 0
    for b, c in enumerate(counts):
        index[b, :c] = np.arange(start, start + c)
        mask[b, :c] = True
        start += c
    padded = ops.concat([first, np.zeros((1, cfg.model_dim), dtype=first.dtype)], axis=0)
    sent_emb = padded[index]                              # (n_doc, s_max, d)
    y = reformer_stack(sent_emb + p["base.sent_pos"][:s_max], model.layers("base.sent"),
                       cfg.sentence_attention, mask, gen=_gen_for(gen, drop),
                       final_norm=model.norm("base.sent.final"), reversible=cfg.reversible)
    return DocumentEncoding(y, mask, sent_emb)


def _gen_for(lsh_gen, dropout_gen):
    """One generator drives both hashing and dropout seeds inside a stack.

    Without dropout the LSH stream is used as is, so inference is a pure
    function of ``(params, lsh seed)``.
    """
    if dropout_gen is None:
        return lsh_gen
    return np.random.default_rng([int(lsh_gen.integers(0, 2**63 - 1)), int(dropout_gen.integers(0, 2**63 - 1))])


# --- masked-sentence pretraining ------------------------------------------------------

@dataclass
class MaskSet:
    indices: tuple[int, ...]
    targets: tuple[tuple[int, ...], ...]   # original ids of each masked sentence

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices) or not self.indices:
            raise ContractError("mask indices must be unique and non-empty")


def n_masked(n_sentences: int, ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise ValueError(f"mask ratio must be in (0, 1], got {ratio}")
    # round half up: the count is a size, not a statistic
    return max(1, min(n_sentences, int(np.floor(ratio * n_sentences + 0.5))))


def mask_sentences(doc, ratio: float, gen: np.random.Generator, mask_special: bool = True):
    """Replace the tokens of ``max(1, round(ratio*|D|))`` random sentences by MASK.

    Returns ``(masked_sentences, MaskSet)``; indices are sorted ascending.
    """
    sents = [tuple(s) for s in _sentences_of(doc)]
    k = n_masked(len(sents), ratio)
    chosen = tuple(sorted(int(i) for i in gen.choice(len(sents), size=k, replace=False)))
    masked = list(sents)
    for i in chosen:
        s = sents[i]
        if mask_special:
            masked[i] = (MASK,) * len(s)
        else:
            masked[i] = (s[0],) + (MASK,) * (len(s) - 2) + (s[-1],)
    return masked, MaskSet(chosen, tuple(sents[i] for i in chosen))


def decoder_forward(model: HierModel, mask_set: MaskSet, encoding: DocumentEncoding, b: int = 0,
                    targets_override: Optional[Sequence[Sequence[int]]] = None,
                    dropout_gen=None, only: Optional[Sequence[int]] = None) -> list[Tensor]:
    """Next-token logits for every masked sentence of document ``b``.

    Decoder input at step ``j`` is the true token ``t^j`` plus the sentence's
    context vector ``d_i`` and a decoder position embedding; a causal layer
    then predicts ``t^{j+1}``.  Each returned tensor is ``(|S_i|-1, vocab)``.
    """
    cfg, p = model.config, model.params
    wanted = mask_set.indices if only is None else tuple(only)
    for i in wanted:
        if i not in mask_set.indices:
            raise ContractError(f"sentence {i} is not in the mask set {mask_set.indices}")
    lookup = dict(zip(mask_set.indices, targets_override or mask_set.targets))
    inputs = [lookup[i][:-1] for i in wanted]
    ids, valid = pad_ids(inputs)
    width = ids.shape[1]
    ctx = encoding.vectors[b][np.asarray(wanted)]              # (m, d)
    x = (ops.embedding_lookup(p["base.tok_emb"], ids) + ops.expand_dims(ctx, 1)
         + p["pretrain.dec_pos"][:width])
    h = reformer_stack(x, model.layers("pretrain.dec"), cfg.decoder_attention, valid,
                       gen=dropout_gen, final_norm=model.norm("pretrain.dec.final"),
                       reversible=cfg.reversible)
    logits = ops.matmul(h, ops.transpose(p["pretrain.w_ff"])) + p["pretrain.b_ff"]
    return [logits[k, : len(inputs[k])] for k in range(len(wanted))]


def pretrain_loss(model: HierModel, docs, ratio: float = 0.15, mask_gen=None, gen=None,
                  dropout_gen=None) -> Tensor:
    """Mean over documents of ``(1/|M|) * sum_i sum_j -log p(t_i^j | t_i^<j, d_i)``.

    ``mask_gen`` is one generator for the whole batch or a list with one per document.
    """
    mask_gen = RngStream(model.seed, "mask").generator() if mask_gen is None else mask_gen
    # a list gives each document its own stream, so masks do not depend on batching
    gens = mask_gen if isinstance(mask_gen, (list, tuple)) else [mask_gen] * len(docs)
    masked, sets = [], []
    for doc, g in zip(docs, gens):
        m, s = mask_sentences(doc, ratio, g, model.config.mask_special)
        masked.append(m)
        sets.append(s)
    enc = base_forward(model, masked, gen=gen, dropout_gen=dropout_gen)
    total = None
    for b, ms in enumerate(sets):
        logits = decoder_forward(model, ms, enc, b, dropout_gen=dropout_gen)
        doc_loss = None
        for lg, target in zip(logits, ms.targets):
            nll = ops.cross_entropy(lg, np.asarray(target[1:]), reduction="sum")
            doc_loss = nll if doc_loss is None else doc_loss + nll
        doc_loss = doc_loss * (1.0 / len(ms.indices))
        total = doc_loss if total is None else total + doc_loss
    return total * (1.0 / len(docs))


# --- classification -------------------------------------------------------------------

@dataclass
class ClassifierOutput:
    z: Tensor                 # (batch, s_max, d) pooled representations
    prob: Tensor              # (batch,)
    alpha: Tensor             # (batch, heads, s_max) query-1 attention rows
    weights: Tensor           # (batch, heads, s_max, s_max) full pooling attention
    scores: Tensor            # pre-softmax logits, same layout
    mask: np.ndarray
    pool_input: Tensor        # base outputs fed to the pooling layer


def classifier_forward(model: HierModel, docs, gen=None, dropout_gen=None,
                       encoding: Optional[DocumentEncoding] = None) -> ClassifierOutput:
    cfg, p = model.config, model.params
    enc = base_forward(model, docs, gen=gen, dropout_gen=dropout_gen) if encoding is None else encoding
    captured: list = []
    z = reformer_stack(enc.vectors, model.layers("cls.pool"), cfg.pooling_attention, enc.mask,
                       gen=dropout_gen, final_norm=model.norm("cls.pool.final"), reversible=False,
                       attention_out=captured)
    normed, att = captured[0]
    hidden = ops.gelu(ops.matmul(z[:, 0, :], p["cls.mlp.w1"]) + p["cls.mlp.b1"])
    logit = ops.matmul(hidden, p["cls.mlp.w2"]) + p["cls.mlp.b2"]
    prob = ops.sigmoid(ops.reshape(logit, (-1,)))
    return ClassifierOutput(z, prob, att.weights[:, :, 0, :], att.weights, att.scores, enc.mask, normed)


def classification_loss(out: ClassifierOutput, labels, lam: float = 0.1, mode: str = "alpha") -> Tensor:
    """``BCE(Y_hat, Y) + lam * sum |alpha|`` averaged over the batch.

    ``mode="alpha"`` sums the query-1 rows over heads and keys as written
    (a constant ``lam * heads`` for softmax rows); ``"alpha_all"`` sums
    every query row; ``"scores"`` penalizes the pre-softmax logits of the
    query-1 rows instead, which does carry a gradient.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    y = np.asarray(labels, dtype=out.prob.dtype).reshape(-1)
    bce = ops.binary_cross_entropy(out.prob, y)
    loss = ops.mean(bce)
    if lam == 0:
        return loss
    n = len(y)
    if mode == "alpha":
        reg = ops.sum(ops.abs(out.alpha)) * (1.0 / n)
    elif mode == "alpha_all":
        rows = out.mask[:, None, :, None]
        reg = ops.sum(ops.abs(out.weights) * rows) * (1.0 / n)
    elif mode == "scores":
        keys = out.mask[:, None, :]
        reg = ops.sum(ops.abs(out.scores[:, :, 0, :]) * keys) * (1.0 / n)
    else:
        raise ValueError(f"unknown l1 mode {mode!r}")
    return loss + reg * lam
