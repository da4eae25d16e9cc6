"""Sentence importance from the classifier's pooling attention.

Two channels are computed from the query-1 row of the pooling layer:

* raw: the attention weight ``alpha_{1,j}`` averaged over heads;
* norm: ``alpha_{1,j} * ||f(x_j)||`` averaged over heads, where ``f`` maps
  key ``j`` through the value projection and that head's slice of the
  output projection.
"""
from __future__ import annotations

import html
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import HierModel, classifier_forward
from .numerics.tensor import no_grad

CHANNELS = ("raw", "norm")


@dataclass
class SentenceScore:
    sentence_index: int
    raw_score: float
    norm_score: float
    raw_per_head: list = field(default_factory=list)
    norm_per_head: list = field(default_factory=list)

    def score(self, channel: str) -> float:
        return self.raw_score if channel == "raw" else self.norm_score


@dataclass
class DocumentScores:
    scores: list
    prediction: float

    def channel(self, name: str) -> np.ndarray:
        if name not in CHANNELS:
            raise ValueError(f"unknown channel {name!r}")
        return np.array([s.score(name) for s in self.scores])


def attention_scores(model: HierModel, doc) -> DocumentScores:
    """Both channels for one document, in sentence order."""
    with no_grad():
        out = classifier_forward(model, [doc])
    n = int(out.mask[0].sum())
    alpha = out.alpha.data[0, :, :n].astype(np.float64)            # (heads, n)
    pool = model.layers("cls.pool")[0]
    x = out.pool_input.data[0, :n].astype(np.float64)                # layer-normed keys
    h = model.config.n_heads
    dh = model.config.model_dim // h
    v = x @ pool["w_v"].data.astype(np.float64)                      # (n, d)
    w_o = pool["w_o"].data.astype(np.float64)
    norms = np.stack([np.linalg.norm(v[:, i * dh:(i + 1) * dh] @ w_o[i * dh:(i + 1) * dh], axis=1)
                      for i in range(h)])                             # (heads, n)
    weighted = alpha * norms
    raw = alpha.mean(axis=0)
    norm = weighted.mean(axis=0)
    scores = [SentenceScore(j, float(raw[j]), float(norm[j]), alpha[:, j].tolist(), weighted[:, j].tolist())
              for j in range(n)]
    return DocumentScores(scores, float(out.prob.data[0]))


def raw_attention_scores(model: HierModel, doc) -> list[SentenceScore]:
    return attention_scores(model, doc).scores


def norm_attention_scores(model: HierModel, doc) -> list[SentenceScore]:
    return attention_scores(model, doc).scores


def top_k_summary(scores: Sequence[float], k: int) -> list[int]:
    """Indices of the ``k`` highest scores (earlier index wins ties), in document order."""
    n = len(scores)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    order = sorted(range(n), key=lambda j: (-scores[j], j))
    return sorted(order[:k])


def rank_of(scores: Sequence[float], index: int) -> int:
    """1-based rank of ``index`` under the same tie rule as :func:`top_k_summary`."""
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return order.index(index) + 1


def share_over_uniform(scores: Sequence[float], index: int) -> float:
    """Share of the total score held by ``index``, in units of the uniform share ``1/n``."""
    s = np.asarray(scores, dtype=np.float64)
    total = s.sum()
    if total <= 0:
        return 1.0
    return float(s[index] / total * len(s))


def normalize(scores: Sequence[float]) -> list[float]:
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return [0.5] * len(s)
    return ((s - lo) / (hi - lo)).tolist()


@dataclass
class HeatmapDoc:
    texts: list
    intensities: list
    prediction: float
    channel: str
    metadata: dict = field(default_factory=dict)

    @classmethod
    def build(cls, texts, scores, prediction, channel, metadata=None) -> "HeatmapDoc":
        if len(texts) != len(scores):
            raise ValueError(f"{len(texts)} texts but {len(scores)} scores")
        return cls(list(texts), normalize(scores), float(prediction), channel, dict(metadata or {}))


_PAGE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{title}</title>
<style>
body {{ font-family: Georgia, serif; max-width: 52em; margin: 2em auto; line-height: 1.6; }}
header {{ font-family: sans-serif; font-size: 0.9em; color: #333; margin-bottom: 1.5em; }}
span.s {{ padding: 0.1em 0.15em; border-radius: 0.2em; }}
</style>
</head>
<body>
<header>{header}</header>
<p>
{body}
</p>
</body>
</html>
"""


def render_heatmap_html(doc: HeatmapDoc, path) -> None:
    """Write a self-contained page: one span per sentence, darker = more attention."""
    spans = []
    for i, (text, a) in enumerate(zip(doc.texts, doc.intensities)):
        spans.append(f'<span class="s" data-index="{i}" data-intensity="{a:.4f}" '
                     f'style="background-color: rgba(200, 30, 30, {a:.4f})">{html.escape(text)}</span>')
    meta = " &middot; ".join(f"{html.escape(str(k))}: {html.escape(str(v))}" for k, v in sorted(doc.metadata.items()))
    header = f"channel: {html.escape(doc.channel)} &middot; prediction: {doc.prediction:.4f}"
    if meta:
        header += " &middot; " + meta
    title = html.escape(str(doc.metadata.get("doc_id", "attention heatmap")))
    page = _PAGE.format(title=title, header=header, body="\n".join(spans))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(page)


def scores_record(doc_id: str, channel: str, scores: Sequence[float], k: int) -> dict:
    return {"doc_id": doc_id, "channel": channel, "scores": [float(s) for s in scores],
            "top_k": top_k_summary(scores, min(k, len(scores)))}


def write_scores(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def sentence_texts(doc, vocab=None) -> list[str]:
    if getattr(doc, "texts", None):
        return list(doc.texts)
    if vocab is None:
        return [" ".join(map(str, s[1:-1])) for s in doc.sentences]
    return [vocab.decode(s) for s in doc.sentences]


def spearman(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    from scipy.stats import spearmanr
    if len(a) < 2:
        return None
    r = spearmanr(a, b).statistic
    return None if np.isnan(r) else float(r)
