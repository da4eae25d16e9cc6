"""Synthetic filings with planted signal sentences and matching volume data.

Each document is filler prose built from invented word stems.  With
probability ``signal_prob`` one sentence drawn from a small set of
"material news" templates is planted at a random position.  Volumes are
generated so that labeling the filing date reproduces the document's label.
"""
from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .marketdata import write_volume_csv
from .numerics.rng import RngStream
from .textpipe.document import write_corpus

SIGNAL_TEMPLATES = (
    "{ticker} announced that quarterly earnings surged {n} percent above guidance.",
    "Net income rose sharply to ${n} million on record revenue.",
    "The board approved a definitive merger agreement with a strategic acquirer.",
    "{ticker} raised its annual outlook after a material contract win.",
    "Management reported a significant increase in adjusted EBITDA of {n} percent.",
    "The company disclosed a material change in its dividend policy.",
)

_CONSONANTS = "bcdfglmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class GenConfig:
    n_docs: int = 1000
    holdout_docs: int = 0                       # dated on/after holdout_start
    sentences_per_doc: tuple = (4, 10)
    words_per_sentence: tuple = (5, 12)
    n_stems: int = 300
    signal_phrases: tuple = SIGNAL_TEMPLATES
    signal_prob: float = 0.5
    signal_strength: float = 0.9
    background_up_rate: float = 0.0             # P(label 1) for documents without a signal
    noise_rate: float = 0.0
    n_tickers: int = 40
    start_date: dt.date = dt.date(2014, 1, 1)
    holdout_start: dt.date = dt.date(2018, 1, 1)
    end_date: dt.date = dt.date(2018, 12, 31)
    weekend_filing_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.sentences_per_doc
        if not 1 <= lo <= hi:
            raise ValueError("sentences_per_doc must be an increasing positive range")
        if not 0 <= self.signal_strength <= 1 or not 0 <= self.signal_prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if not 0 <= self.holdout_docs <= self.n_docs:
            raise ValueError("holdout_docs must be within [0, n_docs]")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("start_date", "holdout_start", "end_date"):
            d[k] = d[k].isoformat()
        d["sentences_per_doc"] = list(self.sentences_per_doc)
        d["words_per_sentence"] = list(self.words_per_sentence)
        d["signal_phrases"] = list(self.signal_phrases)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        for k in ("start_date", "holdout_start", "end_date"):
            if k in d and isinstance(d[k], str):
                d[k] = dt.date.fromisoformat(d[k])
        for k in ("sentences_per_doc", "words_per_sentence", "signal_phrases"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class GeneratedCorpus:
    records: list
    volume_rows: list
    manifest: list
    config: GenConfig = field(default_factory=GenConfig)

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"corpus": out / "corpus.jsonl", "volumes": out / "volumes.csv",
                 "manifest": out / "manifest.jsonl"}
        write_corpus(paths["corpus"], self.records)
        write_volume_csv(paths["volumes"], self.volume_rows)
        with open(paths["manifest"], "w", encoding="utf-8") as fh:
            for rec in self.manifest:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return paths


def _stems(gen: np.random.Generator, n: int) -> list[str]:
    out, seen = [], set()
    while len(out) < n:
        k = int(gen.integers(2, 4))
        word = "".join(_CONSONANTS[gen.integers(len(_CONSONANTS))] + _VOWELS[gen.integers(len(_VOWELS))]
                       for _ in range(k))
        if gen.random() < 0.5:
            word += _CONSONANTS[gen.integers(len(_CONSONANTS))]
        if word not in seen:
            seen.add(word)
            out.append(word)
    return out


def _tickers(gen: np.random.Generator, n: int) -> list[str]:
    out = set()
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    while len(out) < n:
        out.add("".join(letters[i] for i in gen.integers(0, 26, size=int(gen.integers(2, 5)))))
    return sorted(out)


def _filler(gen, stems, lo, hi) -> str:
    n = int(gen.integers(lo, hi + 1))
    words = [stems[i] for i in gen.integers(0, len(stems), size=n)]
    if gen.random() < 0.2:
        words.insert(int(gen.integers(1, n)), str(int(gen.integers(2, 999))))
    words[0] = words[0].capitalize()
    return " ".join(words) + "."


def _noisy(text: str, gen, rate: float) -> str:
    """Swap adjacent characters inside words and break lines, at ``rate`` per word."""
    if rate <= 0:
        return text
    words = text.split(" ")
    for i, w in enumerate(words):
        if len(w) > 3 and gen.random() < rate:
            j = int(gen.integers(1, len(w) - 2))
            w = w[:j] + w[j + 1] + w[j] + w[j + 2:]
        if i and gen.random() < rate / 2:
            w = "\n" + w
        words[i] = w
    return " ".join(words).replace(" \n", "\n")


def _trading_days(start: dt.date, end: dt.date) -> list[dt.date]:
    days, d = [], start
    while d <= end:
        if d.weekday() < 5:
            days.append(d)
        d += dt.timedelta(days=1)
    return days


def generate_corpus(config: GenConfig = GenConfig()) -> GeneratedCorpus:
    """Deterministic corpus, volume rows and manifest for ``config``."""
    root = RngStream(config.seed, "corpusgen")
    meta_gen = root.derive(0).generator()
    stems = _stems(meta_gen, config.n_stems)
    tickers = _tickers(meta_gen, config.n_tickers)
    days = _trading_days(config.start_date, config.end_date)
    # every 4th trading day is a slot, so the D / D+1 pairs of one ticker never overlap
    slots = [(t, i) for t in range(len(tickers)) for i in range(0, len(days) - 1, 4)]
    pre = [s for s in slots if days[s[1] + 1] < config.holdout_start]
    post = [s for s in slots if days[s[1]] >= config.holdout_start]
    n_post = config.holdout_docs
    n_pre = config.n_docs - n_post
    if n_pre > len(pre) or n_post > len(post):
        raise ValueError("not enough ticker/date slots: raise n_tickers or widen the date range")
    chosen = ([pre[i] for i in sorted(meta_gen.choice(len(pre), n_pre, replace=False))]
              + [post[i] for i in sorted(meta_gen.choice(len(post), n_post, replace=False))])

    records, manifest, labels = [], [], {}
    for k, (t, di) in enumerate(chosen):
        g = root.derive(1, k).generator()
        ticker = tickers[t]
        lo, hi = config.sentences_per_doc
        n_sent = int(g.integers(lo, hi + 1))
        sents = [_filler(g, stems, *config.words_per_sentence) for _ in range(n_sent)]
        planted = None
        if g.random() < config.signal_prob:
            planted = int(g.integers(0, n_sent + 1))
            tpl = config.signal_phrases[int(g.integers(len(config.signal_phrases)))]
            sents.insert(planted, tpl.format(ticker=ticker, n=int(g.integers(5, 60))))
            intended = 1
            y = int(g.random() < config.signal_strength)
        else:
            intended = 0
            y = int(g.random() < config.background_up_rate)
        filing = days[di]
        if filing.weekday() == 0 and g.random() < config.weekend_filing_rate:
            filing -= dt.timedelta(days=int(g.integers(1, 3)))      # Saturday or Sunday
        text = " ".join(_noisy(s, g, config.noise_rate) for s in sents)
        doc_id = f"doc{k:06d}"
        records.append({"doc_id": doc_id, "ticker": ticker, "filing_date": filing.isoformat(),
                        "doc_type": "news_release", "text": text})
        manifest.append({"doc_id": doc_id, "planted_index": planted, "intended_label": intended,
                         "label": y})
        labels[(t, di)] = y

    vol_gen = root.derive(2).generator()
    rows = []
    for t, ticker in enumerate(tickers):
        base = vol_gen.lognormal(11.0, 0.5)
        vols = np.maximum(1000, vol_gen.lognormal(np.log(base), 0.3, size=len(days))).astype(np.int64)
        moves = vol_gen.uniform(0.05, 0.5, size=len(days))
        for di in range(len(days) - 1):
            y = labels.get((t, di))
            if y is None:
                continue
            vols[di + 1] = int(vols[di] * (1 + moves[di])) if y else int(vols[di] * (1 - moves[di]))
        rows.extend((days[i], ticker, int(vols[i])) for i in range(len(days)))
    rows.sort(key=lambda r: (r[0], r[1]))
    return GeneratedCorpus(records, rows, manifest, config)


def read_manifest(path) -> dict[str, dict]:
    with open(path, encoding="utf-8") as fh:
        return {rec["doc_id"]: rec for rec in map(json.loads, filter(str.strip, fh))}


def planted_sentence(manifest: dict, doc_id: str) -> Optional[int]:
    rec = manifest.get(doc_id)
    return None if rec is None else rec["planted_index"]
