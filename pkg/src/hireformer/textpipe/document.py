"""Tokenized sentences, documents and the JSON-lines corpus format.

Corpus lines carry ``doc_id``, ``ticker``, ``filing_date`` (YYYY-MM-DD) and
``doc_type`` plus either raw ``text`` or pre-tokenized ``sentences`` (a list
of token-id lists, BOS/EOS included).
"""
from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

from .bpe import BOS, EOS, MASK, PAD, Vocab
from .segment import split_sentences

MAX_SENTENCE_LEN = 128
MAX_SENTENCES = 512
MAX_CONTENT = MAX_SENTENCE_LEN - 2


class DocumentError(ValueError):
    pass


@dataclass
class Document:
    doc_id: str
    ticker: str
    filing_date: dt.date
    doc_type: str
    sentences: list[tuple[int, ...]]
    texts: Optional[list[str]] = field(default=None, compare=False)

    def __post_init__(self):
        if not 1 <= len(self.sentences) <= MAX_SENTENCES:
            raise DocumentError(f"{self.doc_id}: {len(self.sentences)} sentences, "
                                f"expected 1..{MAX_SENTENCES}")
        for i, s in enumerate(self.sentences):
            check_sentence(s, f"{self.doc_id}[{i}]")

    def __len__(self):
        return len(self.sentences)

    def to_json(self, with_text: bool = False) -> dict:
        out = {"doc_id": self.doc_id, "ticker": self.ticker,
               "filing_date": self.filing_date.isoformat(), "doc_type": self.doc_type,
               "sentences": [list(s) for s in self.sentences]}
        if with_text and self.texts is not None:
            out["texts"] = list(self.texts)
        return out


def check_sentence(ids, where: str = "sentence") -> None:
    if not 2 <= len(ids) <= MAX_SENTENCE_LEN:
        raise DocumentError(f"{where}: length {len(ids)} outside 2..{MAX_SENTENCE_LEN}")
    if ids[0] != BOS or ids[-1] != EOS:
        raise DocumentError(f"{where}: must start with BOS and end with EOS")


def encode_sentence(text: str, vocab: Vocab) -> tuple[int, ...]:
    """BPE-encode ``text`` and wrap it in BOS/EOS, keeping the first 126 content tokens."""
    text = text.strip()
    if not text:
        raise DocumentError("cannot encode an empty sentence")
    ids = vocab.encode(text)[:MAX_CONTENT]
    return (BOS, *ids, EOS)


def build_document(meta: dict, sentence_texts: Iterable[str], vocab: Vocab) -> Document:
    texts = [t.strip() for t in sentence_texts if t and t.strip()]
    if not texts:
        raise DocumentError(f"{meta.get('doc_id', '?')}: no usable sentences")
    texts = texts[:MAX_SENTENCES]
    return Document(
        doc_id=str(meta["doc_id"]),
        ticker=str(meta["ticker"]),
        filing_date=_as_date(meta["filing_date"]),
        doc_type=str(meta.get("doc_type", "")),
        sentences=[encode_sentence(t, vocab) for t in texts],
        texts=texts,
    )


def _as_date(value) -> dt.date:
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError as exc:
        raise DocumentError(f"bad filing_date {value!r}: expected YYYY-MM-DD") from exc


def iter_corpus(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DocumentError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = {"doc_id", "ticker", "filing_date"} - rec.keys()
            if missing:
                raise DocumentError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            if "text" not in rec and "sentences" not in rec:
                raise DocumentError(f"{path}:{lineno}: need 'text' or 'sentences'")
            yield rec


def document_from_record(rec: dict, vocab: Optional[Vocab]) -> Document:
    if "sentences" in rec:
        sents = [tuple(int(i) for i in s) for s in rec["sentences"]][:MAX_SENTENCES]
        return Document(str(rec["doc_id"]), str(rec["ticker"]), _as_date(rec["filing_date"]),
                        str(rec.get("doc_type", "")), sents, rec.get("texts"))
    if vocab is None:
        raise DocumentError(f"{rec['doc_id']}: raw text needs a vocab")
    return build_document(rec, split_sentences(rec["text"]), vocab)


def load_documents(path, vocab: Optional[Vocab] = None) -> list[Document]:
    return [document_from_record(rec, vocab) for rec in iter_corpus(path)]


def write_corpus(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def corpus_text_lines(path) -> Iterator[str]:
    """Sentence strings of a raw-text corpus, for tokenizer training."""
    for rec in iter_corpus(path):
        if "text" in rec:
            yield from split_sentences(rec["text"])


__all__ = ["Document", "DocumentError", "encode_sentence", "build_document", "load_documents",
           "iter_corpus", "write_corpus", "document_from_record", "corpus_text_lines",
           "MAX_SENTENCE_LEN", "MAX_SENTENCES", "PAD", "MASK"]
