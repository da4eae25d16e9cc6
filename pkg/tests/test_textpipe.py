import datetime as dt
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hireformer.textpipe import (
    BOS, EOS, MASK, PAD, SPECIALS, BPEError, Document, DocumentError, Vocab, build_document,
    encode_sentence, load_documents, split_sentences, train_bpe, write_corpus,
)
from hireformer.textpipe.bpe import FIRST_MERGE_ID, pretokenize

CORPUS = [
    "Net income increased 12% to $4.5 million compared with the prior year.",
    "The Company reported revenue of $120 million for the quarter.",
    "Forward-looking statements involve risks and uncertainties.",
    "Adjusted EBITDA, a non-GAAP measure, increased to $30 million.",
    "The board declared a quarterly dividend of $0.25 per share.",
] * 3


@pytest.fixture(scope="module")
def vocab():
    return train_bpe(CORPUS, 400)


def _pair_counts(words):
    counts = Counter()
    for w, f in words.items():
        for a, b in zip(w, w[1:]):
            counts[(a, b)] += f
    return counts


class TestTrainBpe:
    def test_first_merge_is_most_frequent_pair(self):
        # brute-force oracle over the pre-tokenized byte strings
        words = Counter(tuple(bytes([c]) for c in w) for w in pretokenize("aaab aaab"))
        counts = _pair_counts(words)
        top = max(counts.values())
        expected = min(p for p, c in counts.items() if c == top)
        assert expected == (b"a", b"a")
        v = train_bpe(["aaab aaab"], FIRST_MERGE_ID + 3)
        first = v.merges[0]
        assert (v.token_bytes[first[0]], v.token_bytes[first[1]]) == expected

    def test_byte_only_vocab(self):
        v = train_bpe(CORPUS, FIRST_MERGE_ID)
        assert v.merges == [] and v.size == 256 + len(SPECIALS)

    def test_round_trip_on_training_lines(self, vocab):
        for line in CORPUS:
            assert vocab.decode(vocab.encode(line)) == line

    def test_deterministic(self):
        a = train_bpe(CORPUS, 350)
        b = train_bpe(CORPUS, 350)
        assert a.merges == b.merges
        assert a.encode(CORPUS[0]) == b.encode(CORPUS[0])

    def test_stops_when_no_pair_repeats(self):
        v = train_bpe(["ab"], 10_000)
        assert v.size < 10_000

    def test_empty_corpus(self):
        with pytest.raises(BPEError):
            train_bpe([], 300)

    def test_budget_too_small(self):
        with pytest.raises(BPEError):
            train_bpe(CORPUS, 100)

    def test_specials_never_produced(self, vocab):
        ids = vocab.encode(" ".join(CORPUS))
        assert min(ids) >= len(SPECIALS)

    def test_file_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        text = path.read_text(encoding="utf-8")
        assert all(len(line.split(" ")) == 2 for line in text.splitlines() if not line.startswith("#"))
        loaded = Vocab.load(path)
        assert loaded.merges == vocab.merges
        assert loaded.encode(CORPUS[3]) == vocab.encode(CORPUS[3])


@settings(max_examples=60, deadline=None)
@given(st.text(min_size=0, max_size=60))
def test_byte_level_round_trip(text):
    v = _shared_vocab()
    assert v.decode(v.encode(text)) == text


_VOCAB = []


def _shared_vocab():
    if not _VOCAB:
        _VOCAB.append(train_bpe(CORPUS, 380))
    return _VOCAB[0]


class TestEncodeSentence:
    def test_length_n_plus_two(self, vocab):
        content = vocab.encode("The board declared a dividend.")
        ids = encode_sentence("The board declared a dividend.", vocab)
        assert len(ids) == len(content) + 2
        assert ids[0] == BOS and ids[-1] == EOS

    def test_truncation(self, vocab):
        text = " ".join(["zq"] * 500)
        assert len(vocab.encode(text)) >= 500
        ids = encode_sentence(text, vocab)
        assert len(ids) == 128 and ids[-1] == EOS and ids[0] == BOS
        assert list(ids[1:-1]) == vocab.encode(text)[:126]

    def test_round_trip(self, vocab):
        text = "Revenue rose 7% in Q3."
        assert vocab.decode(encode_sentence(text, vocab)) == text

    def test_empty(self, vocab):
        with pytest.raises(DocumentError):
            encode_sentence("   ", vocab)

    def test_no_pad_or_mask(self, vocab):
        ids = encode_sentence(CORPUS[1], vocab)
        assert PAD not in ids and MASK not in ids


class TestSplitSentences:
    def test_three(self):
        assert split_sentences("A. B? C!") == ["A.", "B?", "C!"]

    def test_abbreviation_guard(self):
        assert split_sentences("Total Inc. reported results.") == ["Total Inc. reported results."]
        assert len(split_sentences("Shares of Total Inc. Rose today.")) == 1
        # the same text without the guard word splits
        assert len(split_sentences("Shares of Total now. Rose today.")) == 2

    def test_empty(self):
        assert split_sentences("") == []

    def test_blank_lines_and_broken_lines(self):
        out = split_sentences("First part of a line\nbroken by PDF\n\nSecond paragraph")
        assert out == ["First part of a line broken by PDF", "Second paragraph"]


META = {"doc_id": "d1", "ticker": "ABC", "filing_date": "2017-03-04", "doc_type": "news_release"}


class TestBuildDocument:
    def test_three_sentences(self, vocab):
        doc = build_document(META, CORPUS[:3], vocab)
        assert len(doc) == 3 and doc.filing_date == dt.date(2017, 3, 4)

    def test_truncates_to_512_in_order(self, vocab):
        texts = [f"Sentence number {i}." for i in range(600)]
        doc = build_document(META, texts, vocab)
        assert len(doc) == 512
        assert [vocab.decode(s) for s in doc.sentences] == texts[:512]

    def test_encoded_lengths(self):
        # a byte-only vocab makes token counts equal byte counts
        v = train_bpe(["x"], FIRST_MERGE_ID)
        doc = build_document(META, ["abcde", "q" * 200], v)
        assert [len(s) for s in doc.sentences] == [7, 128]

    def test_no_usable_sentences(self, vocab):
        with pytest.raises(DocumentError):
            build_document(META, ["", "   "], vocab)

    def test_document_invariants(self):
        with pytest.raises(DocumentError):
            Document("d", "T", dt.date(2017, 1, 1), "x", [])
        with pytest.raises(DocumentError):
            Document("d", "T", dt.date(2017, 1, 1), "x", [(5, 6, EOS)])


class TestCorpusFile:
    def test_raw_and_pretokenized(self, vocab, tmp_path):
        path = tmp_path / "corpus.jsonl"
        raw = dict(META, text=" ".join(CORPUS[:4]))
        pre = dict(META, doc_id="d2", sentences=[[BOS, 70, 71, EOS]])
        write_corpus(path, [raw, pre])
        docs = load_documents(path, vocab)
        assert [d.doc_id for d in docs] == ["d1", "d2"]
        assert len(docs[0]) == 4
        assert docs[1].sentences == [(BOS, 70, 71, EOS)]

    def test_bad_line_reports_location(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"doc_id": "a"}\n', encoding="utf-8")
        with pytest.raises(DocumentError, match="bad.jsonl:1"):
            load_documents(path)
