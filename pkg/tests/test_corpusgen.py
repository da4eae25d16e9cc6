import datetime as dt

import numpy as np
import pytest

from hireformer.corpusgen import GenConfig, generate_corpus, planted_sentence, read_manifest
from hireformer.marketdata import join_and_label, load_volume_csv
from hireformer.textpipe import corpus_text_lines, load_documents, split_sentences, train_bpe


def _docs(path):
    return load_documents(path, train_bpe(corpus_text_lines(path), 300))


def test_byte_identical(tmp_path):
    cfg = GenConfig(n_docs=60, holdout_docs=20, noise_rate=0.05, seed=4)
    a = generate_corpus(cfg).write(tmp_path / "a")
    b = generate_corpus(cfg).write(tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()


def test_seed_changes_output():
    a = generate_corpus(GenConfig(n_docs=20, seed=0)).records
    b = generate_corpus(GenConfig(n_docs=20, seed=1)).records
    assert a != b


def test_manifest_points_at_signal_sentence(tmp_path):
    cfg = GenConfig(n_docs=80, seed=2)
    g = generate_corpus(cfg)
    paths = g.write(tmp_path)
    manifest = read_manifest(paths["manifest"])
    for rec in g.records:
        idx = planted_sentence(manifest, rec["doc_id"])
        sents = split_sentences(rec["text"])
        if idx is None:
            assert not any(s.startswith(("Net income", "The board", "The company", "Management"))
                           or " announced " in s or " raised its " in s for s in sents)
        else:
            s = sents[idx]
            assert any(k in s for k in ("earnings", "Net income", "merger", "outlook", "EBITDA", "dividend"))


def test_match_rate_near_strength(tmp_path):
    cfg = GenConfig(n_docs=1000, signal_prob=1.0, signal_strength=0.9, seed=5)
    paths = generate_corpus(cfg).write(tmp_path)
    manifest = read_manifest(paths["manifest"])
    ex, skipped = join_and_label(_docs(paths["corpus"]), load_volume_csv(paths["volumes"]))
    assert skipped.total == 0 and len(ex) == 1000
    rate = np.mean([e.y == manifest[e.doc_id]["intended_label"] for e in ex])
    assert abs(rate - 0.9) <= 0.05


def test_labels_reproduced_by_volume_join(tmp_path):
    cfg = GenConfig(n_docs=200, holdout_docs=50, weekend_filing_rate=0.5, seed=6)
    paths = generate_corpus(cfg).write(tmp_path)
    manifest = read_manifest(paths["manifest"])
    ex, skipped = join_and_label(_docs(paths["corpus"]), load_volume_csv(paths["volumes"]))
    assert skipped.total == 0
    assert all(e.y == manifest[e.doc_id]["label"] for e in ex)
    assert any(e.doc.filing_date.weekday() >= 5 for e in ex)
    post = [e for e in ex if e.doc.filing_date >= dt.date(2018, 1, 1)]
    assert len(post) == 50


def test_config_round_trip():
    cfg = GenConfig(n_docs=5, sentences_per_doc=(2, 3), seed=9)
    assert GenConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("kw", [dict(sentences_per_doc=(0, 2)), dict(signal_strength=1.5),
                                dict(n_docs=3, holdout_docs=4)])
def test_rejects_bad_config(kw):
    with pytest.raises(ValueError):
        GenConfig(**kw)


def test_too_many_docs():
    with pytest.raises(ValueError, match="slots"):
        generate_corpus(GenConfig(n_docs=10_000, n_tickers=2))
