import numpy as np
import pytest

from hireformer.attnviz import (
    HeatmapDoc, attention_scores, normalize, rank_of, render_heatmap_html, scores_record, share_over_uniform, spearman,
    top_k_summary,
)
from hireformer.model import ModelConfig, init_model
from hireformer.textpipe import BOS, EOS, Document


def _model():
    cfg = ModelConfig(vocab_size=30, model_dim=16, n_heads=2, ff_dim=32, word_layers=1, sentence_layers=1,
                      dropout=0.0, attention_kind="full")
    return init_model(cfg, seed=3)


def _doc(n=5):
    g = np.random.default_rng(n)
    sents = [tuple([BOS] + g.integers(5, 30, size=4).tolist() + [EOS]) for _ in range(n)]
    return Document("x", "AAA", None, "news_release", sents)


class TestTopK:
    def test_examples(self):
        assert top_k_summary([0.1, 0.5, 0.2, 0.9], 2) == [1, 3]
        assert top_k_summary([0.3, 0.3, 0.3], 2) == [0, 1]

    def test_k_equals_n(self):
        assert top_k_summary([3.0, 1.0, 2.0], 3) == [0, 1, 2]

    @pytest.mark.parametrize("k", [0, 4])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            top_k_summary([1.0, 2.0, 3.0], k)

    def test_rank(self):
        assert rank_of([0.1, 0.5, 0.5], 2) == 2 and rank_of([0.1, 0.5, 0.5], 0) == 3


def test_normalize():
    assert normalize([2.0, 4.0, 3.0]) == [0.0, 1.0, 0.5]
    assert normalize([1.0, 1.0]) == [0.5, 0.5]


def test_channels_shape_and_raw_sums_to_one():
    ds = attention_scores(_model(), _doc(5))
    raw, norm = ds.channel("raw"), ds.channel("norm")
    assert raw.shape == norm.shape == (5,)
    assert raw.sum() == pytest.approx(1.0, abs=1e-5)
    assert (norm >= 0).all()
    with pytest.raises(ValueError):
        ds.channel("grad")


def test_single_sentence_document():
    ds = attention_scores(_model(), _doc(1))
    assert ds.channel("raw") == pytest.approx([1.0])
    assert top_k_summary(ds.channel("norm"), 1) == [0]


def test_norm_channel_equals_alpha_times_transformed_norm():
    model = _model()
    doc = _doc(4)
    ds = attention_scores(model, doc)
    for s in ds.scores:
        assert s.norm_score == pytest.approx(np.mean(s.norm_per_head))
        assert s.raw_score == pytest.approx(np.mean(s.raw_per_head))
    # doubling head 0's slice of the output projection doubles only its norm scores
    w_o = model.params["cls.pool.0.w_o"].data
    w_o[:8] *= 2
    scaled = attention_scores(model, doc)
    for a, b in zip(ds.scores, scaled.scores):
        assert b.raw_per_head == pytest.approx(a.raw_per_head)
        assert b.norm_per_head[0] == pytest.approx(2 * a.norm_per_head[0], rel=1e-5)
        assert b.norm_per_head[1] == pytest.approx(a.norm_per_head[1], rel=1e-5)


def test_heatmap_deterministic(tmp_path):
    doc = HeatmapDoc.build(["First <b>.", "Second."], [0.2, 0.8], 0.73, "norm", {"doc_id": "d1"})
    render_heatmap_html(doc, tmp_path / "a.html")
    render_heatmap_html(doc, tmp_path / "b.html")
    a = (tmp_path / "a.html").read_bytes()
    assert a == (tmp_path / "b.html").read_bytes()
    text = a.decode()
    assert "&lt;b&gt;" in text and 'data-intensity="1.0000"' in text and "0.7300" in text


def test_heatmap_length_mismatch():
    with pytest.raises(ValueError):
        HeatmapDoc.build(["a"], [0.1, 0.2], 0.5, "raw")


def test_scores_record_and_spearman():
    rec = scores_record("d", "raw", [0.1, 0.4, 0.2], 5)
    assert rec["top_k"] == [0, 1, 2]
    assert spearman([1, 2, 3], [2, 4, 9]) == pytest.approx(1.0)
    assert spearman([1], [1]) is None


def test_share_over_uniform():
    assert share_over_uniform([0.25] * 4, 2) == 1.0
    assert share_over_uniform([3.0, 1.0, 0.0, 0.0], 0) == 3.0
    assert share_over_uniform([0.0, 0.0], 1) == 1.0
