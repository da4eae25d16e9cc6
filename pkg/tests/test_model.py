import math

import numpy as np
import pytest

from hireformer.model import (
    ModelConfig, base_forward, classification_loss, classifier_forward, decoder_forward, init_model,
    load_base, mask_sentences, n_masked, pretrain_loss,
)
from hireformer.numerics import ContractError, precision, save_checkpoint
from hireformer.numerics.gradcheck import analytic_grad, numeric_grad, relative_errors
from hireformer.textpipe import BOS, EOS, MASK

TOY = ModelConfig(vocab_size=40, model_dim=16, n_heads=2, ff_dim=24, word_layers=2, sentence_layers=2,
                  dropout=0.0, init_std=0.3, word_chunk=4, sentence_chunk=4)


def _doc(gen, n_sent, n_tok, vocab=40):
    return [tuple([BOS] + [int(t) for t in gen.integers(5, vocab, size=n_tok)] + [EOS]) for _ in range(n_sent)]


def _max_rel(f, model, keys, n=30):
    worst = 0.0
    for k in keys:
        x = model.params[k]
        idx = np.random.default_rng(1).choice(x.size, min(x.size, n), replace=False)
        a = analytic_grad(f, x)
        num = numeric_grad(f, x, 1e-5, idx)
        worst = max(worst, float(relative_errors(a[idx], num).max()))
    return worst


BASE_KEYS = ["base.tok_emb", "base.word.0.w_qk", "base.word.1.w1", "base.sent.0.w_v",
             "base.sent.1.ln1.g", "base.word.final.b"]


class TestGradients:
    def test_pretrain_loss(self):
        with precision("float64"):
            m = init_model(TOY, 0)
            docs = [_doc(np.random.default_rng(0), 2, 4)]
            keys = BASE_KEYS + ["pretrain.w_ff", "pretrain.b_ff", "pretrain.dec.0.w_o", "pretrain.dec_pos"]
            assert _max_rel(lambda x: pretrain_loss(m, docs, ratio=0.5), m, keys) < 1e-4

    @pytest.mark.parametrize("mode", ["alpha", "scores"])
    def test_classification_loss(self, mode):
        with precision("float64"):
            m = init_model(TOY, 0)
            docs = [_doc(np.random.default_rng(0), 2, 4)]
            keys = BASE_KEYS + ["cls.pool.0.w_qk", "cls.mlp.w1", "cls.mlp.b2"]
            f = lambda x: classification_loss(classifier_forward(m, docs), [1], 0.1, mode)  # noqa: E731
            assert _max_rel(f, m, keys) < 1e-4


class TestBaseForward:
    def test_shape(self):
        m = init_model(TOY, 0)
        enc = base_forward(m, [_doc(np.random.default_rng(0), 5, 3)])
        assert enc.for_doc(0).shape == (5, 16)

    def test_batch_equals_single(self):
        m = init_model(TOY, 0)
        g = np.random.default_rng(3)
        docs = [_doc(g, 3, 7), _doc(g, 6, 2), _doc(g, 1, 11)]
        enc = base_forward(m, docs)
        for b, d in enumerate(docs):
            assert np.abs(base_forward(m, [d]).for_doc(0) - enc.for_doc(b)).max() < 1e-5

    def test_word_level_independent_across_sentences(self):
        m = init_model(TOY, 0)
        doc = _doc(np.random.default_rng(4), 3, 6)
        other = list(doc)
        other[1] = other[1][:1] + tuple(reversed(other[1][1:-1])) + other[1][-1:]
        a = base_forward(m, [doc]).sentence_embeddings.data[0]
        b = base_forward(m, [other]).sentence_embeddings.data[0]
        assert np.array_equal(a[[0, 2]], b[[0, 2]])
        assert not np.array_equal(a[1], b[1])

    def test_single_sentence_regression(self):
        # frozen from the first verified run
        with precision("float64"):
            m = init_model(TOY, 0)
            v = base_forward(m, [[(BOS, 7, 8, 9, EOS)]]).for_doc(0)[0]
        np.testing.assert_allclose(v[:4], GOLDEN_D1, atol=1e-8)


GOLDEN_D1 = np.array([0.34661456, -1.17328353, -2.53349967, 0.07801019])


class TestMasking:
    def test_counts(self):
        assert n_masked(20, 0.15) == 3
        assert n_masked(1, 0.15) == 1
        assert n_masked(10, 1.0) == 10

    def test_all_tokens_masked(self):
        doc = [(BOS, 5, 6, 7, 8, 9, EOS), (BOS, 5, EOS)]
        masked, ms = mask_sentences(doc, 1.0, np.random.default_rng(0))
        assert masked[0] == (MASK,) * 7 and ms.targets[0] == doc[0]

    def test_preserve_specials(self):
        doc = [(BOS, 5, 6, EOS)]
        masked, _ = mask_sentences(doc, 1.0, np.random.default_rng(0), mask_special=False)
        assert masked[0] == (BOS, MASK, MASK, EOS)

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            n_masked(4, 0.0)


class TestDecoder:
    def test_causality_bit_exact(self):
        m = init_model(TOY, 0)
        doc = _doc(np.random.default_rng(5), 3, 8)
        masked, ms = mask_sentences(doc, 0.34, np.random.default_rng(1))
        enc = base_forward(m, [masked])
        ref = decoder_forward(m, ms, enc)[0].data
        for j in range(1, len(ms.targets[0]) - 1):
            t = list(ms.targets[0])
            t[j:] = [(x + 3) % 35 + 5 for x in t[j:]]
            out = decoder_forward(m, ms, enc, targets_override=[tuple(t)])[0].data
            # logits at step k consume inputs 0..k, so rows < j are untouched
            assert np.array_equal(out[:j], ref[:j])
            assert not np.array_equal(out[j], ref[j])

    def test_logit_shape(self):
        m = init_model(TOY, 0)
        doc = [(BOS, 5, 6, 7, EOS), (BOS, 9, EOS)]
        masked, ms = mask_sentences(doc, 1.0, np.random.default_rng(0))
        out = decoder_forward(m, ms, base_forward(m, [masked]))
        assert [o.shape for o in out] == [(4, 40), (2, 40)]

    def test_not_in_mask_set(self):
        m = init_model(TOY, 0)
        doc = [(BOS, 5, EOS), (BOS, 6, EOS), (BOS, 7, EOS)]
        masked, ms = mask_sentences(doc, 0.2, np.random.default_rng(0))
        missing = next(i for i in range(3) if i not in ms.indices)
        with pytest.raises(ContractError):
            decoder_forward(m, ms, base_forward(m, [masked]), only=[missing])

    def test_zero_head_gives_log_vocab(self):
        m = init_model(TOY, 0)
        m.params["pretrain.w_ff"].data[:] = 0
        doc = [(BOS, 5, 6, 7, 8, EOS)]
        loss = pretrain_loss(m, [doc], ratio=1.0).item()
        assert loss == pytest.approx(5 * math.log(40), rel=1e-6)

    def test_identical_masked_sentences_average(self):
        m = init_model(TOY, 0)
        # without sentence positions both copies see the same context
        m.params["base.sent_pos"].data[:] = 0
        s = (BOS, 5, 6, 7, EOS)
        one = pretrain_loss(m, [[s]], ratio=1.0).item()
        two = pretrain_loss(m, [[s, s]], ratio=1.0).item()
        assert two == pytest.approx(one, rel=1e-4)


class TestClassifier:
    def test_probability_range_and_alpha_rows(self):
        m = init_model(TOY, 0)
        g = np.random.default_rng(0)
        out = classifier_forward(m, [_doc(g, 4, 3), _doc(g, 2, 5)])
        assert np.all((out.prob.data > 0) & (out.prob.data < 1))
        assert np.all(out.alpha.data >= 0)
        np.testing.assert_allclose(out.alpha.data.sum(-1), 1.0, atol=1e-6)

    def test_single_sentence_alpha(self):
        m = init_model(TOY, 0)
        out = classifier_forward(m, [[(BOS, 5, EOS)]])
        np.testing.assert_array_equal(out.alpha.data[0, :, :1], 1.0)

    def test_duplicates_split_alpha(self):
        with precision("float64"):
            m = init_model(TOY.__class__(**{**TOY.to_dict(), "attention_kind": "full"}), 0)
            m.params["base.sent_pos"].data[:] = 0
            a, b = (BOS, 5, 6, EOS), (BOS, 9, 12, 7, EOS)
            al = classifier_forward(m, [[a, b, b]]).alpha.data[0]
            np.testing.assert_allclose(al[:, 1], al[:, 2], rtol=1e-12)
            np.testing.assert_allclose(al.sum(-1), 1.0, atol=1e-12)

    def test_closed_form_loss(self):
        cfg = ModelConfig(vocab_size=40, model_dim=16, n_heads=8, ff_dim=24, word_layers=1,
                          sentence_layers=1, dropout=0.0)
        with precision("float64"):
            m = init_model(cfg, 0)
            m.params["cls.mlp.w2"].data[:] = 0
            out = classifier_forward(m, [[(BOS, 5, EOS), (BOS, 6, EOS)]])
            assert out.prob.item() == 0.5
            assert classification_loss(out, [1], 0.1).item() == pytest.approx(math.log(2) + 0.8, abs=1e-12)
            assert classification_loss(out, [1], 0.0).item() == pytest.approx(math.log(2), abs=1e-12)


class TestTransfer:
    def test_only_base_tensors_move(self, tmp_path):
        src = init_model(TOY, 1)
        path = tmp_path / "pre.ckpt"
        save_checkpoint(path, src.state())
        dst = init_model(TOY, 2, heads=("cls",))
        before = {k: v.data.copy() for k, v in dst.params.items()}
        moved = load_base(dst, path)
        assert moved == sorted(k for k in dst.params if k.startswith("base."))
        assert not any(k.startswith("pretrain.") for k in dst.params)
        for k, v in dst.params.items():
            if k.startswith("base."):
                assert np.array_equal(v.data, src.params[k].data)
            else:
                assert np.array_equal(v.data, before[k])

    def test_shape_mismatch(self, tmp_path):
        src = init_model(TOY, 1)
        path = tmp_path / "pre.ckpt"
        save_checkpoint(path, src.state())
        dst = init_model(ModelConfig(vocab_size=41, model_dim=16, n_heads=2, ff_dim=24, word_layers=2,
                                     sentence_layers=2), 2)
        with pytest.raises(ContractError):
            load_base(dst, path)
