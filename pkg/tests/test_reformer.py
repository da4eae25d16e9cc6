import math

import numpy as np
import pytest

from hireformer.numerics import Tensor, precision
from hireformer.numerics.tensor import ContractError, use_tape
from hireformer.reformer import (
    AttentionConfig, ConfigError, candidate_sets, chunked_ffn, full_attention, init_layer,
    lsh_attention, lsh_bucket, reformer_stack,
)

D, H = 16, 2


def _layer(seed=0, d=D, ff=32):
    return init_layer(np.random.default_rng(seed), d, ff, std=0.3)


def _oracle(x, p, cfg, assign, mask):
    """Plain-numpy attention restricted to each round's reachable keys."""
    b, n, d = x.shape
    h, dh, c = cfg.n_heads, cfg.head_dim, cfg.bucket_chunk_size
    qk = (x @ p["w_qk"].data).reshape(b, n, h, dh).transpose(0, 2, 1, 3)
    v = (x @ p["w_v"].data).reshape(b, n, h, dh).transpose(0, 2, 1, 3)
    k = qk / np.sqrt((qk ** 2).sum(-1, keepdims=True) + 1e-6)
    heads = np.zeros((b, h, n, dh))
    for bi in range(b):
        for hi in range(h):
            outs, lses = [], []
            for r in range(assign.perm.shape[2]):
                reach = np.zeros((n, n), bool)
                perm = assign.perm[bi, hi, r]
                chunk_of = np.empty(n, int)
                chunk_of[perm] = np.arange(n) // c
                bk = assign.buckets[bi, hi, r]
                for i in range(n):
                    for j in range(n):
                        dc = chunk_of[i] - chunk_of[j]
                        reach[i, j] = bk[i] == bk[j] and dc in (0, 1) and mask[bi, j]
                s = qk[bi, hi] @ k[bi, hi].T / math.sqrt(dh)
                s = np.where(reach, s, -1e9)
                s = np.where(np.eye(n, dtype=bool), np.where(reach, -1e5, -1e9), s)
                lse = np.log(np.exp(s - s.max(1, keepdims=True)).sum(1)) + s.max(1)
                outs.append(np.exp(s - lse[:, None]) @ v[bi, hi])
                lses.append(lse)
            lses = np.array(lses)
            w = np.exp(lses - lses.max(0))
            w /= w.sum(0)
            heads[bi, hi] = sum(w[r][:, None] * outs[r] for r in range(len(outs)))
    return heads.transpose(0, 2, 1, 3).reshape(b, n, d) @ p["w_o"].data


class TestLshAttention:
    @pytest.mark.parametrize("n,chunk,rounds", [(10, 4, 1), (10, 4, 2), (13, 5, 3), (8, 8, 2)])
    def test_matches_restricted_oracle(self, n, chunk, rounds):
        with precision("float64"):
            cfg = AttentionConfig(model_dim=D, n_heads=H, bucket_chunk_size=chunk, n_hash_rounds=rounds,
                                  n_buckets=2)
            p = _layer()
            x = np.random.default_rng(3).normal(size=(2, n, D))
            mask = np.ones((2, n), bool)
            mask[1, -3:] = False
            out, assign = lsh_attention(Tensor(x), p, cfg, mask, gen=np.random.default_rng(7),
                                        return_buckets=True)
            ref = _oracle(x, p, cfg, assign, mask)
            np.testing.assert_allclose(out.data[mask], ref[mask], atol=1e-10)

    def test_equals_full_attention_when_everything_is_reachable(self):
        # one chunk and every valid key hashed together -> identical to full attention
        with precision("float64"):
            cfg = AttentionConfig(model_dim=D, n_heads=H, bucket_chunk_size=16, n_buckets=2)
            p = _layer()
            x = np.random.default_rng(1).normal(size=(1, 12, D))
            _, assign = lsh_attention(Tensor(x), p, cfg, gen=np.random.default_rng(0), return_buckets=True)
            assign.buckets[:] = 0
            assign.perm[:] = np.arange(12)
            assign.inverse[:] = np.arange(12)
            out = lsh_attention(Tensor(x), p, cfg, buckets=assign)
            full = full_attention(Tensor(x), p, cfg).output
            np.testing.assert_allclose(out.data, full.data, atol=1e-12)

    def test_pad_content_does_not_leak(self):
        with precision("float64"):
            cfg = AttentionConfig(model_dim=D, n_heads=H, bucket_chunk_size=4)
            p = _layer()
            x = np.random.default_rng(2).normal(size=(1, 20, D))
            mask = np.ones((1, 20), bool)
            mask[0, 14:] = False
            y = x.copy()
            y[0, 14:] = 100 * np.random.default_rng(9).normal(size=(6, D))
            a = lsh_attention(Tensor(x), p, cfg, mask, gen=np.random.default_rng(5))
            b = lsh_attention(Tensor(y), p, cfg, mask, gen=np.random.default_rng(5))
            np.testing.assert_array_equal(a.data[0, :14], b.data[0, :14])

    def test_causal_ignores_future(self):
        with precision("float64"):
            cfg = AttentionConfig(model_dim=D, n_heads=H, bucket_chunk_size=4, causal=True)
            p = _layer()
            x = np.random.default_rng(2).normal(size=(1, 16, D))
            y = x.copy()
            y[0, 10:] += 5.0
            buck = lsh_attention(Tensor(x), p, cfg, gen=np.random.default_rng(4), return_buckets=True)[1]
            a = lsh_attention(Tensor(x), p, cfg, buckets=buck)
            b = lsh_attention(Tensor(y), p, cfg, buckets=buck)
            np.testing.assert_allclose(a.data[0, :10], b.data[0, :10], atol=1e-12)

    def test_needs_generator_or_buckets(self):
        cfg = AttentionConfig(model_dim=D, n_heads=H)
        with pytest.raises(ContractError):
            lsh_attention(Tensor(np.zeros((1, 4, D))), _layer(), cfg)


class TestBucketing:
    def test_permutation_and_inverse(self):
        cfg = AttentionConfig(model_dim=D, n_heads=1, n_hash_rounds=3, n_buckets=4)
        vec = np.random.default_rng(0).normal(size=(30, D))
        a = lsh_bucket(vec, cfg, np.random.default_rng(1))
        assert a.buckets.shape == (3, 30)
        for r in range(3):
            assert sorted(a.perm[r]) == list(range(30))
            np.testing.assert_array_equal(a.perm[r][a.inverse[r]], np.arange(30))
            keys = a.buckets[r][a.perm[r]]
            assert np.all(np.diff(keys) >= 0)

    def test_more_rounds_never_shrink_candidates(self):
        vec = np.random.default_rng(0).normal(size=(40, D))
        prev = None
        for rounds in (1, 2, 4):
            cfg = AttentionConfig(model_dim=D, n_heads=1, n_hash_rounds=rounds, n_buckets=4)
            reach = candidate_sets(lsh_bucket(vec, cfg, np.random.default_rng(11)), 5)
            if prev is not None:
                assert np.all(reach[prev])
            prev = reach

    def test_similar_vectors_share_buckets(self):
        cfg = AttentionConfig(model_dim=D, n_heads=1, n_hash_rounds=1, n_buckets=8)
        base = np.random.default_rng(0).normal(size=D)
        vec = np.stack([base, base * 3.0, -base])
        a = lsh_bucket(vec, cfg, np.random.default_rng(2))
        assert a.buckets[0, 0] == a.buckets[0, 1] != a.buckets[0, 2]

    def test_auto_bucket_count(self):
        cfg = AttentionConfig(bucket_chunk_size=16)
        assert cfg.buckets_for(128) == 8 and cfg.buckets_for(5) == 2

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            AttentionConfig(model_dim=10, n_heads=3)
        with pytest.raises(ConfigError):
            AttentionConfig(n_buckets=3)
        with pytest.raises(ConfigError):
            AttentionConfig(attention_kind="sparse")


class TestChunkedFfn:
    @pytest.mark.parametrize("dtype", ["float32", "float64"])
    @pytest.mark.parametrize("chunk", [1, 2, 3, 7, 16, 1000])
    def test_bit_identical_across_chunk_sizes(self, dtype, chunk):
        with precision(dtype):
            g = np.random.default_rng(0)
            p = _layer()
            x = Tensor(g.normal(size=(3, 13, D)).astype(dtype))
            ref = chunked_ffn(x, p["w1"], p["b1"], p["w2"], p["b2"], 10_000)
            out = chunked_ffn(x, p["w1"], p["b1"], p["w2"], p["b2"], chunk)
            assert np.array_equal(out.data, ref.data)

    def test_rejects_bad_chunk(self):
        p = _layer()
        with pytest.raises(ConfigError):
            chunked_ffn(Tensor(np.zeros((1, 2, D))), p["w1"], p["b1"], p["w2"], p["b2"], 0)


def _stack_grads(reversible, kind, seed=0):
    with precision("float64"):
        cfg = AttentionConfig(model_dim=D, n_heads=H, bucket_chunk_size=4, attention_kind=kind,
                              ffn_chunk_size=5)
        layers = [_layer(s) for s in (1, 2, 3)]
        x = Tensor(np.random.default_rng(seed).normal(size=(2, 11, D)), requires_grad=True)
        mask = np.ones((2, 11), bool)
        mask[0, 8:] = False
        target = np.random.default_rng(4).normal(size=(2, 11, D))
        with use_tape() as tape:
            y = reformer_stack(x, layers, cfg, mask, gen=np.random.default_rng(21), reversible=reversible)
            loss = ((y - target) * (y - target)).sum()
        tape.backward(loss)
        return y.data, x.grad, [{k: v.grad for k, v in p.items()} for p in layers]


class TestReversibleStack:
    @pytest.mark.parametrize("kind", ["lsh", "full"])
    def test_gradients_match_stored_activations(self, kind):
        y_r, gx_r, gp_r = _stack_grads(True, kind)
        y_s, gx_s, gp_s = _stack_grads(False, kind)
        np.testing.assert_allclose(y_r, y_s, atol=1e-12)
        np.testing.assert_allclose(gx_r, gx_s, rtol=1e-7, atol=1e-10)
        for a, b in zip(gp_r, gp_s):
            for k in a:
                np.testing.assert_allclose(a[k], b[k], rtol=1e-7, atol=1e-10, err_msg=k)

    def test_inputs_reconstructed(self):
        from hireformer.reformer import LayerCache, make_sublayers, reversible_backward, reversible_forward
        with precision("float64"):
            cfg = AttentionConfig(model_dim=D, n_heads=H, bucket_chunk_size=4)
            g = np.random.default_rng(0)
            x1, x2 = g.normal(size=(2, 9, D)), g.normal(size=(2, 9, D))
            cache = LayerCache()
            F, G = make_sublayers(_layer(), cfg, None, np.random.default_rng(3), cache)
            y1, y2 = reversible_forward(x1, x2, F, G)
            cache.replay = True
            r1, r2, _, _ = reversible_backward(y1, y2, np.zeros_like(y1), np.zeros_like(y2), F, G)
            np.testing.assert_allclose(r1, x1, atol=1e-10)
            np.testing.assert_allclose(r2, x2, atol=1e-10)

    def test_finite_difference(self):
        from hireformer.numerics.gradcheck import grad_check
        with precision("float64"):
            cfg = AttentionConfig(model_dim=8, n_heads=2, bucket_chunk_size=4, ffn_chunk_size=3)
            layers = [init_layer(np.random.default_rng(s), 8, 12, std=0.3) for s in (0, 1)]
            x = Tensor(np.random.default_rng(5).normal(size=(1, 7, 8)), requires_grad=True)

            def f(t):
                # fixed hashing generator: buckets depend only on the input
                y = reformer_stack(t, layers, cfg, gen=np.random.default_rng(2))
                return (y * y * np.arange(8)).sum()

            assert grad_check(f, x, h=1e-6) < 1e-5

    def test_empty_stack_is_layer_norm(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 3, D)))
        y = reformer_stack(x, [], AttentionConfig(model_dim=D, n_heads=H))
        np.testing.assert_allclose(y.data.mean(-1), 0, atol=1e-5)


class TestSpecExamples:
    def test_only_valid_position_attends_itself(self):
        cfg = AttentionConfig(model_dim=D, n_heads=H, bucket_chunk_size=4)
        p = _layer()
        x = np.random.default_rng(0).normal(size=(1, 6, D)).astype(np.float32)
        mask = np.zeros((1, 6), bool)
        mask[0, 2] = True
        v = x[0, 2] @ p["w_v"].data @ p["w_o"].data
        for kind in ("lsh", "full"):
            if kind == "lsh":
                out = lsh_attention(Tensor(x), p, cfg, mask, gen=np.random.default_rng(0))
            else:
                out = full_attention(Tensor(x), p, cfg, mask).output
            np.testing.assert_allclose(out.data[0, 2], v, atol=1e-5)

    def test_causal_first_position(self):
        cfg = AttentionConfig(model_dim=D, n_heads=H, causal=True, bucket_chunk_size=4)
        p = _layer()
        x = np.random.default_rng(1).normal(size=(1, 9, D))
        v = x[0, 0] @ p["w_v"].data @ p["w_o"].data
        out = lsh_attention(Tensor(x), p, cfg, gen=np.random.default_rng(0))
        np.testing.assert_allclose(out.data[0, 0], v, rtol=1e-4, atol=1e-5)

    def test_full_single_position(self):
        p = _layer()
        x = np.random.default_rng(1).normal(size=(1, 1, D))
        res = full_attention(Tensor(x), p, AttentionConfig(model_dim=D, n_heads=H))
        np.testing.assert_allclose(res.output.data[0, 0], x[0, 0] @ p["w_v"].data @ p["w_o"].data, rtol=1e-4)

    def test_uniform_keys_give_uniform_weights(self):
        p = _layer()
        x = np.tile(np.random.default_rng(1).normal(size=(1, 1, D)), (1, 5, 1))
        mask = np.array([[True, True, True, False, True]])
        w = full_attention(Tensor(x), p, AttentionConfig(model_dim=D, n_heads=H), mask).weights.data
        # self excluded: three other valid keys each
        expect = np.where(mask[0], 1 / 3, 0.0)
        for i in (0, 1, 2, 4):
            e = expect.copy()
            e[i] = 0
            np.testing.assert_allclose(w[0, :, i], np.broadcast_to(e, (H, 5)), atol=1e-6)

    def test_full_matches_naive_softmax(self):
        with precision("float64"):
            p = _layer()
            x = np.random.default_rng(2).normal(size=(1, 4, D))
            cfg = AttentionConfig(model_dim=D, n_heads=H, self_exclusion=False)
            got = full_attention(Tensor(x), p, cfg).output.data[0]
            qk = x[0] @ p["w_qk"].data
            v = x[0] @ p["w_v"].data
            heads = []
            for h in range(H):
                q = qk[:, h * 8:(h + 1) * 8]
                k = q / np.linalg.norm(q, axis=1, keepdims=True)
                s = q @ k.T / np.sqrt(8)
                a = np.exp(s - s.max(1, keepdims=True))
                heads.append((a / a.sum(1, keepdims=True)) @ v[:, h * 8:(h + 1) * 8])
            np.testing.assert_allclose(got, np.concatenate(heads, 1) @ p["w_o"].data, atol=1e-6)

    def test_zero_sublayers_are_identity(self):
        from hireformer.reformer import reversible_backward, reversible_forward
        x1, x2 = np.random.default_rng(0).normal(size=(2, 3, 4))
        zero = lambda t: t * 0.0  # noqa: E731
        y1, y2 = reversible_forward(x1, x2, zero, zero)
        assert np.array_equal(y1, x1) and np.array_equal(y2, x2)
        g1, g2 = np.ones_like(x1), 2 * np.ones_like(x2)
        _, _, d1, d2 = reversible_backward(y1, y2, g1, g2, zero, zero)
        assert np.array_equal(d1, g1) and np.array_equal(d2, g2)

    def test_ffn_zero_input_is_bias_path(self):
        p = _layer()
        p["b1"].data[:] = 0.3
        p["b2"].data[:] = -0.1
        out = chunked_ffn(Tensor(np.zeros((1, 4, D), np.float32)), p["w1"], p["b1"], p["w2"], p["b2"], 3)
        from hireformer.numerics.ops import gelu
        row = gelu(Tensor(p["b1"].data)).data @ p["w2"].data + p["b2"].data
        np.testing.assert_allclose(out.data[0], np.broadcast_to(row, (4, D)), rtol=1e-6)

    def test_one_full_layer_composition(self):
        from hireformer.numerics.ops import gelu
        with precision("float64"):
            cfg = AttentionConfig(model_dim=D, n_heads=H, attention_kind="full")
            p = _layer()
            x = np.random.default_rng(3).normal(size=(1, 3, D))
            got = reformer_stack(Tensor(x), [p], cfg).data

            def ln(z, g, b):
                mu = z.mean(-1, keepdims=True)
                var = z.var(-1, keepdims=True)
                return (z - mu) / np.sqrt(var + 1e-5) * g + b

            f = full_attention(Tensor(ln(x, p["ln1.g"].data, p["ln1.b"].data)), p, cfg).output.data
            y1 = x + f
            hdn = gelu(Tensor(ln(y1, p["ln2.g"].data, p["ln2.b"].data) @ p["w1"].data + p["b1"].data)).data
            y2 = x + hdn @ p["w2"].data + p["b2"].data
            ref = ln((y1 + y2) / 2, 1.0, 0.0)
            np.testing.assert_allclose(got, ref, atol=1e-10)

    def test_eight_layer_reconstruction_float32(self):
        from hireformer.reformer import LayerCache, make_sublayers, reversible_backward, reversible_forward
        cfg = AttentionConfig(model_dim=D, n_heads=H, bucket_chunk_size=4)
        layers = [init_layer(np.random.default_rng(s), D, 32) for s in range(8)]
        x = np.random.default_rng(0).normal(size=(2, 12, D)).astype(np.float32)
        caches = [LayerCache() for _ in layers]
        subs = [make_sublayers(p, cfg, None, np.random.default_rng(9), c) for p, c in zip(layers, caches)]
        a1, a2 = x, x
        for F, G in subs:
            a1, a2 = reversible_forward(a1, a2, F, G)
        z = np.zeros_like(x)
        for (F, G), c in zip(reversed(subs), reversed(caches)):
            c.replay = True
            a1, a2, _, _ = reversible_backward(a1, a2, z, z, F, G)
        assert max(np.abs(a1 - x).max(), np.abs(a2 - x).max()) < 1e-4

    def test_replay_without_buckets_is_contract_error(self):
        from hireformer.reformer import LayerCache, make_sublayers
        cfg = AttentionConfig(model_dim=D, n_heads=H)
        F, _ = make_sublayers(_layer(), cfg, None, None, LayerCache(replay=True))
        with pytest.raises(ContractError):
            F(Tensor(np.zeros((1, 4, D))))

    def test_rounds_raise_top1_coverage(self):
        # fraction of full-attention top-1 keys inside the candidate set, 100 inputs
        rounds_list = (1, 2, 4)
        hits = {r: 0 for r in rounds_list}
        for case in range(100):
            vec = np.random.default_rng(case).normal(size=(32, D))
            unit = vec / np.linalg.norm(vec, axis=1, keepdims=True)
            s = vec @ unit.T
            np.fill_diagonal(s, -np.inf)
            top = s.argmax(1)
            for r in rounds_list:
                cfg = AttentionConfig(model_dim=D, n_heads=1, n_hash_rounds=r, n_buckets=4)
                reach = candidate_sets(lsh_bucket(vec, cfg, np.random.default_rng(1000 + case)), 8)
                hits[r] += reach[np.arange(32), top].sum()
        assert hits[1] <= hits[2] <= hits[4]
        assert hits[4] > hits[1]
