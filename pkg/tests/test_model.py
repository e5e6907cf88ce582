import numpy as np
import pytest

from smpnn import autodiff as ad
from smpnn.graph import induced_subgraph, make_synthetic, normalize_adjacency
from smpnn.model import (
    ALPHA_INIT,
    gradcheck_params,
    BlockConfig,
    ModelSpec,
    as_const_vars,
    as_param_vars,
    block_forward,
    hybrid_block_forward,
    init_params,
    linear_global_attention,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)


def small_setup(n=8, d=4, depth=2, config=BlockConfig(), seed=0, p=0.5):
    g, _, _ = make_synthetic("erdos_renyi", num_nodes=n, p=p, seed=seed)
    adj = normalize_adjacency(g)
    spec = ModelSpec(in_dim=d, hidden_dim=d, out_dim=3, depth=depth, config=config)
    params = init_params(spec, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(-1, 1, (n, d))
    return g, adj, spec, params, x


class TestInitParams:
    def test_same_seed_bitwise_identical(self):
        spec = ModelSpec(4, 8, 3, 2)
        a = init_params(spec, seed=7)
        b = init_params(spec, seed=7)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_alpha_init_value(self):
        spec = ModelSpec(4, 8, 3, 3)
        params = init_params(spec, seed=0)
        for l in range(3):
            assert float(params[f"layer{l}.alpha1"]) == ALPHA_INIT
            assert float(params[f"layer{l}.alpha2"]) == ALPHA_INIT

    def test_layernorm_affine_init(self):
        params = init_params(ModelSpec(4, 8, 3, 1), seed=0)
        np.testing.assert_array_equal(params["layer0.ln1_gamma"], np.ones(8))
        np.testing.assert_array_equal(params["layer0.ln1_beta"], np.zeros(8))

    def test_weight_mean_near_zero(self):
        # Monte-Carlo oracle: per-entry uniform(-b, b) has mean 0 and
        # variance b^2/3; the empirical mean over m draws should be within
        # 3 sigma of zero.
        d = 10
        draws = []
        for seed in range(100):
            draws.append(init_params(ModelSpec(d, d, d, 1), seed=seed)["layer0.W1"].ravel())
        samples = np.concatenate(draws)
        bound = np.sqrt(6.0 / (2 * d))
        sigma = bound / np.sqrt(3.0)
        assert abs(samples.mean()) < 3 * sigma / np.sqrt(samples.size)

    def test_ablated_configs_drop_parameters(self):
        cfg = BlockConfig(use_feedforward=False, learn_alpha=False, use_gcn_layernorm=False)
        params = init_params(ModelSpec(4, 8, 3, 1, cfg), seed=0)
        assert set(params) == {"proj_in", "layer0.W1", "proj_out"}


class TestBlockForward:
    def test_alpha_zero_is_exact_identity(self):
        g, adj, spec, params, x = small_setup()
        for l in range(spec.depth):
            params[f"layer{l}.alpha1"] = np.array(0.0)
            params[f"layer{l}.alpha2"] = np.array(0.0)
        pv = as_const_vars(params)
        out = block_forward(ad.constant(x), adj, pv, 0, spec.config)
        assert np.array_equal(out.value, x)

    def test_default_init_drift_below_1e4(self):
        g, adj, spec, params, x = small_setup(n=16, d=8)
        x = x / np.abs(x).max()  # max-norm 1
        pv = as_const_vars(params)
        out = block_forward(ad.constant(x), adj, pv, 0, spec.config)
        drift = np.abs(out.value - x).max() / max(np.abs(x).max(), 1.0)
        assert drift < 1e-4

    def test_no_residual_kernel_indistinguishable_inputs(self):
        # On a complete graph the convolution kills rank-one perturbations
        # u w^T with u orthogonal to the all-ones vector; without LayerNorm
        # in front, the pre-residual sublayer output is identical for both
        # inputs.
        n, d = 6, 4
        g, _, _ = make_synthetic("complete", num_nodes=n, feature_dim=d, seed=0)
        adj = normalize_adjacency(g)
        cfg = BlockConfig(use_residual=False, use_gcn_layernorm=False, use_feedforward=False)
        spec = ModelSpec(d, d, d, 1, cfg)
        params = init_params(spec, seed=1)
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, (n, d))
        u = np.zeros((n, 1)); u[0, 0] = 1.0; u[1, 0] = -1.0
        w = rng.uniform(-1, 1, (1, d))
        pv = as_const_vars(params)
        out1 = block_forward(ad.constant(x), adj, pv, 0, cfg)
        out2 = block_forward(ad.constant(x + u @ w), adj, pv, 0, cfg)
        np.testing.assert_allclose(out1.value, out2.value, atol=1e-12)

    def test_rank_collapse_without_residual(self):
        # Complete graph: every row of the normalized adjacency is the same,
        # so the no-residual sublayer output is constant across rows for any
        # input and weights.
        n, d = 7, 5
        g, _, _ = make_synthetic("complete", num_nodes=n, feature_dim=d, seed=3)
        adj = normalize_adjacency(g)
        cfg = BlockConfig(use_residual=False, use_feedforward=False)
        spec = ModelSpec(d, d, d, 1, cfg)
        rng = np.random.default_rng(4)
        for trial in range(5):
            params = init_params(spec, seed=trial)
            x = rng.uniform(-3, 3, (n, d))
            pv = as_const_vars(params)
            out = block_forward(ad.constant(x), adj, pv, 0, cfg).value
            np.testing.assert_allclose(out, np.tile(out[:1], (n, 1)), atol=1e-10)

    def test_no_feedforward_returns_h2(self):
        g, adj, _, _, x = small_setup()
        cfg = BlockConfig(use_feedforward=False)
        spec = ModelSpec(4, 4, 3, 1, cfg)
        params = init_params(spec, seed=5)
        pv = as_const_vars(params)
        out = block_forward(ad.constant(x), adj, pv, 0, cfg)
        # With alpha tiny the output stays within drift distance of x.
        assert np.abs(out.value - x).max() < 1e-4

    def test_nan_detection_names_layer(self):
        g, adj, spec, params, x = small_setup()
        x = x.copy()
        x[0, 0] = np.nan
        pv = as_const_vars(params)
        with pytest.raises(FloatingPointError, match="layer 0"):
            block_forward(ad.constant(x), adj, pv, 0, spec.config)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        g, adj, spec, params, x = small_setup(n=10, d=4)
        perm = rng.permutation(10)
        gp, _ = induced_subgraph(g, perm)
        adj_p = normalize_adjacency(gp)
        pv = as_const_vars(params)
        out = block_forward(ad.constant(x), adj, pv, 0, spec.config).value
        out_p = block_forward(ad.constant(x[perm]), adj_p, pv, 0, spec.config).value
        np.testing.assert_allclose(out_p, out[perm], atol=1e-10)


class TestModelForward:
    def test_depth_zero_is_linear_map(self):
        g, adj, _, _, x = small_setup()
        spec = ModelSpec(4, 4, 3, 0)
        params = init_params(spec, seed=0)
        out = model_forward(x, adj, as_const_vars(params), spec)
        np.testing.assert_allclose(out.value, x @ params["proj_in"] @ params["proj_out"], atol=1e-14)

    def test_alpha_zero_collapses_to_projections(self):
        g, adj, spec, params, x = small_setup(depth=3)
        for l in range(spec.depth):
            params[f"layer{l}.alpha1"] = np.array(0.0)
            params[f"layer{l}.alpha2"] = np.array(0.0)
        out = model_forward(x, adj, as_const_vars(params), spec)
        np.testing.assert_allclose(
            out.value, x @ params["proj_in"] @ params["proj_out"], atol=1e-14
        )

    def test_identity_limit_exact(self):
        # alpha = 0 plus identity projections: the whole model is the
        # identity map, bitwise.
        g, adj, _, _, x = small_setup(n=9, d=4, depth=4)
        spec = ModelSpec(4, 4, 4, 4)
        params = init_params(spec, seed=2)
        params["proj_in"] = np.eye(4)
        params["proj_out"] = np.eye(4)
        for l in range(4):
            params[f"layer{l}.alpha1"] = np.array(0.0)
            params[f"layer{l}.alpha2"] = np.array(0.0)
        out = model_forward(x, adj, as_const_vars(params), spec)
        assert np.array_equal(out.value, x)

    def test_gradients_match_fd_depth3(self):
        g, adj, _, _, _ = small_setup(n=12, d=4)
        spec = ModelSpec(4, 4, 3, 3)
        params = gradcheck_params(spec, seed=3)
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, (12, 4))

        def loss(pv):
            return ad.mean_all(model_forward(x, adj, pv, spec))

        report = ad.grad_check(loss, params, tolerance=1e-5)
        assert report.passed, report.max_rel_err


class TestLinearGlobalAttention:
    def attention_inputs(self, n=5, d=3, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (n, d))
        wq, wk, wv = (rng.uniform(-1, 1, (d, d)) for _ in range(3))
        return x, wq, wk, wv

    def test_identical_features_give_uniform_weights(self):
        n, d = 6, 3
        rng = np.random.default_rng(1)
        x = np.tile(rng.uniform(-1, 1, (1, d)), (n, 1))
        _, wq, wk, wv = self.attention_inputs(n, d, seed=2)
        q = x @ wq
        k = x @ wk
        q_sn = q.sum(axis=0) / np.linalg.norm(q.sum(axis=0))
        k_n = k / np.linalg.norm(k)
        scores = q_sn @ k_n.T
        e = np.exp(scores - scores.max())
        weights = e / e.sum()
        np.testing.assert_allclose(weights, np.full(n, 1.0 / n), atol=1e-12)

    def test_output_rows_identical(self):
        x, wq, wk, wv = self.attention_inputs()
        out = linear_global_attention(
            ad.constant(x), ad.constant(wq), ad.constant(wk), ad.constant(wv)
        ).value
        np.testing.assert_allclose(out, np.tile(out[:1], (len(x), 1)), atol=1e-12)

    def test_broadcast_matches_explicit_kronecker(self):
        # Dense oracle: (a kron 1_N) V with 1_N a column of ones equals the
        # broadcast of the pooled row to all rows.
        x, wq, wk, wv = self.attention_inputs(n=5, d=3, seed=4)
        n = len(x)
        out = linear_global_attention(
            ad.constant(x), ad.constant(wq), ad.constant(wk), ad.constant(wv)
        ).value
        q = x @ wq
        k = x @ wk
        v = x @ wv
        q_sn = (q.sum(axis=0) / np.linalg.norm(q.sum(axis=0)))[None, :]
        k_n = k / np.linalg.norm(k)
        scores = q_sn @ k_n.T
        e = np.exp(scores - scores.max())
        a = e / e.sum()
        explicit = np.kron(a, np.ones((n, 1))) @ v
        np.testing.assert_allclose(out, explicit, atol=1e-13)

    def test_weights_sum_to_one(self):
        x, wq, wk, wv = self.attention_inputs(n=9, d=4, seed=5)
        q = ad.matmul(ad.constant(x), ad.constant(wq))
        k = ad.matmul(ad.constant(x), ad.constant(wk))
        q_sn = ad.l2_normalize_rows(ad.sum_rows(q))
        k_n = ad.scale_by_global_norm(k)
        weights = ad.softmax_row(ad.matmul(q_sn, ad.transpose(k_n)))
        assert float(weights.value.sum()) == pytest.approx(1.0, abs=1e-12)

    def test_degenerate_query_sum_rejected(self):
        x = np.zeros((3, 2))
        w = np.eye(2)
        with pytest.raises(ValueError, match="zero norm"):
            linear_global_attention(
                ad.constant(x), ad.constant(w), ad.constant(w), ad.constant(w)
            )


class TestHybridBlock:
    def test_zero_value_projection_equals_standard_block(self):
        cfg = BlockConfig(use_attention=True)
        g, adj, _, _, x = small_setup(n=8, d=4)
        spec = ModelSpec(4, 4, 3, 1, cfg)
        params = init_params(spec, seed=8)
        params["layer0.attn0.WV"] = np.zeros((4, 4))
        pv = as_const_vars(params)
        hybrid = hybrid_block_forward(ad.constant(x), adj, pv, 0, cfg).value
        std = block_forward(ad.constant(x), adj, pv, 0, BlockConfig()).value
        np.testing.assert_allclose(hybrid, std, atol=1e-14)

    def test_alpha1_zero_freezes_h2(self):
        cfg = BlockConfig(use_attention=True, use_feedforward=False)
        g, adj, _, _, x = small_setup(n=8, d=4)
        spec = ModelSpec(4, 4, 3, 1, cfg)
        params = init_params(spec, seed=9)
        params["layer0.alpha1"] = np.array(0.0)
        pv = as_const_vars(params)
        out = hybrid_block_forward(ad.constant(x), adj, pv, 0, cfg).value
        assert np.array_equal(out, x)

    def test_gradient_check(self):
        cfg = BlockConfig(use_attention=True)
        g, _, _, _, _ = small_setup(n=8, d=4)
        adj = normalize_adjacency(g)
        spec = ModelSpec(4, 4, 4, 1, cfg)
        params = gradcheck_params(spec, seed=10)
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, (8, 4))

        def loss(pv):
            return ad.mean_all(hybrid_block_forward(ad.constant(x), adj, pv, 0, cfg))

        block_params = {k: v for k, v in params.items() if k.startswith("layer0.")}
        report = ad.grad_check(loss, block_params, tolerance=1e-5)
        assert report.passed, report.max_rel_err


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        spec = ModelSpec(6, 8, 3, 2, BlockConfig(use_attention=True, num_heads=2))
        params = init_params(spec, seed=12)
        path = tmp_path / "model.npz"
        save_checkpoint(path, params, spec)
        loaded, spec2 = load_checkpoint(path)
        assert spec2 == spec
        assert loaded.keys() == params.keys()
        for k in params:
            assert np.array_equal(loaded[k], params[k])
