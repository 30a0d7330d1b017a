import numpy as np
import pytest

from mfm import tensor as T
from mfm.encoder import LayerFeatures
from mfm.fusion import (
    FusionConfig,
    branch_merge,
    count_params,
    default_deep_quarter,
    fuse,
    init_fusion,
    mlp_align,
)
from mfm.merge import apply_lln
from mfm.tensor import ShapeError, Tensor


def rand_layers(rng, n=3, b=2, t=4, d=4):
    return LayerFeatures(tuple(Tensor(rng.normal(size=(b, t, d))) for _ in range(n)))


def tiny_cfg(**kw):
    base = dict(depth_a=3, depth_b=3, dim_a=4, dim_b=4, out_dim=5, mlp_blocks=1, mlp_ratio=4)
    base.update(kw)
    return FusionConfig(**base)


class TestConfig:
    def test_deep_quarter_of_24_layer_stack(self):
        assert default_deep_quarter(24) == (19, 20, 21, 22, 23, 24)

    def test_deep_quarter_of_toy_stack(self):
        assert default_deep_quarter(8) == (7, 8)

    def test_default_projector_is_two_blocks_ratio_four(self):
        cfg = FusionConfig()
        assert cfg.mlp_blocks == 2
        assert cfg.mlp_ratio == 4

    def test_default_layer_sets(self):
        cfg = FusionConfig(depth_a=8, depth_b=8)
        assert cfg.layers_a == tuple(range(1, 9))
        assert cfg.layers_b == (7, 8)

    def test_out_of_grid_warns(self):
        with pytest.warns(UserWarning, match="validated grid"):
            tiny_cfg(mlp_blocks=3)
        with pytest.warns(UserWarning, match="validated grid"):
            tiny_cfg(mlp_ratio=5)

    def test_bad_layer_sets_rejected(self):
        with pytest.raises(ValueError):
            tiny_cfg(branch_a_layers=())
        with pytest.raises(ValueError):
            tiny_cfg(branch_b_layers=(0, 1))
        with pytest.raises(ValueError):
            tiny_cfg(branch_b_layers=(1, 4))


class TestBranchMerge:
    def test_one_hot_dominant_matches_lln_of_layer(self, rng):
        cfg = tiny_cfg()
        params = init_fusion(cfg, seed=0)
        for p in params.lln_a.pset:
            p.value = Tensor(p.value.data + rng.normal(0.0, 0.2, size=p.value.shape))
        lf = rand_layers(rng)
        logits = np.zeros(3)
        logits[1] = 40.0
        out = branch_merge(lf, cfg.layers_a, params.lln_a, Tensor(logits))
        want = apply_lln(lf.layer(2), params.lln_a, 1)
        assert np.max(np.abs(out.data - want.data)) <= 1e-6

    def test_singleton_layer_set_weight_exactly_one(self, rng):
        cfg = tiny_cfg(branch_b_layers=(3,))
        params = init_fusion(cffg := cfg, seed=0)
        lf = rand_layers(rng)
        for logit_value in (-50.0, 0.0, 17.5):
            out = branch_merge(lf, cfg.layers_b, params.lln_b, Tensor([logit_value]))
            want = apply_lln(lf.layer(3), params.lln_b, 0)
            assert np.array_equal(out.data, want.data)

    def test_empty_or_out_of_range_set_rejected(self, rng):
        cfg = tiny_cfg()
        params = init_fusion(cfg, seed=0)
        lf = rand_layers(rng)
        with pytest.raises(ShapeError):
            branch_merge(lf, (), params.lln_a, Tensor(np.zeros(0)))
        with pytest.raises(ShapeError):
            branch_merge(lf, (1, 4), params.lln_a, Tensor(np.zeros(2)))


class TestMlpAlign:
    def test_zero_blocks_identity_weights_pass_through(self, rng):
        cfg = tiny_cfg(mlp_blocks=0)
        params = init_fusion(cfg, seed=0)  # m=0 linear starts as identity
        x = Tensor(rng.normal(size=(2, 4, 4)))
        out = mlp_align(x, 0, cfg.mlp_ratio, params.mlp)
        assert np.allclose(out.data, x.data, atol=1e-12)

    def test_hidden_width_is_ratio_times_dim(self):
        cfg = FusionConfig(depth_a=2, depth_b=2, dim_a=16, dim_b=16, out_dim=8,
                           mlp_blocks=1, mlp_ratio=4)
        params = init_fusion(cfg, seed=0)
        assert params.mlp["fusion/mlp/b00/w1"].value.shape == (16, 64)

    def test_block_count(self):
        cfg = tiny_cfg(mlp_blocks=2)
        params = init_fusion(cfg, seed=0)
        names = [n for n in params.mlp.names() if n.endswith("/w1")]
        assert len(names) == 2

    def test_negative_blocks_rejected(self, rng):
        cfg = tiny_cfg()
        params = init_fusion(cfg, seed=0)
        with pytest.raises(ValueError):
            mlp_align(Tensor(rng.normal(size=(2, 4, 4))), -1, 4, params.mlp)


class TestFuse:
    def test_output_shape_contract(self, rng):
        cfg = FusionConfig(depth_a=8, depth_b=8, dim_a=32, dim_b=32, out_dim=64)
        params = init_fusion(cfg, seed=0)
        lf_a = rand_layers(rng, n=8, b=2, t=36, d=32)
        lf_b = rand_layers(rng, n=8, b=2, t=36, d=32)
        assert fuse(lf_a, lf_b, cfg, params).shape == (2, 36, 64)

    def test_zero_projection_weight_gives_bias(self, rng):
        cfg = tiny_cfg()
        params = init_fusion(cfg, seed=0)
        params.proj_w.value = Tensor(np.zeros((8, 5)))
        params.proj_b.value = Tensor(np.array([1.0, -2.0, 0.5, 3.0, 0.0]))
        out = fuse(rand_layers(rng), rand_layers(rng), cfg, params)
        assert np.allclose(out.data, params.proj_b.value.data)

    def test_token_count_mismatch_names_both(self, rng):
        cfg = tiny_cfg()
        params = init_fusion(cfg, seed=0)
        lf_a = rand_layers(rng, t=4)
        lf_b = rand_layers(rng, t=6)
        with pytest.raises(ShapeError, match="4.*6"):
            fuse(lf_a, lf_b, cfg, params)

    def test_deterministic_with_frozen_params(self, rng):
        cfg = tiny_cfg()
        params = init_fusion(cfg, seed=0)
        lf_a, lf_b = rand_layers(rng), rand_layers(rng)
        a = fuse(lf_a, lf_b, cfg, params).data
        b = fuse(lf_a, lf_b, cfg, params).data
        assert np.array_equal(a, b)

    def test_token_permutation_equivariance(self, rng):
        cfg = tiny_cfg()
        params = init_fusion(cfg, seed=1)
        lf_a, lf_b = rand_layers(rng), rand_layers(rng)
        perm = np.array([2, 0, 3, 1])
        pa = LayerFeatures(tuple(Tensor(t.data[:, perm, :]) for t in lf_a.layers))
        pb = LayerFeatures(tuple(Tensor(t.data[:, perm, :]) for t in lf_b.layers))
        out = fuse(lf_a, lf_b, cfg, params).data
        out_perm = fuse(pa, pb, cfg, params).data
        assert np.allclose(out[:, perm, :], out_perm, atol=1e-10)

    def test_degenerates_to_composed_ops(self, rng):
        # one-hot beta at the deepest branch-B layer, m=0 identity projector:
        # fuse == [branch-A merge, LLN(last B layer)] through the final linear
        cfg = tiny_cfg(mlp_blocks=0)
        params = init_fusion(cfg, seed=2)
        beta = np.zeros(len(cfg.layers_b))
        beta[-1] = 40.0
        params.beta_logits.value = Tensor(beta)
        lf_a, lf_b = rand_layers(rng), rand_layers(rng)
        got = fuse(lf_a, lf_b, cfg, params).data

        va = branch_merge(lf_a, cfg.layers_a, params.lln_a, params.alpha_logits.value)
        vb = apply_lln(lf_b.layer(cfg.layers_b[-1]), params.lln_b, len(cfg.layers_b) - 1)
        want = T.linear(T.concat([va, vb], axis=-1), params.proj_w.value, params.proj_b.value).data
        assert np.max(np.abs(got - want)) <= 1e-6


class TestCountParams:
    def test_matches_constructed_parameters(self):
        for kw in ({}, {"mlp_blocks": 0}, {"mlp_blocks": 4, "mlp_ratio": 8},
                   {"lln_shared": True}, {"branch_b_layers": (2, 3)}):
            cfg = tiny_cfg(**kw)
            params = init_fusion(cfg, seed=0)
            actual = sum(p.value.size for p in params.parameters())
            assert count_params(cfg) == actual, kw

    def test_m0_vs_m2_difference_formula(self):
        d2, r = 4, 4
        c0 = count_params(tiny_cfg(mlp_blocks=0))
        c2 = count_params(tiny_cfg(mlp_blocks=2))
        block = 2 * r * d2 * d2 + r * d2 + d2 + 2 * d2
        assert c2 - c0 == 2 * block - (d2 * d2 + d2)

    def test_doubling_out_dim(self):
        cfg1 = tiny_cfg(out_dim=5)
        cfg2 = tiny_cfg(out_dim=10)
        d1, d2 = 4, 4
        assert count_params(cfg2) - count_params(cfg1) == (d1 + d2) * 5 + 5

    def test_alpha_logit_count_matches_layer_set(self):
        cfg = tiny_cfg(branch_a_layers=(1, 3))
        params = init_fusion(cfg, seed=0)
        assert params.alpha_logits.value.size == len(cfg.layers_a) == 2

    def test_simplex_invariants_of_fresh_params(self):
        params = init_fusion(tiny_cfg(), seed=0)
        from mfm.merge import weights_from_logits

        for logits in (params.alpha_logits, params.beta_logits):
            w = weights_from_logits(logits.value).data
            assert np.all(w >= 0) and abs(w.sum() - 1.0) <= 1e-6


class TestSerialization:
    def test_fusion_prefix_round_trip(self, tmp_path):
        params = init_fusion(tiny_cfg(), seed=3)
        pset = params.parameter_set()
        assert all(name.startswith("fusion/") for name in pset.names())
        path = tmp_path / "fusion.bin"
        pset.save(path)
        from mfm.params import ParameterSet

        loaded = ParameterSet.load(path)
        assert loaded.names() == sorted(pset.names())
