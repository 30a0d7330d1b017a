import numpy as np
import pytest

from mfm import tensor as T
from mfm.encoder import (
    EncoderConfig,
    LayerFeatures,
    PretrainBudget,
    PretrainObjective,
    cell_token,
    encode,
    init_encoder,
    mean_pool,
    patchify,
    pretrain,
    token_cell,
)
from mfm.gradcheck import _encode_rows
from mfm.probe import DatasetSpec, gen_dataset
from mfm.tensor import ShapeError, Tensor, precision

SMALL = EncoderConfig(depth=2, dim=8, heads=2, patch=3, image_size=(6, 9), seed=3)


class TestPatchify:
    def test_paper_scale_tokenization(self):
        # 336x336 at stride 14 -> 24x24 = 576 tokens
        images = Tensor(np.zeros((1, 3, 336, 336), dtype=np.float32), dtype=np.float32)
        assert patchify(images, 14).shape == (1, 576, 3 * 14 * 14)

    def test_toy_tokenization(self):
        images = Tensor(np.zeros((2, 3, 36, 36)))
        assert patchify(images, 6).shape == (2, 36, 108)

    def test_indivisible_size_rejected(self):
        with pytest.raises(ShapeError):
            patchify(Tensor(np.zeros((1, 3, 35, 35))), 14)

    def test_spatial_order_round_trip(self):
        # encode each pixel's (row, col) patch coordinates into the image,
        # then recover them through the exposed token -> cell map
        p, rows, cols = 3, 2, 3
        img = np.zeros((1, 1, rows * p, cols * p))
        for r in range(rows * p):
            for c in range(cols * p):
                img[0, 0, r, c] = (r // p) * 10 + (c // p)
        tokens = patchify(Tensor(img), p)
        for t in range(rows * cols):
            r, c = token_cell(t, cols)
            assert cell_token(r, c, cols) == t
            assert np.all(tokens.data[0, t] == r * 10 + c)

    def test_values_match_slices(self, rng):
        img = rng.normal(size=(2, 3, 6, 9))
        tokens = patchify(Tensor(img), 3)
        # token 4 of a 2x3 grid is cell (1, 1)
        want = img[:, :, 3:6, 3:6].reshape(2, -1)
        assert np.allclose(tokens.data[:, 4, :], want)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ShapeError):
            EncoderConfig(patch=7)  # 36 % 7 != 0
        with pytest.raises(ShapeError):
            EncoderConfig(heads=5)  # 32 % 5 != 0
        with pytest.raises(ValueError):
            EncoderConfig(depth=0)

    def test_grid_and_tokens(self):
        cfg = EncoderConfig()
        assert cfg.grid == (6, 6)
        assert cfg.tokens == 36


class TestInit:
    def test_deterministic_from_seed(self):
        a, b = init_encoder(SMALL), init_encoder(SMALL)
        assert a.checksum() == b.checksum()

    def test_different_seeds_differ(self):
        other = EncoderConfig(depth=2, dim=8, heads=2, patch=3, image_size=(6, 9), seed=4)
        assert init_encoder(SMALL).checksum() != init_encoder(other).checksum()

    def test_param_count_closed_form(self):
        for cfg in (SMALL, EncoderConfig()):
            pset = init_encoder(cfg)
            assert pset.count_scalars() == cfg.param_count()

    def test_init_statistics(self):
        pset = init_encoder(EncoderConfig())
        w = pset["blk00/attn/q/w"].value.data
        assert abs(w.std() - 0.02) < 0.005
        assert np.all(pset["blk00/ln1/g"].value.data == 1.0)
        assert np.all(pset["embed/b"].value.data == 0.0)


class TestEncode:
    def test_output_shapes(self, rng):
        pset = init_encoder(SMALL)
        lf = encode(Tensor(rng.normal(size=(2, 3, 6, 9))), pset, SMALL)
        assert lf.n_layers == SMALL.depth
        assert all(t.shape == (2, SMALL.tokens, SMALL.dim) for t in lf.layers)

    def test_batch_permutation_equivariance(self, rng):
        pset = init_encoder(SMALL)
        imgs = rng.normal(size=(4, 3, 6, 9))
        perm = np.array([2, 0, 3, 1])
        lf = encode(Tensor(imgs), pset, SMALL)
        lf_perm = encode(Tensor(imgs[perm]), pset, SMALL)
        for a, b in zip(lf.layers, lf_perm.layers):
            assert np.allclose(a.data[perm], b.data, atol=1e-12)

    def test_shape_mismatch_rejected(self, rng):
        pset = init_encoder(SMALL)
        with pytest.raises(ShapeError):
            encode(Tensor(rng.normal(size=(2, 3, 9, 6))), pset, SMALL)

    def test_dual_precision_agreement(self, rng):
        imgs64 = rng.normal(size=(2, 3, 6, 9))
        with precision(64):
            pset = init_encoder(SMALL)
            out64 = encode(Tensor(imgs64), pset, SMALL).layers[-1].data
        with precision(32):
            pset32 = init_encoder(SMALL)
            out32 = encode(Tensor(imgs64.astype(np.float32)), pset32, SMALL).layers[-1].data
        assert np.max(np.abs(out64 - out32.astype(np.float64))) <= 1e-3

    def test_gradient_clean_sampled_coords(self):
        rows = _encode_rows(0, np.random.default_rng(0), n_coords=20)
        assert all(r.max_rel_error <= 1e-4 for r in rows)


class TestLayerFeatures:
    def test_validation(self, rng):
        t = Tensor(rng.normal(size=(2, 4, 8)))
        with pytest.raises(ShapeError):
            LayerFeatures(())
        with pytest.raises(ShapeError):
            LayerFeatures((t, Tensor(rng.normal(size=(2, 4, 7)))))
        lf = LayerFeatures((t, t))
        assert lf.layer(1) is t
        with pytest.raises(ShapeError):
            lf.layer(0)

    def test_mean_pool(self, rng):
        x = rng.normal(size=(2, 5, 3))
        assert np.allclose(mean_pool(Tensor(x)).data, x.mean(axis=1))


@pytest.fixture(scope="module")
def small_dataset():
    return gen_dataset(seed=3, n=80, spec=DatasetSpec())


class TestPretrain:
    def test_random_objective_returns_init_bitwise(self, small_dataset):
        with precision(32):
            init = init_encoder(SMALL)
            out = pretrain(
                init, PretrainObjective.RANDOM, small_dataset, PretrainBudget(steps=100), SMALL
            )
            assert out.checksum() == init.checksum()
            assert out is not init

    def test_zero_budget_warns_and_returns_init(self, small_dataset):
        with precision(32):
            init = init_encoder(SMALL)
            with pytest.warns(UserWarning, match="budget"):
                out = pretrain(
                    init, PretrainObjective.GLOBAL_SUPERVISED, small_dataset,
                    PretrainBudget(steps=0), SMALL,
                )
            assert out.checksum() == init.checksum()

    def test_supervised_cross_entropy_decreases(self, supervised_encoders):
        # 500-step runs on the default config, three seeds
        wins = 0
        for frozen in supervised_encoders.values():
            hist = frozen.history
            wins += np.mean(hist[-10:]) < hist[0]
        assert wins >= 2

    def test_masked_reconstruction_beats_mean_baseline(self, small_dataset):
        cfg = EncoderConfig(depth=2, dim=16, heads=2, seed=9)
        with precision(32):
            frozen = pretrain(
                init_encoder(cfg), PretrainObjective.MASKED_RECONSTRUCTION, small_dataset,
                PretrainBudget(steps=150, lr=2e-3), cfg, seed=4,
            )
        baseline = float(np.var(small_dataset.images))  # predict the dataset pixel mean
        assert np.mean(frozen.history[-10:]) < baseline

    def test_contrastive_objectives_run_and_descend(self, small_dataset):
        cfg = EncoderConfig(depth=2, dim=16, heads=2, seed=9)
        for objective in (PretrainObjective.GLOBAL_CONTRASTIVE, PretrainObjective.INSTANCE_CONTRASTIVE):
            with precision(32):
                frozen = pretrain(
                    init_encoder(cfg), objective, small_dataset,
                    PretrainBudget(steps=80, lr=2e-3), cfg, seed=5,
                )
            assert np.mean(frozen.history[-10:]) <= frozen.history[0]

    def test_pretrain_deterministic(self, small_dataset):
        cfg = EncoderConfig(depth=2, dim=16, heads=2, seed=9)
        with precision(32):
            init = init_encoder(cfg)
            a = pretrain(init, PretrainObjective.GLOBAL_SUPERVISED, small_dataset,
                         PretrainBudget(steps=20), cfg, seed=7)
            b = pretrain(init, PretrainObjective.GLOBAL_SUPERVISED, small_dataset,
                         PretrainBudget(steps=20), cfg, seed=7)
        assert a.checksum() == b.checksum()
