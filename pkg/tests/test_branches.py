import numpy as np
import pytest

import senca.numerics as nx
from senca.graph import build_knn
from senca.image import featurize_patch, image_forward, init_image_params
from senca.ingestion import ImageRaster, SpotTable
from senca.image import featurize_raster
from senca.numerics import Tape, Tensor
from senca.rna import init_rna_params, rna_forward, self_attention
from oracles import finite_difference, pool_naive, rel_error


def small_graph(n=5, k=2, seed=0):
    coords = np.random.default_rng(seed).uniform(0, 4, size=(n, 2))
    return build_knn(coords, k)


class TestRNA:
    def test_output_shape_and_finite(self):
        g = small_graph(8, 3)
        feats = np.random.default_rng(1).normal(size=(8, 6))
        p = init_rna_params(np.random.default_rng(0), 6, hidden=10, embed_dim=4)
        r = rna_forward(g, p, 0.2, training=True, rng_seed=3, features=feats)
        assert r.shape == (8, 4)
        assert np.all(np.isfinite(r.data))

    def test_single_spot(self):
        # a lone node mixes only with itself and attends to itself with weight 1
        p = init_rna_params(np.random.default_rng(0), 3, hidden=5, embed_dim=2)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 5)))
        _, w = self_attention(x, p)
        np.testing.assert_array_equal(w.data, [[1.0]])

    def test_identical_spots_identical_rows(self):
        coords = np.array([[0.0, 0.0], [1.0, 0.0]])
        g = build_knn(coords, 1)
        feats = np.tile(np.random.default_rng(2).normal(size=(1, 4)), (2, 1))
        p = init_rna_params(np.random.default_rng(0), 4, hidden=6, embed_dim=3)
        r = rna_forward(g, p, features=feats).data
        np.testing.assert_allclose(r[0], r[1], atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        coords = rng.uniform(0, 5, size=(9, 2))
        feats = rng.normal(size=(9, 5))
        p = init_rna_params(np.random.default_rng(0), 5, hidden=7, embed_dim=3)
        perm = rng.permutation(9)
        r = rna_forward(build_knn(coords, 3), p, features=feats).data
        rp = rna_forward(build_knn(coords[perm], 3), p, features=feats[perm]).data
        np.testing.assert_allclose(rp, r[perm], atol=1e-10)

    def test_attention_rows_sum_to_one(self):
        p = init_rna_params(np.random.default_rng(0), 4, hidden=6, embed_dim=3)
        _, w = self_attention(Tensor(np.random.default_rng(1).normal(size=(7, 6))), p)
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)

    def test_eval_deterministic(self):
        g = small_graph()
        feats = np.random.default_rng(4).normal(size=(5, 4))
        p = init_rna_params(np.random.default_rng(0), 4, hidden=6, embed_dim=3)
        a = rna_forward(g, p, 0.2, training=False, features=feats).data
        b = rna_forward(g, p, 0.2, training=False, rng_seed=99, features=feats).data
        np.testing.assert_array_equal(a, b)

    def test_shape_error(self):
        p = init_rna_params(np.random.default_rng(0), 4, hidden=6, embed_dim=3)
        with pytest.raises(nx.ShapeError):
            rna_forward(small_graph(), p, features=np.ones((5, 3)))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_w1(self, seed):
        g = small_graph(5, 2, seed)
        feats = np.random.default_rng(10 + seed).normal(size=(5, 4))
        p = init_rna_params(np.random.default_rng(seed), 4, hidden=6, embed_dim=3)

        def f():
            return nx.total(rna_forward(g, p, 0.2, training=True, rng_seed=seed, features=feats)).item()

        with Tape():
            nx.backward(nx.total(rna_forward(g, p, 0.2, training=True, rng_seed=seed, features=feats)), p.values())
        for name in ("rna.W1", "rna.Wq", "rna.ln_gain", "rna.ff_b1", "rna.W_out"):
            assert rel_error(p[name].grad, finite_difference(f, p[name].data)) < 1e-3, name


class TestFeaturizer:
    def test_uniform_gray(self):
        out = featurize_patch(np.full((20, 20, 3), 128, dtype=np.uint8))
        assert out.shape == (768,)
        np.testing.assert_allclose(out, 128 / 255)

    def test_linearity(self):
        patch = np.random.default_rng(0).integers(0, 128, size=(33, 40, 3))
        np.testing.assert_allclose(featurize_patch(patch * 2), 2 * featurize_patch(patch))

    @pytest.mark.parametrize("shape", [(32, 32, 3), (37, 21, 3), (10, 10, 3)])
    def test_matches_naive_pooling(self, shape):
        patch = np.random.default_rng(1).integers(0, 256, size=shape, dtype=np.uint8)
        np.testing.assert_allclose(featurize_patch(patch), pool_naive(patch, 16), atol=1e-12)

    def test_channel_major(self):
        patch = np.zeros((16, 16, 3), dtype=np.uint8)
        patch[..., 1] = 255
        out = featurize_patch(patch)
        assert np.all(out[:256] == 0) and np.all(out[256:512] == 1) and np.all(out[512:] == 0)

    def test_raster_pipeline(self):
        px = np.random.default_rng(2).integers(0, 256, size=(30, 30, 3), dtype=np.uint8)
        spots = SpotTable(("a", "b", "c"), np.array([[5.0, 5.0], [10.0, 5.0], [25.0, 25.0]]))
        feats = featurize_raster(ImageRaster(30, 30, px), spots)
        assert feats.shape == (3, 768)


class TestImageForward:
    def test_zero_weights(self):
        p = init_image_params(np.random.default_rng(0), "downsample_mlp", 768, embed_dim=8)
        for t in p.values():
            t.data = np.zeros_like(t.data)
        h = image_forward(np.random.default_rng(1).uniform(size=(4, 768)), p)
        np.testing.assert_array_equal(h.data, np.zeros((4, 8)))

    @pytest.mark.parametrize("mode,width", [("downsample_mlp", 768), ("precomputed", 32)])
    def test_identical_inputs(self, mode, width):
        p = init_image_params(np.random.default_rng(0), mode, width, embed_dim=8)
        row = np.random.default_rng(1).uniform(size=(1, width))
        h = image_forward(np.tile(row, (3, 1)), p).data
        np.testing.assert_array_equal(h[0], h[2])
        assert h.shape == (3, 8)

    def test_width_mismatch(self):
        p = init_image_params(np.random.default_rng(0), "precomputed", 32, embed_dim=8)
        with pytest.raises(nx.ShapeError):
            image_forward(np.ones((2, 31)), p)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_wa(self, seed):
        p = init_image_params(np.random.default_rng(seed), "downsample_mlp", 12, embed_dim=4, mlp_hidden=6)
        feats = np.random.default_rng(seed + 1).uniform(size=(5, 12))
        with Tape():
            nx.backward(nx.total(image_forward(feats, p)), p.values())
        numeric = finite_difference(lambda: nx.total(image_forward(feats, p)).item(), p["img.W_a"].data)
        assert rel_error(p["img.W_a"].grad, numeric) < 1e-3
