import numpy as np
import pytest

from erda.losses import finite_diff_grad
from erda.network import (
    MlpSpec,
    NetConfig,
    Parameters,
    SegNet,
    StaleTraceError,
    backward,
    forward,
    init_params,
    init_segnet,
    knn_mean_aggregate,
)
from erda import kernels


def fd_check(fn, arr, analytic, rtol=1e-5):
    fd = finite_diff_grad(lambda x: fn(x), arr, eps=1e-6)
    scale = np.maximum(np.abs(fd), np.abs(analytic))
    err = np.abs(fd - analytic) / np.maximum(scale, 1e-6)
    assert err.max() < rtol, err.max()


class TestSpec:
    def test_zero_width(self):
        with pytest.raises(ValueError):
            MlpSpec((4, 0))

    def test_needs_a_layer(self):
        with pytest.raises(ValueError):
            MlpSpec((4,))


class TestInit:
    def test_deterministic(self):
        spec = MlpSpec((3, 5, 2))
        a, b = init_params(spec, 9), init_params(spec, 9)
        for x, y in zip(a.arrays(), b.arrays()):
            assert x.tobytes() == y.tobytes()

    def test_bound(self):
        p = init_params(MlpSpec((4, 4)), 0)
        assert np.all(np.abs(p.weights[0]) <= 0.5)
        np.testing.assert_array_equal(p.biases[0], 0.0)


class TestForward:
    def test_identity_layer(self):
        spec = MlpSpec((3, 3))
        params = Parameters([np.eye(3)], [np.zeros(3)])
        x = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(forward(params, spec, x)[0], x)

    def test_zero_input(self):
        spec = MlpSpec((3, 6, 2))
        out, _ = forward(init_params(spec, 1), spec, np.zeros((5, 3)))
        np.testing.assert_array_equal(out, 0.0)

    def test_dot_product(self):
        spec = MlpSpec((2, 1))
        out, _ = forward(Parameters([np.ones((2, 1))], [np.zeros(1)]), spec, [[2.0, 3.0]])
        assert out[0, 0] == 5.0

    def test_shape_mismatch(self):
        spec = MlpSpec((2, 1))
        with pytest.raises(ValueError):
            forward(init_params(spec, 0), spec, np.zeros((3, 4)))

    def test_batch_equivariance(self):
        spec = MlpSpec((4, 8, 3))
        params = init_params(spec, 2)
        x = np.random.default_rng(2).normal(size=(10, 4))
        perm = np.random.default_rng(3).permutation(10)
        np.testing.assert_array_equal(forward(params, spec, x[perm])[0], forward(params, spec, x)[0][perm])


class TestBackward:
    def test_zero_grads(self):
        spec = MlpSpec((3, 4, 2))
        params = init_params(spec, 0)
        _, trace = forward(params, spec, np.ones((2, 3)))
        grads, gin = backward(trace, params, spec, np.zeros((2, 2)))
        assert all(np.all(a == 0) for a in grads.arrays())
        np.testing.assert_array_equal(gin, 0.0)

    def test_linear_sum(self):
        spec = MlpSpec((3, 2))
        params = init_params(spec, 0)
        x = np.random.default_rng(1).normal(size=(6, 3))
        _, trace = forward(params, spec, x)
        grads, _ = backward(trace, params, spec, np.ones((6, 2)))
        np.testing.assert_allclose(grads.weights[0], np.tile(x.sum(axis=0)[:, None], (1, 2)))

    def test_stale_trace(self):
        spec = MlpSpec((3, 2))
        params = init_params(spec, 0)
        _, trace = forward(params, spec, np.ones((1, 3)))
        params.version += 1
        with pytest.raises(StaleTraceError):
            backward(trace, params, spec, np.ones((1, 2)))
        with pytest.raises(StaleTraceError):
            backward(trace, init_params(spec, 0), spec, np.ones((1, 2)))

    @pytest.mark.parametrize("widths,final_linear,batch", [
        ((3, 8, 2), True, 16), ((5, 4, 6, 3), False, 7), ((2, 8, 8, 8), True, 12),
    ])
    def test_finite_differences(self, widths, final_linear, batch):
        rng = np.random.default_rng(sum(widths))
        spec = MlpSpec(widths, final_linear=final_linear)
        params = init_params(spec, 4)
        for b in params.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
        x = rng.normal(size=(batch, spec.d_in))
        direction = rng.normal(size=(batch, spec.d_out))
        _, trace = forward(params, spec, x)
        grads, gin = backward(trace, params, spec, direction)
        loss = lambda: float(np.sum(direction * forward(params, spec, x)[0]))  # noqa: E731
        for arr, g in zip(params.arrays(), grads.arrays()):
            def fn(v, arr=arr):
                saved = arr.copy()
                arr[...] = v
                out = loss()
                arr[...] = saved
                return out
            fd_check(fn, arr.copy(), g)
        fd_check(lambda v: float(np.sum(direction * forward(params, spec, v)[0])), x, gin)


class TestKnnAggregate:
    def test_k1_identity(self):
        pts = np.random.default_rng(0).normal(size=(20, 3))
        feats = np.random.default_rng(1).normal(size=(20, 4))
        np.testing.assert_array_equal(knn_mean_aggregate(pts, feats, 1), feats)

    def test_kN_global_mean(self):
        pts = np.random.default_rng(0).normal(size=(15, 3))
        feats = np.random.default_rng(1).normal(size=(15, 2))
        np.testing.assert_allclose(knn_mean_aggregate(pts, feats, 15),
                                   np.tile(feats.mean(axis=0), (15, 1)), atol=1e-14)

    def test_collinear_tie(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        np.testing.assert_array_equal(knn_mean_aggregate(pts, np.array([0.0, 3.0, 6.0]), 2),
                                      [1.5, 1.5, 4.5])

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            knn_mean_aggregate(np.zeros((3, 3)), np.zeros((3, 1)), 4)

    def test_duplicate_points_keep_self(self):
        pts = np.zeros((4, 3))
        feats = np.arange(4.0)[:, None]
        np.testing.assert_array_equal(knn_mean_aggregate(pts, feats, 1), feats)

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(40, 3))
        feats = rng.normal(size=(40, 3))
        perm = rng.permutation(40)
        np.testing.assert_allclose(knn_mean_aggregate(pts[perm], feats[perm], 5),
                                   knn_mean_aggregate(pts, feats, 5)[perm], atol=1e-14)

    def test_translation_invariant(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(40, 3))
        feats = rng.normal(size=(40, 3))
        np.testing.assert_array_equal(knn_mean_aggregate(pts + [4.0, -2.0, 8.0], feats, 6),
                                      knn_mean_aggregate(pts, feats, 6))


class TestSegNet:
    def test_full_gradient(self):
        rng = np.random.default_rng(0)
        cfg = NetConfig(in_dim=5, num_classes=3, hidden=6, proj_dim=4, proj_depth=2, knn_k=3)
        net = SegNet(cfg)
        params = init_segnet(cfg, 1)
        for block in params.values():
            for b in block.biases:
                b[:] = rng.normal(scale=0.1, size=b.shape)  # keep off the relu kinks
        x = rng.normal(size=(12, 5))
        nbr = kernels.knn_indices(rng.normal(size=(12, 3)), 3)
        wl, wp = rng.normal(size=(12, 3)), rng.normal(size=(12, 4))

        def loss():
            logits, proj, _ = net.forward(params, x, nbr)
            return float(np.sum(wl * logits) + np.sum(wp * proj))

        _, _, cache = net.forward(params, x, nbr)
        grads = net.backward(params, cache, wl, wp)
        for name in params:
            for arr, g in zip(params[name].arrays(), grads[name].arrays()):
                def fn(v, arr=arr):
                    saved = arr.copy()
                    arr[...] = v
                    out = loss()
                    arr[...] = saved
                    return out
                fd_check(fn, arr.copy(), g)

    def test_no_projection(self):
        cfg = NetConfig(in_dim=4, num_classes=2, hidden=5, proj_depth=0, knn_k=2)
        assert "g" not in cfg.specs() and cfg.feature_dim == 5
        params = init_segnet(cfg, 0)
        x = np.ones((3, 4))
        nbr = kernels.knn_indices(np.eye(3), 2)
        logits, proj, _ = SegNet(cfg).forward(params, x, nbr)
        assert proj.shape == (3, 5)

    def test_proj_depths(self):
        for depth, n in [(1, 1), (2, 2), (3, 3)]:
            assert NetConfig(4, 2, proj_depth=depth).specs()["g"].n_layers == n
