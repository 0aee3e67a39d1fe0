import numpy as np
import pytest

from mutn import diffcore as dc
from mutn import networks as nets


SPEC_1D = nets.ConvNetSpec(ndim=1, in_channels=1, hidden_channels=8,
                           out_channels=1, depth=3, residual=True)
SPEC_2D = nets.ConvNetSpec(ndim=2, in_channels=3, hidden_channels=8,
                           out_channels=3, depth=3, residual=True)


class TestInitializers:
    def test_same_seed_identical(self):
        a = nets.init_params(SPEC_1D, "kaiming-uniform", 5)
        b = nets.init_params(SPEC_1D, "kaiming-uniform", 5)
        for wa, wb in zip(a, b):
            assert wa.tobytes() == wb.tobytes()

    def test_different_seed_differs(self):
        a = nets.init_params(SPEC_1D, "xavier", 5)
        b = nets.init_params(SPEC_1D, "xavier", 6)
        assert any(not np.array_equal(wa, wb) for wa, wb in zip(a, b))

    def test_xavier_variance(self):
        # wide layer: empirical variance near 2/(fan_in+fan_out)
        spec = nets.ConvNetSpec(ndim=1, in_channels=256, hidden_channels=256,
                                out_channels=256, depth=2, kernel_size=1)
        w = nets.init_params(spec, "xavier", 0)[0]
        target = 2.0 / (256 + 256)
        assert abs(w.var() / target - 1.0) < 0.2

    def test_weights_within_support(self):
        for scheme in nets.SCHEMES:
            ws = nets.init_params(SPEC_2D, scheme, 3)
            recep = SPEC_2D.kernel_size ** 2
            for w in ws:
                fan_in = w.shape[1] * recep
                fan_out = w.shape[0] * recep
                bound = np.sqrt(6.0 / fan_in) if scheme == "kaiming-uniform" \
                    else np.sqrt(6.0 / (fan_in + fan_out))
                assert np.all(np.abs(w) <= bound)

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ValueError):
            nets.init_params(SPEC_1D, "orthogonal", 0)


class TestProxForward:
    def test_zero_weights_identity(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(1, 16))
        out = nets.prox_forward(SPEC_1D, nets.zero_params(SPEC_1D), v)
        np.testing.assert_allclose(out, v)

    def test_shape_preserved_2d(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(3, 16, 16))
        rho = nets.init_params(SPEC_2D, "kaiming-uniform", 2)
        assert nets.prox_forward(SPEC_2D, rho, v).shape == v.shape

    def test_linear_single_layer(self):
        spec = nets.ConvNetSpec(ndim=1, in_channels=1, hidden_channels=1,
                                out_channels=1, depth=1, kernel_size=1,
                                residual=True)
        w = [np.full((1, 1, 1), 0.5)]
        out = nets.prox_forward(spec, w, np.array([[2.0]]))
        np.testing.assert_allclose(out, [[3.0]])

    def test_requires_residual_spec(self):
        spec = nets.ConvNetSpec(ndim=1, in_channels=1, hidden_channels=4,
                                out_channels=1, depth=2, residual=False)
        with pytest.raises(ValueError):
            nets.prox_forward(spec, nets.zero_params(spec), np.zeros((1, 8)))


MM_1D = nets.ConvNetSpec(ndim=1, in_channels=2, hidden_channels=8,
                         out_channels=1, depth=3)
MM_2D = nets.ConvNetSpec(ndim=2, in_channels=4, hidden_channels=8,
                         out_channels=3, depth=3)


class TestMismatchForward:
    def test_zero_weights_zero_residual(self):
        rng = np.random.default_rng(2)
        base_out = rng.normal(size=(1, 32))
        out = nets.mismatch_forward(MM_1D, nets.zero_params(MM_1D), base_out,
                                    rng.normal(size=9))
        np.testing.assert_allclose(out, 0.0)

    def test_output_shapes(self):
        rng = np.random.default_rng(3)
        theta = nets.init_params(MM_1D, "kaiming-uniform", 0)
        out = nets.mismatch_forward(MM_1D, theta, rng.normal(size=(1, 128)),
                                    rng.normal(size=21))
        assert out.shape == (1, 128)
        theta2 = nets.init_params(MM_2D, "kaiming-uniform", 0)
        out2 = nets.mismatch_forward(MM_2D, theta2, rng.normal(size=(3, 32, 32)),
                                     rng.normal(size=(5, 5)))
        assert out2.shape == (3, 32, 32)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(4)
        theta = nets.init_params(MM_1D, "xavier", 1)
        base = rng.normal(size=(3, 1, 16))
        feats = rng.normal(size=(3, 5))
        batched = nets.mismatch_forward(MM_1D, theta, base, feats)
        for i in range(3):
            single = nets.mismatch_forward(MM_1D, theta, base[i], feats[i])
            np.testing.assert_allclose(batched[i], single, atol=1e-13)

    def test_grad_wrt_theta_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 12))
        feats = rng.normal(size=5)
        theta0 = nets.init_params(
            nets.ConvNetSpec(1, 2, 4, 1, 3, kernel_size=3), "kaiming-uniform", 2)
        spec = nets.ConvNetSpec(1, 2, 4, 1, 3, kernel_size=3)

        def loss_of(theta_arrays):
            out = nets.mismatch_forward(spec, [dc.Var(t) for t in theta_arrays], x, feats)
            return dc.sq_norm(out).value

        params = [dc.Var(t, requires_grad=True) for t in theta0]
        loss = dc.sq_norm(nets.mismatch_forward(spec, params, x, feats))
        grads = dc.grad(loss, params)
        eps = 1e-6
        for li in range(len(theta0)):
            g_fd = np.zeros_like(theta0[li])
            flat = theta0[li].ravel()
            gf = g_fd.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = loss_of(theta0)
                flat[i] = orig - eps
                fm = loss_of(theta0)
                flat[i] = orig
                gf[i] = (fp - fm) / (2 * eps)
            num = np.max(np.abs(grads[params[li]] - g_fd))
            den = 1e-12 + np.max(np.abs(g_fd))
            assert num / den < 1e-5


def test_feature_plane_tiling():
    feats = np.array([1.0, 2.0, 3.0])
    plane = nets.feature_plane(feats, (7,))
    np.testing.assert_allclose(plane, [1, 2, 3, 1, 2, 3, 1])
    grid = nets.feature_plane(np.ones((4, 4)), (4, 4))
    np.testing.assert_allclose(grid, 1.0)
