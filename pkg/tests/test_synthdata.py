import math

import numpy as np
import pytest

from mutn import operators as ops
from mutn import synthdata as sd


class TestReflectivity:
    def test_spike_count_within_binomial_bound(self):
        rng = np.random.default_rng(0)
        n, p, draws = 100, 0.08, 100
        total = sum(np.count_nonzero(sd.gen_reflectivity(n, p, rng=rng))
                    for _ in range(draws))
        mean = p * n * draws
        bound = 3 * math.sqrt(draws * n * p * (1 - p))
        assert abs(total - mean) < bound

    def test_seed_reproducible(self):
        a = sd.gen_reflectivity(64, rng=np.random.default_rng(7))
        b = sd.gen_reflectivity(64, rng=np.random.default_rng(7))
        assert a.tobytes() == b.tobytes()

    def test_zero_amplitude(self):
        out = sd.gen_reflectivity(64, amplitude_std=0.0,
                                  rng=np.random.default_rng(1))
        np.testing.assert_allclose(out, 0.0)

    def test_rejects_bad_prob(self):
        with pytest.raises(ValueError):
            sd.gen_reflectivity(10, spike_prob=0.0)


class TestAddNoise:
    def test_zero_sigma(self):
        y = np.random.default_rng(2).normal(size=32)
        np.testing.assert_array_equal(sd.add_noise(y, sd.NoiseSpec(0.0, 1)), y)

    def test_relative_std_statistics(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=1_000_000)
        sigma = 0.01
        yp = sd.add_noise(y, sd.NoiseSpec(sigma, 4))
        rms = np.sqrt(np.mean(y * y))
        emp = np.std((yp - y) / rms)
        assert abs(emp - sigma) / sigma < 0.05

    def test_seed_determinism(self):
        y = np.random.default_rng(5).normal(size=100)
        a = sd.add_noise(y, sd.NoiseSpec(0.1, 6))
        b = sd.add_noise(y, sd.NoiseSpec(0.1, 6))
        assert a.tobytes() == b.tobytes()

    def test_rejects_negative_sigma(self):
        with pytest.raises(ValueError):
            sd.NoiseSpec(-0.1, 0)


class TestKernelPsnr:
    def test_identical_is_inf(self):
        k = ops.gaussian_kernel2d(5, 7.0)
        assert sd.kernel_psnr(k, k) == math.inf

    def test_formula(self):
        # mse 1e-4, peak 0.1 -> 10*log10(0.01/1e-4) = 20 dB
        k = np.full(10, 0.1)
        assert sd.kernel_psnr(k, k + 0.01) == pytest.approx(20.0)

    def test_monotone_in_perturbation(self):
        k = ops.gaussian_kernel2d(5, 7.0)
        rng = np.random.default_rng(8)
        d = rng.normal(size=k.shape)
        vals = [sd.kernel_psnr(k, k + eps * d) for eps in (1e-4, 1e-3, 1e-2)]
        assert vals[0] > vals[1] > vals[2]


class TestSeismicDataset:
    def test_zero_mismatch_reaches_noise_floor(self):
        data = sd.gen_seismic_dataset(3, n=64, mismatch_delta=0.0,
                                      noise=sd.NoiseSpec(0.0, 9))
        for s in data:
            np.testing.assert_array_equal(s.a0_features, s.true_features)
            op = ops.toeplitz_operator(s.a0_features, 64)
            np.testing.assert_allclose(op(s.x), s.y, atol=1e-14)

    def test_byte_identical_regeneration(self):
        a = sd.gen_seismic_dataset(5, noise=sd.NoiseSpec(0.01, 10))
        b = sd.gen_seismic_dataset(5, noise=sd.NoiseSpec(0.01, 10))
        for sa, sb in zip(a, b):
            assert sa.x.tobytes() == sb.x.tobytes()
            assert sa.y.tobytes() == sb.y.tobytes()
            assert sa.a0_features.tobytes() == sb.a0_features.tobytes()

    def test_prefix_stable_under_count(self):
        # per-sample substreams: sample i does not depend on count
        a = sd.gen_seismic_dataset(3, noise=sd.NoiseSpec(0.01, 11))
        b = sd.gen_seismic_dataset(6, noise=sd.NoiseSpec(0.01, 11))
        for sa, sb in zip(a, b[:3]):
            assert sa.y.tobytes() == sb.y.tobytes()

    def test_wavelet_psnr_decreases_in_delta(self):
        means = []
        for delta in (0.02, 0.05, 0.1):
            data = sd.gen_seismic_dataset(100, n=32, mismatch_delta=delta,
                                          wavelet_half_len=10,
                                          noise=sd.NoiseSpec(0.0, 12))
            means.append(np.mean([sd.kernel_psnr(s.true_features, s.a0_features)
                                  for s in data]))
        assert means[0] > means[1] > means[2]

    def test_default_delta_brackets_reference_mismatch(self):
        data = sd.gen_seismic_dataset(100, mismatch_delta=0.1,
                                      noise=sd.NoiseSpec(0.0, 13))
        mean = np.mean([sd.kernel_psnr(s.true_features, s.a0_features)
                        for s in data])
        assert 30.0 < mean < 50.0


class TestDeblurDataset:
    def test_matched_sigma_no_noise_is_exact(self):
        data = sd.gen_deblur_dataset(2, hw=(16, 16), a0_sigma=7.0,
                                     noise=sd.NoiseSpec(0.0, 14))
        for s in data:
            op = ops.blur_operator(s.a0_features, s.x.shape)
            np.testing.assert_allclose(op(s.x), s.y, atol=1e-13)

    def test_pixel_range(self):
        for s in sd.gen_deblur_dataset(3, hw=(16, 16),
                                       noise=sd.NoiseSpec(0.0, 15)):
            assert s.x.shape == (3, 16, 16)
            assert s.x.min() >= 0.0 and s.x.max() <= 1.0

    def test_reference_mismatch_scale_reachable(self):
        # a perturbation level exists that lands near the 40.9 dB scale
        k = ops.gaussian_kernel2d(5, 7.0)
        rng = np.random.default_rng(16)
        d = rng.normal(size=k.shape)
        d /= np.linalg.norm(d)
        target = 40.9
        eps = 5 * np.max(k) * 10 ** (-target / 20)  # ||d||=1, mse=eps^2/25
        val = sd.kernel_psnr(k, k + eps * d)
        assert abs(val - target) < 1e-9

    def test_sigma_sweep_changes_features(self):
        kernels = {s: sd.gen_deblur_dataset(1, hw=(16, 16), a0_sigma=s,
                                            noise=sd.NoiseSpec(0.0, 17))[0]
                   for s in (1.0, 3.0, 5.0, 7.0)}
        for s, samp in kernels.items():
            assert samp.a0_features.shape == (5, 5)
            psnr = sd.kernel_psnr(samp.true_features, samp.a0_features)
            assert (psnr == math.inf) == (s == 7.0)

    def test_unreadable_folder(self):
        with pytest.raises(OSError):
            sd.gen_deblur_dataset(1, image_source="folder",
                                  folder="/nonexistent/zzz")

    def test_folder_loader_npy(self, tmp_path):
        rng = np.random.default_rng(18)
        for i in range(2):
            np.save(tmp_path / f"im{i}.npy", rng.uniform(size=(3, 20, 20)))
        data = sd.gen_deblur_dataset(3, hw=(16, 16), image_source="folder",
                                     folder=str(tmp_path),
                                     noise=sd.NoiseSpec(0.0, 19))
        assert len(data) == 3
        assert data[0].x.shape == (3, 16, 16)
        # center crop of a 20x20 image to 16x16 starts at offset 2
        src = np.clip(np.load(tmp_path / "im0.npy"), 0, 1)
        np.testing.assert_allclose(data[0].x, src[:, 2:18, 2:18])


class TestFogDataset:
    def test_transmission_in_unit_interval(self):
        for s in sd.gen_fog_dataset(3, h=16, w=16, noise=sd.NoiseSpec(0.0, 20)):
            assert np.all(s.true_features > 0.0)
            assert np.all(s.true_features <= 1.0)
            assert s.a0_features.shape == (16, 16)

    def test_small_beta_is_near_identity(self):
        data = sd.gen_fog_dataset(2, h=16, w=16, beta_range=(1e-6, 2e-6),
                                  noise=sd.NoiseSpec(0.0, 21))
        for s in data:
            assert np.max(np.abs(s.y - s.x)) < 1e-4

    def test_seed_determinism(self):
        a = sd.gen_fog_dataset(2, h=12, w=12, noise=sd.NoiseSpec(0.01, 22))
        b = sd.gen_fog_dataset(2, h=12, w=12, noise=sd.NoiseSpec(0.01, 22))
        for sa, sb in zip(a, b):
            assert sa.y.tobytes() == sb.y.tobytes()

    def test_measurement_consistent_with_fog_model(self):
        data = sd.gen_fog_dataset(2, h=12, w=12, noise=sd.NoiseSpec(0.0, 23))
        for s in data:
            # recompose from stored true transmission and inferred airlight
            T = s.true_features
            mask = T < 1.0 - 1e-9
            L = np.where(mask, (s.y - s.x * T) / np.maximum(1 - T, 1e-12), 0.0)
            for c in range(3):
                vals = L[c][mask[c]]
                if vals.size:
                    assert np.std(vals) < 1e-8  # constant per channel

    def test_rejects_nonpositive_beta(self):
        with pytest.raises(ValueError):
            sd.gen_fog_dataset(1, beta_range=(0.0, 1.0))
