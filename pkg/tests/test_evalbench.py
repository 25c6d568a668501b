import numpy as np
import pytest

from scenescale.evalbench import (psnr, roc_auc, scale_mse, seg_metrics, ssim,
                                  ssimae)


class TestPSNR:
    def test_identical_capped(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        assert psnr(img, img) == 99.0

    def test_uniform_mse(self):
        gt = np.zeros((10, 10))
        pred = np.full((10, 10), 0.1)  # MSE = 0.01
        assert psnr(pred, gt) == pytest.approx(20.0)

    def test_mse_one(self):
        gt = np.zeros((10, 10))
        pred = np.ones((10, 10))
        assert psnr(pred, gt) == pytest.approx(0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSSIM:
    def test_identical_is_one(self):
        img = np.random.default_rng(1).random((24, 24, 3))
        assert ssim(img, img) == pytest.approx(1.0)

    def test_inverted_high_contrast_low_score(self):
        rng = np.random.default_rng(2)
        gt = (rng.random((32, 32)) > 0.5).astype(float)
        assert ssim(1.0 - gt, gt) < 0.5

    def test_constant_vs_constant_closed_form(self):
        # zero variances: SSIM = (2 mu1 mu2 + C1) / (mu1^2 + mu2^2 + C1)
        a, b = 0.3, 0.7
        pred = np.full((20, 20), a)
        gt = np.full((20, 20), b)
        c1 = 0.01 ** 2
        want = (2 * a * b + c1) / (a * a + b * b + c1)
        assert ssim(pred, gt) == pytest.approx(want, rel=1e-9)

    def test_too_small_image(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestSSIMAE:
    def test_identical_zero(self):
        d = np.random.default_rng(3).random((16, 16)) + 0.5
        assert ssimae(d, d) == pytest.approx(0.0, abs=1e-9)

    def test_affine_invariance(self):
        rng = np.random.default_rng(4)
        d = rng.random((16, 16)) * 3 + 1
        for a, b in ((3.0, 7.0), (0.2, -1.0), (10.0, 0.0)):
            assert ssimae(a * d + b, d) <= 1e-6

    def test_sign_alternating_noise(self):
        # pred = gt + alternating eps noise orthogonal to [gt, 1]: the normal
        # equations give a = S_gg/(S_gg + S_nn) exactly, so the expected MAE
        # has a closed form and approaches eps as the noise power vanishes
        n = 400
        gt = np.linspace(1.0, 2.0, n)
        eps = 0.01
        noise = eps * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        noise -= noise.mean()
        g_c = gt - gt.mean()
        noise -= (noise @ g_c) / (g_c @ g_c) * g_c
        pred = gt + noise
        s_gg = g_c @ g_c
        s_nn = noise @ noise
        a_hat = s_gg / (s_gg + s_nn)
        b_hat = gt.mean() - a_hat * pred.mean()
        want = np.abs(a_hat * pred + b_hat - gt).mean()
        assert ssimae(pred, gt) == pytest.approx(want, rel=1e-9)
        assert want == pytest.approx(np.abs(noise).mean(), rel=0.05)

    def test_constant_pred_shift_only(self):
        gt = np.array([1.0, 2.0, 3.0, 4.0])
        pred = np.full(4, 9.0)
        # b-only fit: b = mean(gt) = 2.5 -> MAE = mean(|2.5 - gt|) = 1.0
        assert ssimae(pred, gt) == pytest.approx(1.0)

    def test_mask(self):
        gt = np.array([1.0, 2.0, 100.0])
        pred = np.array([1.0, 2.0, -55.0])
        assert ssimae(pred, gt, valid_mask=np.array([1, 1, 0], dtype=bool)) \
            == pytest.approx(0.0, abs=1e-9)

    def test_too_few_pixels(self):
        with pytest.raises(ValueError):
            ssimae(np.array([1.0]), np.array([1.0]))


class TestSegMetrics:
    def test_perfect(self):
        labels = np.random.default_rng(5).integers(0, 3, size=(20, 20))
        miou, pq = seg_metrics(labels, labels, 3)
        assert miou == pytest.approx(1.0)
        assert pq == pytest.approx(100.0)

    def test_two_objects_swapped(self):
        gt = np.zeros((10, 10), dtype=int)
        gt[:, 5:] = 1
        pred = 1 - gt
        miou, pq = seg_metrics(pred, gt, 2)
        assert miou == pytest.approx(0.0)
        assert pq == pytest.approx(0.0)

    def test_half_shifted_square(self):
        # object 1 is a square shifted by half its width: IoU = 1/3
        gt = np.zeros((8, 16), dtype=int)
        gt[:, 0:8] = 1
        pred = np.zeros((8, 16), dtype=int)
        pred[:, 4:12] = 1
        miou, pq = seg_metrics(pred, gt, 2)
        want_obj1 = (8 * 4) / (8 * 12)  # intersection 4 cols / union 12 cols
        assert want_obj1 == pytest.approx(1 / 3)
        # object 0 (background strip) has its own IoU
        inter0 = 4 * 8
        union0 = 12 * 8
        want = 0.5 * (want_obj1 + inter0 / union0)
        assert miou == pytest.approx(want)


class TestScaleMSE:
    def test_exact(self):
        assert scale_mse(np.array([1.0, 0.5, 2.0]),
                         np.array([1.0, 0.5, 2.0])) == 0.0

    def test_single_offset_among_three(self):
        pred = np.array([1.0, 1.5, 2.0])
        gt = np.array([1.0, 1.0, 2.0])
        assert scale_mse(pred, gt) == pytest.approx(0.125)

    def test_anchor_ratio_invariance(self):
        pred = np.array([2.0, 1.0, 4.0])  # ratios (0.5, 2.0)
        gt = np.array([1.0, 0.5, 2.0])
        assert scale_mse(pred, gt) == pytest.approx(0.0)

    def test_mismatched_k(self):
        with pytest.raises(ValueError):
            scale_mse(np.ones(3), np.ones(2))


class TestAUC:
    def test_perfect_separation(self):
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        labels = np.array([1, 1, 0, 0])
        assert roc_auc(scores, labels) == 1.0

    def test_uninformative_constant(self):
        scores = np.full(10, 0.5)
        labels = np.arange(10) % 2
        assert roc_auc(scores, labels) == 0.5

    def test_reversed(self):
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        labels = np.array([1, 1, 0, 0])
        assert roc_auc(scores, labels) == 0.0
