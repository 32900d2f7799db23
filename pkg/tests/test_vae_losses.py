import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from flowdesk import tensor as T
from flowdesk import vae_losses as V
from flowdesk.errors import ContractError, DegenerateReferenceError, ShapeError
from flowdesk.rng import Rng
from flowdesk.vae_losses import DiscriminatorTaps, LatentPosterior, Resolution, StereoSignal, StftConfig

SR = 16000
SMALL = StftConfig((Resolution(64, 16, 64), Resolution(128, 32, 96)))
seeds = st.integers(0, 2**32 - 1)


class TestStft:
    @pytest.mark.parametrize("res", V.DEFAULT_RESOLUTIONS)
    def test_bin_centered_sine(self, res):
        k = 37
        x = V.sine(8192, k * SR / res.fft_size, SR)
        power = V.stft_mag(x, res) ** 2
        # frames that do not reach into the reflected padding
        edge = res.fft_size // 2 // res.hop
        inner = power[edge:len(power) - edge]
        total = inner.sum(axis=1)
        assert np.all(np.argmax(inner, axis=1) == k)
        # a Hann-windowed bin-centred tone has power 1/4 : 1 : 1/4 over bins k-1, k, k+1
        assert np.all(inner[:, k - 1:k + 2].sum(axis=1) / total > 0.9)
        assert np.allclose(inner[:, k] / total, 2 / 3, atol=1e-3)

    def test_zero_signal(self):
        assert np.all(V.stft_mag(np.zeros(2048), V.DEFAULT_RESOLUTIONS[0]) == 0.0)

    def test_frame_count(self):
        res = Resolution(512, 128, 512)
        assert V.stft_mag(np.ones(4096), res).shape == (1 + 4096 // 128, 257)

    def test_parseval_per_frame(self, rng):
        res = Resolution(256, 64, 200)
        x = rng.normal(2000)
        mag = V.stft_mag(x, res)
        frames = x[V._frame_index(len(x), 256, 64)] * V._hann(200, 256)
        full = mag[:, 0] ** 2 + mag[:, -1] ** 2 + 2 * np.sum(mag[:, 1:-1] ** 2, axis=1)
        assert np.allclose(full, 256 * np.sum(frames**2, axis=1), rtol=1e-10)
        # windowing can only remove energy from a frame
        raw = x[V._frame_index(len(x), 256, 64)]
        assert np.all(full <= 256 * np.sum(raw**2, axis=1))

    def test_tensor_route_matches_fft(self, rng):
        x = rng.normal(1000)
        for res in SMALL.resolutions:
            a = V.stft_mag(x, res)
            b = V.stft_mag_tensor(T.Tensor(x), res).data
            assert np.max(np.abs(a - b)) < 1e-9

    def test_too_short(self):
        with pytest.raises(ContractError):
            V.stft_mag(np.ones(100), Resolution(512, 128, 512))

    def test_resolution_validation(self):
        with pytest.raises(ContractError):
            Resolution(256, 300, 256)


class TestMrstft:
    def test_identical_is_zero(self, rng):
        x = rng.normal(4096)
        assert V.mrstft_loss(x, x) == 0.0

    @pytest.mark.parametrize("res", V.DEFAULT_RESOLUTIONS)
    def test_half_amplitude(self, res):
        x = V.chirp(8192, 100.0, 6000.0, SR)
        assert V.spectral_convergence(x, 0.5 * x, res) == pytest.approx(0.5, abs=1e-12)

    def test_log_term_counts_frames(self):
        # x_hat = x / 2: per resolution SC 0.5 and |log 2| per bin, summed over bins then / frames
        x = V.chirp(4096, 200.0, 5000.0, SR)
        res = Resolution(256, 64, 256)
        expected = 0.5 + 129 * np.log(2.0)
        assert V.mrstft_loss(x, 0.5 * x, StftConfig((res,))) == pytest.approx(expected, rel=1e-9)

    @given(seeds)
    def test_nonnegative_and_positive_under_perturbation(self, seed):
        r = Rng(seed)
        x = r.normal(512)
        x_hat = x + 1e-2 * (2.0 * r.bernoulli(0.5, 512) - 1.0)
        assert V.mrstft_loss(x, x_hat, SMALL) > 0
        assert V.mrstft_loss(x, r.normal(512), SMALL) >= 0

    def test_silent_reference(self):
        with pytest.raises(DegenerateReferenceError):
            V.mrstft_loss(np.zeros(512), np.ones(512), SMALL)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            V.mrstft_loss(np.ones(512), np.ones(600), SMALL)

    def test_tensor_and_array_routes_agree(self, rng):
        x, y = rng.normal(600), rng.normal(600)
        a = V.mrstft_loss(x, y, SMALL)
        b = V.mrstft_loss(x, T.Tensor(y), SMALL).item()
        assert a == pytest.approx(b, rel=1e-10)

    def test_gradient(self, rng):
        res = StftConfig((Resolution(64, 16, 64),))
        x = rng.normal(256)
        x_hat = T.Tensor(x + 0.3 * rng.normal(256))
        rep = T.grad_check(lambda xh: V.mrstft_loss(x, xh, res), [x_hat], tol=1e-4)
        assert rep.passed, rep.failures()[:3]


class TestStereo:
    @pytest.fixture
    def pair(self, rng):
        n = 2048
        x = StereoSignal(V.sine(n, 440.0, SR), V.chirp(n, 100.0, 3000.0, SR), SR)
        y = StereoSignal(x.left + 0.05 * rng.normal(n), x.right + 0.05 * rng.normal(n), SR)
        return x, y

    def test_identical(self, pair):
        assert V.stereo_mrstft_loss(pair[0], pair[0]) == 0.0

    def test_decomposes_exactly(self, pair):
        x, y = pair
        assert V.stereo_mrstft_loss(x, y) == V.mrstft_loss(x.sum, y.sum) + V.mrstft_loss(x.diff, y.diff)

    def test_channel_swap_of_estimate(self, pair):
        x, y = pair
        # swapping channels of both keeps sum and negates diff
        xs, ys = StereoSignal(x.right, x.left), StereoSignal(y.right, y.left)
        assert V.stereo_mrstft_loss(xs, ys) == pytest.approx(V.stereo_mrstft_loss(x, y), rel=1e-12)

    def test_dual_mono_reference_is_degenerate(self):
        s = V.sine(2048, 440.0, SR)
        with pytest.raises(DegenerateReferenceError):
            V.stereo_mrstft_loss(StereoSignal(s, s), StereoSignal(s, 0.9 * s))

    def test_channel_length_mismatch(self):
        with pytest.raises(ShapeError):
            StereoSignal(np.ones(10), np.ones(11))


class TestAdversarial:
    def test_hinge_satisfied(self):
        assert V.hinge_adv_loss(DiscriminatorTaps([1.0, 2.0]), DiscriminatorTaps([-1.0, -3.0])) == 0.0

    def test_hinge_hand_value(self):
        assert V.hinge_adv_loss(DiscriminatorTaps([0.5]), DiscriminatorTaps([-0.2])) == pytest.approx(1.3)

    @given(seeds)
    def test_hinge_nonnegative(self, seed):
        r = Rng(seed)
        assert V.hinge_adv_loss(DiscriminatorTaps(list(r.normal(3))), DiscriminatorTaps(list(r.normal(3)))) >= 0

    def test_hinge_k_mismatch(self):
        with pytest.raises(ShapeError):
            V.hinge_adv_loss(DiscriminatorTaps([1.0]), DiscriminatorTaps([1.0, 2.0]))

    def test_feature_matching_hand_value(self):
        real = DiscriminatorTaps([0.0], [[np.array([2.0])]])
        fake = DiscriminatorTaps([0.0], [[np.array([1.0])]])
        assert V.feature_matching_loss(real, fake) == 0.5

    @given(seeds, st.floats(0.01, 100.0))
    def test_feature_matching_scale_invariant(self, seed, c):
        r = Rng(seed)
        rl = [[r.normal((3, 4)), r.normal(5)], [r.normal(2)]]
        fl = [[r.normal((3, 4)), r.normal(5)], [r.normal(2)]]
        base = V.feature_matching_loss(DiscriminatorTaps([0, 0], rl), DiscriminatorTaps([0, 0], fl))
        scaled = V.feature_matching_loss(DiscriminatorTaps([0, 0], [[c * a for a in k] for k in rl]),
                                         DiscriminatorTaps([0, 0], [[c * a for a in k] for k in fl]))
        assert scaled == pytest.approx(base, rel=1e-10)

    def test_feature_matching_identical_and_perturbed(self, rng):
        feats = [[rng.normal((2, 3))]]
        real = DiscriminatorTaps([0.0], feats)
        assert V.feature_matching_loss(real, real) == 0.0
        bumped = DiscriminatorTaps([0.0], [[feats[0][0] + 1e-2]])
        assert V.feature_matching_loss(real, bumped) > 0

    def test_feature_shape_mismatch(self):
        with pytest.raises(ShapeError):
            V.feature_matching_loss(DiscriminatorTaps([0], [[np.ones(2)]]), DiscriminatorTaps([0], [[np.ones(3)]]))


class TestKl:
    def test_standard_normal(self):
        assert V.gaussian_kl_loss(LatentPosterior(np.zeros(4), np.zeros(4))) == 0.0

    def test_hand_value(self):
        assert V.gaussian_kl_loss(LatentPosterior(np.array([1.0]), np.array([0.0]))) == 0.5

    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_positive_off_prior(self, mu, lv):
        assume(abs(mu) > 1e-6 or abs(lv) > 1e-6)
        assert V.gaussian_kl_loss(LatentPosterior(np.array([mu]), np.array([lv]))) > 0

    def test_logvar_clamped(self):
        huge = V.gaussian_kl_loss(LatentPosterior(np.zeros(1), np.array([1e4])))
        at_cap = V.gaussian_kl_loss(LatentPosterior(np.zeros(1), np.array([20.0])))
        assert np.isfinite(huge) and huge == at_cap


class TestRawIO:
    def test_round_trip(self, tmp_path, rng):
        left, right = rng.normal(100), rng.normal(100)
        V.write_raw(tmp_path / "s.raw", [left, right])
        back = V.read_raw(tmp_path / "s.raw", channels=2)
        assert np.array_equal(back[0], left) and np.array_equal(back[1], right)

    def test_channel_split_error(self, tmp_path):
        V.write_raw(tmp_path / "s.raw", [np.ones(5)])
        with pytest.raises(ContractError):
            V.read_raw(tmp_path / "s.raw", channels=2)
