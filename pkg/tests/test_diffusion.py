import math

import numpy as np
from numpy.polynomial.chebyshev import chebvander
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from flowdesk import diffusion as D
from flowdesk.diffusion import LossWeighting, Objective, PredictionKind as P, TimestepSampler
from flowdesk.errors import ContractError, DomainError, ShapeError, SingularityError
from flowdesk.optim import AdamW
from flowdesk.rng import Rng
from flowdesk.tensor import Param, Tape, Tensor

ts = st.floats(0.1, 0.9)
vals = st.floats(-10, 10)


class TestSchedule:
    @pytest.mark.parametrize("t,expected", [(0.0, 1.0), (1.0, 0.0), (0.5, 0.5)])
    def test_alpha_values(self, t, expected):
        assert D.alpha_at(D.COSINE, t) == pytest.approx(expected, abs=1e-12)

    def test_alpha_strictly_decreasing(self):
        a = D.COSINE.alpha(np.linspace(0, 1, 1001))
        assert np.all(np.diff(a) < 0)

    @pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
    def test_domain(self, t):
        with pytest.raises(DomainError):
            D.alpha_at(D.COSINE, t)


class TestForwardProcess:
    def test_endpoints(self):
        x0, eps = np.array([2.0, -1.0]), np.array([0.5, 3.0])
        assert np.array_equal(D.diffuse(x0, eps, 0.0), x0)
        assert np.array_equal(D.diffuse(x0, eps, 1.0), eps)
        assert np.array_equal(D.v_target(x0, eps, 0.0), eps)
        assert np.array_equal(D.v_target(x0, eps, 1.0), -x0)

    def test_hand_values(self):
        assert D.diffuse(2.0, 1.0, 0.5) == pytest.approx(3 / math.sqrt(2), abs=1e-12)
        assert D.v_target(2.0, 1.0, 0.5) == pytest.approx(-1 / math.sqrt(2), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            D.diffuse(np.zeros(2), np.zeros(3), 0.5)

    def test_per_row_t(self):
        x0, eps = np.ones((3, 2)), np.zeros((3, 2))
        t = np.array([0.0, 0.5, 1.0])
        out = D.diffuse(x0, eps, t)
        assert np.allclose(out[:, 0], np.cos(np.pi * t / 2))


class TestConvert:
    def test_solve_hand_system(self):
        x_t, v = 3 / math.sqrt(2), -1 / math.sqrt(2)
        assert D.convert_prediction(v, P.V, P.X0, x_t, 0.5) == pytest.approx(2.0, abs=1e-12)
        assert D.convert_prediction(v, P.V, P.EPS, x_t, 0.5) == pytest.approx(1.0, abs=1e-12)

    @given(vals, vals, ts)
    def test_all_pairs_recover(self, x0, eps, t):
        x_t = D.diffuse(x0, eps, t)
        truth = {P.X0: x0, P.EPS: eps, P.V: D.v_target(x0, eps, t)}
        for src in truth:
            for dst in truth:
                got = D.convert_prediction(np.asarray(truth[src]), src, dst, np.asarray(x_t), t)
                assert got == pytest.approx(truth[dst], abs=1e-10)

    def test_singular_endpoints(self):
        with pytest.raises(SingularityError):
            D.convert_prediction(np.ones(1), P.EPS, P.X0, np.ones(1), 1.0)
        with pytest.raises(SingularityError):
            D.convert_prediction(np.ones(1), P.X0, P.EPS, np.ones(1), 0.0)

    def test_velocity_not_convertible(self):
        with pytest.raises(ContractError):
            D.convert_prediction(np.ones(1), P.VELOCITY, P.X0, np.ones(1), 0.5)


class TestOtcfm:
    def test_hand_values(self):
        p = D.otcfm_path(np.array(2.0), np.array(0.0), 0.25)
        assert p.x_t == 1.5 and p.target == -2.0

    def test_endpoints(self):
        x0, eps = np.array([1.0, 2.0]), np.array([-3.0, 4.0])
        assert np.array_equal(D.otcfm_path(x0, eps, 0.0).x_t, x0)
        assert np.array_equal(D.otcfm_path(x0, eps, 1.0).x_t, eps)

    @given(ts, ts)
    def test_target_independent_of_t(self, t1, t2):
        x0, eps = np.array([0.3, -1.2]), np.array([2.0, 0.1])
        assert np.array_equal(D.otcfm_path(x0, eps, t1).target, D.otcfm_path(x0, eps, t2).target)


class TestTimesteps:
    def test_logit_normal_center(self):
        assert D.logit_normal_from_z(0.0) == 0.5

    def test_logit_normal_statistics(self):
        t = D.sample_t(TimestepSampler.LOGIT_NORMAL, Rng(0), 100_000)
        mass = np.mean((t >= 0.25) & (t <= 0.75))
        assert abs(np.median(t) - 0.5) < 0.01
        assert abs(mass - (2 * norm.cdf(math.log(3)) - 1)) < 0.01
        assert mass > 0.5

    def test_uniform_mean(self):
        assert abs(D.sample_t(TimestepSampler.UNIFORM, Rng(1), 100_000).mean() - 0.5) < 0.01

    def test_clamped_open_interval(self):
        t = D.logit_normal_from_z(np.array([-100.0, 100.0]))
        assert t[0] == D.T_MIN and t[1] == D.T_MAX


class TestMinSnr:
    @pytest.mark.parametrize("snr,kind,expected", [(1.0, P.EPS, 1.0), (10.0, P.EPS, 0.5), (1.0, P.V, 0.5)])
    def test_hand_values(self, snr, kind, expected):
        assert D.minsnr_weight_from_snr(snr, 5.0, kind) == pytest.approx(expected)

    def test_bounded_and_continuous(self):
        t = np.linspace(0, 1, 20001)
        for kind in (P.EPS, P.V):
            w = D.minsnr_weight(t, 5.0, kind=kind)
            assert np.all(w > 0) and np.all(w <= 5.0)
            assert np.max(np.abs(np.diff(w))) < 1e-2

    def test_velocity_rejected(self):
        with pytest.raises(ContractError):
            D.minsnr_weight(0.5, 5.0, kind=P.VELOCITY)


class TestTrainingLoss:
    @pytest.mark.parametrize("objective", list(Objective))
    @pytest.mark.parametrize("offset,expected", [(0.0, 0.0), (1.0, 1.0)])
    def test_exact_and_offset_target(self, objective, offset, expected, rng):
        x0 = rng.normal((16, 3))
        eps = rng.normal((16, 3))
        t = rng.uniform(16)
        path = D.otcfm_path(x0, eps, t) if objective is Objective.OTCFM else D.vdiffusion_path(x0, eps, t)
        field = lambda x_t, tt, cond: Tensor(path.target + offset)
        loss = D.training_loss(field, x0, None, objective, TimestepSampler.UNIFORM, LossWeighting.unit(),
                               rng, t=t, eps=eps)
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_min_snr_weights_rows(self, rng):
        x0, eps, t = rng.normal((8, 2)), rng.normal((8, 2)), 0.1 + 0.8 * rng.uniform(8)
        path = D.vdiffusion_path(x0, eps, t)
        field = lambda x_t, tt, cond: Tensor(path.target + 1.0)
        loss = D.training_loss(field, x0, None, Objective.V_DIFFUSION, TimestepSampler.UNIFORM,
                               LossWeighting.min_snr(5.0), rng, t=t, eps=eps)
        assert loss.item() == pytest.approx(np.mean(D.minsnr_weight(t, 5.0)), rel=1e-12)

    def test_min_snr_with_otcfm_rejected(self, rng):
        with pytest.raises(ContractError):
            D.training_loss(lambda x, t, c: x, np.zeros((2, 1)), None, Objective.OTCFM,
                            TimestepSampler.UNIFORM, LossWeighting.min_snr(5.0), rng)

    def test_field_shape_checked(self, rng):
        with pytest.raises(ShapeError):
            D.training_loss(lambda x, t, c: Tensor(np.zeros((2, 5))), np.zeros((2, 1)), None,
                            Objective.OTCFM, TimestepSampler.UNIFORM, LossWeighting.unit(), rng)

    def test_linear_gaussian_minimizer(self):
        """x0 ~ N(0,1): the optimal OT-CFM field is (2t-1)/((1-t)^2+t^2) * x_t."""
        deg = 10

        def basis(t):
            return Tensor(chebvander(2.0 * np.asarray(t) - 1.0, deg))

        a = Param(np.zeros((deg + 1, 1)))
        b = Param(np.zeros((deg + 1, 1)))

        def field(x_t, t, cond):
            phi = basis(t)
            return (phi @ a) * x_t + phi @ b

        rng = Rng(17)
        opt = AdamW([a, b], lr=0.01)
        warm, window = 500, 1500
        avg_a, avg_b = np.zeros_like(a.data), np.zeros_like(b.data)
        for step in range(warm + window):
            if step == warm:
                opt.lr = 1e-3
            with Tape() as tape:
                loss = D.training_loss(field, rng.normal((16384, 1)), None, Objective.OTCFM,
                                       TimestepSampler.UNIFORM, LossWeighting.unit(), rng)
            tape.backward(loss)
            opt.step()
            if step >= warm:  # iterate averaging removes most of the gradient noise
                avg_a += a.data
                avg_b += b.data
        a.data[...] = avg_a / window
        b.data[...] = avg_b / window

        check = Rng(18)
        t = 0.1 + 0.8 * check.uniform(500)
        x_t = check.normal((500, 1)) * np.sqrt((1 - t) ** 2 + t**2)[:, None]
        optimal = ((2 * t - 1) / ((1 - t) ** 2 + t**2))[:, None] * x_t
        got = field(Tensor(x_t), t, None).data
        assert np.max(np.abs(got - optimal)) < 1e-2
