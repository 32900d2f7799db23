"""Forward processes, prediction targets, timestep samplers and losses.

Time runs from data (t=0) to noise (t=1) for both objectives:

* v-diffusion: ``x_t = sqrt(a) x0 + sqrt(1-a) eps`` with the cosine schedule
  ``a(t) = cos^2(pi t / 2)`` and target ``v = sqrt(a) eps - sqrt(1-a) x0``.
* OT-CFM: ``x_t = (1-t) x0 + t eps`` with target ``u = eps - x0``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DomainError, ShapeError, SingularityError
from . import tensor as T

T_MIN = 1e-5
T_MAX = 1.0 - 1e-5
_SINGULAR = 1e-12


class PredictionKind(enum.Enum):
    EPS = "eps"
    X0 = "x0"
    V = "v"
    VELOCITY = "velocity"


class Objective(enum.Enum):
    V_DIFFUSION = "v_diffusion"
    OTCFM = "otcfm"


class TimestepSampler(enum.Enum):
    UNIFORM = "uniform"
    LOGIT_NORMAL = "logit_normal"


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "cosine"

    def __post_init__(self):
        if self.kind != "cosine":
            raise ContractError(f"unsupported noise schedule {self.kind!r}")

    def coefficients(self, t):
        """(sqrt(a_t), sqrt(1 - a_t)) evaluated exactly at the endpoints."""
        t = _check_t(t)
        half = 0.5 * np.pi * t
        signal = np.where(t == 1.0, 0.0, np.cos(half))
        noise = np.where(t == 0.0, 0.0, np.sin(half))
        return signal, noise

    def alpha(self, t):
        signal, _ = self.coefficients(t)
        return signal * signal


COSINE = NoiseSchedule()


@dataclass(frozen=True)
class LossWeighting:
    """``gamma=None`` is unit weighting; a positive gamma selects Min-SNR."""

    gamma: float | None = None

    def __post_init__(self):
        if self.gamma is not None and not self.gamma > 0:
            raise ContractError("Min-SNR gamma must be positive")

    @classmethod
    def unit(cls):
        return cls(None)

    @classmethod
    def min_snr(cls, gamma=5.0):
        return cls(float(gamma))


@dataclass
class PathSample:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray | float
    x_t: np.ndarray
    target: np.ndarray


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    return t


def _pair(x0, eps, op):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(op, x0.shape, eps.shape)
    return x0, eps


def _per_row(coef, like):
    """Broadcast a scalar or per-batch-row coefficient against ``like``."""
    coef = np.asarray(coef)
    if coef.ndim == 0 or like.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))


def alpha_at(schedule: NoiseSchedule, t):
    a = schedule.alpha(t)
    return float(a) if np.ndim(a) == 0 else a


def diffuse(x0, eps, t, schedule: NoiseSchedule = COSINE):
    x0, eps = _pair(x0, eps, "diffuse")
    signal, noise = schedule.coefficients(t)
    return _per_row(signal, x0) * x0 + _per_row(noise, x0) * eps


def v_target(x0, eps, t, schedule: NoiseSchedule = COSINE):
    x0, eps = _pair(x0, eps, "v_target")
    signal, noise = schedule.coefficients(t)
    return _per_row(signal, x0) * eps - _per_row(noise, x0) * x0


def convert_prediction(pred, src: PredictionKind, dst: PredictionKind, x_t, t,
                       schedule: NoiseSchedule = COSINE):
    """Re-express a network prediction under another parameterization.

    Uses ``x_t = a x0 + s eps`` and ``v = a eps - s x0`` with ``a^2 + s^2 = 1``;
    from ``v`` both unknowns follow without division.
    """
    allowed = (PredictionKind.EPS, PredictionKind.X0, PredictionKind.V)
    if src not in allowed or dst not in allowed:
        raise ContractError("convert_prediction handles only EPS, X0 and V")
    pred, x_t = _pair(pred, x_t, "convert_prediction")
    a, s = schedule.coefficients(t)
    a, s = _per_row(a, x_t), _per_row(s, x_t)
    if src is dst:
        return pred.copy()
    if src is PredictionKind.V:
        x0 = a * x_t - s * pred
        eps = s * x_t + a * pred
    elif src is PredictionKind.EPS:
        if np.any(np.abs(a) < _SINGULAR):
            raise SingularityError("cannot recover x0 from eps where sqrt(alpha) ~ 0")
        eps = pred
        x0 = (x_t - s * eps) / a
    else:
        if np.any(np.abs(s) < _SINGULAR):
            raise SingularityError("cannot recover eps from x0 where sqrt(1-alpha) ~ 0")
        x0 = pred
        eps = (x_t - a * x0) / s
    if dst is PredictionKind.X0:
        return x0
    if dst is PredictionKind.EPS:
        return eps
    return a * eps - s * x0


def otcfm_path(x0, eps, t) -> PathSample:
    x0, eps = _pair(x0, eps, "otcfm_path")
    t = _check_t(t)
    tt = _per_row(t, x0)
    x_t = (1.0 - tt) * x0 + tt * eps
    return PathSample(x0, eps, t if t.ndim else float(t), x_t, eps - x0)


def vdiffusion_path(x0, eps, t, schedule: NoiseSchedule = COSINE) -> PathSample:
    x0, eps = _pair(x0, eps, "vdiffusion_path")
    t = _check_t(t)
    return PathSample(x0, eps, t if t.ndim else float(t),
                      diffuse(x0, eps, t, schedule), v_target(x0, eps, t, schedule))


def logit_normal_from_z(z):
    t = 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))
    return np.clip(t, T_MIN, T_MAX)


def sample_t(sampler: TimestepSampler, rng, size=None):
    """Training timesteps, clamped to [1e-5, 1 - 1e-5]."""
    if sampler is TimestepSampler.UNIFORM:
        t = np.clip(rng.uniform(size if size is not None else 1), T_MIN, T_MAX)
    elif sampler is TimestepSampler.LOGIT_NORMAL:
        t = logit_normal_from_z(rng.normal(size if size is not None else 1))
    else:
        raise ContractError(f"unknown timestep sampler {sampler!r}")
    return float(t[0]) if size is None else t


def snr(t, schedule: NoiseSchedule = COSINE):
    t = np.clip(_check_t(t), T_MIN, T_MAX)
    a = schedule.alpha(t)
    return a / (1.0 - a)


def minsnr_weight_from_snr(snr_value, gamma: float, kind: PredictionKind):
    snr_value = np.asarray(snr_value, dtype=np.float64)
    capped = np.minimum(snr_value, gamma)
    if kind is PredictionKind.EPS:
        return capped / snr_value
    if kind is PredictionKind.V:
        return capped / (snr_value + 1.0)
    raise ContractError("Min-SNR weighting is defined for EPS and V predictions only")


def minsnr_weight(t, gamma: float, schedule: NoiseSchedule = COSINE,
                  kind: PredictionKind = PredictionKind.V):
    """Min-SNR-gamma loss weight; t is clamped like training draws so SNR stays finite."""
    w = minsnr_weight_from_snr(snr(t, schedule), gamma, kind)
    return float(w) if np.ndim(w) == 0 else w


def _weights(objective, weighting, t, schedule):
    if weighting.gamma is None:
        return np.ones_like(t)
    if objective is Objective.OTCFM:
        raise ContractError("Min-SNR weighting needs a noise schedule; use it with v_diffusion")
    return minsnr_weight(t, weighting.gamma, schedule, PredictionKind.V)


Field = Callable[[T.Tensor, np.ndarray, object], T.Tensor]


def training_loss(field: Field, x0, cond, objective: Objective, sampler: TimestepSampler,
                  weighting: LossWeighting, rng, schedule: NoiseSchedule = COSINE,
                  t=None, eps=None) -> T.Tensor:
    """Weighted regression loss for one batch; a scalar tensor node.

    Each row gets its own ``t`` and noise (drawn from ``rng`` unless passed
    in). The squared error is averaged over feature dimensions, then
    weighted and averaged over the batch.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    batch = x0.shape[0]
    t = sample_t(sampler, rng, batch) if t is None else np.asarray(t, dtype=np.float64)
    eps = rng.normal(x0.shape) if eps is None else np.asarray(eps, dtype=np.float64)
    if objective is Objective.OTCFM:
        path = otcfm_path(x0, eps, t)
    elif objective is Objective.V_DIFFUSION:
        path = vdiffusion_path(x0, eps, t, schedule)
    else:
        raise ContractError(f"unknown objective {objective!r}")
    w = _weights(objective, weighting, t, schedule)
    pred = field(T.Tensor(path.x_t), t, cond)
    if pred.shape != x0.shape:
        raise ShapeError("training_loss", pred.shape, x0.shape, detail="field output vs data")
    sq = T.square(pred - path.target)
    per_row = T.mean(sq.reshape(batch, -1), axis=1)
    return T.mean(per_row * w)
