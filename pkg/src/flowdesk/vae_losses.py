"""Waveform autoencoder losses: multi-resolution STFT (mono and stereo
sum/difference), hinge adversarial, feature matching and Gaussian KL.

Discriminators are not modelled here; their outputs arrive as
:class:`DiscriminatorTaps`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateReferenceError, ShapeError
from .tensor import Tensor

MAG_FLOOR = 1e-7
_POWER_FLOOR = 1e-30


@dataclass(frozen=True)
class Resolution:
    fft_size: int
    hop: int
    window_length: int

    def __post_init__(self):
        if not 0 < self.hop <= self.window_length <= self.fft_size:
            raise ContractError(f"need 0 < hop <= window_length <= fft_size, got {self}")


DEFAULT_RESOLUTIONS = (
    Resolution(512, 128, 512),
    Resolution(1024, 256, 1024),
    Resolution(2048, 512, 2048),
)


@dataclass(frozen=True)
class StftConfig:
    resolutions: tuple[Resolution, ...] = DEFAULT_RESOLUTIONS

    def __post_init__(self):
        if not self.resolutions:
            raise ContractError("StftConfig needs at least one resolution")


@dataclass
class StereoSignal:
    left: np.ndarray
    right: np.ndarray
    sample_rate: int = 44100

    def __post_init__(self):
        if np.shape(self.left) != np.shape(self.right):
            raise ShapeError("StereoSignal", np.shape(self.left), np.shape(self.right))

    @property
    def sum(self):
        return self.left + self.right

    @property
    def diff(self):
        return self.left - self.right


@dataclass
class DiscriminatorTaps:
    """Per-discriminator final scores and per-layer feature maps."""

    scores: list
    features: list = field(default_factory=list)


@dataclass
class LatentPosterior:
    mean: np.ndarray
    logvar: np.ndarray


# ---------------------------------------------------------------------------
# STFT


@lru_cache(maxsize=32)
def _hann(window_length: int, fft_size: int) -> np.ndarray:
    n = np.arange(window_length)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_length)  # periodic Hann
    out = np.zeros(fft_size)
    start = (fft_size - window_length) // 2
    out[start:start + window_length] = w
    return out


@lru_cache(maxsize=32)
def _frame_index(n: int, fft_size: int, hop: int) -> np.ndarray:
    """Indices of reflection-padded, centered frames into the raw signal."""
    pad = fft_size // 2
    if pad > n - 1:
        raise ContractError(f"signal of {n} samples too short for reflection padding {pad}")
    frames = 1 + (n + 2 * pad - fft_size) // hop
    j = np.arange(frames)[:, None] * hop + np.arange(fft_size)[None, :] - pad
    j = np.where(j < 0, -j, j)
    return np.where(j >= n, 2 * (n - 1) - j, j)


@lru_cache(maxsize=8)
def _dft_mats(fft_size: int):
    k = np.arange(fft_size)[:, None]
    f = np.arange(fft_size // 2 + 1)[None, :]
    ang = 2.0 * np.pi * ((k * f) % fft_size) / fft_size
    return np.cos(ang), -np.sin(ang)


def _check_len(n, res: Resolution):
    if n < res.window_length:
        raise ContractError(f"signal length {n} shorter than window length {res.window_length}")


def stft_mag(signal, res: Resolution) -> np.ndarray:
    """Magnitude spectrogram, shape ``(frames, fft_size // 2 + 1)``."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("stft_mag", x.shape, detail="expected mono samples")
    _check_len(len(x), res)
    frames = x[_frame_index(len(x), res.fft_size, res.hop)] * _hann(res.window_length, res.fft_size)
    return np.abs(np.fft.rfft(frames, axis=-1))


def stft_mag_tensor(signal: Tensor, res: Resolution) -> Tensor:
    """Differentiable magnitude spectrogram via explicit DFT matrices."""
    n = signal.shape[-1]
    _check_len(n, res)
    frames = T.getitem(signal, _frame_index(n, res.fft_size, res.hop)) * _hann(res.window_length, res.fft_size)
    cos, sin = _dft_mats(res.fft_size)
    re, im = frames @ cos, frames @ sin
    return T.sqrt(T.clip_min(re * re + im * im, _POWER_FLOOR))


def _resolution_terms(ref_mag: np.ndarray, est_mag):
    ref_norm = np.linalg.norm(ref_mag)
    if ref_norm == 0.0:
        raise DegenerateReferenceError("reference spectrogram is all zeros")
    frames = ref_mag.shape[0]
    log_ref = np.log(np.maximum(ref_mag, MAG_FLOOR))
    if isinstance(est_mag, Tensor):
        d = est_mag - ref_mag
        sc = T.sqrt(T.sum_(d * d)) / ref_norm
        log_term = T.sum_(T.abs_(log_ref - T.log(T.clip_min(est_mag, MAG_FLOOR)))) / frames
    else:
        sc = np.linalg.norm(ref_mag - est_mag) / ref_norm
        log_term = np.sum(np.abs(log_ref - np.log(np.maximum(est_mag, MAG_FLOOR)))) / frames
    return sc, log_term


def spectral_convergence(x, x_hat, res: Resolution) -> float:
    sc, _ = _resolution_terms(stft_mag(x, res), stft_mag(x_hat, res))
    return float(sc)


def mrstft_loss(x, x_hat, cfg: StftConfig = StftConfig()):
    """Sum over resolutions of spectral convergence plus per-frame log-magnitude L1.

    With a :class:`Tensor` ``x_hat`` the result is a differentiable scalar
    tensor; otherwise a float.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.shape(x) != tuple(x_hat.shape if isinstance(x_hat, Tensor) else np.shape(x_hat)):
        raise ShapeError("mrstft_loss", np.shape(x), np.shape(x_hat))
    total = 0.0
    for res in cfg.resolutions:
        ref = stft_mag(x, res)
        est = stft_mag_tensor(x_hat, res) if isinstance(x_hat, Tensor) else stft_mag(x_hat, res)
        sc, log_term = _resolution_terms(ref, est)
        total = total + sc + log_term
    return total if isinstance(total, Tensor) else float(total)


def stereo_mrstft_loss(x: StereoSignal, x_hat: StereoSignal, cfg: StftConfig = StftConfig()):
    if np.shape(x.left) != np.shape(x_hat.left):
        raise ShapeError("stereo_mrstft_loss", np.shape(x.left), np.shape(x_hat.left))
    return mrstft_loss(x.sum, x_hat.sum, cfg) + mrstft_loss(x.diff, x_hat.diff, cfg)


# ---------------------------------------------------------------------------
# adversarial terms


def hinge_adv_loss(taps_real: DiscriminatorTaps, taps_fake: DiscriminatorTaps) -> float:
    """``sum_k [max(0, 1 - D_k(x)) + max(0, 1 + D_k(x_hat))]``; map-valued scores are averaged."""
    if len(taps_real.scores) != len(taps_fake.scores):
        raise ShapeError("hinge_adv_loss", (len(taps_real.scores),), (len(taps_fake.scores),))
    total = 0.0
    for real, fake in zip(taps_real.scores, taps_fake.scores):
        total += np.mean(np.maximum(0.0, 1.0 - np.asarray(real, dtype=np.float64)))
        total += np.mean(np.maximum(0.0, 1.0 + np.asarray(fake, dtype=np.float64)))
    return float(total)


def feature_matching_loss(taps_real: DiscriminatorTaps, taps_fake: DiscriminatorTaps) -> float:
    """Relative L1 distance between real and fake feature maps, averaged over all (k, l)."""
    if len(taps_real.features) != len(taps_fake.features):
        raise ShapeError("feature_matching_loss", (len(taps_real.features),), (len(taps_fake.features),))
    terms = []
    for layers_r, layers_f in zip(taps_real.features, taps_fake.features):
        if len(layers_r) != len(layers_f):
            raise ShapeError("feature_matching_loss", (len(layers_r),), (len(layers_f),))
        for r, f in zip(layers_r, layers_f):
            r = np.asarray(r, dtype=np.float64)
            f = np.asarray(f, dtype=np.float64)
            if r.shape != f.shape:
                raise ShapeError("feature_matching_loss", r.shape, f.shape)
            terms.append(np.mean(np.abs(r - f)) / max(np.mean(np.abs(r)), 1e-12))
    if not terms:
        raise ContractError("feature_matching_loss needs at least one feature map")
    return float(np.mean(terms))


def gaussian_kl_loss(post: LatentPosterior) -> float:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims; log-variance clamped to [-30, 20]."""
    mu = np.asarray(post.mean, dtype=np.float64)
    lv = np.clip(np.asarray(post.logvar, dtype=np.float64), -30.0, 20.0)
    return float(0.5 * np.sum(mu * mu + (np.expm1(lv) - lv)))


# ---------------------------------------------------------------------------
# test signals and raw I/O


def sine(n: int, freq: float, sample_rate: float, amp: float = 1.0, phase: float = 0.0):
    return amp * np.sin(2.0 * np.pi * freq * np.arange(n) / sample_rate + phase)


def chirp(n: int, f0: float, f1: float, sample_rate: float, amp: float = 1.0):
    t = np.arange(n) / sample_rate
    dur = n / sample_rate
    return amp * np.sin(2.0 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / dur))


def noise(n: int, rng, amp: float = 1.0):
    return amp * rng.normal(n)


def read_raw(path, channels: int = 1) -> np.ndarray:
    """Headerless little-endian f64 samples, channel-interleaved -> ``(channels, n)``."""
    data = np.fromfile(Path(path), dtype="<f8")
    if channels < 1 or data.size % channels:
        raise ContractError(f"{data.size} samples do not split into {channels} channels")
    return data.reshape(-1, channels).T.copy()


def write_raw(path, channels_data: Sequence[np.ndarray]) -> None:
    arr = np.stack([np.asarray(c, dtype="<f8") for c in channels_data], axis=1)
    arr.tofile(Path(path))
