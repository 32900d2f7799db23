"""Two-dimensional toy datasets and their analytic reference quantities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .rng import Rng

DATASETS = ("gauss_mixture", "two_moons", "cond_checkerboard")

MIXTURE_CENTERS = np.array([[2.0, 2.0], [2.0, -2.0], [-2.0, 2.0], [-2.0, -2.0]])
MIXTURE_SIGMA = 0.3

# 4x4 unit cells over [-2, 2]^2; cell (i, j) is occupied when i + j is even.
# The class of an occupied cell is its quadrant, so each class owns two cells.
CHECKER_CELLS = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0])
CHECKER_CENTERS = CHECKER_CELLS - 2.0 + 0.5
CHECKER_CLASSES = 2 * (CHECKER_CELLS[:, 0] >= 2) + (CHECKER_CELLS[:, 1] >= 2)
N_CHECKER_CLASSES = 4


@dataclass
class ToyDataset:
    name: str
    points: np.ndarray
    labels: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def n_classes(self) -> int:
        return N_CHECKER_CLASSES if self.labels is not None else 0


def mixture_moments() -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the equal-weight four-Gaussian mixture."""
    mean = MIXTURE_CENTERS.mean(axis=0)
    centered = MIXTURE_CENTERS - mean
    cov = centered.T @ centered / len(MIXTURE_CENTERS) + MIXTURE_SIGMA**2 * np.eye(2)
    return mean, cov


def _gauss_mixture(n, rng):
    comp = rng.integers(len(MIXTURE_CENTERS), n)
    return MIXTURE_CENTERS[comp] + MIXTURE_SIGMA * rng.normal((n, 2)), None


def _two_moons(n, rng, noise=0.05):
    upper = rng.bernoulli(0.5, n)
    theta = np.pi * rng.uniform(n)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x - 0.5, y - 0.25], axis=1) * 1.5
    return pts + noise * rng.normal((n, 2)), None


def _checkerboard(n, rng):
    labels = rng.integers(N_CHECKER_CLASSES, n)
    pick = rng.integers(2, n)
    cell_ids = np.array([np.flatnonzero(CHECKER_CLASSES == c) for c in range(N_CHECKER_CLASSES)])
    cells = CHECKER_CELLS[cell_ids[labels, pick]]
    pts = cells - 2.0 + rng.uniform((n, 2))
    return pts, labels.astype(np.int64)


_GENERATORS = {"gauss_mixture": _gauss_mixture, "two_moons": _two_moons,
               "cond_checkerboard": _checkerboard}


def gen_toy_dataset(name: str, n: int, seed: int = 0) -> ToyDataset:
    if name not in _GENERATORS:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {', '.join(DATASETS)}")
    if n < 1:
        raise ContractError(f"dataset size must be at least 1, got {n}")
    points, labels = _GENERATORS[name](int(n), Rng(seed).derive(DATASETS.index(name)))
    return ToyDataset(name, points, labels)


def checker_class_of(points) -> np.ndarray:
    """Class of the nearest occupied checkerboard cell for each point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    d = np.sum((pts[:, None, :] - CHECKER_CENTERS[None]) ** 2, axis=-1)
    return CHECKER_CLASSES[np.argmin(d, axis=1)]


def class_consistency(points, labels) -> float:
    """Fraction of points whose nearest occupied cell belongs to their prompted class."""
    labels = np.broadcast_to(np.asarray(labels), (len(points),))
    if len(points) == 0:
        raise ContractError("class_consistency needs at least one point")
    return float(np.mean(checker_class_of(points) == labels))
