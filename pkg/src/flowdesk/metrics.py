"""Distribution and instance metrics over embeddings and class posteriors.

* Frechet distance between Gaussian fits, with PSD square roots built on a
  cyclic Jacobi eigensolver.
* Paired KL(reference || generated), Inception Score, paired cosine score.
* Empirical 2-Wasserstein distance between equal-size point sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, ConvergenceError, SchemaError, ShapeError

PROB_FLOOR = 1e-12


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _as_set(x, name="embedding set") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeError(name, x.shape, detail="expected (n, d)")
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contains non-finite values")
    return x


def fit_gaussian(points) -> GaussianStats:
    """Sample mean and unbiased (n - 1) covariance of an ``(n, d)`` set."""
    x = _as_set(points)
    n = x.shape[0]
    if n < 2:
        raise ContractError(f"fit_gaussian needs at least 2 points, got {n}")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (n - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T))


def eigen_sym(m, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues ascending, eigenvectors as columns)``. Iterates
    until the off-diagonal Frobenius norm drops below ``tol * max(1, ||M||_F)``.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("eigen_sym", a.shape, detail="expected a square matrix")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(a), initial=0.0)):
        raise ContractError("eigen_sym needs a symmetric matrix")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    off_mask = ~np.eye(n, dtype=bool)
    threshold = tol * max(1.0, np.linalg.norm(a))
    for _ in range(max_sweeps):
        off = np.linalg.norm(a[off_mask])
        if off < threshold:
            order = np.argsort(np.diag(a), kind="stable")
            return np.diag(a)[order].copy(), v[:, order]
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    raise ConvergenceError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def sqrtm_psd(m) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to 0."""
    w, v = eigen_sym(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ShapeError("frechet_distance", a.cov.shape, b.cov.shape)
    diff = a.mean - b.mean
    root_a = sqrtm_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    cross = sqrtm_psd(0.5 * (inner + inner.T))
    fd = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross)
    return float(max(fd, 0.0))


def frechet_distance_sets(ref, gen) -> float:
    return frechet_distance(fit_gaussian(ref), fit_gaussian(gen))


def _as_posteriors(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(name, p.shape, detail="expected (n, classes)")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-9, rtol=0):
        raise ContractError(f"{name}: rows must be probability vectors")
    return p


def paired_kl(ref, gen) -> float:
    """Mean over paired rows of KL(ref_i || gen_i), probabilities floored at 1e-12."""
    ref = _as_posteriors(ref, "paired_kl ref")
    gen = _as_posteriors(gen, "paired_kl gen")
    if ref.shape != gen.shape:
        raise ShapeError("paired_kl", ref.shape, gen.shape)
    r = np.clip(ref, PROB_FLOOR, None)
    g = np.clip(gen, PROB_FLOOR, None)
    return float(np.mean(np.sum(r * (np.log(r) - np.log(g)), axis=1)))


def inception_score(p) -> float:
    p = _as_posteriors(p, "inception_score")
    if p.shape[0] < 1:
        raise ContractError("inception_score needs at least one row")
    q = np.clip(p, PROB_FLOOR, None)
    marginal = np.clip(p.mean(axis=0), PROB_FLOOR, None)
    kl = np.sum(q * (np.log(q) - np.log(marginal)), axis=1)
    return float(np.exp(np.mean(kl)))


def embedding_score(text_embs, audio_embs) -> float:
    """Mean paired cosine similarity; a zero vector scores 0."""
    t = _as_set(text_embs, "text embeddings")
    a = _as_set(audio_embs, "audio embeddings")
    if t.shape != a.shape:
        raise ShapeError("embedding_score", t.shape, a.shape)
    nt = np.linalg.norm(t, axis=1)
    na = np.linalg.norm(a, axis=1)
    denom = nt * na
    dots = np.sum(t * a, axis=1)
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return float(np.mean(cos))


def wasserstein2(x, y, max_points: int = 512, rng=None) -> float:
    """Empirical W2 between point sets via an optimal assignment.

    Sets are truncated (or subsampled with ``rng``) to a common size of at
    most ``max_points``.
    """
    x, y = _as_set(x), _as_set(y)
    if x.shape[1] != y.shape[1]:
        raise ShapeError("wasserstein2", x.shape, y.shape)
    n = min(len(x), len(y), max_points)
    if n < 1:
        raise ContractError("wasserstein2 needs non-empty sets")
    if rng is not None:
        x = x[rng.permutation(len(x))[:n]]
        y = y[rng.permutation(len(y))[:n]]
    else:
        x, y = x[:n], y[:n]
    cost = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


# ---------------------------------------------------------------------------
# JSON-lines input


def read_vectors(path) -> tuple[list[str], np.ndarray]:
    """Read ``{"id": ..., "vec": [...]}`` rows; the first row fixes the dimension."""
    path = Path(path)
    ids, vecs, dim = [], [], None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(row, dict) or "vec" not in row or "id" not in row:
                raise SchemaError('row needs "id" and "vec"', path, lineno)
            vec = row["vec"]
            if not isinstance(vec, list) or not all(isinstance(v, (int, float)) for v in vec):
                raise SchemaError('"vec" must be a list of numbers', path, lineno)
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise SchemaError(f"dimension {len(vec)} differs from first row's {dim}", path, lineno)
            ids.append(str(row["id"]))
            vecs.append(vec)
    arr = np.asarray(vecs, dtype=np.float64).reshape(len(vecs), dim or 0)
    return ids, arr


def write_vectors(path, ids, vecs) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for i, v in zip(ids, np.asarray(vecs, dtype=np.float64)):
            fh.write(json.dumps({"id": str(i), "vec": [float(x) for x in np.atleast_1d(v)]}) + "\n")
