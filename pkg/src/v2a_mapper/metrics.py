"""Fréchet distance, cosine relevance score, domain-gap report, PCA and interpolation."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding_io import EmbeddingSet
from .errors import ContractError, InsufficientDataError, ShapeError


def _rows(x) -> np.ndarray:
    arr = x.rows if isinstance(x, EmbeddingSet) else np.asarray(x)
    if arr.ndim != 2:
        raise ShapeError(f"expected an N x d set, got shape {arr.shape}")
    return arr.astype(np.float64, copy=False)


def matrix_sqrt_psd(S, sym_tol: float = 1e-8) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Negative eigenvalues (numerical noise) are clamped to zero.
    """
    S = np.asarray(S, dtype=np.float64)
    scale = max(1.0, float(np.abs(S).max(initial=0.0)))
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"matrix_sqrt_psd needs a square matrix, got {S.shape}")
    if np.abs(S - S.T).max(initial=0.0) > sym_tol * scale:
        raise ContractError("matrix_sqrt_psd: input is not symmetric")
    vals, vecs = np.linalg.eigh((S + S.T) / 2)
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return (root + root.T) / 2


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def from_samples(cls, x) -> "GaussianFit":
        x = _rows(x)
        if x.shape[0] < 2:
            raise InsufficientDataError(f"need at least 2 samples for a covariance, got {x.shape[0]}")
        if x.shape[0] < x.shape[1] + 1:
            warnings.warn(f"{x.shape[0]} samples in dimension {x.shape[1]}: covariance is singular", stacklevel=3)
        cov = np.cov(x, rowvar=False, ddof=1)
        return cls(x.mean(axis=0), np.atleast_2d((cov + cov.T) / 2), x.shape[0])


def _trace_sqrt_product(s1, s2) -> float:
    root1 = matrix_sqrt_psd(s1)
    inner = root1 @ s2 @ root1
    return float(np.trace(matrix_sqrt_psd((inner + inner.T) / 2)))


def frechet_gaussian(mu1, sigma1, mu2, sigma2) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, float)), np.atleast_2d(np.asarray(sigma2, float))
    d = mu1.shape[0]
    if mu2.shape != (d,) or s1.shape != (d, d) or s2.shape != (d, d):
        raise ContractError(f"frechet_gaussian: mismatched shapes {mu1.shape}, {s1.shape}, {mu2.shape}, {s2.shape}")
    if np.array_equal(mu1, mu2) and np.array_equal(s1, s2):
        return 0.0
    try:
        tr = _trace_sqrt_product(s1, s2)
        if not np.isfinite(tr):
            raise np.linalg.LinAlgError("non-finite trace")
    except np.linalg.LinAlgError:
        jitter = 1e-6 * np.eye(d)
        s1, s2 = s1 + jitter, s2 + jitter
        tr = _trace_sqrt_product(s1, s2)
    diff = mu1 - mu2
    # round-off can push identical inputs slightly below zero
    return max(float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr), 0.0)


def frechet_from_samples(x, y) -> float:
    fx, fy = GaussianFit.from_samples(x), GaussianFit.from_samples(y)
    if fx.mean.shape != fy.mean.shape:
        raise ContractError(f"sets have different widths: {fx.mean.shape[0]} vs {fy.mean.shape[0]}")
    return frechet_gaussian(fx.mean, fx.cov, fy.mean, fy.cov)


def paired_cosines(a, b) -> tuple[np.ndarray, int]:
    """Cosine of each row pair; pairs containing a zero vector are dropped.

    Returns the cosines and the number of skipped pairs.
    """
    a, b = _rows(a), _rows(b)
    if a.shape != b.shape:
        raise ContractError(f"paired sets differ in shape: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    return np.clip(cos, -1.0, 1.0), int((~ok).sum())


def cosine_score(a, b, raw: bool = False) -> float:
    """Mean paired cosine similarity, times 100 unless ``raw``."""
    cos, skipped = paired_cosines(a, b)
    if skipped:
        warnings.warn(f"skipped {skipped} pairs containing a zero vector", stacklevel=2)
    if cos.size == 0:
        raise InsufficientDataError("no valid pairs to score")
    m = float(cos.mean())
    return m if raw else 100.0 * m


def pca_2d(z) -> tuple[np.ndarray, np.ndarray]:
    """Project centred rows onto the top two principal axes.

    Returns ``(coords N x 2, components 2 x d)``.  Each component's sign is
    fixed so that its largest-magnitude entry is positive.
    """
    z = _rows(z)
    if z.shape[0] < 2:
        raise InsufficientDataError("PCA needs at least two rows")
    centred = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:  # d == 1
        comps = np.vstack([comps, np.zeros_like(comps)])
    signs = np.sign(comps[np.arange(2), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return centred @ comps.T, comps


@dataclass
class GapReport:
    cosines: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float
    coords_x: np.ndarray
    coords_y: np.ndarray
    components: np.ndarray
    skipped: int = 0

    def summary(self) -> dict:
        return {
            "n_pairs": int(self.cosines.size),
            "skipped": self.skipped,
            "mean_cosine": self.mean,
            "std_cosine": self.std,
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)

    def write_csv(self, histogram_path=None, coords_path=None) -> None:
        if histogram_path is not None:
            with open(histogram_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["bin_lo", "bin_hi", "count"])
                for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
                    w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(c)])
        if coords_path is not None:
            with open(coords_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["set", "index", "pc1", "pc2"])
                for label, coords in (("x", self.coords_x), ("y", self.coords_y)):
                    for i, (c1, c2) in enumerate(coords):
                        w.writerow([label, i, f"{c1:.9g}", f"{c2:.9g}"])


def gap_report(x, y, bins: int = 20) -> GapReport:
    """Paired-cosine histogram over [-1, 1] plus a shared 2-D projection."""
    x, y = _rows(x), _rows(y)
    cos, skipped = paired_cosines(x, y)
    if cos.size == 0:
        raise InsufficientDataError("no valid pairs for a gap report")
    counts, edges = np.histogram(cos, bins=bins, range=(-1.0, 1.0))
    coords, comps = pca_2d(np.vstack([x, y]))
    return GapReport(
        cosines=cos,
        bin_edges=edges,
        counts=counts,
        mean=float(cos.mean()),
        std=float(cos.std()),
        coords_x=coords[: len(x)],
        coords_y=coords[len(x):],
        components=comps,
        skipped=skipped,
    )


def lerp(a, b, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"interpolation weight must lie in [0, 1], got {alpha}")
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot interpolate {a.shape} and {b.shape}")
    if alpha == 0.0:
        return a.copy()
    if alpha == 1.0:
        return b.copy()
    return (1.0 - alpha) * a + alpha * b


def interpolate_path(a, b, steps: int, renormalize: bool = False) -> np.ndarray:
    """``steps`` evenly spaced points from ``a`` to ``b`` inclusive."""
    if steps < 2:
        raise ContractError(f"an interpolation path needs at least 2 steps, got {steps}")
    path = np.stack([lerp(a, b, float(al)) for al in np.linspace(0.0, 1.0, steps)])
    if renormalize:
        norms = np.linalg.norm(path, axis=1, keepdims=True)
        path = np.divide(path, norms, out=path.copy(), where=norms > 0)
    return path


def write_report(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
