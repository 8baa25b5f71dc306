"""Synthetic paired datasets with a known visual-to-audio translation.

Visual bases cluster around random centres on the unit sphere.  Each sample
emits ``n`` jittered, normalised frames of its base; its audio target is
``normalize(R @ base + offset + sigma_audio * z)`` with ``R`` a random
rotation.  With ``sigma_audio == 0`` the map is one-to-one and
``oracle_map`` gives the exact answer; with ``sigma_audio > 0`` each visual
input has a spread of valid targets.

Noise scales are per-coordinate standard deviations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embedding_io import PairedSample, l2_normalize, write_paired_dataset
from .errors import ContractError


@dataclass(frozen=True)
class OracleConfig:
    dim: int = 32
    n_samples: int = 4096
    n_clusters: int = 8
    cluster_spread: float = 0.1
    frames_min: int = 4
    frames_max: int = 12
    sigma_frames: float = 0.02
    sigma_audio: float = 0.0
    offset_scale: float = 0.5
    max_rotation_trace: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.n_samples < 1 or self.n_clusters < 1:
            raise ContractError("dim, n_samples and n_clusters must be >= 1")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ContractError(f"bad frame range [{self.frames_min}, {self.frames_max}]")
        if min(self.cluster_spread, self.sigma_frames, self.sigma_audio, self.offset_scale) < 0:
            raise ContractError("noise scales must be >= 0")

    @property
    def one_to_many(self) -> bool:
        return self.sigma_audio > 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OracleHandle:
    """Ground truth of a generated dataset."""

    rotation: np.ndarray
    offset: np.ndarray
    bases: np.ndarray
    clusters: np.ndarray
    sigma_audio: float


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR with sign correction)."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def oracle_map(v, handle: OracleHandle) -> np.ndarray:
    """Exact noiseless audio target for visual vector(s) ``v``."""
    v = np.asarray(v, dtype=np.float64)
    return l2_normalize(v @ handle.rotation.T + handle.offset)


def oracle_targets(handle: OracleHandle, base, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws from the target distribution of one visual base."""
    mean = np.asarray(base, dtype=np.float64) @ handle.rotation.T + handle.offset
    return l2_normalize(mean + handle.sigma_audio * rng.standard_normal((n, mean.shape[-1])))


def conditional_spread(samples) -> float:
    """Trace of the sample covariance of outputs drawn for one condition."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < 2:
        return 0.0
    return float(np.trace(np.atleast_2d(np.cov(x, rowvar=False, ddof=1))))


def gen_paired(config: OracleConfig) -> tuple[list[PairedSample], OracleHandle]:
    rng = np.random.default_rng(config.seed)
    d = config.dim
    rotation = random_rotation(d, rng)
    # far from identity, so visual and audio sets start nearly uncorrelated
    while d > 1 and abs(np.trace(rotation)) / d > config.max_rotation_trace:
        rotation = random_rotation(d, rng)
    offset = config.offset_scale * l2_normalize(rng.standard_normal(d))
    centers = l2_normalize(rng.standard_normal((config.n_clusters, d)))

    clusters = rng.integers(config.n_clusters, size=config.n_samples)
    bases = l2_normalize(centers[clusters] + config.cluster_spread * rng.standard_normal((config.n_samples, d)))
    handle = OracleHandle(rotation, offset, bases, clusters, config.sigma_audio)

    lengths = rng.integers(config.frames_min, config.frames_max + 1, size=config.n_samples)
    audio = l2_normalize(
        bases @ rotation.T + offset + config.sigma_audio * rng.standard_normal((config.n_samples, d))
    )
    samples = []
    width = len(str(config.n_samples - 1))
    for i in range(config.n_samples):
        jitter = config.sigma_frames * rng.standard_normal((lengths[i], d))
        frames = l2_normalize(bases[i] + jitter)
        samples.append(
            PairedSample(frames.astype(np.float32), audio[i].astype(np.float32), f"s{i:0{width}d}")
        )
    return samples, handle


def write_oracle_dataset(config: OracleConfig, directory) -> tuple[Path, list[PairedSample], OracleHandle]:
    samples, handle = gen_paired(config)
    manifest = write_paired_dataset(directory, samples)
    return manifest, samples, handle


def split(samples, n_holdout: int):
    """Deterministic split: the last ``n_holdout`` samples are held out."""
    if not 0 <= n_holdout < len(samples):
        raise ContractError(f"cannot hold out {n_holdout} of {len(samples)} samples")
    return samples[: len(samples) - n_holdout], samples[len(samples) - n_holdout:]
