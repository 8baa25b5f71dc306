"""Embedding files, paired datasets and frame aggregation.

File layouts (all little-endian):

``EMB1`` embedding set::

    b"EMB1" | u32 version=1 | u32 N | u32 d | N*d float32, row-major

``EMS1`` frame sequences::

    b"EMS1" | u32 version=1 | u32 d | u32 count | count * (u32 n | n*d float32)

Paired-dataset manifest (JSON)::

    {"dim": 32,
     "samples": [{"id": "s0",
                  "frames": {"path": "frames.ems1", "index": 0},
                  "audio": {"path": "audio.emb1", "row": 0}}, ...]}

Relative paths in a manifest resolve against the manifest's directory.
``frames`` may instead point at an ``EMB1`` file, in which case the whole
set is taken as that sample's frame sequence.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    EmptySequenceError,
    FormatError,
    HeaderError,
    LengthError,
    NormalizationError,
    ShapeError,
)

EMB_MAGIC = b"EMB1"
EMS_MAGIC = b"EMS1"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class EmbeddingSet:
    """N rows of d-dimensional vectors."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2 or rows.shape[1] < 1:
            raise ShapeError(f"embedding set must be N x d with d >= 1, got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("embedding set contains non-finite values")
        object.__setattr__(self, "rows", rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]


@dataclass(frozen=True)
class PairedSample:
    """Per-frame visual embeddings of one clip plus its audio embedding."""

    frames: np.ndarray
    audio: np.ndarray
    id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames)
        audio = np.asarray(self.audio)
        if frames.ndim != 2:
            raise ShapeError(f"frames must be n x d, got {frames.shape}")
        if frames.shape[0] == 0:
            raise EmptySequenceError(f"sample {self.id!r} has no frames")
        if audio.shape != (frames.shape[1],):
            raise ConsistencyError(
                f"sample {self.id!r}: frame width {frames.shape[1]} != audio width {audio.shape}"
            )
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "audio", audio)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


class Aggregation(str, Enum):
    RANDOM = "random"
    MIDDLE = "middle"
    AVERAGE = "average"


@dataclass
class AggregatorStrategy:
    """How a frame sequence collapses to one vector.

    The ``random`` variant draws from its own generator, seeded once, so a
    fresh strategy with the same seed always picks the same frames.
    """

    kind: Aggregation = Aggregation.AVERAGE
    seed: int = 0
    _rng: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.kind = Aggregation(self.kind)

    def pick(self, n: int) -> int:
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)
        return int(self._rng.integers(n))


def aggregate(sample: PairedSample | np.ndarray, strategy: AggregatorStrategy | str) -> np.ndarray:
    """Reduce an n x d frame sequence to a single d-vector."""
    if isinstance(strategy, (str, Aggregation)):
        strategy = AggregatorStrategy(Aggregation(strategy))
    frames = sample.frames if isinstance(sample, PairedSample) else np.asarray(sample)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptySequenceError(f"cannot aggregate a frame sequence of shape {frames.shape}")
    n = frames.shape[0]
    if strategy.kind is Aggregation.AVERAGE:
        return frames.mean(axis=0)
    if strategy.kind is Aggregation.MIDDLE:
        return frames[n // 2].copy()
    return frames[strategy.pick(n)].copy()


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("cannot normalise a zero vector")
    return v / norms


# ---------------------------------------------------------------------------
# binary files

def _read_header(buf: bytes, magic: bytes, path) -> int:
    if len(buf) < 8:
        raise HeaderError(f"{path}: file too short for a header")
    if buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    (version,) = _U32.unpack_from(buf, 4)
    if version != FORMAT_VERSION:
        raise HeaderError(f"{path}: unsupported version {version}")
    return 8


def encode_embedding_set(rows: EmbeddingSet | np.ndarray) -> bytes:
    rows = np.asarray(rows.rows if isinstance(rows, EmbeddingSet) else rows)
    if rows.ndim != 2 or rows.shape[1] == 0:
        raise ShapeError(f"expected N x d rows, got {rows.shape}")
    n, d = rows.shape
    head = EMB_MAGIC + struct.pack("<III", FORMAT_VERSION, n, d)
    return head + np.ascontiguousarray(rows, dtype=_F32).tobytes()


def decode_embedding_set(buf: bytes, path="<bytes>") -> EmbeddingSet:
    off = _read_header(buf, EMB_MAGIC, path)
    if len(buf) < off + 8:
        raise HeaderError(f"{path}: truncated header")
    n, d = struct.unpack_from("<II", buf, off)
    off += 8
    if d == 0:
        raise HeaderError(f"{path}: header declares dim 0")
    expected = n * d * 4
    payload = len(buf) - off
    if payload != expected:
        raise LengthError(f"{path}: header declares {n}x{d} floats ({expected} bytes), payload has {payload}")
    rows = np.frombuffer(buf, dtype=_F32, count=n * d, offset=off).reshape(n, d).copy()
    return EmbeddingSet(rows)


def write_embedding_set(rows: EmbeddingSet | np.ndarray, path) -> None:
    Path(path).write_bytes(encode_embedding_set(rows))


def read_embedding_set(path) -> EmbeddingSet:
    return decode_embedding_set(Path(path).read_bytes(), path)


def encode_frame_sequences(seqs: Sequence[np.ndarray]) -> bytes:
    if not seqs:
        raise EmptySequenceError("no frame sequences to write")
    d = np.asarray(seqs[0]).shape[1]
    parts = [EMS_MAGIC, struct.pack("<III", FORMAT_VERSION, d, len(seqs))]
    for s in seqs:
        s = np.asarray(s)
        if s.ndim != 2 or s.shape[1] != d:
            raise ConsistencyError(f"frame sequence of shape {s.shape} in a width-{d} file")
        parts.append(_U32.pack(s.shape[0]))
        parts.append(np.ascontiguousarray(s, dtype=_F32).tobytes())
    return b"".join(parts)


def decode_frame_sequences(buf: bytes, path="<bytes>") -> list[np.ndarray]:
    off = _read_header(buf, EMS_MAGIC, path)
    if len(buf) < off + 8:
        raise HeaderError(f"{path}: truncated header")
    d, count = struct.unpack_from("<II", buf, off)
    off += 8
    if d == 0:
        raise HeaderError(f"{path}: header declares dim 0")
    out = []
    for i in range(count):
        if len(buf) < off + 4:
            raise LengthError(f"{path}: sequence {i} of {count} missing")
        (n,) = _U32.unpack_from(buf, off)
        off += 4
        size = n * d * 4
        if len(buf) < off + size:
            raise LengthError(f"{path}: sequence {i} declares {n} frames, payload is short")
        out.append(np.frombuffer(buf, dtype=_F32, count=n * d, offset=off).reshape(n, d).copy())
        off += size
    if off != len(buf):
        raise LengthError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def write_frame_sequences(seqs: Sequence[np.ndarray], path) -> None:
    Path(path).write_bytes(encode_frame_sequences(seqs))


def read_frame_sequences(path) -> list[np.ndarray]:
    return decode_frame_sequences(Path(path).read_bytes(), path)


def read_frames_any(path) -> list[np.ndarray]:
    """Frame sequences from an EMS1 file, or an EMB1 file as a single sequence."""
    buf = Path(path).read_bytes()
    if buf[:4] == EMB_MAGIC:
        return [decode_embedding_set(buf, path).rows]
    return decode_frame_sequences(buf, path)


# ---------------------------------------------------------------------------
# manifests

def _ref(entry, key: str, index_key: str):
    ref = entry[key]
    if isinstance(ref, str):
        path, _, idx = ref.partition("#")
        return path, int(idx) if idx else 0
    return ref["path"], int(ref.get(index_key, 0))


def read_paired_dataset(manifest_path) -> list[PairedSample]:
    """Load the samples listed in a manifest, in manifest order."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    base = manifest_path.parent
    dim = doc.get("dim")
    cache: dict[tuple[str, Path], object] = {}

    def load(kind, rel):
        p = base / rel
        key = (kind, p)
        if key not in cache:
            if not p.exists():
                raise FileNotFoundError(f"manifest {manifest_path} references missing file {p}")
            cache[key] = read_frames_any(p) if kind == "frames" else read_embedding_set(p)
        return cache[key]

    samples = []
    for i, entry in enumerate(doc["samples"]):
        fpath, fidx = _ref(entry, "frames", "index")
        apath, arow = _ref(entry, "audio", "row")
        seqs = load("frames", fpath)
        audio_set = load("audio", apath)
        frames = seqs[fidx]
        audio = audio_set.rows[arow]
        sid = str(entry.get("id", i))
        if frames.shape[1] != audio.shape[0]:
            raise ConsistencyError(
                f"sample {sid!r}: visual dim {frames.shape[1]} != audio dim {audio.shape[0]}"
            )
        if dim is not None and frames.shape[1] != dim:
            raise ConsistencyError(f"sample {sid!r}: dim {frames.shape[1]} != manifest dim {dim}")
        samples.append(PairedSample(frames, audio, sid))
    return samples


def write_paired_dataset(
    directory,
    samples: Sequence[PairedSample],
    frames_name: str = "frames.ems1",
    audio_name: str = "audio.emb1",
    manifest_name: str = "manifest.json",
) -> Path:
    """Write frames, audio targets and a manifest tying them together."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_frame_sequences([s.frames for s in samples], directory / frames_name)
    write_embedding_set(np.stack([s.audio for s in samples]), directory / audio_name)
    doc = {
        "dim": samples[0].dim,
        "samples": [
            {
                "id": s.id,
                "frames": {"path": frames_name, "index": i},
                "audio": {"path": audio_name, "row": i},
            }
            for i, s in enumerate(samples)
        ],
    }
    manifest = directory / manifest_name
    manifest.write_text(json.dumps(doc, indent=1) + "\n")
    return manifest


def prepare_pairs(
    samples: Iterable[PairedSample],
    strategy: AggregatorStrategy | str = "average",
    normalize: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate every sample once; returns (visual N x d, audio N x d)."""
    if isinstance(strategy, (str, Aggregation)):
        strategy = AggregatorStrategy(Aggregation(strategy))
    samples = list(samples)
    if not samples:
        raise EmptySequenceError("dataset is empty")
    visual = np.stack([aggregate(s, strategy) for s in samples]).astype(np.float64)
    audio = np.stack([s.audio for s in samples]).astype(np.float64)
    if normalize:
        visual, audio = l2_normalize(visual), l2_normalize(audio)
    return visual, audio

