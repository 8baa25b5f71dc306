"""Training loops for regression and diffusion mappers, AdamW and checkpoints.

All randomness derives from ``TrainConfig.seed`` through independent named
streams (init, shuffle, noise, dropout, aggregate).  Per-epoch streams are
keyed by the epoch number, so a run resumed from a checkpoint draws exactly
what the uninterrupted run would have drawn.  Results are bit-reproducible
when BLAS runs single-threaded.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .diffusion import cosine_schedule, diffusion_loss_fixed
from .embedding_io import (
    Aggregation,
    AggregatorStrategy,
    PairedSample,
    l2_normalize,
    prepare_pairs,
)
from .errors import ContractError, FormatError, MigrationError, ShapeError
from .models import MapperConfig, as_tensors, forward_regression, init_params, param_shapes

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"V2AM"
CHECKPOINT_VERSION = 1

_STREAMS = {"init": 0, "shuffle": 1, "noise": 2, "dropout": 3, "aggregate": 4}


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAMS[name], *keys])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 448
    lr: float = 1.1e-4
    epochs: int = 100
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    drop_rate: float = 0.1
    seed: int = 0
    aggregator: str = "average"
    redraw_random: bool = False
    normalize: bool = True
    timesteps: int = 1000
    schedule_s: float = 0.008

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.lr < 0:
            raise ContractError("learning rate must be >= 0")
        if not 0 <= self.drop_rate < 1:
            raise ContractError("drop_rate must be in [0, 1)")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        Aggregation(self.aggregator)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        fields = dict(batch_size=64, lr=1e-3, epochs=200)
        fields.update(overrides)
        return cls(**fields)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update, applied in place.

    Weight decay shrinks each parameter before the bias-corrected Adam step.
    """
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"{name}: parameter {p.shape}, gradient {g.shape}, state {state.m[name].shape}")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def regression_loss(pred, target) -> Tensor:
    """Mean over the batch of per-sample squared L2 distance."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[0] < 1:
        raise ContractError(f"regression_loss: prediction {pred.shape} vs target {target.shape}")
    return ad.mean(ad.sum_(ad.square(ad.sub(pred, target)), axis=-1))


@dataclass
class Checkpoint:
    mapper: MapperConfig
    params: dict[str, np.ndarray]
    opt: AdamState
    train: TrainConfig
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @property
    def seed(self) -> int:
        return self.train.seed


def _dataset_arrays(dataset, cfg: TrainConfig, epoch: int | None = None):
    if isinstance(dataset, tuple):
        visual, audio = (np.asarray(a, dtype=np.float64) for a in dataset)
        if cfg.normalize:
            visual, audio = l2_normalize(visual), l2_normalize(audio)
        return visual, audio
    keys = () if epoch is None else (epoch,)
    seed = int(stream(cfg.seed, "aggregate", *keys).integers(2**31))
    return prepare_pairs(dataset, AggregatorStrategy(Aggregation(cfg.aggregator), seed), cfg.normalize)


def train(
    mapper: MapperConfig,
    dataset: Sequence[PairedSample] | tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    dtype=np.float32,
    progress=None,
) -> Checkpoint:
    """Fit a mapper with AdamW; returns a checkpoint with per-epoch mean loss.

    ``dataset`` is either paired samples (aggregated once here) or an
    already-prepared ``(visual, audio)`` pair of N x d arrays.
    """
    if not isinstance(dataset, tuple) and len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    redraw = cfg.redraw_random and cfg.aggregator == "random" and not isinstance(dataset, tuple)
    visual, audio = _dataset_arrays(dataset, cfg)
    if visual.shape[0] == 0:
        raise ContractError("cannot train on an empty dataset")
    if visual.shape[1] != mapper.dim or audio.shape[1] != mapper.dim:
        raise ShapeError(f"dataset dim {visual.shape[1]} does not match model dim {mapper.dim}")

    if resume is None:
        params = init_params(mapper, int(stream(cfg.seed, "init").integers(2**31)), dtype=dtype)
        ckpt = Checkpoint(mapper, params, AdamState.zeros_like(params), cfg)
    else:
        if resume.mapper != mapper:
            raise ContractError("resume checkpoint was trained with a different mapper config")
        ckpt = Checkpoint(resume.mapper, resume.params, resume.opt, cfg, resume.epoch, list(resume.loss_history))

    tensors = as_tensors(ckpt.params, requires_grad=True)
    schedule = cosine_schedule(cfg.timesteps, cfg.schedule_s) if mapper.variant.is_diffusion else None
    if schedule is not None and schedule.T != mapper.max_timesteps:
        raise ContractError(f"schedule T={schedule.T} but model has {mapper.max_timesteps} timestep rows")
    n = visual.shape[0]

    for epoch in range(ckpt.epoch, cfg.epochs):
        if redraw:
            visual, audio = _dataset_arrays(dataset, cfg, epoch)
        vis32, aud32 = visual.astype(dtype), audio.astype(dtype)
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        noise_rng = stream(cfg.seed, "noise", epoch)
        drop_rng = stream(cfg.seed, "dropout", epoch)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ev, ea = vis32[idx], aud32[idx]
            for t in tensors.values():
                t.zero_grad()
            with Tape() as tape:
                if schedule is None:
                    loss = regression_loss(forward_regression(tensors, mapper, ev), ea)
                else:
                    t = noise_rng.integers(1, schedule.T + 1, size=len(idx))
                    eps = noise_rng.standard_normal(ea.shape).astype(dtype)
                    keep = drop_rng.random(len(idx)) >= cfg.drop_rate
                    loss = diffusion_loss_fixed(tensors, mapper, ev, ea, t, eps, keep, schedule)
            ad.backward(loss, tape)
            adamw_step(
                ckpt.params,
                {k: t.grad for k, t in tensors.items()},
                ckpt.opt,
                cfg.lr,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
                cfg.weight_decay,
            )
            total += float(loss.data) * len(idx)
        ckpt.loss_history.append(total / n)
        ckpt.epoch = epoch + 1
        if progress is not None:
            progress(ckpt.epoch, ckpt.loss_history[-1])
        log.debug("epoch %d loss %.6g", ckpt.epoch, ckpt.loss_history[-1])
    return ckpt


# ---------------------------------------------------------------------------
# persistence

def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = {
        "mapper": ckpt.mapper.to_dict(),
        "train": asdict(ckpt.train),
        "epoch": ckpt.epoch,
        "loss_history": ckpt.loss_history,
        "adam_step": ckpt.opt.step,
        "seed": ckpt.train.seed,
        "normalize": ckpt.train.normalize,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.version, len(blob)), blob]
    for name in ckpt.params:
        parts.append(_pack_tensor("param/" + name, ckpt.params[name]))
        parts.append(_pack_tensor("adam_m/" + name, ckpt.opt.m[name]))
        parts.append(_pack_tensor("adam_v/" + name, ckpt.opt.v[name]))
    return b"".join(parts)


def decode_checkpoint(buf: bytes, path="<bytes>") -> Checkpoint:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    version, blob_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise MigrationError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    off = 12
    try:
        meta = json.loads(buf[off:off + blob_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt config blob ({exc})") from None
    off += blob_len

    sections: dict[str, np.ndarray] = {}
    try:
        while off < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if off + 4 * count > len(buf):
                raise FormatError(f"{path}: tensor {name!r} payload is truncated")
            sections[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()
            off += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt tensor section ({exc})") from None

    mapper = MapperConfig.from_dict(meta["mapper"])
    names = [k.split("/", 1)[1] for k in sections if k.startswith("param/")]
    try:
        params = {k: sections["param/" + k].astype(np.float32) for k in names}
        opt = AdamState(
            {k: sections["adam_m/" + k] for k in names},
            {k: sections["adam_v/" + k] for k in names},
            int(meta["adam_step"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor section {exc}") from None
    expected = param_shapes(mapper)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        missing = sorted(set(expected) - set(got))
        bad = sorted(k for k in got if k in expected and got[k] != expected[k])
        raise FormatError(f"{path}: parameter sections do not match the config (missing {missing}, misshapen {bad})")
    return Checkpoint(
        mapper=mapper,
        params=params,
        opt=opt,
        train=TrainConfig(**meta["train"]),
        epoch=int(meta["epoch"]),
        loss_history=[float(x) for x in meta["loss_history"]],
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), path)


def with_epochs(cfg: TrainConfig, epochs: int) -> TrainConfig:
    return replace(cfg, epochs=epochs)
