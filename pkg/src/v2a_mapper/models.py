"""Mapper networks that translate a visual embedding into the audio space.

Four variants share one parameter-dict representation:

* ``reg-mlp``          D x (linear -> SiLU -> LayerNorm), then linear to d
* ``diff-mlp``         same stack over concat(time, noisy audio, condition)
* ``reg-transformer``  [condition, output] tokens through pre-norm encoder blocks
* ``diff-transformer`` [time, noisy audio, condition, output] tokens

In the transformer variants the prediction is read from the learnable output
token.  Each token slot gets a learned type embedding; there are no
positional encodings.  Diffusion variants also hold a timestep table with a
projection, and a learned null condition used for classifier-free guidance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


class Variant(str, Enum):
    REG_MLP = "reg-mlp"
    REG_TRANSFORMER = "reg-transformer"
    DIFF_MLP = "diff-mlp"
    DIFF_TRANSFORMER = "diff-transformer"

    @property
    def is_diffusion(self) -> bool:
        return self in (Variant.DIFF_MLP, Variant.DIFF_TRANSFORMER)

    @property
    def is_transformer(self) -> bool:
        return self in (Variant.REG_TRANSFORMER, Variant.DIFF_TRANSFORMER)


@dataclass(frozen=True)
class MapperConfig:
    variant: Variant = Variant.DIFF_TRANSFORMER
    dim: int = 512
    depth: int = 12
    expansion: int = 4
    heads: int = 12
    head_dim: int = 64
    ff_expansion: int = 4
    max_timesteps: int = 1000
    ln_eps: float = 1e-5
    embed_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.dim < 1:
            raise ContractError(f"dim must be >= 1, got {self.dim}")
        if self.depth < 1 or self.expansion < 1 or self.ff_expansion < 1:
            raise ContractError("depth, expansion and ff_expansion must be >= 1")
        if self.heads * self.head_dim < 1:
            raise ContractError("heads * head_dim must be >= 1")
        if self.variant.is_diffusion and self.max_timesteps < 1:
            raise ContractError("diffusion variants need max_timesteps >= 1")

    @property
    def diffusion_scale(self) -> float:
        """Factor from embedding units to the diffusion state (default sqrt(dim))."""
        return math.sqrt(self.dim) if self.embed_scale is None else self.embed_scale

    @property
    def n_tokens(self) -> int:
        return 4 if self.variant.is_diffusion else 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MapperConfig":
        return cls(**d)


# best settings from the architecture sweeps
PAPER_DEPTH = {
    Variant.REG_MLP: 1,
    Variant.DIFF_MLP: 1,
    Variant.REG_TRANSFORMER: 8,
    Variant.DIFF_TRANSFORMER: 12,
}


def default_config(variant: Variant | str, dim: int = 512, **overrides) -> MapperConfig:
    variant = Variant(variant)
    fields = dict(variant=variant, dim=dim, depth=PAPER_DEPTH[variant], expansion=4)
    fields.update(overrides)
    return MapperConfig(**fields)


def param_shapes(config: MapperConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every parameter, in a fixed order."""
    d = config.dim
    shapes: dict[str, tuple[int, ...]] = {}
    if config.variant.is_diffusion:
        shapes["time.table"] = (config.max_timesteps, d)
        shapes["time.proj.w"] = (d, d)
        shapes["time.proj.b"] = (d,)
        shapes["null_cond"] = (d,)
    if config.variant.is_transformer:
        inner = config.heads * config.head_dim
        ff = config.ff_expansion * d
        shapes["token.out"] = (d,)
        shapes["token.type"] = (config.n_tokens, d)
        for i in range(config.depth):
            p = f"block.{i}."
            shapes[p + "ln1.g"] = (d,)
            shapes[p + "ln1.b"] = (d,)
            for name in ("q", "k", "v"):
                shapes[p + f"attn.{name}.w"] = (d, inner)
                shapes[p + f"attn.{name}.b"] = (inner,)
            shapes[p + "attn.o.w"] = (inner, d)
            shapes[p + "attn.o.b"] = (d,)
            shapes[p + "ln2.g"] = (d,)
            shapes[p + "ln2.b"] = (d,)
            shapes[p + "ff.1.w"] = (d, ff)
            shapes[p + "ff.1.b"] = (ff,)
            shapes[p + "ff.2.w"] = (ff, d)
            shapes[p + "ff.2.b"] = (d,)
        shapes["final.ln.g"] = (d,)
        shapes["final.ln.b"] = (d,)
        shapes["out.w"] = (d, d)
        shapes["out.b"] = (d,)
    else:
        hidden = config.expansion * d
        width = 3 * d if config.variant.is_diffusion else d
        for i in range(config.depth):
            p = f"mlp.{i}."
            shapes[p + "w"] = (width, hidden)
            shapes[p + "b"] = (hidden,)
            shapes[p + "ln.g"] = (hidden,)
            shapes[p + "ln.b"] = (hidden,)
            width = hidden
        shapes["out.w"] = (hidden, d)
        shapes["out.b"] = (d,)
    return shapes


def param_count(config: MapperConfig) -> int:
    """Closed-form number of scalar parameters."""
    d, D = config.dim, config.depth
    extra = config.max_timesteps * d + d * d + 2 * d if config.variant.is_diffusion else 0
    if config.variant.is_transformer:
        inner = config.heads * config.head_dim
        ff = config.ff_expansion * d
        block = 4 * d + 3 * (d * inner + inner) + inner * d + d + 2 * d * ff + ff + d
        return d + config.n_tokens * d + D * block + 2 * d + d * d + d + extra
    h = config.expansion * d
    first = (3 * d if config.variant.is_diffusion else d) * h + 3 * h
    return first + (D - 1) * (h * h + 3 * h) + h * d + d + extra


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    """Sine/cosine features of the step index; a smooth starting point for the
    learned timestep table."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    half = (d + 1) // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = pos * freq
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)[:, :d]


def init_params(config: MapperConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    zero_out = config.variant.is_diffusion
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "null_cond" or (zero_out and name.startswith("out.")):
            arr = np.zeros(shape)
        elif name == "time.table":
            arr = sinusoidal_table(*shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        elif leaf == "w":
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        elif leaf == "b":
            arr = np.zeros(shape)
        else:  # embedding tables and learned tokens
            arr = rng.standard_normal(shape) / math.sqrt(config.dim)
        params[name] = arr.astype(dtype)
    return params


def as_tensors(params, requires_grad: bool = False) -> dict[str, Tensor]:
    return {
        k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=requires_grad, name=k)
        for k, v in params.items()
    }


def _linear(x, params, prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, params[prefix + ".w"]), params[prefix + ".b"])


def _batched(x, dim: int) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, -1))
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"expected vectors of length {dim}, got shape {x.shape}")
    return x, single


def _mlp(x: Tensor, params, config: MapperConfig) -> Tensor:
    h = x
    for i in range(config.depth):
        p = f"mlp.{i}"
        h = ad.layer_norm(ad.silu(_linear(h, params, p)), params[p + ".ln.g"], params[p + ".ln.b"], config.ln_eps)
    return _linear(h, params, "out")


def attention_block(tokens, params, config: MapperConfig, index: int = 0, weights_out: list | None = None) -> Tensor:
    """Pre-norm self-attention then pre-norm SiLU feed-forward, both residual.

    ``tokens`` is ``(B, m, d)``.  If ``weights_out`` is a list, the attention
    weights ``(B, heads, m, m)`` are appended to it.
    """
    x = ad.as_tensor(tokens)
    B, m, d = x.shape
    H, hd = config.heads, config.head_dim
    p = f"block.{index}."
    h = ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], config.ln_eps)

    def heads(name):
        y = _linear(h, params, p + f"attn.{name}")
        return ad.transpose(ad.reshape(y, (B, m, H, hd)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    attn = ad.softmax(scores)
    if weights_out is not None:
        weights_out.append(attn.data)
    mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, m, H * hd))
    x = ad.add(x, _linear(mixed, params, p + "attn.o"))

    h = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], config.ln_eps)
    ff = _linear(ad.silu(_linear(h, params, p + "ff.1")), params, p + "ff.2")
    return ad.add(x, ff)


def _transformer(token_list: list[Tensor], params, config: MapperConfig) -> Tensor:
    B = token_list[0].shape[0]
    token_list = token_list + [ad.repeat_rows(params["token.out"], B)]
    x = ad.add(ad.stack(token_list, axis=1), params["token.type"])
    for i in range(config.depth):
        x = attention_block(x, params, config, i)
    out_tok = ad.take(x, config.n_tokens - 1, axis=1)
    out_tok = ad.layer_norm(out_tok, params["final.ln.g"], params["final.ln.b"], config.ln_eps)
    return _linear(out_tok, params, "out")


def timestep_embed(t, params, config: MapperConfig) -> Tensor:
    """Learned table row for step index ``t`` followed by a linear projection."""
    params = as_tensors(params)
    t_arr = np.atleast_1d(np.asarray(t))
    if t_arr.dtype.kind not in "iu":
        raise TypeError(f"timestep indices must be integers, got {t_arr.dtype}")
    if np.any(t_arr < 0) or np.any(t_arr >= config.max_timesteps):
        raise IndexError(f"timestep index out of range [0, {config.max_timesteps}): {t_arr.min()}..{t_arr.max()}")
    emb = _linear(ad.gather_rows(params["time.table"], t_arr), params, "time.proj")
    return ad.reshape(emb, (config.dim,)) if np.ndim(t) == 0 else emb


def forward_regression(params, config: MapperConfig, visual) -> Tensor:
    """Predict audio embeddings from visual embeddings, ``(B, d)`` or ``(d,)``."""
    if config.variant.is_diffusion:
        raise ContractError(f"{config.variant.value} is not a regression variant")
    params = as_tensors(params)
    x, single = _batched(visual, config.dim)
    if config.variant.is_transformer:
        out = _transformer([x], params, config)
    else:
        out = _mlp(x, params, config)
    return ad.reshape(out, (config.dim,)) if single else out


def forward_diffusion(params, config: MapperConfig, t, noisy, visual, keep=None) -> Tensor:
    """Predict the clean audio embedding from (step index, noisy audio, condition).

    ``visual=None`` uses the null condition for every row; otherwise rows whose
    ``keep`` flag is false are swapped for the null condition.
    """
    if not config.variant.is_diffusion:
        raise ContractError(f"{config.variant.value} is not a diffusion variant")
    params = as_tensors(params)
    x_t, single = _batched(noisy, config.dim)
    B = x_t.shape[0]
    t_arr = np.broadcast_to(np.asarray(t), (B,))
    time = timestep_embed(t_arr, params, config)
    if visual is None:
        cond = ad.repeat_rows(params["null_cond"], B)
    else:
        cond, _ = _batched(visual, config.dim)
        if cond.shape[0] != B:
            raise ShapeError(f"{cond.shape[0]} conditions for {B} noisy inputs")
        if keep is not None:
            cond = ad.where_rows(keep, cond, params["null_cond"])
    if config.variant.is_transformer:
        out = _transformer([time, x_t, cond], params, config)
    else:
        out = _mlp(ad.concat([time, x_t, cond], axis=-1), params, config)
    return ad.reshape(out, (config.dim,)) if single else out


def predict(params, config: MapperConfig, visual) -> np.ndarray:
    """Forward pass of a regression mapper returning a plain array."""
    return forward_regression(params, config, visual).data
