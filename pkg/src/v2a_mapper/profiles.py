"""Named hyperparameter profiles.

``desk`` is small enough to train on a laptop CPU in minutes and is what the
test-suite exercises.  ``paper`` pins the published full-scale setting
(512-d CLIP/CLAP embeddings, batch 448, lr 1.1e-4, 100 epochs, 1000 training
and 200 sampling steps, guidance 0.9, 12 heads of width 64).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .models import Variant


@dataclass(frozen=True)
class Profile:
    name: str
    dim: int
    batch_size: int
    lr: float
    epochs: int
    timesteps: int
    inference_steps: int
    guidance_scale: float
    heads: int
    head_dim: int
    depth: dict = field(default_factory=dict)
    n_samples: int = 4096


PROFILES = {
    "desk": Profile(
        name="desk",
        dim=32,
        batch_size=64,
        lr=1e-3,
        epochs=200,
        timesteps=1000,
        inference_steps=50,
        guidance_scale=0.9,
        heads=4,
        head_dim=8,
        depth={Variant.REG_MLP: 1, Variant.DIFF_MLP: 1, Variant.REG_TRANSFORMER: 2, Variant.DIFF_TRANSFORMER: 2},
    ),
    "paper": Profile(
        name="paper",
        dim=512,
        batch_size=448,
        lr=1.1e-4,
        epochs=100,
        timesteps=1000,
        inference_steps=200,
        guidance_scale=0.9,
        heads=12,
        head_dim=64,
        depth={Variant.REG_MLP: 1, Variant.DIFF_MLP: 1, Variant.REG_TRANSFORMER: 8, Variant.DIFF_TRANSFORMER: 12},
        n_samples=5000,
    ),
}


def get_profile(name: str) -> Profile:
    return PROFILES[name]
