"""Empirical-risk-minimization baselines on the same network substrate.

Two variants: one sees only the features, the other sees features and
confounders through the identical backbone/fusion architecture as the ratio
model.  Both use the softmax output directly as the posterior with standard
cross-entropy, pool data across sites (cycling between batches like the
ratio model), and share the checkpoint-selection hook.
"""
from __future__ import annotations

from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .model import (
    ModelSpec,
    RatioModel,
    SiteBatches,
    build_ratio_model,
    fit_model,
    forward_probs,
)
from .rng import derive_seed
from .training import TrainConfig, TrainResult


class ErmVariant(str, Enum):
    ERM_A = "erm_a"  # input: x only
    ERM_B = "erm_b"  # input: x and z


def build_erm_model(
    variant: ErmVariant,
    x_dim: int,
    z_dim: int,
    n_classes: int,
    seed: int,
    backbone_dims: tuple[int, ...] = (10,),
) -> RatioModel:
    spec = ModelSpec(
        x_dim=x_dim,
        z_dim=z_dim if variant == ErmVariant.ERM_B else 0,
        n_classes=n_classes,
        backbone_dims=tuple(backbone_dims),
    )
    return build_ratio_model(spec, derive_seed(seed, "init"))


def train_erm(
    variant: ErmVariant,
    train_sites: Sequence[SiteBatches],
    cfg: TrainConfig,
    val_fn: Callable[[RatioModel], float] | None = None,
    n_classes: int = 2,
    backbone_dims: tuple[int, ...] = (10,),
    snapshot_hook=None,
    stop_after: int | None = None,
    resume=None,
) -> TrainResult:
    """Site-blind training: average loss over the pooled training data."""
    model = build_erm_model(
        ErmVariant(variant),
        x_dim=train_sites[0].x.shape[1],
        z_dim=train_sites[0].z.shape[1],
        n_classes=n_classes,
        seed=cfg.seed,
        backbone_dims=backbone_dims,
    )
    return fit_model(
        model, train_sites, cfg, "ce", val_fn=val_fn,
        snapshot_hook=snapshot_hook, stop_after=stop_after, resume=resume,
    )


def predict_erm(model: RatioModel, x: np.ndarray, z: np.ndarray | None = None) -> np.ndarray:
    """Argmax of the softmax output; ties go to the smaller class index."""
    probs, _ = forward_probs(model, x, z if model.spec.z_dim > 0 else None)
    return np.argmax(probs, axis=1)
