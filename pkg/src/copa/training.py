"""Training-run bookkeeping shared by the ratio model and the ERM baselines.

Holds the run configuration, checkpoint records, resumable snapshots, and
checkpoint selection.  The actual optimization loop lives next to the model
(`copa.model.fit_model`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    lr: float = 1e-4
    batch_size: int = 128
    site_cycling: bool = True
    seed: int = 0
    checkpoint_every: int = 500
    renormalize_product: bool = True  # False: loss on the raw prevalence product

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ConfigurationError(
                f"checkpoint_every must be >= 1, got {self.checkpoint_every}"
            )

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


@dataclass
class Checkpoint:
    step: int
    arrays: list[np.ndarray]
    val_f1: float
    train_loss: float


def select_checkpoint(checkpoints: list[Checkpoint]) -> Checkpoint:
    """Highest validation F1 wins; ties go to the earliest step.

    Checkpoints without a validation score (NaN) only win if none is scored,
    in which case the last checkpoint is returned.
    """
    if not checkpoints:
        raise ConfigurationError("no checkpoints to select from")
    best = None
    for cp in checkpoints:
        if math.isnan(cp.val_f1):
            continue
        if best is None or cp.val_f1 > best.val_f1:
            best = cp
    return best if best is not None else checkpoints[-1]


@dataclass
class TrainingSnapshot:
    """Everything needed to continue a run bit-exactly."""

    next_step: int
    model_arrays: list[np.ndarray]
    adam_m: list[np.ndarray]
    adam_v: list[np.ndarray]
    adam_step_count: int
    rng_state: dict
    checkpoints: list[Checkpoint] = field(default_factory=list)
    completed: bool = False

    def to_jsonable(self) -> dict:
        return {
            "next_step": self.next_step,
            "model_arrays": [a.tolist() for a in self.model_arrays],
            "model_shapes": [list(a.shape) for a in self.model_arrays],
            "adam_m": [a.tolist() for a in self.adam_m],
            "adam_v": [a.tolist() for a in self.adam_v],
            "adam_step_count": self.adam_step_count,
            "rng_state": _jsonable_rng_state(self.rng_state),
            "checkpoints": [
                {
                    "step": cp.step,
                    "arrays": [a.tolist() for a in cp.arrays],
                    "shapes": [list(a.shape) for a in cp.arrays],
                    "val_f1": cp.val_f1,
                    "train_loss": cp.train_loss,
                }
                for cp in self.checkpoints
            ],
            "completed": self.completed,
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "TrainingSnapshot":
        def _arrays(vals, shapes):
            return [
                np.asarray(v, dtype=float).reshape(shape)
                for v, shape in zip(vals, shapes)
            ]

        shapes = obj["model_shapes"]
        return cls(
            next_step=obj["next_step"],
            model_arrays=_arrays(obj["model_arrays"], shapes),
            adam_m=_arrays(obj["adam_m"], shapes),
            adam_v=_arrays(obj["adam_v"], shapes),
            adam_step_count=obj["adam_step_count"],
            rng_state=_rng_state_from_jsonable(obj["rng_state"]),
            checkpoints=[
                Checkpoint(
                    step=cp["step"],
                    arrays=_arrays(cp["arrays"], cp["shapes"]),
                    val_f1=cp["val_f1"],
                    train_loss=cp["train_loss"],
                )
                for cp in obj["checkpoints"]
            ],
            completed=obj["completed"],
        )


def _jsonable_rng_state(state: dict) -> dict:
    # PCG64 state holds 128-bit ints; store them as strings for JSON safety.
    inner = dict(state["state"])
    return {
        "bit_generator": state["bit_generator"],
        "state": {"state": str(inner["state"]), "inc": str(inner["inc"])},
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _rng_state_from_jsonable(obj: dict) -> dict:
    return {
        "bit_generator": obj["bit_generator"],
        "state": {"state": int(obj["state"]["state"]), "inc": int(obj["state"]["inc"])},
        "has_uint32": obj["has_uint32"],
        "uinteger": obj["uinteger"],
    }


@dataclass
class TrainResult:
    model: object | None
    selected_step: int | None
    checkpoints: list[Checkpoint]
    completed: bool
    snapshot: TrainingSnapshot | None = None
