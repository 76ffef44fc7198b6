"""The prevalence-adjusted ratio model and its training loop.

The trainable network never sees the site: a backbone embeds the features,
the embedding is concatenated with the confounders (late fusion) and pushed
through one softmax layer.  That softmax output models the site-invariant
ratio between the full posterior and the conditional prevalence.  During
training and prediction it is multiplied elementwise with a per-site
prevalence vector and renormalized; the prevalence is a constant with
respect to the gradient.  Adapting to a new site means swapping in that
site's prevalence estimate, nothing else.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .errors import ConfigurationError, NumericalError
from .rng import derive_seed
from .training import Checkpoint, TrainConfig, TrainingSnapshot, TrainResult, select_checkpoint


@dataclass(frozen=True)
class ModelSpec:
    x_dim: int
    z_dim: int            # 0: the confounders are not an input (ERM on x only)
    n_classes: int
    backbone_dims: tuple[int, ...] = (10,)

    def __post_init__(self) -> None:
        if self.x_dim < 1 or self.n_classes < 2 or self.z_dim < 0:
            raise ConfigurationError(f"invalid model spec {self}")
        if not self.backbone_dims:
            raise ConfigurationError("backbone needs at least one layer")


@dataclass
class RatioModel:
    spec: ModelSpec
    backbone: nn.Mlp
    head: nn.Mlp


def build_ratio_model(spec: ModelSpec, seed: int) -> RatioModel:
    dims = (spec.x_dim,) + spec.backbone_dims
    backbone_specs = [
        nn.LayerSpec(d_in, d_out, "relu") for d_in, d_out in zip(dims[:-1], dims[1:])
    ]
    head_specs = [nn.LayerSpec(spec.backbone_dims[-1] + spec.z_dim, spec.n_classes, "softmax")]
    return RatioModel(
        spec=spec,
        backbone=nn.mlp_init(backbone_specs, derive_seed(seed, "backbone")),
        head=nn.mlp_init(head_specs, derive_seed(seed, "head")),
    )


def flat_params(model: RatioModel) -> list[np.ndarray]:
    out = []
    for net in (model.backbone, model.head):
        for w, b in zip(net.weights, net.biases):
            out.extend((w, b))
    return out


def set_flat_params(model: RatioModel, arrays: Sequence[np.ndarray]) -> None:
    it = iter(arrays)
    for net in (model.backbone, model.head):
        for i in range(len(net.weights)):
            net.weights[i] = next(it)
            net.biases[i] = next(it)


def clone_model(model: RatioModel) -> RatioModel:
    return copy.deepcopy(model)


def model_hash(model: RatioModel) -> str:
    digest = hashlib.sha256()
    for a in flat_params(model):
        digest.update(str(a.shape).encode())
        digest.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return digest.hexdigest()[:16]


def forward_probs(model: RatioModel, x: np.ndarray, z: np.ndarray | None) -> tuple[np.ndarray, tuple]:
    rep, bcaches = nn.forward(model.backbone, x)
    if model.spec.z_dim > 0:
        if z is None:
            raise ConfigurationError("model expects confounders but none were given")
        head_in = np.concatenate([rep, np.atleast_2d(np.asarray(z, dtype=float))], axis=1)
    else:
        head_in = rep
    probs, hcaches = nn.forward(model.head, head_in)
    return probs, (bcaches, hcaches, rep.shape[1])


def backward_from_probs(model: RatioModel, cache: tuple, d_probs: np.ndarray) -> list[np.ndarray]:
    bcaches, hcaches, rep_dim = cache
    h_gw, h_gb, d_head_in = nn.backward(model.head, hcaches, d_probs)
    b_gw, b_gb, _ = nn.backward(model.backbone, bcaches, d_head_in[:, :rep_dim])
    grads = []
    for gw, gb in zip(b_gw, b_gb):
        grads.extend((gw, gb))
    for gw, gb in zip(h_gw, h_gb):
        grads.extend((gw, gb))
    return grads


@dataclass(frozen=True)
class AdjustedPrediction:
    """Site-adapted posterior, hard labels, and the raw network output."""

    probs: np.ndarray      # (n, K)
    labels: np.ndarray     # (n,), argmax with ties toward the smaller class
    raw_ratio: np.ndarray  # (n, K)


def _combine(raw: np.ndarray, prev: np.ndarray) -> AdjustedPrediction:
    prev = np.asarray(prev, dtype=float)
    if np.any(prev < 0) or not np.all(np.isfinite(prev)):
        raise ConfigurationError("prevalence vectors must be finite and non-negative")
    u = prev * raw
    total = u.sum(axis=1, keepdims=True)
    if np.any(total <= 0.0):
        raise NumericalError("prevalence-weighted mass vanished for a sample")
    probs = u / total
    return AdjustedPrediction(probs=probs, labels=np.argmax(probs, axis=1), raw_ratio=raw)


def copa_forward(model: RatioModel, x: np.ndarray, z: np.ndarray | None, prev: np.ndarray) -> AdjustedPrediction:
    """Multiply the ratio output by a prevalence vector and renormalize.

    ``prev`` is one vector shared by the batch or one row per sample; any
    positive rescaling of it leaves probabilities and labels unchanged.
    """
    raw, _ = forward_probs(model, x, z)
    return _combine(raw, prev)


def predict_adjusted(model: RatioModel, x: np.ndarray, z: np.ndarray | None, prevs: np.ndarray) -> AdjustedPrediction:
    return copa_forward(model, x, z, prevs)


def predict_site(model: RatioModel, x: np.ndarray, z: np.ndarray, prev_estimate) -> np.ndarray:
    """Predict at a site using its prevalence estimate; returns labels.

    The estimate is the only site-dependent input at prediction time.
    """
    prevs = prev_estimate.query_batch(np.atleast_2d(np.asarray(z, dtype=float)))
    return copa_forward(model, x, z, prevs).labels


def predict_marginalized(
    model: RatioModel,
    x: np.ndarray,
    prev_marginal: np.ndarray,
    z_sampler,
    m: int = 10,
    rng: np.random.Generator | None = None,
) -> AdjustedPrediction:
    """Predict when z is unobserved: average the adjusted output over m
    sampled z values under the marginal prevalence.

    ``z_sampler`` is either an (m, z_dim) array of z values or a callable
    ``(rng, m) -> (m, z_dim)``.
    """
    if m < 1:
        raise ConfigurationError(f"m must be >= 1, got {m}")
    if callable(z_sampler):
        z_values = np.atleast_2d(z_sampler(rng or np.random.default_rng(0), m))
    else:
        z_values = np.atleast_2d(np.asarray(z_sampler, dtype=float))[:m]
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    prev = np.asarray(prev_marginal, dtype=float)
    accum = np.zeros((x2.shape[0], model.spec.n_classes))
    raw_sum = np.zeros_like(accum)
    for z_row in z_values:
        z_tile = np.tile(z_row, (x2.shape[0], 1))
        raw, _ = forward_probs(model, x2, z_tile)
        accum += prev * raw
        raw_sum += raw
    total = accum.sum(axis=1, keepdims=True)
    if np.any(total <= 0.0):
        raise NumericalError("marginalized mass vanished for a sample")
    probs = accum / total
    return AdjustedPrediction(
        probs=probs, labels=np.argmax(probs, axis=1), raw_ratio=raw_sum / len(z_values)
    )


@dataclass
class SiteBatches:
    """Training arrays for one site (prevs is None for plain ERM)."""

    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    prevs: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.y)


def pool_sites(sites: Sequence[SiteBatches]) -> SiteBatches:
    """Concatenate sites in the given order (site identity is discarded)."""
    return SiteBatches(
        x=np.concatenate([s.x for s in sites]),
        z=np.concatenate([s.z for s in sites]),
        y=np.concatenate([s.y for s in sites]),
        prevs=(
            np.concatenate([s.prevs for s in sites])
            if all(s.prevs is not None for s in sites)
            else None
        ),
    )


def fit_model(
    model: RatioModel,
    sites: Sequence[SiteBatches],
    cfg: TrainConfig,
    loss_kind: str,
    val_fn: Callable[[RatioModel], float] | None = None,
    snapshot_hook: Callable[[TrainingSnapshot], None] | None = None,
    stop_after: int | None = None,
    resume: TrainingSnapshot | None = None,
) -> TrainResult:
    """Run the optimization loop; cycle sites between batches when several.

    Deterministic given (config, data order).  ``stop_after`` halts at the
    next checkpoint boundary and returns an incomplete result whose snapshot
    resumes the run bit-exactly.
    """
    if loss_kind not in ("adjusted", "product", "ce"):
        raise ConfigurationError(f"unknown loss kind {loss_kind!r}")
    if not sites:
        raise ConfigurationError("training needs at least one site")
    for site in sites:
        if site.n < 1:
            raise ConfigurationError("every training site must be non-empty")
        if loss_kind != "ce" and site.prevs is None:
            raise ConfigurationError("prevalence vectors required for the adjusted loss")
    sources = list(sites) if cfg.site_cycling else [pool_sites(sites)]

    arrays = flat_params(model)
    if resume is not None:
        set_flat_params(model, [a.copy() for a in resume.model_arrays])
        arrays = flat_params(model)
        state = nn.AdamState(
            lr=cfg.lr, step=resume.adam_step_count,
            m=[a.copy() for a in resume.adam_m], v=[a.copy() for a in resume.adam_v],
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        checkpoints = list(resume.checkpoints)
        start = resume.next_step
    else:
        state = nn.adam_init(arrays, lr=cfg.lr)
        rng = np.random.default_rng(derive_seed(cfg.seed, "train-batches"))
        checkpoints = []
        start = 1

    halt_at = None
    if stop_after is not None:
        # only halt on checkpoint boundaries so snapshots stay consistent
        halt_at = ((max(stop_after, 1) + cfg.checkpoint_every - 1)
                   // cfg.checkpoint_every) * cfg.checkpoint_every

    loss_sum, n_since = 0.0, 0
    for step in range(start, cfg.steps + 1):
        src = sources[(step - 1) % len(sources)]
        idx = rng.integers(0, src.n, size=cfg.batch_size)
        bx, bz, by = src.x[idx], src.z[idx], src.y[idx]
        probs, cache = forward_probs(model, bx, bz)
        if loss_kind == "ce":
            loss, d_probs = nn.cross_entropy(probs, by)
        elif loss_kind == "adjusted":
            loss, d_probs = nn.adjusted_cross_entropy(probs, src.prevs[idx], by)
        else:
            loss, d_probs = nn.product_cross_entropy(probs, src.prevs[idx], by)
        grads = backward_from_probs(model, cache, d_probs)
        state, arrays = nn.adam_step(state, arrays, grads)
        set_flat_params(model, arrays)
        loss_sum += loss
        n_since += 1

        at_checkpoint = step % cfg.checkpoint_every == 0 or step == cfg.steps
        if not at_checkpoint:
            continue
        val = val_fn(model) if val_fn is not None else float("nan")
        checkpoints.append(
            Checkpoint(step=step, arrays=[a.copy() for a in arrays],
                       val_f1=val, train_loss=loss_sum / n_since)
        )
        loss_sum, n_since = 0.0, 0
        done = step == cfg.steps
        snapshot = TrainingSnapshot(
            next_step=step + 1,
            model_arrays=[a.copy() for a in arrays],
            adam_m=[a.copy() for a in state.m],
            adam_v=[a.copy() for a in state.v],
            adam_step_count=state.step,
            rng_state=rng.bit_generator.state,
            checkpoints=checkpoints,
            completed=done,
        )
        if snapshot_hook is not None:
            snapshot_hook(snapshot)
        if halt_at is not None and step >= halt_at and not done:
            return TrainResult(
                model=None, selected_step=None, checkpoints=checkpoints,
                completed=False, snapshot=snapshot,
            )

    best = select_checkpoint(checkpoints)
    selected = clone_model(model)
    set_flat_params(selected, [a.copy() for a in best.arrays])
    return TrainResult(
        model=selected, selected_step=best.step, checkpoints=checkpoints, completed=True
    )


def train_copa(
    train_sites: Sequence[SiteBatches],
    cfg: TrainConfig,
    val_fn: Callable[[RatioModel], float] | None = None,
    n_classes: int = 2,
    backbone_dims: tuple[int, ...] = (10,),
    snapshot_hook=None,
    stop_after: int | None = None,
    resume: TrainingSnapshot | None = None,
) -> TrainResult:
    """Train the ratio model against prevalence-adjusted outputs.

    Each batch comes from one site (cycling between batches when there are
    several; a single training site is fully supported) and every sample is
    adjusted by its own site's prevalence vector before the loss.
    """
    spec = ModelSpec(
        x_dim=train_sites[0].x.shape[1],
        z_dim=train_sites[0].z.shape[1],
        n_classes=n_classes,
        backbone_dims=tuple(backbone_dims),
    )
    model = build_ratio_model(spec, derive_seed(cfg.seed, "init"))
    loss_kind = "adjusted" if cfg.renormalize_product else "product"
    return fit_model(
        model, train_sites, cfg, loss_kind, val_fn=val_fn,
        snapshot_hook=snapshot_hook, stop_after=stop_after, resume=resume,
    )


def adjusted_loss_and_grads(
    model: RatioModel,
    x: np.ndarray,
    z: np.ndarray,
    prevs: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """One adjusted-loss evaluation with gradients for every parameter."""
    probs, cache = forward_probs(model, x, z)
    loss, d_probs = nn.adjusted_cross_entropy(probs, prevs, targets)
    return loss, backward_from_probs(model, cache, d_probs)
