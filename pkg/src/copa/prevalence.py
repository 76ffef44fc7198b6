"""Per-site estimators of the label distribution given the confounders.

Categorical confounders get smoothed counting tables; continuous or mixed
confounders get a small auxiliary network fitted by cross-entropy.  Every
estimator answers ``query``/``query_batch`` with a valid probability vector:
outputs are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] and renormalized so that
degenerate single-class sites still yield finite losses downstream.

``half_split_assign`` implements the anti-leakage protocol for sites whose
samples double as estimation data: each half is scored by an estimator
fitted on the other half, so no sample's own label touches its estimate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .errors import ConfigurationError, EstimationError
from .rng import derive_seed

PROB_CLAMP = 1e-6

AUX_HIDDEN_LAYERS = 3
AUX_HIDDEN_UNITS = 20


@dataclass(frozen=True)
class SmoothingConfig:
    pseudo_count: float = 1.0

    def __post_init__(self) -> None:
        if self.pseudo_count < 0:
            raise ConfigurationError(
                f"pseudo_count must be >= 0, got {self.pseudo_count}"
            )


@dataclass(frozen=True)
class AuxTrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    full_batch_limit: int = 10_000
    batch_size: int = 4096


def _as_2d(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        return z.reshape(1, 1)
    if z.ndim == 1:
        return z[:, None]
    return z


def _z_key(row: np.ndarray) -> tuple[int, ...]:
    return tuple(int(round(v)) for v in row)


def _finalize(vec: np.ndarray) -> np.ndarray:
    clipped = np.clip(vec, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return clipped / clipped.sum()


class PrevalenceEstimate:
    """Queryable estimate of P(y | z) for one site."""

    kind = "base"

    def __init__(self, site_id: str, n_classes: int, degenerate: bool = False):
        self.site_id = site_id
        self.n_classes = n_classes
        self.degenerate = degenerate

    def query(self, z) -> np.ndarray:
        return self.query_batch(_as_2d(z))[0]

    def query_batch(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_jsonable(self) -> dict:
        raise NotImplementedError


class TablePrevalence(PrevalenceEstimate):
    kind = "table"

    def __init__(
        self,
        table: dict[tuple[int, ...], np.ndarray],
        fallback: np.ndarray,
        site_id: str = "",
        degenerate: bool = False,
    ):
        super().__init__(site_id, len(fallback), degenerate)
        self.table = {k: _finalize(np.asarray(v, dtype=float)) for k, v in table.items()}
        self.fallback = _finalize(np.asarray(fallback, dtype=float))

    @classmethod
    def from_matrix(cls, conditionals: np.ndarray, site_id: str = "") -> "TablePrevalence":
        """Build a table over scalar z from a [z][y] conditional matrix."""
        mat = np.asarray(conditionals, dtype=float)
        table = {(z,): mat[z] for z in range(mat.shape[0])}
        fallback = mat.mean(axis=0)
        return cls(table, fallback, site_id=site_id)

    def query_batch(self, z: np.ndarray) -> np.ndarray:
        z2 = _as_2d(z)
        out = np.empty((z2.shape[0], self.n_classes))
        for i in range(z2.shape[0]):
            out[i] = self.table.get(_z_key(z2[i]), self.fallback)
        return out

    def to_jsonable(self) -> dict:
        return {
            "kind": self.kind,
            "site_id": self.site_id,
            "n_classes": self.n_classes,
            "degenerate": self.degenerate,
            "fallback": self.fallback.tolist(),
            "table": {
                ",".join(map(str, key)): vec.tolist() for key, vec in sorted(self.table.items())
            },
        }


class MarginalPrevalence(PrevalenceEstimate):
    kind = "marginal"

    def __init__(self, vector: np.ndarray, site_id: str = "", degenerate: bool = False):
        super().__init__(site_id, len(vector), degenerate)
        self.vector = _finalize(np.asarray(vector, dtype=float))

    def query_batch(self, z: np.ndarray) -> np.ndarray:
        z2 = _as_2d(z)
        return np.tile(self.vector, (z2.shape[0], 1))

    def to_jsonable(self) -> dict:
        return {
            "kind": self.kind,
            "site_id": self.site_id,
            "n_classes": self.n_classes,
            "degenerate": self.degenerate,
            "vector": self.vector.tolist(),
        }


class UniformPrevalence(PrevalenceEstimate):
    kind = "uniform"

    def __init__(self, n_classes: int, site_id: str = ""):
        if n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {n_classes}")
        super().__init__(site_id, n_classes)
        self.vector = np.full(n_classes, 1.0 / n_classes)

    def query_batch(self, z: np.ndarray) -> np.ndarray:
        z2 = _as_2d(z)
        return np.tile(self.vector, (z2.shape[0], 1))

    def to_jsonable(self) -> dict:
        return {"kind": self.kind, "site_id": self.site_id, "n_classes": self.n_classes}


class AuxModelPrevalence(PrevalenceEstimate):
    kind = "aux_model"

    def __init__(self, model: nn.Mlp, site_id: str = "", degenerate: bool = False):
        super().__init__(site_id, model.out_dim, degenerate)
        self.model = model

    def query_batch(self, z: np.ndarray) -> np.ndarray:
        probs, _ = nn.forward(self.model, _as_2d(z))
        clipped = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
        return clipped / clipped.sum(axis=1, keepdims=True)

    def to_jsonable(self) -> dict:
        arrays = {}
        for i, (w, b) in enumerate(zip(self.model.weights, self.model.biases)):
            arrays[f"layer{i}.W"] = w.tolist()
            arrays[f"layer{i}.b"] = b.tolist()
        return {
            "kind": self.kind,
            "site_id": self.site_id,
            "n_classes": self.n_classes,
            "degenerate": self.degenerate,
            "specs": [
                {"in_dim": s.in_dim, "out_dim": s.out_dim, "activation": s.activation}
                for s in self.model.specs
            ],
            "arrays": arrays,
        }


def estimate_from_jsonable(obj: dict) -> PrevalenceEstimate:
    kind = obj.get("kind")
    if kind == "table":
        table = {
            tuple(int(p) for p in key.split(",")): np.asarray(vec, dtype=float)
            for key, vec in obj["table"].items()
        }
        return TablePrevalence(
            table, np.asarray(obj["fallback"], dtype=float),
            site_id=obj.get("site_id", ""), degenerate=obj.get("degenerate", False),
        )
    if kind == "marginal":
        return MarginalPrevalence(
            np.asarray(obj["vector"], dtype=float),
            site_id=obj.get("site_id", ""), degenerate=obj.get("degenerate", False),
        )
    if kind == "uniform":
        return UniformPrevalence(obj["n_classes"], site_id=obj.get("site_id", ""))
    if kind == "aux_model":
        specs = tuple(
            nn.LayerSpec(s["in_dim"], s["out_dim"], s["activation"]) for s in obj["specs"]
        )
        model = nn.Mlp(
            specs=specs,
            weights=[np.asarray(obj["arrays"][f"layer{i}.W"], dtype=float) for i in range(len(specs))],
            biases=[np.asarray(obj["arrays"][f"layer{i}.b"], dtype=float) for i in range(len(specs))],
        )
        return AuxModelPrevalence(
            model, site_id=obj.get("site_id", ""), degenerate=obj.get("degenerate", False)
        )
    raise ConfigurationError(f"unknown prevalence kind {kind!r}")


def count_prevalence(
    y: np.ndarray,
    z: np.ndarray,
    smoothing: SmoothingConfig,
    n_classes: int,
    site_id: str = "",
) -> TablePrevalence:
    """Smoothed normalized counts of y per z value.

    Unseen z values fall back to the smoothed marginal so the estimate is
    total over any query.
    """
    if n_classes < 2:
        raise ConfigurationError(f"n_classes must be >= 2, got {n_classes}")
    y = np.asarray(y, dtype=int)
    z2 = _as_2d(z)
    c = smoothing.pseudo_count
    if len(y) == 0 and c == 0:
        raise EstimationError("cannot estimate from no pairs without smoothing")
    counts: dict[tuple[int, ...], np.ndarray] = {}
    for i in range(len(y)):
        key = _z_key(z2[i])
        if key not in counts:
            counts[key] = np.zeros(n_classes)
        counts[key][y[i]] += 1.0
    table = {
        key: (cnt + c) / (cnt.sum() + c * n_classes) for key, cnt in counts.items()
    }
    marginal_counts = np.bincount(y, minlength=n_classes).astype(float)
    fallback = (marginal_counts + c) / (len(y) + c * n_classes)
    degenerate = len(y) > 0 and np.count_nonzero(marginal_counts) < 2
    return TablePrevalence(table, fallback, site_id=site_id, degenerate=degenerate)


def subsample_prevalence(
    y: np.ndarray,
    z: np.ndarray,
    subset_size: int,
    smoothing: SmoothingConfig,
    n_classes: int,
    seed: int,
    site_id: str = "",
) -> TablePrevalence:
    """Counting estimator on a uniform random subsample of the pairs."""
    y = np.asarray(y)
    if not 1 <= subset_size <= len(y):
        raise ConfigurationError(
            f"subset size must lie in [1, {len(y)}], got {subset_size}"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(y), size=subset_size, replace=False)
    return count_prevalence(y[idx], _as_2d(z)[idx], smoothing, n_classes, site_id=site_id)


def marginal_prevalence(
    y: np.ndarray,
    smoothing: SmoothingConfig,
    n_classes: int,
    site_id: str = "",
) -> MarginalPrevalence:
    """Smoothed label frequencies ignoring z."""
    y = np.asarray(y, dtype=int)
    c = smoothing.pseudo_count
    if len(y) == 0 and c == 0:
        raise EstimationError("cannot estimate from no pairs without smoothing")
    counts = np.bincount(y, minlength=n_classes).astype(float)
    vec = (counts + c) / (len(y) + c * n_classes)
    degenerate = len(y) > 0 and np.count_nonzero(counts) < 2
    return MarginalPrevalence(vec, site_id=site_id, degenerate=degenerate)


def uniform_prevalence(n_classes: int, site_id: str = "") -> UniformPrevalence:
    return UniformPrevalence(n_classes, site_id=site_id)


def fit_aux_model(
    y: np.ndarray,
    z: np.ndarray,
    n_classes: int,
    seed: int,
    train_cfg: AuxTrainConfig | None = None,
    site_id: str = "",
) -> AuxModelPrevalence:
    """Fit the small ReLU network mapping z to label probabilities.

    Three hidden layers of 20 units, softmax output, Adam on cross-entropy.
    Full batch below ``full_batch_limit`` pairs, seeded minibatches above.
    Single-class inputs still fit but are flagged degenerate.
    """
    cfg = train_cfg or AuxTrainConfig()
    y = np.asarray(y, dtype=int)
    z2 = _as_2d(z)
    if len(y) == 0:
        raise EstimationError("cannot fit an auxiliary model on no pairs")
    specs = [nn.LayerSpec(z2.shape[1], AUX_HIDDEN_UNITS, "relu")]
    for _ in range(AUX_HIDDEN_LAYERS - 1):
        specs.append(nn.LayerSpec(AUX_HIDDEN_UNITS, AUX_HIDDEN_UNITS, "relu"))
    specs.append(nn.LayerSpec(AUX_HIDDEN_UNITS, n_classes, "softmax"))
    model = nn.mlp_init(specs, derive_seed(seed, "aux-init"))
    arrays = [a for pair in zip(model.weights, model.biases) for a in pair]
    state = nn.adam_init(arrays, lr=cfg.lr)
    full_batch = len(y) <= cfg.full_batch_limit
    rng = np.random.default_rng(derive_seed(seed, "aux-batches"))
    for _ in range(cfg.steps):
        if full_batch:
            bx, by = z2, y
        else:
            idx = rng.integers(0, len(y), size=cfg.batch_size)
            bx, by = z2[idx], y[idx]
        _, grad_w, grad_b = nn.loss_and_grad(model, bx, by)
        grads = [g for pair in zip(grad_w, grad_b) for g in pair]
        state, arrays = nn.adam_step(state, arrays, grads)
        model.weights = arrays[0::2]
        model.biases = arrays[1::2]
    degenerate = np.count_nonzero(np.bincount(y, minlength=n_classes)) < 2
    return AuxModelPrevalence(model, site_id=site_id, degenerate=degenerate)


def fit_site_estimator(
    y: np.ndarray,
    z: np.ndarray,
    z_types: Sequence[str],
    smoothing: SmoothingConfig,
    n_classes: int,
    seed: int,
    aux_cfg: AuxTrainConfig | None = None,
    site_id: str = "",
) -> PrevalenceEstimate:
    """Counting for all-categorical z, auxiliary model otherwise."""
    if all(t == "categorical" for t in z_types):
        return count_prevalence(y, z, smoothing, n_classes, site_id=site_id)
    return fit_aux_model(y, z, n_classes, seed, train_cfg=aux_cfg, site_id=site_id)


@dataclass
class HalfSplitResult:
    prevs: np.ndarray            # (n, K): per-sample vectors from the opposite half
    in_first_half: np.ndarray    # (n,) bool
    estimate_first: PrevalenceEstimate   # fitted ON the first half
    estimate_second: PrevalenceEstimate  # fitted ON the second half


def half_split_assign(
    y: np.ndarray,
    z: np.ndarray,
    z_types: Sequence[str],
    estimator: str,
    smoothing: SmoothingConfig,
    n_classes: int,
    seed: int,
    aux_cfg: AuxTrainConfig | None = None,
    split_mask: np.ndarray | None = None,
) -> HalfSplitResult:
    """Score each sample with an estimator fitted on the opposite half.

    ``split_mask`` overrides the seeded random split (useful in tests).
    """
    if estimator not in ("counting", "aux"):
        raise ConfigurationError(f"estimator must be 'counting' or 'aux', got {estimator!r}")
    y = np.asarray(y, dtype=int)
    z2 = _as_2d(z)
    n = len(y)
    if n < 2:
        raise EstimationError("half-split needs at least two samples")
    if split_mask is None:
        perm = np.random.default_rng(derive_seed(seed, "half-split")).permutation(n)
        split_mask = np.zeros(n, dtype=bool)
        split_mask[perm[: n // 2]] = True
    else:
        split_mask = np.asarray(split_mask, dtype=bool)
        if split_mask.shape != (n,) or not (0 < split_mask.sum() < n):
            raise ConfigurationError("split_mask must partition samples into two halves")

    def _fit(sel: np.ndarray, tag: str) -> PrevalenceEstimate:
        if estimator == "counting":
            return count_prevalence(y[sel], z2[sel], smoothing, n_classes)
        return fit_aux_model(y[sel], z2[sel], n_classes, derive_seed(seed, "half", tag), aux_cfg)

    est_first = _fit(split_mask, "first")
    est_second = _fit(~split_mask, "second")
    prevs = np.empty((n, n_classes))
    prevs[split_mask] = est_second.query_batch(z2[split_mask])
    prevs[~split_mask] = est_first.query_batch(z2[~split_mask])
    return HalfSplitResult(
        prevs=prevs,
        in_first_half=split_mask,
        estimate_first=est_first,
        estimate_second=est_second,
    )
