"""Synthetic multi-site data generation with exact distribution oracles.

Each site draws binary labels ``y`` and binary confounders ``z`` from one of
three coupling mechanisms (a shared uniform cause, y driving z, or z driving
y) controlled by a per-site coefficient ``beta``; larger beta couples y and z
more strongly and shifts the label marginal.  Features are two channels, one
offset by y and one by z, mixed through a single invertible 2x2 matrix shared
by every site of an experiment.

Because the structural equations are threshold functions of uniforms, every
label marginal and conditional has a closed form (``label_marginal``,
``label_conditionals``); the common-cause case needs one piecewise-linear
integral.  ``bayes_posterior`` combines the feature likelihood with an
arbitrary prevalence estimate to give the exact posterior over y, which
serves as the reference predictor for trained models.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, NumericalError
from .rng import derive_seed

MAX_CONDITION_NUMBER = 100.0


class CausalRelation(str, Enum):
    """How the label y and the confounder z are coupled within a site."""

    COMMON_CAUSE = "common_cause"
    Y_TO_Z = "y_to_z"
    Z_TO_Y = "z_to_y"


@dataclass(frozen=True)
class ScmParams:
    """Constants of the generative equations, shared by all sites."""

    alpha: float = 0.3
    c1_offset: float = 0.1
    c2_offset: float = 1.0
    noise_std: float = 0.1

    def __post_init__(self) -> None:
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass(frozen=True)
class SiteConfig:
    site_id: str
    n_samples: int
    beta: float
    relation: CausalRelation
    prevalence_pool_size: int = 1000

    def __post_init__(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise ConfigurationError(f"beta must lie in (0, 1), got {self.beta}")
        if self.n_samples < 1:
            raise ConfigurationError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.prevalence_pool_size < 1:
            raise ConfigurationError(
                f"prevalence_pool_size must be >= 1, got {self.prevalence_pool_size}"
            )


@dataclass(frozen=True)
class MixingMatrix:
    """The 2x2 feature mixer; identical across all sites of one experiment."""

    w: np.ndarray
    seed: int

    def inverse(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.w)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"mixing matrix is singular: {exc}") from exc


@dataclass(frozen=True)
class TrueSiteParams:
    """Generative ground truth attached to synthetic sites."""

    beta: float
    relation: CausalRelation
    params: ScmParams
    mixing: MixingMatrix


class Sample(NamedTuple):
    """One labeled observation."""

    x: np.ndarray
    y: int
    z: np.ndarray
    site_id: str


@dataclass(frozen=True)
class SiteDataset:
    """All samples of one site plus the (y, z) pool reserved for prevalence.

    The pool is an independent draw from the same site distribution, never a
    split of the samples, so estimates formed from it cannot leak labels.
    """

    site_id: str
    x: np.ndarray                 # (n, x_dim) float
    y: np.ndarray                 # (n,) int
    z: np.ndarray                 # (n, z_dim) float
    prevalence_y: np.ndarray      # (L,) int
    prevalence_z: np.ndarray      # (L, z_dim) float
    z_types: tuple[str, ...]      # "categorical" | "continuous" per z column
    true_params: TrueSiteParams | None = None

    def __post_init__(self) -> None:
        if len(self.y) < 1:
            raise ConfigurationError("SiteDataset must contain at least one sample")
        if self.x.shape[0] != len(self.y) or self.z.shape[0] != len(self.y):
            raise ConfigurationError("x, y, z must agree on the number of samples")
        if self.z.shape[1] != len(self.z_types):
            raise ConfigurationError("z_types must name every z column")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def prevalence_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return self.prevalence_y, self.prevalence_z

    def rows(self):
        """Iterate samples as named tuples (convenience, not a hot path)."""
        for i in range(self.n):
            yield Sample(self.x[i], int(self.y[i]), self.z[i], self.site_id)


def gen_labels(
    relation: CausalRelation,
    beta: float,
    params: ScmParams,
    n: int,
    rng_seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw n i.i.d. (y, z) pairs from the selected structural model."""
    if not 0.0 < beta < 1.0:
        raise ConfigurationError(f"beta must lie in (0, 1), got {beta}")
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(rng_seed)
    a = params.alpha
    if relation == CausalRelation.COMMON_CAUSE:
        s = rng.uniform(size=n)
        u = rng.uniform(size=n)
        y = beta * s + (1.0 - beta) * a > 0.5
        z = beta * s + (1.0 - beta) * u > 0.5
    elif relation == CausalRelation.Y_TO_Z:
        u1 = rng.uniform(size=n)
        u2 = rng.uniform(size=n)
        y = beta * u1 + (1.0 - beta) * a > 0.5
        z = beta * y / 2.0 + (1.0 - beta / 2.0) * u2 > 0.5
    elif relation == CausalRelation.Z_TO_Y:
        u1 = rng.uniform(size=n)
        u2 = rng.uniform(size=n)
        z = u1 > 0.5
        y = beta * z / 2.0 + beta * u2 / 2.0 + (1.0 - beta) * a > 0.5
    else:  # pragma: no cover - enum is exhaustive
        raise ConfigurationError(f"unknown relation {relation!r}")
    return y.astype(np.int64), z.astype(np.int64)


def gen_features_2dim(
    y: np.ndarray,
    z: np.ndarray,
    w: MixingMatrix,
    params: ScmParams,
    rng_seed: int,
) -> np.ndarray:
    """Mix the y-driven and z-driven channels into (n, 2) features."""
    y = np.asarray(y)
    z = np.asarray(z)
    if len(y) == 0:
        raise ConfigurationError("labels must be non-empty")
    rng = np.random.default_rng(rng_seed)
    n = len(y)
    c1 = params.c1_offset * (2.0 * y - 1.0) + rng.normal(0.0, 1.0, size=n) * params.noise_std
    c2 = params.c2_offset * (2.0 * z - 1.0) + rng.normal(0.0, 1.0, size=n) * params.noise_std
    c = np.stack([c1, c2], axis=1)
    return c @ w.w.T


def make_mixing_matrix(seed: int) -> MixingMatrix:
    """Draw entries i.i.d. Unif(-1, 1), resampling until well conditioned."""
    rng = np.random.default_rng(seed)
    while True:
        w = rng.uniform(-1.0, 1.0, size=(2, 2))
        if np.linalg.cond(w) <= MAX_CONDITION_NUMBER:
            return MixingMatrix(w=w, seed=seed)


def make_site(
    cfg: SiteConfig,
    params: ScmParams,
    w: MixingMatrix,
    rng_seed: int,
) -> SiteDataset:
    """Generate one site: samples plus an independent prevalence pool."""
    y, z = gen_labels(
        cfg.relation, cfg.beta, params, cfg.n_samples, derive_seed(rng_seed, "samples")
    )
    x = gen_features_2dim(y, z, w, params, derive_seed(rng_seed, "features"))
    py, pz = gen_labels(
        cfg.relation,
        cfg.beta,
        params,
        cfg.prevalence_pool_size,
        derive_seed(rng_seed, "prevalence-pairs"),
    )
    return SiteDataset(
        site_id=cfg.site_id,
        x=x,
        y=y,
        z=z[:, None].astype(float),
        prevalence_y=py,
        prevalence_z=pz[:, None].astype(float),
        z_types=("categorical",),
        true_params=TrueSiteParams(beta=cfg.beta, relation=cfg.relation, params=params, mixing=w),
    )


def _clip_unit(v: float) -> float:
    return min(max(v, 0.0), 1.0)


def _integrate_clipped_linear(a: float, b: float, lo: float, hi: float) -> float:
    """Exact integral of clip(a + b*s, 0, 1) over [lo, hi], piecewise."""
    if hi <= lo:
        return 0.0
    pts = [lo, hi]
    if b != 0.0:
        for target in (0.0, 1.0):
            s = (target - a) / b
            if lo < s < hi:
                pts.append(s)
    pts.sort()
    total = 0.0
    for left, right in zip(pts[:-1], pts[1:]):
        mid = 0.5 * (left + right)
        v = a + b * mid
        if v <= 0.0:
            continue
        if v >= 1.0:
            total += right - left
        else:
            total += v * (right - left)  # linear integrand: midpoint rule is exact
    return total


def label_joint(relation: CausalRelation, beta: float, params: ScmParams) -> np.ndarray:
    """Closed-form joint P(Z=z, Y=y), indexed [z][y]."""
    if not 0.0 < beta < 1.0:
        raise ConfigurationError(f"beta must lie in (0, 1), got {beta}")
    a = params.alpha
    joint = np.zeros((2, 2))
    if relation == CausalRelation.COMMON_CAUSE:
        s_y = (0.5 - (1.0 - beta) * a) / beta
        p_y1 = 1.0 - _clip_unit(s_y)
        # P(z=1 | s) = clip((0.5 - beta + beta*s) / (1 - beta), 0, 1)
        ca = (0.5 - beta) / (1.0 - beta)
        cb = beta / (1.0 - beta)
        p_z1 = _integrate_clipped_linear(ca, cb, 0.0, 1.0)
        p_y1_z1 = _integrate_clipped_linear(ca, cb, _clip_unit(s_y), 1.0)
        joint[1, 1] = p_y1_z1
        joint[0, 1] = p_y1 - p_y1_z1
        joint[1, 0] = p_z1 - p_y1_z1
        joint[0, 0] = 1.0 - p_y1 - joint[1, 0]
    elif relation == CausalRelation.Y_TO_Z:
        p_y1 = 1.0 - _clip_unit((0.5 - (1.0 - beta) * a) / beta)
        for y, p_y in ((0, 1.0 - p_y1), (1, p_y1)):
            p_z1_given_y = 1.0 - _clip_unit((0.5 - beta * y / 2.0) / (1.0 - beta / 2.0))
            joint[1, y] = p_y * p_z1_given_y
            joint[0, y] = p_y * (1.0 - p_z1_given_y)
    elif relation == CausalRelation.Z_TO_Y:
        for z in (0, 1):
            p_y1_given_z = 1.0 - _clip_unit(
                (0.5 - beta * z / 2.0 - (1.0 - beta) * a) / (beta / 2.0)
            )
            joint[z, 1] = 0.5 * p_y1_given_z
            joint[z, 0] = 0.5 * (1.0 - p_y1_given_z)
    else:  # pragma: no cover
        raise ConfigurationError(f"unknown relation {relation!r}")
    return joint


def label_marginal(relation: CausalRelation, beta: float, params: ScmParams) -> float:
    """Closed-form P(Y=1)."""
    return float(label_joint(relation, beta, params)[:, 1].sum())


def label_conditionals(relation: CausalRelation, beta: float, params: ScmParams) -> np.ndarray:
    """Closed-form conditional table, indexed [z][y] -> P(Y=y | Z=z)."""
    joint = label_joint(relation, beta, params)
    pz = joint.sum(axis=1, keepdims=True)
    if np.any(pz <= 0.0):
        raise NumericalError("a z value has zero mass; conditionals undefined")
    return joint / pz


def bayes_posterior(
    x: np.ndarray,
    z: np.ndarray,
    w: MixingMatrix,
    params: ScmParams,
    prevalence,
) -> np.ndarray:
    """Exact posterior over y given features, confounder, and a prior table.

    Unmixes the features, scores the y-driven channel against its two
    conditional Gaussians, and weighs by ``prevalence`` queried at z.  The
    z-driven channel and the unmixing Jacobian are y-independent and cancel.
    Accepts a single sample (1-d x) or a batch (2-d x).
    """
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    x2 = np.atleast_2d(x_arr)
    z2 = np.asarray(z, dtype=float)
    if z2.ndim == 0:
        z2 = z2.reshape(1, 1)
    elif z2.ndim == 1:
        z2 = z2[:, None] if not single else z2.reshape(1, -1)
    if params.noise_std <= 0.0:
        raise NumericalError("posterior needs noise_std > 0")
    winv = w.inverse()
    c1 = (x2 @ winv.T)[:, 0]
    offset = params.c1_offset
    var = params.noise_std**2
    loglik = np.stack(
        [-((c1 + offset) ** 2), -((c1 - offset) ** 2)], axis=1
    ) / (2.0 * var)
    priors = prevalence.query_batch(z2)
    with np.errstate(divide="ignore"):
        logpost = loglik + np.log(priors)
    finite_max = logpost.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(finite_max)):
        raise NumericalError("posterior is empty: prior assigns zero mass everywhere")
    p = np.exp(logpost - finite_max)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if single else p
