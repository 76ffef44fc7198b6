"""Minimal dense-network kit: float64 numpy, exact analytic gradients.

Models here are a few hundred parameters at most, so everything is plain
numpy with no graph machinery.  A model is a chain of (weights, bias,
activation) layers; softmax is only allowed as the final activation.  The
losses are cross-entropy on the softmax output and two prevalence-weighted
variants used by the ratio model.  Probabilities are clamped at
``PROB_FLOOR`` inside the losses and the gradients are the exact derivatives
of the clamped loss, so finite differences agree to high precision.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalError

PROB_FLOOR = 1e-12
ACTIVATIONS = ("relu", "identity", "softmax")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigurationError(f"layer dims must be >= 1, got {self}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")


def validate_chain(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ConfigurationError("a model needs at least one layer")
    for prev, nxt in zip(specs[:-1], specs[1:]):
        if prev.out_dim != nxt.in_dim:
            raise ConfigurationError(f"layer dims do not chain: {prev} -> {nxt}")
    for spec in specs[:-1]:
        if spec.activation == "softmax":
            raise ConfigurationError("softmax is only allowed as the final activation")


@dataclass
class Mlp:
    specs: tuple[LayerSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim


def glorot_bound(in_dim: int, out_dim: int) -> float:
    return float(np.sqrt(6.0 / (in_dim + out_dim)))


def mlp_init(specs: Sequence[LayerSpec], seed: int) -> Mlp:
    """Uniform Glorot-style weights, zero biases, deterministic per seed."""
    specs = tuple(specs)
    validate_chain(specs)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in specs:
        a = glorot_bound(spec.in_dim, spec.out_dim)
        weights.append(rng.uniform(-a, a, size=(spec.in_dim, spec.out_dim)))
        biases.append(np.zeros(spec.out_dim))
    return Mlp(specs=specs, weights=weights, biases=biases)


def _softmax(pre: np.ndarray) -> np.ndarray:
    shifted = pre - pre.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Run the chain; the cache holds what backward() needs per layer."""
    out = np.atleast_2d(np.asarray(x, dtype=float))
    if out.shape[1] != mlp.in_dim:
        raise ConfigurationError(
            f"input dim {out.shape[1]} does not match model in_dim {mlp.in_dim}"
        )
    caches = []
    for spec, w, b in zip(mlp.specs, mlp.weights, mlp.biases):
        inp = out
        pre = inp @ w + b
        if spec.activation == "relu":
            post = np.maximum(pre, 0.0)
        elif spec.activation == "softmax":
            post = _softmax(pre)
        else:
            post = pre
        caches.append((inp, pre, post))
        out = post
    return out, caches


def backward(
    mlp: Mlp, caches: list, d_out: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Chain rule from d(loss)/d(output) down to parameter and input grads."""
    grad_w = [None] * len(mlp.specs)
    grad_b = [None] * len(mlp.specs)
    d_post = d_out
    for i in range(len(mlp.specs) - 1, -1, -1):
        spec = mlp.specs[i]
        inp, pre, post = caches[i]
        if spec.activation == "relu":
            d_pre = d_post * (pre > 0.0)
        elif spec.activation == "softmax":
            d_pre = post * (d_post - (d_post * post).sum(axis=1, keepdims=True))
        else:
            d_pre = d_post
        grad_w[i] = inp.T @ d_pre
        grad_b[i] = d_pre.sum(axis=0)
        d_post = d_pre @ mlp.weights[i].T
    return grad_w, grad_b, d_post


def one_hot(targets: np.ndarray, n_classes: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim == 2:
        return t.astype(float)
    out = np.zeros((len(t), n_classes))
    out[np.arange(len(t)), t.astype(int)] = 1.0
    return out


def _check_finite(probs: np.ndarray) -> None:
    if not np.all(np.isfinite(probs)):
        raise NumericalError("non-finite values in probabilities")


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean clamped cross-entropy and its exact gradient w.r.t. probs."""
    _check_finite(probs)
    t = one_hot(targets, probs.shape[1])
    clamped = np.clip(probs, PROB_FLOOR, 1.0)
    loss = float(-(t * np.log(clamped)).sum(axis=1).mean())
    active = (probs > PROB_FLOOR) & (probs < 1.0)
    d_probs = -(t / clamped) * active / probs.shape[0]
    return loss, d_probs


def adjusted_cross_entropy(
    probs: np.ndarray, prevs: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Cross-entropy of the renormalized prevalence-weighted probabilities.

    The prevalence factor is a constant: no gradient flows into it.
    """
    _check_finite(probs)
    u = prevs * probs
    s = u.sum(axis=1, keepdims=True)
    if np.any(s <= 0.0):
        raise NumericalError("prevalence-weighted mass vanished for a sample")
    q = u / s
    loss, d_q = cross_entropy(q, targets)
    d_u = (d_q - (d_q * q).sum(axis=1, keepdims=True)) / s
    return loss, prevs * d_u


def product_cross_entropy(
    probs: np.ndarray, prevs: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Cross-entropy applied to the raw prevalence product (no renormalizing).

    Kept for comparison against the renormalized objective; not the default.
    """
    _check_finite(probs)
    t = one_hot(targets, probs.shape[1])
    u = prevs * probs
    clamped = np.clip(u, PROB_FLOOR, None)
    loss = float(-(t * np.log(clamped)).sum(axis=1).mean())
    active = u > PROB_FLOOR
    d_u = -(t / clamped) * active / probs.shape[0]
    return loss, prevs * d_u


def loss_and_grad(
    mlp: Mlp, x: np.ndarray, targets: np.ndarray, prevs: np.ndarray | None = None
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Forward plus backward for a plain MLP under (adjusted) cross-entropy."""
    probs, caches = forward(mlp, x)
    if prevs is None:
        loss, d_probs = cross_entropy(probs, targets)
    else:
        loss, d_probs = adjusted_cross_entropy(probs, prevs, targets)
    grad_w, grad_b, _ = backward(mlp, caches, d_probs)
    return loss, grad_w, grad_b


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_init(arrays: Sequence[np.ndarray], lr: float) -> AdamState:
    return AdamState(
        lr=lr,
        m=[np.zeros_like(a) for a in arrays],
        v=[np.zeros_like(a) for a in arrays],
    )


def adam_step(
    state: AdamState, arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray]
) -> tuple[AdamState, list[np.ndarray]]:
    """One bias-corrected update; returns the new state and new arrays."""
    if len(arrays) != len(state.m) or len(grads) != len(arrays):
        raise ConfigurationError("adam state, params, and grads must align")
    t = state.step + 1
    new_m, new_v, new_arrays = [], [], []
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_arrays.append(a - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return (
        AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
                  step=t, m=new_m, v=new_v),
        new_arrays,
    )


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise relative disagreement; coordinates where both gradients
    are below 1e-7 are treated as zero (finite-difference noise floor)."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    scale = np.maximum(np.abs(a), np.abs(n))
    err = np.zeros_like(scale)
    live = scale > 1e-7
    err[live] = np.abs(a - n)[live] / scale[live]
    return float(err.max()) if err.size else 0.0


def check_gradients(
    loss_fn: Callable[[], float],
    arrays: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Central finite differences against analytic grads, in place.

    Perturbs each coordinate of ``arrays`` by +/- h and re-evaluates
    ``loss_fn`` (which must read the same array objects).  With
    ``max_coords`` set, a seeded random subsample of coordinates is checked.
    """
    if h <= 0:
        raise ConfigurationError("h must be > 0")
    coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(k)] for k in picks]
    worst = 0.0
    for i, j in coords:
        flat = arrays[i].ravel()
        orig = flat[j]
        flat[j] = orig + h
        plus = loss_fn()
        flat[j] = orig - h
        minus = loss_fn()
        flat[j] = orig
        numeric = (plus - minus) / (2.0 * h)
        worst = max(worst, max_relative_error(
            np.array([analytic[i].ravel()[j]]), np.array([numeric])
        ))
    return worst


def grad_check(
    mlp: Mlp,
    x: np.ndarray,
    targets: np.ndarray,
    h: float = 1e-5,
    prevs: np.ndarray | None = None,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error of analytic vs numeric gradients for one batch."""
    _, grad_w, grad_b = loss_and_grad(mlp, x, targets, prevs=prevs)
    arrays = [a for pair in zip(mlp.weights, mlp.biases) for a in pair]
    analytic = [a for pair in zip(grad_w, grad_b) for a in pair]

    def loss_fn() -> float:
        loss, _, _ = loss_and_grad(mlp, x, targets, prevs=prevs)
        return loss

    return check_gradients(loss_fn, arrays, analytic, h=h, max_coords=max_coords, seed=seed)


def save_arrays(path: str | Path, named: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float arrays as versioned JSON (exact float round-trip)."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "arrays": [
            {"name": name, "shape": list(arr.shape), "data": np.asarray(arr, dtype=float).ravel().tolist()}
            for name, arr in named.items()
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = json.loads(Path(path).read_text())
    if raw.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"unsupported checkpoint version {raw.get('version')!r} in {path}"
        )
    named = {
        entry["name"]: np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        for entry in raw["arrays"]
    }
    return named, raw.get("meta", {})
