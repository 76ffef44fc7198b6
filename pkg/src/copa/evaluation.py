"""Metrics, model selection, and the multi-seed experiment protocol.

A run is a deterministic function of (config, seed): sites are generated or
ingested, per-site prevalence estimates are fitted, every configured method
is trained with checkpoint selection against the configured validation mode,
and test F1 is computed with each test site's own prevalence estimate.
Ablations re-evaluate a frozen model under degraded prevalence estimates;
they never retrain, and the report records the model hash per variant to
prove it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import baselines, data_io, model as copa_model, prevalence, scm
from .config import (
    CsvDataConfig,
    ExperimentConfig,
    SyntheticDataConfig,
    config_hash,
    parse_variant,
    validate_config,
)
from .errors import ConfigurationError
from .rng import derive_seed
from .training import TrainResult, select_checkpoint  # noqa: F401  (re-export)

POSITIVE_CLASS = 1


@dataclass(frozen=True)
class ConfusionCounts:
    """Confusion matrix indexed [true][predicted], with binary shortcuts."""

    matrix: np.ndarray
    positive_class: int = POSITIVE_CLASS

    @property
    def tp(self) -> int:
        return int(self.matrix[self.positive_class, self.positive_class])

    @property
    def fp(self) -> int:
        return int(self.matrix[:, self.positive_class].sum() - self.tp)

    @property
    def fn(self) -> int:
        return int(self.matrix[self.positive_class, :].sum() - self.tp)

    @property
    def tn(self) -> int:
        return int(self.matrix.sum() - self.tp - self.fp - self.fn)


def confusion_counts(
    preds: np.ndarray, labels: np.ndarray, n_classes: int = 2,
    positive_class: int = POSITIVE_CLASS,
) -> ConfusionCounts:
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape:
        raise ConfigurationError("predictions and labels must have equal length")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (labels, preds), 1)
    return ConfusionCounts(matrix=matrix, positive_class=positive_class)


def f1_score(preds: np.ndarray, labels: np.ndarray, positive_class: int = POSITIVE_CLASS) -> float:
    """2*tp / (2*tp + fp + fn); 0 when the denominator is 0."""
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape or preds.ndim != 1 or len(preds) == 0:
        raise ConfigurationError("predictions and labels must be equal-length 1-d arrays")
    n_classes = int(max(preds.max(), labels.max(), positive_class)) + 1
    counts = confusion_counts(preds, labels, n_classes, positive_class)
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 0.0 if denom == 0 else 2.0 * counts.tp / denom


@dataclass
class ValidationSet:
    """Data and per-sample prevalence vectors used for checkpoint selection."""

    mode: str  # "external" | "internal"
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    prevs: np.ndarray


@dataclass
class RunData:
    """Everything one seed's run needs, fixed before any training starts."""

    run_seed: int
    n_classes: int
    train_sites: list[scm.SiteDataset]
    train_prevs: dict[str, np.ndarray]
    val_site: scm.SiteDataset | None
    external_val: ValidationSet | None
    internal_val: ValidationSet | None
    test_sites: list[scm.SiteDataset]
    test_prevs: dict[str, np.ndarray]
    estimates: dict[str, prevalence.PrevalenceEstimate] = field(default_factory=dict)
    synthetic: bool = True


def _site_estimate(
    cfg: ExperimentConfig, site: scm.SiteDataset, run_seed: int, subsample: int | None = None
) -> prevalence.PrevalenceEstimate:
    y, z = site.prevalence_pairs
    if subsample is not None and subsample < len(y):
        return prevalence.subsample_prevalence(
            y, z, subsample, cfg.smoothing, cfg.n_classes,
            seed=derive_seed(run_seed, "test-subsample", site.site_id),
            site_id=site.site_id,
        )
    return prevalence.fit_site_estimator(
        y, z, site.z_types, cfg.smoothing, cfg.n_classes,
        seed=derive_seed(run_seed, "estimator", site.site_id), site_id=site.site_id,
    )


def _split_evenly(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def _build_synthetic(cfg: ExperimentConfig, run_seed: int) -> RunData:
    data_cfg: SyntheticDataConfig = cfg.data
    mixing = scm.make_mixing_matrix(derive_seed(run_seed, "mixing"))
    by_role: dict[str, list[scm.SiteDataset]] = {"train": [], "validation": [], "test": []}
    specs = {}
    for spec in data_cfg.sites:
        site = scm.make_site(
            scm.SiteConfig(
                site_id=spec.site_id,
                n_samples=spec.n_samples,
                beta=spec.beta,
                relation=data_cfg.relation,
                prevalence_pool_size=spec.prevalence_pool_size,
            ),
            data_cfg.scm,
            mixing,
            derive_seed(run_seed, "site", spec.site_id),
        )
        by_role[spec.role].append(site)
        specs[spec.site_id] = spec

    estimates: dict[str, prevalence.PrevalenceEstimate] = {}
    for role, sites in by_role.items():
        for site in sites:
            sub = cfg.test_prevalence_subsample if role == "test" else None
            estimates[site.site_id] = _site_estimate(cfg, site, run_seed, subsample=sub)

    train_sites = by_role["train"]
    train_prevs = {
        s.site_id: estimates[s.site_id].query_batch(s.z) for s in train_sites
    }
    val_site = by_role["validation"][0]
    external_val = ValidationSet(
        mode="external",
        x=val_site.x, z=val_site.z, y=val_site.y,
        prevs=estimates[val_site.site_id].query_batch(val_site.z),
    )
    internal_val = None
    if cfg.validation == "internal":
        # a fresh draw from the training sites, sized to match the external set
        sizes = _split_evenly(val_site.n, len(train_sites))
        xs, zs, ys, ps = [], [], [], []
        for site, size in zip(train_sites, sizes):
            if size == 0:
                continue
            spec = specs[site.site_id]
            seed = derive_seed(run_seed, "internal-val", site.site_id)
            y, z = scm.gen_labels(data_cfg.relation, spec.beta, data_cfg.scm, size, seed)
            x = scm.gen_features_2dim(
                y, z, mixing, data_cfg.scm, derive_seed(seed, "features")
            )
            z_col = z[:, None].astype(float)
            xs.append(x); zs.append(z_col); ys.append(y)
            ps.append(estimates[site.site_id].query_batch(z_col))
        internal_val = ValidationSet(
            mode="internal",
            x=np.concatenate(xs), z=np.concatenate(zs),
            y=np.concatenate(ys), prevs=np.concatenate(ps),
        )
        assert len(internal_val.y) == val_site.n  # sample budgets are kept equal
    test_sites = by_role["test"]
    test_prevs = {
        s.site_id: estimates[s.site_id].query_batch(s.z) for s in test_sites
    }
    return RunData(
        run_seed=run_seed, n_classes=cfg.n_classes,
        train_sites=train_sites, train_prevs=train_prevs,
        val_site=val_site, external_val=external_val, internal_val=internal_val,
        test_sites=test_sites, test_prevs=test_prevs,
        estimates=estimates, synthetic=True,
    )


def _half_split_prevs(
    cfg: ExperimentConfig, site: scm.SiteDataset, run_seed: int
) -> np.ndarray:
    kind = "counting" if all(t == "categorical" for t in site.z_types) else "aux"
    result = prevalence.half_split_assign(
        site.y, site.z, site.z_types, kind, cfg.smoothing, cfg.n_classes,
        seed=derive_seed(run_seed, "half-split", site.site_id),
    )
    return result.prevs


def _build_csv(cfg: ExperimentConfig, run_seed: int) -> RunData:
    data_cfg: CsvDataConfig = cfg.data
    sites, _ = data_io.read_tabular_csv(data_cfg.samples, data_cfg.manifest)
    roles = dict(data_cfg.roles)
    for site in sites:
        if site.site_id not in roles:
            raise ConfigurationError(f"no role assigned to site {site.site_id!r}")
    train_ids = {sid for sid, role in roles.items() if role == "train"}
    sites = data_io.standardize_continuous_z(sites, train_ids)
    by_role: dict[str, list[scm.SiteDataset]] = {"train": [], "validation": [], "test": []}
    for site in sites:
        by_role[roles[site.site_id]].append(site)
    train_sites = by_role["train"]
    val_site = by_role["validation"][0] if by_role["validation"] else None

    internal_val = None
    if cfg.validation == "internal":
        if val_site is None:
            raise ConfigurationError(
                "internal validation needs a validation site to size the held-out split"
            )
        sizes = _split_evenly(val_site.n, len(train_sites))
        held_x, held_z, held_y, held_p, trimmed = [], [], [], [], []
        for site, size in zip(train_sites, sizes):
            if size >= site.n:
                raise ConfigurationError(
                    f"site {site.site_id!r} too small for the internal validation split"
                )
            rng = np.random.default_rng(derive_seed(run_seed, "internal-val", site.site_id))
            perm = rng.permutation(site.n)
            hold, keep = perm[:size], perm[size:]
            kept = scm.SiteDataset(
                site_id=site.site_id, x=site.x[keep], y=site.y[keep], z=site.z[keep],
                prevalence_y=site.prevalence_y, prevalence_z=site.prevalence_z,
                z_types=site.z_types,
            )
            trimmed.append(kept)
            est = prevalence.fit_site_estimator(
                kept.y, kept.z, kept.z_types, cfg.smoothing, cfg.n_classes,
                seed=derive_seed(run_seed, "internal-val-est", site.site_id),
                site_id=site.site_id,
            )
            held_x.append(site.x[hold]); held_z.append(site.z[hold])
            held_y.append(site.y[hold]); held_p.append(est.query_batch(site.z[hold]))
        train_sites = trimmed
        internal_val = ValidationSet(
            mode="internal",
            x=np.concatenate(held_x), z=np.concatenate(held_z),
            y=np.concatenate(held_y), prevs=np.concatenate(held_p),
        )

    train_prevs = {
        s.site_id: _half_split_prevs(cfg, s, run_seed) for s in train_sites
    }
    external_val = None
    if val_site is not None:
        external_val = ValidationSet(
            mode="external",
            x=val_site.x, z=val_site.z, y=val_site.y,
            prevs=_half_split_prevs(cfg, val_site, run_seed),
        )
    test_sites = by_role["test"]
    test_prevs = {
        s.site_id: _half_split_prevs(cfg, s, run_seed) for s in test_sites
    }
    return RunData(
        run_seed=run_seed, n_classes=cfg.n_classes,
        train_sites=train_sites, train_prevs=train_prevs,
        val_site=val_site, external_val=external_val, internal_val=internal_val,
        test_sites=test_sites, test_prevs=test_prevs,
        estimates={}, synthetic=False,
    )


def build_run_data(cfg: ExperimentConfig, run_seed: int) -> RunData:
    validate_config(cfg)
    if isinstance(cfg.data, SyntheticDataConfig):
        return _build_synthetic(cfg, run_seed)
    return _build_csv(cfg, run_seed)


def make_val_fn(method: str, valset: ValidationSet | None) -> Callable | None:
    if valset is None:
        return None
    if method == "copa":
        def val_fn(m: copa_model.RatioModel) -> float:
            pred = copa_model.predict_adjusted(m, valset.x, valset.z, valset.prevs)
            return f1_score(pred.labels, valset.y)
    else:
        def val_fn(m: copa_model.RatioModel) -> float:
            return f1_score(baselines.predict_erm(m, valset.x, valset.z), valset.y)
    return val_fn


def train_method(
    method: str,
    data: RunData,
    cfg: ExperimentConfig,
    snapshot_hook=None,
    stop_after: int | None = None,
    resume=None,
) -> TrainResult:
    train_cfg = cfg.train.with_seed(data.run_seed)
    batches = [
        copa_model.SiteBatches(s.x, s.z, s.y, data.train_prevs[s.site_id])
        for s in data.train_sites
    ]
    valset = data.internal_val if cfg.validation == "internal" else data.external_val
    val_fn = make_val_fn(method, valset)
    if method == "copa":
        return copa_model.train_copa(
            batches, train_cfg, val_fn, n_classes=cfg.n_classes,
            backbone_dims=cfg.backbone_dims, snapshot_hook=snapshot_hook,
            stop_after=stop_after, resume=resume,
        )
    return baselines.train_erm(
        baselines.ErmVariant(method), batches, train_cfg, val_fn,
        n_classes=cfg.n_classes, backbone_dims=cfg.backbone_dims,
        snapshot_hook=snapshot_hook, stop_after=stop_after, resume=resume,
    )


def _train_z_pool(data: RunData) -> np.ndarray:
    return np.concatenate([s.z for s in data.train_sites])


def variant_predictions(
    m: copa_model.RatioModel,
    data: RunData,
    site: scm.SiteDataset,
    variant: str,
    cfg: ExperimentConfig,
) -> np.ndarray:
    """Ratio-model test predictions under a chosen prevalence source."""
    kind, size = parse_variant(variant)
    pair_y, pair_z = site.prevalence_pairs
    if kind == "conditional":
        return copa_model.predict_adjusted(
            m, site.x, site.z, data.test_prevs[site.site_id]
        ).labels
    if kind == "subsample":
        est = prevalence.subsample_prevalence(
            pair_y, pair_z, size, cfg.smoothing, cfg.n_classes,
            seed=derive_seed(data.run_seed, "ablation-subsample", site.site_id, size),
            site_id=site.site_id,
        )
        return copa_model.predict_site(m, site.x, site.z, est)
    if kind == "marginal":
        src_y = pair_y if len(pair_y) else site.y
        est = prevalence.marginal_prevalence(src_y, cfg.smoothing, cfg.n_classes)
        return copa_model.predict_site(m, site.x, site.z, est)
    if kind == "uniform":
        est = prevalence.uniform_prevalence(cfg.n_classes)
        return copa_model.predict_site(m, site.x, site.z, est)
    # marginalized: z is treated as unobserved at the test site
    src_y = pair_y if len(pair_y) else site.y
    marg = prevalence.marginal_prevalence(src_y, cfg.smoothing, cfg.n_classes).vector
    pool = _train_z_pool(data)
    rng = np.random.default_rng(
        derive_seed(data.run_seed, "ablation-marginalized", site.site_id)
    )
    z_values = pool[rng.integers(0, len(pool), size=10)]
    return copa_model.predict_marginalized(m, site.x, marg, z_values).labels


def oracle_predictions(site: scm.SiteDataset) -> np.ndarray:
    """Exact-posterior predictions using the site's true conditional table."""
    tp = site.true_params
    if tp is None:
        raise ConfigurationError("oracle predictions need synthetic ground truth")
    table = prevalence.TablePrevalence.from_matrix(
        scm.label_conditionals(tp.relation, tp.beta, tp.params), site_id=site.site_id
    )
    probs = scm.bayes_posterior(site.x, site.z, tp.mixing, tp.params, table)
    return np.argmax(probs, axis=1)


@dataclass
class RunReport:
    config_hash: str
    validation_mode: str
    prevalence_variant: str
    rows: list[dict]
    summary: dict

    def to_jsonable(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "validation_mode": self.validation_mode,
            "prevalence_variant": self.prevalence_variant,
            "rows": self.rows,
            "summary": self.summary,
        }

    def csv_rows(self) -> list[tuple]:
        return [
            (r["method"], r["seed"], r["site"], r["metric"], r["value"]) for r in self.rows
        ]


def _aggregate(per_seed: dict[int, float]) -> tuple[float, float]:
    values = np.asarray(list(per_seed.values()), dtype=float)
    mean = float(values.mean())
    stderr = 0.0 if len(values) < 2 else float(values.std(ddof=1) / math.sqrt(len(values)))
    return mean, stderr


def evaluate_models(
    cfg: ExperimentConfig,
    data: dict[int, RunData],
    models: dict[tuple[str, int], copa_model.RatioModel],
    prevalence_variant: str = "conditional",
    selected_steps: dict[tuple[str, int], int] | None = None,
) -> RunReport:
    """Score trained models on every test site; also scores the exact
    posterior oracle on synthetic data when the config asks for it."""
    parse_variant(prevalence_variant)
    rows: list[dict] = []
    summary: dict = {}
    methods = list(cfg.methods)
    include_oracle = cfg.include_oracle and all(d.synthetic for d in data.values())
    for method in methods + (["oracle"] if include_oracle else []):
        per_seed: dict[int, float] = {}
        steps: dict[str, int] = {}
        for seed, run_data in data.items():
            site_scores = []
            for site in run_data.test_sites:
                if method == "oracle":
                    preds = oracle_predictions(site)
                elif method == "copa":
                    preds = variant_predictions(
                        models[(method, seed)], run_data, site, prevalence_variant, cfg
                    )
                else:
                    preds = baselines.predict_erm(
                        models[(method, seed)], site.x, site.z
                    )
                score = f1_score(preds, site.y)
                site_scores.append(score)
                rows.append(
                    {
                        "method": method, "seed": seed, "site": site.site_id,
                        "metric": "f1", "value": score,
                    }
                )
            per_seed[seed] = float(np.mean(site_scores))
            if selected_steps and (method, seed) in selected_steps:
                steps[str(seed)] = selected_steps[(method, seed)]
        mean, stderr = _aggregate(per_seed)
        summary[method] = {
            "mean_f1": mean,
            "stderr": stderr,
            "per_seed": {str(s): v for s, v in per_seed.items()},
            "selected_steps": steps,
        }
    return RunReport(
        config_hash=config_hash(cfg),
        validation_mode=cfg.validation,
        prevalence_variant=prevalence_variant,
        rows=rows,
        summary=summary,
    )


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    data: dict[int, RunData]
    trained: dict[tuple[str, int], TrainResult]
    report: RunReport | None = None

    def models(self) -> dict[tuple[str, int], copa_model.RatioModel]:
        return {key: res.model for key, res in self.trained.items()}

    def selected_steps(self) -> dict[tuple[str, int], int]:
        return {key: res.selected_step for key, res in self.trained.items()}


def train_all(
    cfg: ExperimentConfig, methods: Sequence[str] | None = None
) -> ExperimentResult:
    validate_config(cfg)
    methods = list(methods if methods is not None else cfg.methods)
    data = {seed: build_run_data(cfg, seed) for seed in cfg.seeds}
    trained: dict[tuple[str, int], TrainResult] = {}
    for seed in cfg.seeds:
        for method in methods:
            trained[(method, seed)] = train_method(method, data[seed], cfg)
    return ExperimentResult(config=cfg, data=data, trained=trained)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Full protocol: build data, train every method per seed, select by the
    configured validation mode, and report test F1 mean and standard error."""
    result = train_all(cfg)
    result.report = evaluate_models(
        cfg, result.data, result.models(), selected_steps=result.selected_steps()
    )
    return result


@dataclass
class AblationReport:
    config_hash: str
    variants: list[str]
    rows: list[dict]
    summary: dict
    model_hashes: dict

    def to_jsonable(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "variants": self.variants,
            "rows": self.rows,
            "summary": self.summary,
            "model_hashes": self.model_hashes,
        }

    def csv_rows(self) -> list[tuple]:
        return [
            (r["variant"], r["seed"], r["site"], r["metric"], r["value"], r["model_hash"])
            for r in self.rows
        ]


def run_ablation(
    cfg: ExperimentConfig,
    variants: Sequence[str] | None = None,
    experiment: ExperimentResult | None = None,
) -> AblationReport:
    """Re-evaluate a trained ratio model under degraded prevalence sources.

    Training stays untouched: models come from ``experiment`` (or one
    training pass if absent) and the same frozen parameters are re-scored
    under every variant; the per-variant model hash certifies it.
    """
    from .config import DEFAULT_ABLATION_VARIANTS

    variant_list = list(variants or cfg.ablation or DEFAULT_ABLATION_VARIANTS)
    for v in variant_list:
        parse_variant(v)
    if experiment is None:
        experiment = train_all(cfg, methods=["copa"])
    rows: list[dict] = []
    summary: dict = {}
    hashes: dict = {}
    for variant in variant_list:
        per_seed: dict[int, float] = {}
        for seed in cfg.seeds:
            run_data = experiment.data[seed]
            m = experiment.trained[("copa", seed)].model
            h = copa_model.model_hash(m)
            hashes.setdefault(str(seed), {})[variant] = h
            site_scores = []
            for site in run_data.test_sites:
                preds = variant_predictions(m, run_data, site, variant, cfg)
                score = f1_score(preds, site.y)
                site_scores.append(score)
                rows.append(
                    {
                        "variant": variant, "seed": seed, "site": site.site_id,
                        "metric": "f1", "value": score, "model_hash": h,
                    }
                )
            per_seed[seed] = float(np.mean(site_scores))
        mean, stderr = _aggregate(per_seed)
        summary[variant] = {
            "mean_f1": mean,
            "stderr": stderr,
            "per_seed": {str(s): v for s, v in per_seed.items()},
        }
    return AblationReport(
        config_hash=config_hash(cfg),
        variants=variant_list,
        rows=rows,
        summary=summary,
        model_hashes=hashes,
    )
