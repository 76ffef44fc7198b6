"""Experiment configuration: schema, validation, serialization, hashing.

Configs round-trip losslessly through JSON; the canonical serialized form is
hashed and the hash stamps every artifact a run produces, so artifacts from
different configs can never be mixed silently.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .prevalence import SmoothingConfig
from .scm import CausalRelation, ScmParams
from .training import TrainConfig

SITE_ROLES = ("train", "validation", "test")
METHODS = ("copa", "erm_a", "erm_b")
VALIDATION_MODES = ("external", "internal")
PREVALENCE_VARIANTS = ("conditional", "marginal", "uniform", "marginalized")
DEFAULT_ABLATION_VARIANTS = (
    "subsample:10",
    "subsample:100",
    "subsample:1000",
    "subsample:10000",
    "subsample:100000",
    "marginal",
    "uniform",
    "marginalized",
)


def parse_variant(variant: str) -> tuple[str, int | None]:
    """Split a prevalence-variant string into (kind, subsample size)."""
    if variant.startswith("subsample:"):
        try:
            size = int(variant.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigurationError(f"bad subsample variant {variant!r}") from exc
        if size < 1:
            raise ConfigurationError(f"subsample size must be >= 1 in {variant!r}")
        return "subsample", size
    if variant in PREVALENCE_VARIANTS:
        return variant, None
    raise ConfigurationError(f"unknown prevalence variant {variant!r}")


@dataclass(frozen=True)
class SiteSpec:
    site_id: str
    role: str
    n_samples: int
    beta: float
    prevalence_pool_size: int = 1000

    def __post_init__(self) -> None:
        if self.role not in SITE_ROLES:
            raise ConfigurationError(f"unknown site role {self.role!r}")


@dataclass(frozen=True)
class SyntheticDataConfig:
    relation: CausalRelation
    scm: ScmParams = ScmParams()
    sites: tuple[SiteSpec, ...] = ()


@dataclass(frozen=True)
class CsvDataConfig:
    samples: str                       # path to the samples CSV
    manifest: str                      # path to the column-type manifest JSON
    roles: dict[str, str] = field(default_factory=dict)  # site_id -> role


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    data: SyntheticDataConfig | CsvDataConfig
    methods: tuple[str, ...] = METHODS
    train: TrainConfig = TrainConfig()
    validation: str = "external"
    smoothing: SmoothingConfig = SmoothingConfig()
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_classes: int = 2
    backbone_dims: tuple[int, ...] = (10,)
    ablation: tuple[str, ...] | None = None
    include_oracle: bool = True
    # evaluate the default conditional estimate on a seeded subsample of the
    # test pool of this size (None: use the full pool)
    test_prevalence_subsample: int | None = None


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.validation not in VALIDATION_MODES:
        raise ConfigurationError(f"unknown validation mode {cfg.validation!r}")
    for method in cfg.methods:
        if method not in METHODS:
            raise ConfigurationError(f"unknown method {method!r}")
    if len(set(cfg.seeds)) != len(cfg.seeds) or not cfg.seeds:
        raise ConfigurationError("seeds must be non-empty and distinct")
    if cfg.n_classes < 2:
        raise ConfigurationError(f"n_classes must be >= 2, got {cfg.n_classes}")
    if cfg.ablation is not None:
        for variant in cfg.ablation:
            parse_variant(variant)
    if isinstance(cfg.data, SyntheticDataConfig):
        roles = {}
        ids = set()
        for site in cfg.data.sites:
            if site.site_id in ids:
                raise ConfigurationError(f"duplicate site_id {site.site_id!r}")
            ids.add(site.site_id)
            roles[site.role] = roles.get(site.role, 0) + 1
        if roles.get("train", 0) < 1:
            raise ConfigurationError("config needs at least one training site")
        if roles.get("test", 0) < 1:
            raise ConfigurationError("config needs at least one test site")
        if roles.get("validation", 0) != 1:
            raise ConfigurationError("config needs exactly one validation site")
    else:
        role_values = set(cfg.data.roles.values())
        if "train" not in role_values or "test" not in role_values:
            raise ConfigurationError("csv roles must include train and test sites")
        for role in role_values:
            if role not in SITE_ROLES:
                raise ConfigurationError(f"unknown site role {role!r}")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    raw = asdict(cfg)
    raw["train"] = asdict(cfg.train)
    raw["smoothing"] = asdict(cfg.smoothing)
    if isinstance(cfg.data, SyntheticDataConfig):
        raw["data"] = {
            "kind": "synthetic",
            "relation": cfg.data.relation.value,
            "scm": asdict(cfg.data.scm),
            "sites": [asdict(s) for s in cfg.data.sites],
        }
    else:
        raw["data"] = {
            "kind": "csv",
            "samples": cfg.data.samples,
            "manifest": cfg.data.manifest,
            "roles": dict(cfg.data.roles),
        }
    raw["methods"] = list(cfg.methods)
    raw["seeds"] = list(cfg.seeds)
    raw["backbone_dims"] = list(cfg.backbone_dims)
    raw["ablation"] = list(cfg.ablation) if cfg.ablation is not None else None
    return raw


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        data_raw = dict(raw["data"])
        kind = data_raw.pop("kind")
        if kind == "synthetic":
            data = SyntheticDataConfig(
                relation=CausalRelation(data_raw["relation"]),
                scm=ScmParams(**data_raw.get("scm", {})),
                sites=tuple(SiteSpec(**s) for s in data_raw.get("sites", ())),
            )
        elif kind == "csv":
            data = CsvDataConfig(
                samples=data_raw["samples"],
                manifest=data_raw["manifest"],
                roles=dict(data_raw.get("roles", {})),
            )
        else:
            raise ConfigurationError(f"unknown data kind {kind!r}")
        cfg = ExperimentConfig(
            name=raw["name"],
            data=data,
            methods=tuple(raw.get("methods", METHODS)),
            train=TrainConfig(**raw.get("train", {})),
            validation=raw.get("validation", "external"),
            smoothing=SmoothingConfig(**raw.get("smoothing", {})),
            seeds=tuple(raw.get("seeds", (0, 1, 2, 3, 4))),
            n_classes=raw.get("n_classes", 2),
            backbone_dims=tuple(raw.get("backbone_dims", (10,))),
            ablation=tuple(raw["ablation"]) if raw.get("ablation") is not None else None,
            include_oracle=raw.get("include_oracle", True),
            test_prevalence_subsample=raw.get("test_prevalence_subsample"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    validate_config(cfg)
    return cfg


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:12]


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(canonical_json(cfg))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)
