"""Ready-made experiment configurations for the synthetic benchmarks.

Two training setups are standard: two training sites with strong and medium
confounder coupling, and a single strongly-coupled site.  Validation is one
external site at beta 0.5 and the test site sits at beta 0.3, where the
label marginal has shifted hard and y and z are nearly uncorrelated.
"""
from __future__ import annotations

from dataclasses import replace

from .config import DEFAULT_ABLATION_VARIANTS, ExperimentConfig, SiteSpec, SyntheticDataConfig
from .scm import CausalRelation, ScmParams
from .training import TrainConfig


def multi_site_benchmark(
    relation: CausalRelation = CausalRelation.COMMON_CAUSE,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    steps: int = 20000,
    methods: tuple[str, ...] = ("copa", "erm_a", "erm_b"),
    validation: str = "external",
) -> ExperimentConfig:
    """Two training sites (10k at beta 0.9, 10k at beta 0.7)."""
    return ExperimentConfig(
        name=f"multi-{relation.value}",
        data=SyntheticDataConfig(
            relation=relation,
            scm=ScmParams(),
            sites=(
                SiteSpec("train_a", "train", 10000, 0.9),
                SiteSpec("train_b", "train", 10000, 0.7),
                SiteSpec("val", "validation", 500, 0.5),
                SiteSpec("test", "test", 1000, 0.3),
            ),
        ),
        methods=methods,
        train=TrainConfig(steps=steps, lr=1e-4, batch_size=128),
        validation=validation,
        seeds=seeds,
    )


def single_site_benchmark(
    relation: CausalRelation = CausalRelation.COMMON_CAUSE,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    steps: int = 20000,
    methods: tuple[str, ...] = ("copa", "erm_a", "erm_b"),
    validation: str = "external",
) -> ExperimentConfig:
    """One training site (20k at beta 0.9)."""
    return ExperimentConfig(
        name=f"single-{relation.value}",
        data=SyntheticDataConfig(
            relation=relation,
            scm=ScmParams(),
            sites=(
                SiteSpec("train_a", "train", 20000, 0.9),
                SiteSpec("val", "validation", 500, 0.5),
                SiteSpec("test", "test", 1000, 0.3),
            ),
        ),
        methods=methods,
        train=TrainConfig(steps=steps, lr=1e-4, batch_size=128),
        validation=validation,
        seeds=seeds,
    )


def ablation_benchmark(
    relation: CausalRelation = CausalRelation.COMMON_CAUSE,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    steps: int = 20000,
    methods: tuple[str, ...] = ("copa", "erm_a", "erm_b"),
) -> ExperimentConfig:
    """Multi-site setup with a test pair pool large enough for every
    subsample variant; the default estimate still uses 1000 pairs."""
    cfg = multi_site_benchmark(relation=relation, seeds=seeds, steps=steps, methods=methods)
    sites = tuple(
        replace(s, prevalence_pool_size=100000) if s.role == "test" else s
        for s in cfg.data.sites
    )
    return replace(
        cfg,
        name=f"ablation-{relation.value}",
        data=replace(cfg.data, sites=sites),
        ablation=DEFAULT_ABLATION_VARIANTS,
        test_prevalence_subsample=1000,
    )
