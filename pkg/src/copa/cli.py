"""Command-line front end.

Commands: generate, train, eval, ablate, report.  Every command resolves one
run directory per config, keyed by the config hash, so artifacts from
different configs cannot mix; a lockfile serializes writers.  Exit codes are
stable: 0 success, 2 configuration error, 3 missing artifact, 4 numerical
failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import data_io, evaluation, nn
from .config import (
    ExperimentConfig,
    SyntheticDataConfig,
    config_hash,
    load_config,
    save_config,
)
from .errors import (
    ConfigurationError,
    CopaError,
    MissingArtifactError,
    NumericalError,
)
from .model import ModelSpec, RatioModel, build_ratio_model, flat_params, set_flat_params
from .training import TrainingSnapshot, select_checkpoint

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4

LOCK_NAME = ".lock"


def run_dir_for(cfg: ExperimentConfig, out_base: str | Path) -> Path:
    return Path(out_base) / config_hash(cfg)


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(
            f"run directory {run_dir} is locked by another process "
            f"(remove {lock} if that run is dead)"
        )
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def _prepare(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    run_dir = run_dir_for(cfg, args.out)
    return cfg, run_dir


def _write_config_copy(cfg: ExperimentConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.json")


def _seeds(cfg: ExperimentConfig, args) -> tuple[int, ...]:
    if getattr(args, "seed", None) is None:
        return cfg.seeds
    if args.seed not in cfg.seeds:
        raise ConfigurationError(f"--seed {args.seed} is not among the config seeds {cfg.seeds}")
    return (args.seed,)


def _apply_validation_override(cfg: ExperimentConfig, args) -> ExperimentConfig:
    mode = getattr(args, "validation", None)
    if mode is None or mode == cfg.validation:
        return cfg
    from dataclasses import replace

    return replace(cfg, validation=mode)


def cmd_generate(args) -> int:
    cfg, run_dir = _prepare(args)
    if not isinstance(cfg.data, SyntheticDataConfig):
        raise ConfigurationError("generate only applies to synthetic configs")
    if args.dry_run:
        print(f"config ok; would write datasets under {run_dir}/data")
        return EXIT_OK
    with run_lock(run_dir):
        _write_config_copy(cfg, run_dir)
        roles = {s.site_id: s.role for s in cfg.data.sites}
        for seed in _seeds(cfg, args):
            data = evaluation.build_run_data(cfg, seed)
            sites = data.train_sites + (
                [data.val_site] if data.val_site is not None else []
            ) + data.test_sites
            data_io.write_dataset(
                sites,
                run_dir / "data" / f"seed{seed}",
                config_hash(cfg),
                roles=roles,
                extra_meta={"seed": seed},
            )
        print(f"wrote datasets under {run_dir}/data")
    return EXIT_OK


def _checkpoint_path(run_dir: Path, method: str, seed: int) -> Path:
    return run_dir / "checkpoints" / f"{method}_seed{seed}.json"


def _snapshot_path(run_dir: Path, method: str, seed: int) -> Path:
    return run_dir / "checkpoints" / f"{method}_seed{seed}.snapshot.json"


def _model_meta(cfg: ExperimentConfig, model: RatioModel, method: str, seed: int, step: int) -> dict:
    return {
        "config_hash": config_hash(cfg),
        "method": method,
        "seed": seed,
        "selected_step": step,
        "selection": cfg.validation,
        "spec": {
            "x_dim": model.spec.x_dim,
            "z_dim": model.spec.z_dim,
            "n_classes": model.spec.n_classes,
            "backbone_dims": list(model.spec.backbone_dims),
        },
        "train": {
            "steps": cfg.train.steps,
            "lr": cfg.train.lr,
            "batch_size": cfg.train.batch_size,
            "site_cycling": cfg.train.site_cycling,
            "checkpoint_every": cfg.train.checkpoint_every,
        },
    }


def _save_model(path: Path, cfg: ExperimentConfig, model: RatioModel, method: str, seed: int, step: int) -> None:
    named = {f"param_{i}": a for i, a in enumerate(flat_params(model))}
    path.parent.mkdir(parents=True, exist_ok=True)
    nn.save_arrays(path, named, meta=_model_meta(cfg, model, method, seed, step))


def _load_model(path: Path, cfg: ExperimentConfig) -> tuple[RatioModel, dict]:
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    named, meta = nn.load_arrays(path)
    if meta.get("config_hash") != config_hash(cfg):
        raise ConfigurationError(
            f"checkpoint {path} belongs to config {meta.get('config_hash')}, "
            f"not {config_hash(cfg)}"
        )
    spec = ModelSpec(
        x_dim=meta["spec"]["x_dim"],
        z_dim=meta["spec"]["z_dim"],
        n_classes=meta["spec"]["n_classes"],
        backbone_dims=tuple(meta["spec"]["backbone_dims"]),
    )
    model = build_ratio_model(spec, seed=0)
    arrays = [named[f"param_{i}"] for i in range(len(named))]
    set_flat_params(model, arrays)
    return model, meta


def _write_log(run_dir: Path, method: str, seed: int, checkpoints) -> None:
    log_dir = run_dir / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    with (log_dir / f"{method}_seed{seed}.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "val_f1"])
        for cp in checkpoints:
            writer.writerow([cp.step, f"{cp.train_loss:.17g}", f"{cp.val_f1:.17g}"])


def cmd_train(args) -> int:
    cfg, run_dir = _prepare(args)
    cfg = _apply_validation_override(cfg, args)
    run_dir = run_dir_for(cfg, args.out)
    if args.dry_run:
        print(f"config ok; would train {list(cfg.methods)} for seeds {list(_seeds(cfg, args))}")
        return EXIT_OK
    with run_lock(run_dir):
        _write_config_copy(cfg, run_dir)
        manifest: dict = {"config_hash": config_hash(cfg), "entries": []}
        for seed in _seeds(cfg, args):
            data = evaluation.build_run_data(cfg, seed)
            for method in cfg.methods:
                snap_path = _snapshot_path(run_dir, method, seed)
                resume = None
                if args.resume and snap_path.exists():
                    snapshot = TrainingSnapshot.from_jsonable(
                        json.loads(snap_path.read_text())
                    )
                    if snapshot.completed:
                        continue
                    resume = snapshot

                def hook(s: TrainingSnapshot) -> None:
                    snap_path.parent.mkdir(parents=True, exist_ok=True)
                    snap_path.write_text(json.dumps(s.to_jsonable(), sort_keys=True))

                result = evaluation.train_method(
                    method, data, cfg,
                    snapshot_hook=hook,
                    stop_after=args.stop_after,
                    resume=resume,
                )
                if not result.completed:
                    print(f"{method} seed {seed}: paused at step {result.snapshot.next_step - 1}")
                    continue
                _save_model(
                    _checkpoint_path(run_dir, method, seed), cfg,
                    result.model, method, seed, result.selected_step,
                )
                _write_log(run_dir, method, seed, result.checkpoints)
                manifest["entries"].append(
                    {"method": method, "seed": seed, "selected_step": result.selected_step}
                )
                print(f"{method} seed {seed}: selected step {result.selected_step}")
        manifest_path = run_dir / "checkpoints" / "manifest.json"
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        existing = (
            json.loads(manifest_path.read_text()) if manifest_path.exists() else None
        )
        if existing and existing.get("config_hash") == manifest["config_hash"]:
            seen = {(e["method"], e["seed"]) for e in manifest["entries"]}
            for entry in existing.get("entries", []):
                if (entry["method"], entry["seed"]) not in seen:
                    manifest["entries"].append(entry)
        manifest["entries"].sort(key=lambda e: (e["method"], e["seed"]))
        manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return EXIT_OK


def _write_report_files(run_dir: Path, name: str, report) -> None:
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / f"{name}.json").write_text(
        json.dumps(report.to_jsonable(), sort_keys=True, indent=1)
    )
    with (reports / f"{name}.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        if name == "ablation":
            writer.writerow(["variant", "seed", "site", "metric", "value", "model_hash"])
        else:
            writer.writerow(["method", "seed", "site", "metric", "value"])
        for row in report.csv_rows():
            writer.writerow(
                [f"{v:.17g}" if isinstance(v, float) else v for v in row]
            )


def cmd_eval(args) -> int:
    cfg, run_dir = _prepare(args)
    cfg = _apply_validation_override(cfg, args)
    run_dir = run_dir_for(cfg, args.out)
    seeds = _seeds(cfg, args)
    with run_lock(run_dir):
        data = {seed: evaluation.build_run_data(cfg, seed) for seed in seeds}
        models = {}
        steps = {}
        for seed in seeds:
            for method in cfg.methods:
                model, meta = _load_model(_checkpoint_path(run_dir, method, seed), cfg)
                models[(method, seed)] = model
                steps[(method, seed)] = meta.get("selected_step")
        report = evaluation.evaluate_models(
            cfg, data, models,
            prevalence_variant=args.prevalence, selected_steps=steps,
        )
        _write_report_files(run_dir, "report", report)
        for method, entry in sorted(report.summary.items()):
            print(f"{method}: mean F1 {entry['mean_f1']:.4f} +/- {entry['stderr']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, run_dir = _prepare(args)
    seeds = _seeds(cfg, args)
    with run_lock(run_dir):
        _write_config_copy(cfg, run_dir)
        data = {seed: evaluation.build_run_data(cfg, seed) for seed in seeds}
        trained = {}
        for seed in seeds:
            path = _checkpoint_path(run_dir, "copa", seed)
            if path.exists():
                model, meta = _load_model(path, cfg)
                trained[("copa", seed)] = evaluation.TrainResult(
                    model=model, selected_step=meta.get("selected_step"),
                    checkpoints=[], completed=True,
                )
            else:
                result = evaluation.train_method("copa", data[seed], cfg)
                _save_model(path, cfg, result.model, "copa", seed, result.selected_step)
                _write_log(run_dir, "copa", seed, result.checkpoints)
                trained[("copa", seed)] = result
        from dataclasses import replace

        sub_cfg = replace(cfg, seeds=tuple(seeds))
        experiment = evaluation.ExperimentResult(
            config=sub_cfg, data=data, trained=trained
        )
        report = evaluation.run_ablation(sub_cfg, experiment=experiment)
        # report the hash of the original config: ablation never retrains
        report.config_hash = config_hash(cfg)
        _write_report_files(run_dir, "ablation", report)
        for variant, entry in report.summary.items():
            print(f"{variant}: mean F1 {entry['mean_f1']:.4f} +/- {entry['stderr']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg, run_dir = _prepare(args)
    reports = run_dir / "reports"
    found = False
    for name in ("report", "ablation"):
        path = reports / f"{name}.json"
        if not path.exists():
            continue
        found = True
        payload = json.loads(path.read_text())
        print(f"== {name} (config {payload['config_hash']}) ==")
        for key, entry in sorted(payload["summary"].items()):
            print(f"  {key}: mean F1 {entry['mean_f1']:.4f} +/- {entry['stderr']:.4f}")
    if not found:
        raise MissingArtifactError(f"no reports under {reports}; run eval or ablate first")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="copa",
        description="Site-robust classification via conditional prevalence adjustment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", required=True, help="base output directory")
        p.add_argument("--seed", type=int, default=None, help="restrict to one seed")

    p_gen = sub.add_parser("generate", help="materialize synthetic datasets as CSV")
    add_common(p_gen)
    p_gen.add_argument("--dry-run", action="store_true")
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train all configured methods")
    add_common(p_train)
    p_train.add_argument("--dry-run", action="store_true")
    p_train.add_argument("--resume", action="store_true", help="continue from snapshots")
    p_train.add_argument(
        "--stop-after", type=int, default=None,
        help="checkpoint and pause after this many steps (testing/ops hook)",
    )
    p_train.add_argument("--validation", choices=("internal", "external"), default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate trained checkpoints on test sites")
    add_common(p_eval)
    p_eval.add_argument(
        "--prevalence", default="conditional",
        help="conditional | marginal | uniform | subsample:L | marginalized",
    )
    p_eval.add_argument("--validation", choices=("internal", "external"), default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="re-evaluate under degraded prevalence estimates")
    add_common(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    p_rep = sub.add_parser("report", help="print stored report summaries")
    add_common(p_rep)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CopaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
