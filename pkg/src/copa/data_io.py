"""Dataset files: per-site sample CSVs, prevalence-pair CSV, and a manifest.

The sample schema is ``site_id, y, z_0..z_{m-1}, x_0..x_{d-1}``; the pair
schema drops the x columns.  A JSON manifest declares each z column as
categorical or continuous and records row counts and the config hash.
Floats are written with 17 significant digits so a round-trip reproduces the
in-memory arrays bit-exactly.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, MissingArtifactError
from .scm import SiteDataset

MANIFEST_NAME = "dataset.json"
PAIRS_NAME = "prevalence_pairs.csv"


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _site_filename(site_id: str) -> str:
    return f"site_{site_id}.csv"


def write_dataset(
    sites: list[SiteDataset],
    out_dir: str | Path,
    config_hash: str,
    roles: dict[str, str] | None = None,
    extra_meta: dict | None = None,
) -> dict:
    """Write one CSV per site plus the pooled pair CSV and the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not sites:
        raise ConfigurationError("no sites to write")
    z_dim = sites[0].z.shape[1]
    x_dim = sites[0].x.shape[1]
    z_types = sites[0].z_types
    header = (
        ["site_id", "y"]
        + [f"z_{j}" for j in range(z_dim)]
        + [f"x_{j}" for j in range(x_dim)]
    )
    manifest_sites = []
    for site in sites:
        if site.z_types != z_types:
            raise ConfigurationError("all sites must share one z-column typing")
        path = out / _site_filename(site.site_id)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(site.n):
                writer.writerow(
                    [site.site_id, int(site.y[i])]
                    + [_fmt(v) for v in site.z[i]]
                    + [_fmt(v) for v in site.x[i]]
                )
        manifest_sites.append(
            {
                "site_id": site.site_id,
                "role": (roles or {}).get(site.site_id, ""),
                "n_samples": int(site.n),
                "n_prevalence_pairs": int(len(site.prevalence_y)),
                "file": path.name,
            }
        )
    pairs_path = out / PAIRS_NAME
    with pairs_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "y"] + [f"z_{j}" for j in range(z_dim)])
        for site in sites:
            for i in range(len(site.prevalence_y)):
                writer.writerow(
                    [site.site_id, int(site.prevalence_y[i])]
                    + [_fmt(v) for v in site.prevalence_z[i]]
                )
    manifest = {
        "version": 1,
        "config_hash": config_hash,
        "x_dim": x_dim,
        "z_dim": z_dim,
        "z_types": list(z_types),
        "sites": manifest_sites,
        "pairs_file": PAIRS_NAME,
    }
    if extra_meta:
        manifest.update(extra_meta)
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


@dataclass
class LoadedDataset:
    sites: list[SiteDataset]
    roles: dict[str, str]
    manifest: dict


def read_dataset(dataset_dir: str | Path) -> LoadedDataset:
    """Inverse of write_dataset; true generative parameters are not on disk."""
    out = Path(dataset_dir)
    manifest_path = out / MANIFEST_NAME
    if not manifest_path.exists():
        raise MissingArtifactError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    z_dim = manifest["z_dim"]
    x_dim = manifest["x_dim"]
    z_types = tuple(manifest["z_types"])
    pair_y: dict[str, list[int]] = {}
    pair_z: dict[str, list[list[float]]] = {}
    pairs_path = out / manifest["pairs_file"]
    if pairs_path.exists():
        with pairs_path.open(newline="") as fh:
            for row in csv.DictReader(fh):
                sid = row["site_id"]
                pair_y.setdefault(sid, []).append(int(row["y"]))
                pair_z.setdefault(sid, []).append(
                    [float(row[f"z_{j}"]) for j in range(z_dim)]
                )
    sites = []
    roles = {}
    for entry in manifest["sites"]:
        sid = entry["site_id"]
        roles[sid] = entry.get("role", "")
        path = out / entry["file"]
        if not path.exists():
            raise MissingArtifactError(f"site file not found: {path}")
        ys, zs, xs = [], [], []
        with path.open(newline="") as fh:
            for row in csv.DictReader(fh):
                ys.append(int(row["y"]))
                zs.append([float(row[f"z_{j}"]) for j in range(z_dim)])
                xs.append([float(row[f"x_{j}"]) for j in range(x_dim)])
        sites.append(
            SiteDataset(
                site_id=sid,
                x=np.asarray(xs, dtype=float).reshape(len(ys), x_dim),
                y=np.asarray(ys, dtype=np.int64),
                z=np.asarray(zs, dtype=float).reshape(len(ys), z_dim),
                prevalence_y=np.asarray(pair_y.get(sid, []), dtype=np.int64),
                prevalence_z=np.asarray(
                    pair_z.get(sid, np.empty((0, z_dim))), dtype=float
                ).reshape(-1, z_dim),
                z_types=z_types,
            )
        )
    return LoadedDataset(sites=sites, roles=roles, manifest=manifest)


def read_tabular_csv(
    samples_path: str | Path, manifest_path: str | Path
) -> tuple[list[SiteDataset], tuple[str, ...]]:
    """Ingest an external flat CSV (no pair pools; estimation uses half-split)."""
    samples_path = Path(samples_path)
    manifest_path = Path(manifest_path)
    for p in (samples_path, manifest_path):
        if not p.exists():
            raise MissingArtifactError(f"file not found: {p}")
    manifest = json.loads(manifest_path.read_text())
    z_types = tuple(manifest["z_types"])
    for t in z_types:
        if t not in ("categorical", "continuous"):
            raise ConfigurationError(f"unknown z column type {t!r}")
    z_dim = len(z_types)
    by_site: dict[str, dict[str, list]] = {}
    with samples_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "site_id" not in reader.fieldnames:
            raise ConfigurationError("samples CSV must have a site_id column")
        x_cols = [c for c in reader.fieldnames if c.startswith("x_")]
        for row in reader:
            sid = row["site_id"]
            bucket = by_site.setdefault(sid, {"y": [], "z": [], "x": []})
            bucket["y"].append(int(row["y"]))
            bucket["z"].append([float(row[f"z_{j}"]) for j in range(z_dim)])
            bucket["x"].append([float(row[c]) for c in x_cols])
    sites = []
    for sid in sorted(by_site):
        bucket = by_site[sid]
        sites.append(
            SiteDataset(
                site_id=sid,
                x=np.asarray(bucket["x"], dtype=float),
                y=np.asarray(bucket["y"], dtype=np.int64),
                z=np.asarray(bucket["z"], dtype=float),
                prevalence_y=np.empty(0, dtype=np.int64),
                prevalence_z=np.empty((0, z_dim)),
                z_types=z_types,
            )
        )
    return sites, z_types


def standardize_continuous_z(
    sites: list[SiteDataset], train_ids: set[str]
) -> list[SiteDataset]:
    """Zero-mean unit-variance continuous z columns, statistics from the
    training sites only; categorical columns pass through untouched."""
    if not sites:
        return sites
    z_types = sites[0].z_types
    cont = [j for j, t in enumerate(z_types) if t == "continuous"]
    if not cont:
        return sites
    train_z = np.concatenate([s.z for s in sites if s.site_id in train_ids])
    mean = train_z[:, cont].mean(axis=0)
    std = train_z[:, cont].std(axis=0)
    std[std == 0.0] = 1.0
    out = []
    for site in sites:
        z = site.z.copy()
        z[:, cont] = (z[:, cont] - mean) / std
        pz = site.prevalence_z.copy()
        if len(pz):
            pz[:, cont] = (pz[:, cont] - mean) / std
        out.append(
            SiteDataset(
                site_id=site.site_id, x=site.x, y=site.y, z=z,
                prevalence_y=site.prevalence_y, prevalence_z=pz,
                z_types=site.z_types, true_params=site.true_params,
            )
        )
    return out
