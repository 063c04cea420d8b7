"""Batch experiment runner.

Consumes a JSON manifest of the form

    {"defaults": {...experiment fields...},
     "runs": [{"name": "...", ...overrides...}, ...]}

trains every run in order, and writes a comparison CSV. A run that fails
gets a status cell explaining why; the rest of the suite still executes.
"""
from __future__ import annotations

import csv
import json
import os

from .errors import SpinError, ValidationError
from .train import ExperimentConfig, train

CSV_COLUMNS = ["name", "mapping", "distribution", "share_rate", "fusion",
               "G", "params", "MACs", "top1", "status"]


def _merge(defaults: dict, overrides: dict) -> dict:
    merged = dict(defaults)
    for key, value in overrides.items():
        if key == "arch" and isinstance(value, dict) and "arch" in merged:
            merged["arch"] = {**merged["arch"], **value}
        else:
            merged[key] = value
    return merged


def _row_for(cfg: ExperimentConfig, record=None, error: str | None = None):
    topo = cfg.topology or {}
    rate = ""
    if cfg.topology is not None:
        try:
            from .train import topology_from_spec

            rate = f"{topology_from_spec(cfg.topology, cfg.arch.depth).share_rate:g}"
        except SpinError:
            rate = "?"
    row = {
        "name": cfg.name,
        "mapping": topo.get("mapping", "none"),
        "distribution": topo.get("distribution", "none"),
        "share_rate": rate or "1",
        "fusion": cfg.fusion_strategy or "none",
        "G": cfg.transform_g if cfg.transform_g is not None else "",
        "params": "",
        "MACs": "",
        "top1": "",
        "status": "",
    }
    if record is not None:
        row["params"] = record.params
        row["MACs"] = record.macs
        acc = record.final_eval_acc
        row["top1"] = f"{acc:.4f}" if acc is not None else ""
        row["status"] = record.status
    if error is not None:
        row["status"] = f"error: {error}"
    return row


def run_suite(manifest, out_dir: str) -> str:
    """Run every experiment in the manifest; returns the CSV path."""
    if isinstance(manifest, (str, os.PathLike)):
        with open(manifest) as f:
            manifest = json.load(f)
    if not isinstance(manifest, dict) or "runs" not in manifest:
        raise ValidationError("manifest must be an object with a 'runs' list")
    defaults = manifest.get("defaults", {})
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, overrides in enumerate(manifest["runs"]):
        spec = _merge(defaults, overrides)
        spec.setdefault("name", f"run-{i}")
        spec["out_dir"] = os.path.join(out_dir, spec["name"])
        try:
            cfg = ExperimentConfig.from_dict(spec)
        except (TypeError, KeyError, SpinError) as exc:
            rows.append(_error_row(spec.get("name", f"run-{i}"), exc))
            continue
        try:
            record = train(cfg)
            rows.append(_row_for(cfg, record=record))
        except (SpinError, OSError) as exc:
            rows.append(_row_for(cfg, error=str(exc)))
    csv_path = os.path.join(out_dir, "results.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return csv_path


def _error_row(name, exc):
    row = {col: "" for col in CSV_COLUMNS}
    row["name"] = name
    row["status"] = f"error: {exc}"
    return row
