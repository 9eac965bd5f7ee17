"""Field-level train/val/test splits and the sample manifest."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    field_id: str
    split: str
    augmentation: str


def assign_fields(field_ids, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, str]:
    """Map each distinct field id to a split.

    Whole fields are assigned so augmentations of one field never straddle
    two splits.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"split fractions {fractions} must be non-negative and sum to 1")
    fields = sorted(set(field_ids))
    wanted = sum(1 for f in fractions if f > 0)
    if len(fields) < wanted:
        raise ValueError(f"{len(fields)} fields cannot fill {wanted} non-empty splits")
    order = np.random.default_rng(seed).permutation(len(fields))
    n = len(fields)
    n_val = max(1, round(fractions[1] * n)) if fractions[1] > 0 else 0
    n_test = max(1, round(fractions[2] * n)) if fractions[2] > 0 else 0
    n_train = n - n_val - n_test
    if fractions[0] > 0 and n_train < 1:
        n_train, n_val = 1, n_val - 1 if n_val > 1 else n_val
        n_test = n - n_train - n_val
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    return {fields[i]: labels[k] for k, i in enumerate(order)}


def build_splits(samples, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Split ``samples`` (objects with ``field_id``) into (train, val, test) lists."""
    mapping = assign_fields([s.field_id for s in samples], fractions, seed)
    out = {k: [] for k in SPLITS}
    for s in samples:
        out[mapping[s.field_id]].append(s)
    return out["train"], out["val"], out["test"]


def write_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "field_id", "split", "augmentation"])
        for r in rows:
            w.writerow([r.sample_id, r.field_id, r.split, r.augmentation])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["sample_id", "field_id", "split", "augmentation"]:
            raise ValueError(f"{path}: unexpected manifest header {reader.fieldnames}")
        return [ManifestRow(r["sample_id"], r["field_id"], r["split"], r["augmentation"]) for r in reader]


def manifest_path(root) -> Path:
    return Path(root) / "manifest.csv"
