"""Cohort manifests: a JSON index plus one NIfTI file per modality, mask and brain mask."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np

from .cohort import (CODEL_VALUES, EVENT_VALUES, GRADE_VALUES, IDH_VALUES, SEX_VALUES, TASK_MODALITIES,
                     CaseRecord, Volume)
from .errors import ConfigError, DataError

SCHEMA_VERSION = 1
_TOKENS = {"idh": IDH_VALUES, "codel": CODEL_VALUES, "grade": GRADE_VALUES, "sex": SEX_VALUES}


def _save(data: np.ndarray, spacing, path: Path) -> None:
    img = nib.Nifti1Image(data, np.diag([*spacing, 1.0]))
    img.header.set_zooms(tuple(spacing))
    nib.save(img, str(path))


def write_manifest(cases: Sequence[CaseRecord], path, volume_dir: str = "volumes") -> Path:
    """Write volumes under ``<manifest dir>/<volume_dir>`` and the JSON manifest at ``path``."""
    path = Path(path)
    root = path.parent
    (root / volume_dir).mkdir(parents=True, exist_ok=True)
    records = []
    for c in cases:
        files = {}
        spacing = (1.0, 1.0, 1.0)
        for name, vol in c.modalities.items():
            rel = f"{volume_dir}/{c.case_id}_{name}.nii.gz"
            _save(vol.data.astype(np.float32), vol.spacing, root / rel)
            files[name] = rel
            spacing = tuple(float(s) for s in vol.spacing)
        for name, arr in (("mask", c.mask.astype(np.uint8)), ("brain", c.brain.astype(np.uint8))):
            rel = f"{volume_dir}/{c.case_id}_{name}.nii.gz"
            _save(arr, spacing, root / rel)
            files[name] = rel
        rec = c.metadata()
        rec["volumes"] = files
        records.append(rec)
    doc = {"schema_version": SCHEMA_VERSION, "cases": records}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _validate_record(rec: dict, where: str) -> None:
    for key, allowed in _TOKENS.items():
        if rec.get(key) not in allowed:
            raise DataError(f"{where}: invalid {key} label {rec.get(key)!r}; expected one of {allowed}")
    if rec.get("event") is not None and rec["event"] not in EVENT_VALUES:
        raise DataError(f"{where}: invalid event {rec['event']!r}")
    if rec.get("task") not in TASK_MODALITIES:
        raise DataError(f"{where}: invalid task {rec.get('task')!r}")
    if not isinstance(rec.get("age_years"), (int, float)) or rec["age_years"] < 0:
        raise DataError(f"{where}: age_years must be a nonnegative number")


def read_manifest_records(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    records = doc.get("cases", [])
    for i, rec in enumerate(records):
        _validate_record(rec, f"{path}: cases[{i}] ({rec.get('case_id')})")
    return records


def read_manifest(path, load_volumes: bool = True) -> list[CaseRecord]:
    """Load cases; a missing volume file raises DataError naming every absent path."""
    path = Path(path)
    records = read_manifest_records(path)
    root = path.parent
    missing = [str(root / rel) for rec in records for rel in rec["volumes"].values()
               if not (root / rel).exists()]
    if missing:
        raise DataError("missing volume file(s): " + ", ".join(missing))
    cases = []
    for rec in records:
        vols = {}
        mask = brain = None
        for name, rel in rec["volumes"].items():
            img = nib.load(str(root / rel))
            arr = np.asarray(img.dataobj)
            if name == "mask":
                mask = arr.astype(np.uint8)
            elif name == "brain":
                brain = arr.astype(bool)
            else:
                vols[name] = Volume(arr.astype(np.float32), tuple(float(z) for z in img.header.get_zooms()[:3]))
        meta = {k: rec[k] for k in ("case_id", "task", "age_years", "sex", "grade", "idh", "codel",
                                    "os_months", "event")}
        cases.append(CaseRecord(modalities=vols, mask=mask, brain=brain, **meta))
    return cases
