"""Output files: comma-separated data, YAML reports and run manifests."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import platform
from importlib import metadata
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml


def write_csv(path, header: Sequence[str], columns: Sequence) -> Path:
    """One header line, then rows; floats written with ``repr`` for exact round trips."""
    cols = [np.asarray(c).ravel() for c in columns]
    n = {c.size for c in cols}
    if len(n) > 1:
        raise ValueError("columns differ in length")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array(body, dtype=float).reshape(len(body), len(header))
    return {h: data[:, i] for i, h in enumerate(header)}


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_yaml(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(_plain(data), fh, sort_keys=False)
    return path


def read_yaml(path):
    with open(path) as fh:
        return yaml.safe_load(fh)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict[str, str]:
    out = {"python": platform.python_version()}
    for pkg in ("apictwin", "numpy", "scipy", "scikit-learn", "pyyaml"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def write_manifest(out_dir, command: str, config_hash: str, seed: int, files: Sequence[Path], status: str) -> Path:
    """``manifest.yaml``: the only output that carries a wall-clock timestamp."""
    out_dir = Path(out_dir)
    entries = {str(Path(f).relative_to(out_dir)): sha256_file(f) for f in sorted(map(Path, files))}
    return write_yaml(
        out_dir / "manifest.yaml",
        {
            "command": command,
            "status": status,
            "config_hash": config_hash,
            "seed": seed,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "versions": versions(),
            "files": entries,
        },
    )
