"""Line-delimited JSON manifests with a versioned header line."""

from __future__ import annotations

import json
from pathlib import Path

FORMAT = "wrnse-manifest"
VERSION = 1


class ManifestError(ValueError):
    pass


def write(path, records, kind="corpus"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": FORMAT, "version": VERSION, "kind": kind}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read(path):
    """Return the records of a manifest; relative paths resolve against its directory.

    A plain list of file paths (one per line, no header) is also accepted and
    read as ``{"clean": path}`` records.
    """
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        return []
    base = path.parent
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        header = None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        if header is None:
            return [{"clean": _resolve(base, ln.strip()), "id": Path(ln.strip()).stem} for ln in lines]
        raise ManifestError(f"{path}: missing '{FORMAT}' header")
    if header.get("version") != VERSION:
        raise ManifestError(f"{path}: manifest version {header.get('version')} unsupported (expected {VERSION})")
    records = []
    for n, ln in enumerate(lines[1:], 2):
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{n}: {exc}") from exc
        for key in ("clean", "noisy", "reference", "test", "corrupted"):
            if isinstance(rec.get(key), str):
                rec[key] = _resolve(base, rec[key])
        records.append(rec)
    return records


def _resolve(base, p):
    q = Path(p)
    return str(q if q.is_absolute() else base / q)
