"""Deterministic file formats: TOML configs, CSV tables, checksum manifests.

Every writer here is byte-reproducible: floats are serialized with repr (the
shortest round-tripping form), dict keys are sorted or schema-ordered, and
nothing records clocks, hostnames, or library versions.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

try:                                    # stdlib on 3.11+
    import tomllib as _toml
except ImportError:                     # pragma: no cover - version dependent
    import tomli as _toml

__all__ = [
    "loads_toml",
    "dumps_toml",
    "format_value",
    "write_csv",
    "read_csv",
    "sha256_file",
    "write_manifest",
]


def loads_toml(text: str) -> dict:
    return _toml.loads(text)


def _toml_scalar(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError(f"non-finite value {v!r} has no TOML form")
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)            # valid TOML basic string
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__} to TOML")


def dumps_toml(sections: dict) -> str:
    """Two-level dict -> TOML text; key None holds the top-level scalars."""
    lines = []
    top = sections.get(None, {})
    for k, v in top.items():
        lines.append(f"{k} = {_toml_scalar(v)}")
    for name, body in sections.items():
        if name is None:
            continue
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        for k, v in body.items():
            lines.append(f"{k} = {_toml_scalar(v)}")
    return "\n".join(lines) + "\n"


def format_value(v) -> str:
    """CSV cell text: repr for floats (round-trips), plain str otherwise."""
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):                # np.float64 subclasses float, so
        return repr(float(v))               # cast first: repr must round-trip
    if hasattr(v, "item"):              # numpy scalar
        return format_value(v.item())
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([format_value(v) for v in row])


def read_csv(path):
    """(header, list of row tuples); numeric cells become floats."""
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV") from None
        rows = []
        for raw in r:
            row = []
            for cell in raw:
                try:
                    row.append(float(cell))
                except ValueError:
                    row.append(cell)
            rows.append(tuple(row))
    return header, rows


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, extra=None, name="manifest.json"):
    """Checksum every file under out_dir (except the manifest) into one index."""
    out_dir = Path(out_dir)
    files = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != name:
            files[p.relative_to(out_dir).as_posix()] = sha256_file(p)
    payload = {"files": files}
    payload.update(extra or {})
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    (out_dir / name).write_text(text)
    return payload
