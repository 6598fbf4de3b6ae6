"""Deterministic serialization: CSV, canonical JSON, run manifests.

Every number is printed with 17 significant digits so round trips are
bit-stable, line endings are LF unconditionally, and JSON keys are
sorted.  Manifests carry enough to re-run a task (scenario echo, input
hash, package versions) plus wall time; outputs are hashed so byte
drift is detectable, and determinism comparisons exclude the manifest
itself since it contains the timing.
"""

from __future__ import annotations

import hashlib
import json
import math
import platform
from importlib import metadata

FLOAT_FORMAT = "%.17g"


def fmt(x) -> str:
    """One cell: 17 significant digits for floats, plain str otherwise."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return FLOAT_FORMAT % x
    if isinstance(x, (int,)):
        return str(x)
    if x is None:
        return ""
    return str(x)


def csv_text(columns, rows) -> str:
    """CSV with LF endings and a trailing newline."""
    lines = [",".join(str(c) for c in columns)]
    for row in rows:
        lines.append(",".join(fmt(cell) for cell in row))
    return "\n".join(lines) + "\n"


def write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _sanitize(obj):
    """JSON-safe copy: numpy scalars to python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        try:
            obj = obj.item()
        except (AttributeError, ValueError):
            pass
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, (str, int, bool)) or obj is None:
        return obj
    if hasattr(obj, "tolist"):
        return _sanitize(obj.tolist())
    return str(obj)


def canonical_json(obj) -> str:
    """Sorted-key, minimal-separator JSON with a trailing newline."""
    return json.dumps(_sanitize(obj), sort_keys=True,
                      separators=(",", ":"), allow_nan=False) + "\n"


def pretty_json(obj) -> str:
    return json.dumps(_sanitize(obj), sort_keys=True, indent=2,
                      allow_nan=False) + "\n"


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _version_of(pkg: str) -> str:
    try:
        return metadata.version(pkg)
    except metadata.PackageNotFoundError:
        return "unknown"


def build_manifest(scenario_dict: dict, outputs: dict[str, str],
                   wall_time_s: float) -> dict:
    """Re-run record: input hash, scenario echo, output hashes, versions.

    The wall time makes the manifest non-deterministic by design;
    determinism contracts compare the listed outputs, not this file.
    """
    return {
        "scenario": _sanitize(scenario_dict),
        "inputs_sha256": sha256_text(canonical_json(scenario_dict)),
        "outputs": {
            name: {"sha256": sha256_text(text), "bytes": len(text.encode("utf-8"))}
            for name, text in sorted(outputs.items())
        },
        "versions": {
            "nbodykam": _version_of("nbodykam"),
            "numpy": _version_of("numpy"),
            "scipy": _version_of("scipy"),
            "python": platform.python_version(),
        },
        "wall_time_s": wall_time_s,
    }
