"""Run directories: every artifact directory starts with a manifest."""

from __future__ import annotations

import hashlib
import json
import platform
import subprocess
import time
from pathlib import Path

from . import __version__

RUN_MANIFEST = "run_manifest.json"


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(d: dict) -> str:
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]


def code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(out_dir, command: str, config: dict | None = None, seed: int | None = None,
                       **extra) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config_hash": config_hash(config) if config is not None else None,
        "seed": seed,
        "code_version": code_version(),
        "python": platform.python_version(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "accessed_cases": {},
    }
    doc.update(extra)
    (out / RUN_MANIFEST).write_text(json.dumps(doc, indent=2, default=str) + "\n")
    return doc


def update_run_manifest(out_dir, **fields) -> dict:
    path = Path(out_dir) / RUN_MANIFEST
    doc = json.loads(path.read_text()) if path.exists() else {}
    for k, v in fields.items():
        if k == "accessed_cases" and isinstance(v, dict):
            merged = dict(doc.get(k, {}))
            merged.update(v)
            doc[k] = merged
        else:
            doc[k] = v
    path.write_text(json.dumps(doc, indent=2, default=str) + "\n")
    return doc


def read_run_manifest(out_dir) -> dict:
    return json.loads((Path(out_dir) / RUN_MANIFEST).read_text())
