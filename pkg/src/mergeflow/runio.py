"""Deterministic run artifacts: canonical JSON, config hashes, manifests.

Nothing here embeds wall-clock time; rerunning a command with the same
manifest must produce byte-identical outputs.
"""

from __future__ import annotations

import hashlib
import json
import platform
import sys

import numpy as np


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def run_manifest(command: str, config: dict, seeds) -> dict:
    from . import __version__

    return {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": list(seeds),
        "versions": {
            "mergeflow": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2))
        fh.write("\n")


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(canonical_json(rec))
            fh.write("\n")


def read_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def used_python() -> str:
    return sys.executable
