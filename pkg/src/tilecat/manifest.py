"""Run manifests: the reproducibility record each command writes.

A manifest holds the fully resolved config, the seed, version stamps, paths of
every artifact the command produced (relative to the manifest's directory), and
summary metrics. Reruns need nothing but the manifest and the referenced
inputs.
"""

from __future__ import annotations

import json
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import ConfigError

__all__ = ["RunManifest", "load_manifest", "MANIFEST_NAME"]

MANIFEST_NAME = "manifest.json"


def _versions() -> dict[str, str]:
    return {
        "tilecat": __version__,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    created: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat()
    )
    artifacts: dict[str, str] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    versions: dict[str, str] = field(default_factory=_versions)

    def register(self, name: str, path, base_dir) -> None:
        """Record an artifact by the path it will have relative to base_dir."""
        rel = Path(path).resolve().relative_to(Path(base_dir).resolve())
        self.artifacts[name] = str(rel)

    def artifact_path(self, name: str, base_dir) -> Path:
        if name not in self.artifacts:
            raise ConfigError(f"manifest has no artifact named {name!r}")
        return Path(base_dir) / self.artifacts[name]

    def save(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        payload = {
            "command": self.command,
            "created": self.created,
            "seed": self.seed,
            "config": self.config,
            "artifacts": self.artifacts,
            "metrics": self.metrics,
            "versions": self.versions,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path


def load_manifest(path) -> RunManifest:
    """Read a manifest from a manifest.json file or a directory holding one."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.is_file():
        raise ConfigError(f"no manifest found at {p}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"manifest {p} is not valid JSON: {e}") from e
    missing = {"command", "seed", "config"} - set(payload)
    if missing:
        raise ConfigError(f"manifest {p} is missing fields {sorted(missing)}")
    return RunManifest(
        command=payload["command"],
        seed=payload["seed"],
        config=payload["config"],
        created=payload.get("created", ""),
        artifacts=dict(payload.get("artifacts", {})),
        metrics=dict(payload.get("metrics", {})),
        versions=dict(payload.get("versions", {})),
    )
