"""Run manifests: what produced an artifact directory and from which inputs.

Every command that writes artifacts drops exactly one manifest.json beside
them. Two runs are replicas when their manifests agree on everything except
the creation timestamp; replicas must produce identical metric logs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

MANIFEST_FILE = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    dataset_fingerprint: str | None
    code_version: str
    created_at: str

    def identity(self) -> dict:
        """Everything that determines the outputs; timestamps are excluded."""
        d = dataclasses.asdict(self)
        d.pop("created_at")
        return d


def new_manifest(command: str, config: dict, seed: int, fingerprint: str | None) -> RunManifest:
    return RunManifest(
        command=command,
        config=config,
        seed=seed,
        dataset_fingerprint=fingerprint,
        code_version=__version__,
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def dataset_fingerprint(root) -> str:
    """sha256 over every file under root: relative path plus content, sorted.

    Renaming, adding, removing, or editing any file changes the digest.
    Run manifests are skipped: they carry a timestamp, and a dataset's
    identity must not depend on when it was generated.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if path.name == MANIFEST_FILE:
            continue
        rel = path.relative_to(root).as_posix()
        digest.update(rel.encode())
        digest.update(b"\0")
        digest.update(path.read_bytes())
        digest.update(b"\0")
    return digest.hexdigest()


def write_manifest(out_dir, manifest: RunManifest) -> Path:
    path = Path(out_dir) / MANIFEST_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dataclasses.asdict(manifest), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(out_dir) -> RunManifest:
    path = Path(out_dir) / MANIFEST_FILE
    data = json.loads(path.read_text())
    return RunManifest(**data)
