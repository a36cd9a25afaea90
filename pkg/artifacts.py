#!/usr/bin/env python3
"""
Artifact hashing and run manifests.
"""

import hashlib
import json
import logging
from importlib import metadata
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parent
TRACKED_PACKAGES = ("numpy", "pandas", "scipy", "networkx", "torch", "fpdf2", "matplotlib", "openpyxl")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def append_hash_suffix(filename: str, hash_hex: str | None, label: str = "sha256") -> str:
    """Append a short content-hash tag to a filename."""
    if not hash_hex:
        return filename
    path = Path(filename)
    stem = path.stem or filename
    return f"{stem}_{label}_{hash_hex[:12]}{path.suffix}"


def describe_artifact(path: str | Path, category: str, root: str | Path | None = None) -> dict[str, Any]:
    """Name, size and hash of a written artifact, relative to the run directory when given."""
    path = Path(path)
    safe_category = "".join(c for c in str(category) if c.isalnum() or c in ("_", "-")).strip("_") or "artifact"
    try:
        name = str(path.relative_to(root)) if root is not None else path.name
    except ValueError:
        name = path.name
    return {
        "category": safe_category,
        "name": name.replace("\\", "/"),
        "bytes": path.stat().st_size,
        "sha256": sha256_file(path),
    }


def read_version(path: str | Path | None = None) -> str:
    version_file = Path(path) if path else PROJECT_ROOT / "version.json"
    try:
        with open(version_file, "r") as f:
            return str(json.load(f).get("version", "0.0.0"))
    except (OSError, json.JSONDecodeError) as exc:
        logger.warning("Could not read %s: %s", version_file, exc)
        return "0.0.0"


def package_versions(packages=TRACKED_PACKAGES) -> dict[str, str]:
    versions = {}
    for name in packages:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def write_json(path: str | Path, payload: Any) -> Path:
    """Deterministic JSON (sorted keys, fixed indent)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")
    return path


def _jsonable(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_manifest(out_dir: str | Path, command: str, config_digest: str, seeds: dict,
                   artifacts: list[dict], extra: dict | None = None) -> Path:
    """manifest.json for one run; contains no timestamps so reruns compare byte for byte."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config_sha256": config_digest,
        "seeds": seeds,
        "version": read_version(),
        "packages": package_versions(),
        "artifacts": sorted(artifacts, key=lambda a: a["name"]),
    }
    if extra:
        manifest.update(extra)
    path = write_json(out_dir / "manifest.json", manifest)
    logger.info("Manifest written to %s (%d artifacts)", path, len(artifacts))
    return path
