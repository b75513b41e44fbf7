"""Flat key-value experiment configs (INI sections) and run manifests.

Every CLI command reads one config file and writes its artifacts under a
single output directory together with a manifest recording the config hash,
seed and library versions, so re-running a command with the same config and
seed reproduces its metric files byte for byte.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os

from .exceptions import DataError

__all__ = [
    "load_config",
    "config_file_hash",
    "write_manifest",
    "resolve_path",
    "get_typed",
]


def load_config(path):
    if not os.path.exists(path):
        raise DataError(f"config file {path!r} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read(path)
    return {section: dict(parser[section]) for section in parser.sections()}


def config_file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def resolve_path(config_path, value):
    """Interpret a config path value relative to the config file."""
    if os.path.isabs(value):
        return value
    return os.path.normpath(os.path.join(os.path.dirname(os.path.abspath(
        config_path)), value))


def get_typed(section: dict, key, cast, default=None):
    if key not in section or section[key] == "":
        if default is None:
            raise DataError(f"missing config key {key!r}")
        return default
    raw = section[key]
    if cast is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if cast is list:
        return [item.strip() for item in raw.split(",") if item.strip()]
    return cast(raw)


def write_manifest(outdir, command, config_path, seed, artifacts, extra=None):
    import numpy
    import scipy
    import torch

    from . import __version__

    manifest = {
        "command": command,
        "config_hash": config_file_hash(config_path),
        "seed": int(seed),
        "artifacts": sorted(artifacts),
        "versions": {
            "factorflow": __version__,
            "numpy": numpy.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
        },
    }
    if extra:
        manifest["extra"] = extra
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
