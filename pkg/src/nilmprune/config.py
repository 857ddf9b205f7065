"""Experiment configuration: JSON schema with rejected unknown keys, plus the
run manifest every artifact-writing command drops next to its outputs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__
from .data import default_synth_config
from .errors import ConfigError

MANIFEST_NAME = "manifest.json"


def default_config() -> dict:
    return {
        "dataset": {
            "source": "synthetic",
            "appliance": "kettle",
            "houses": 3,
            "test_house": 2,
            "seed": 100,
            "synthetic": default_synth_config(),
            "plegma_dir": None,
        },
        "model": {
            "preset": "desk-small",
            "window": 256,
            "stride": 64,
            "dtype": "float64",
        },
        "train": {
            "epochs": 30,
            "batch_size": 8,
            "learning_rate": 1e-3,
            "seed": 0,
            "optimizer": "adam",
            "loss": "mse",
            "patience": None,
            "resume": False,
        },
        "prune": {
            "strategy": "after-training",
            "threshold": 0.5,
            "rounds": 10,
            "scope": "global",
            "alpha": 4.0,
            "sparse_epochs": 0,
            "fine_tune": True,
            "fine_tune_epochs": None,
            "baseline_model": None,
            "grid": "0.05:0.95:0.05",
        },
        "eval": {
            "metrics": ["f1", "mae", "smape", "mre"],
            "model": None,
        },
    }


def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    out = {}
    for key, base in defaults.items():
        if key in user and isinstance(base, dict) and key != "synthetic":
            out[key] = _merge(base, user[key], f"{path}{key}.")
        elif key in user:
            out[key] = user[key]
        else:
            out[key] = base
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {sorted(unknown)} under {path or '<root>'}")
    return out


def resolve_config(user: dict | None) -> dict:
    """Defaults overlaid with the user's file; unknown keys are errors."""
    cfg = _merge(default_config(), user or {})
    if cfg["dataset"]["source"] not in ("synthetic", "plegma"):
        raise ConfigError("dataset.source must be 'synthetic' or 'plegma'")
    return cfg


def load_config(path) -> dict:
    if path is None:
        return resolve_config({})
    try:
        with open(path) as f:
            user = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return resolve_config(user)


def parse_grid(spec: str) -> list[float]:
    """'A:B:STEP' inclusive grid, e.g. '0.05:0.95:0.05'."""
    try:
        a, b, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise ConfigError(f"grid must look like A:B:STEP, got {spec!r}") from None
    if step <= 0 or b < a:
        raise ConfigError(f"bad grid bounds {spec!r}")
    out = []
    k = 0
    while True:
        t = a + k * step
        if t > b + 1e-9:
            break
        out.append(round(t, 10))
        k += 1
    return out


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: dict, seed: int,
                   inputs, outputs, duration_s: float) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "input_digests": {str(p): file_digest(p) for p in inputs},
        "outputs": [str(Path(p)) for p in outputs],
        "duration_s": round(duration_s, 3),
    }
    path = out_dir / MANIFEST_NAME
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


class OutputLock:
    """Exclusive marker so two commands do not write one directory at once."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".nilmprune.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = open(self.path, "x")
        except FileExistsError:
            raise ConfigError(
                f"output directory is locked by another run: {self.path}") from None
        return self

    def __exit__(self, *exc):
        self.fd.close()
        self.path.unlink(missing_ok=True)
