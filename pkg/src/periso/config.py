"""Run configuration: one JSON document defines a reproducible run."""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

DEFAULT_TOLERANCES = {
    "tol_residual": 1e-9,
    "term_residual": 1e-7,
    "sweep_exit": 1e-8,
    "delta_short": None,  # None: relative default from the metric scale
    "delta_pos": None,
    "freeness_threshold": 1e-8,
    "isometry_gate": 1e-4,
    "c_inj": None,
}

DEFAULT_CAPS = {
    "k_max": 256,
    "projection_retries": 16,
    "staging_cap": 4096,
    "sweeps": 4,
    "global_displacement": float("inf"),
}

DEFAULT_SEEDS = {"projection": 0, "verify": 0}


@dataclass
class RunConfig:
    """Validated pipeline configuration."""

    n: int
    lattice: list
    metric: dict
    resolution: list
    q: int = None
    seeds: dict = field(default_factory=lambda: dict(DEFAULT_SEEDS))
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    caps: dict = field(default_factory=lambda: dict(DEFAULT_CAPS))
    rho_cut: float = 2.0 / 3.0
    charts_per_axis: int = None
    injectivity_samples: int = 10000
    workers: int = 1  # reserved; numerical kernels already use BLAS threads

    def as_dict(self):
        return {
            "n": self.n,
            "lattice": list(self.lattice),
            "metric": dict(self.metric),
            "resolution": list(self.resolution),
            "q": self.q,
            "seeds": dict(self.seeds),
            "tolerances": dict(self.tolerances),
            "caps": {
                k: (v if np.isfinite(v) else None) if isinstance(v, float) else v
                for k, v in self.caps.items()
            },
            "rho_cut": self.rho_cut,
            "charts_per_axis": self.charts_per_axis,
            "injectivity_samples": self.injectivity_samples,
            "workers": self.workers,
        }


def _require(cond, path, message):
    if not cond:
        raise ConfigError(f"{path}: {message}")


def load_config(source):
    """Parse and validate a config mapping or a path to a JSON file."""
    if isinstance(source, (str,)):
        try:
            with open(source) as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {source}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    elif isinstance(source, dict):
        raw = dict(source)
    else:
        raise ConfigError(f"config must be a path or mapping, got {type(source)}")
    return validate_config(raw)


def validate_config(raw):
    _require("n" in raw, "n", "missing")
    n = raw["n"]
    _require(isinstance(n, int) and n >= 1, "n", "must be a positive integer")

    lattice = raw.get("lattice")
    if lattice is None:
        lattice = np.eye(n).reshape(-1).tolist()
    _require(
        isinstance(lattice, list) and len(lattice) == n * n,
        "lattice",
        f"needs {n * n} reals (row-major)",
    )

    metric = raw.get("metric")
    _require(isinstance(metric, dict), "metric", "must be a mapping")
    _require(
        "preset" in metric or "file" in metric,
        "metric",
        "needs a 'preset' name or a 'file' path",
    )

    resolution = raw.get("resolution")
    _require(resolution is not None, "resolution", "missing")
    if isinstance(resolution, int):
        resolution = [resolution] * n
    _require(
        isinstance(resolution, list) and len(resolution) == n,
        "resolution",
        f"needs {n} entries",
    )
    for i, r in enumerate(resolution):
        _require(
            isinstance(r, int) and r >= 4, f"resolution[{i}]", "must be an integer >= 4"
        )

    q = raw.get("q")
    if q is not None:
        _require(isinstance(q, int), "q", "must be an integer")

    tolerances = dict(DEFAULT_TOLERANCES)
    for key, value in raw.get("tolerances", {}).items():
        _require(key in DEFAULT_TOLERANCES, f"tolerances.{key}", "unknown key")
        tolerances[key] = value

    caps = dict(DEFAULT_CAPS)
    for key, value in raw.get("caps", {}).items():
        _require(key in DEFAULT_CAPS, f"caps.{key}", "unknown key")
        caps[key] = value

    seeds = dict(DEFAULT_SEEDS)
    for key, value in raw.get("seeds", {}).items():
        _require(key in DEFAULT_SEEDS, f"seeds.{key}", "unknown key")
        _require(isinstance(value, int), f"seeds.{key}", "must be an integer")
        seeds[key] = value

    rho_cut = raw.get("rho_cut", 2.0 / 3.0)
    _require(
        rho_cut is None or 0.0 < rho_cut <= 1.0, "rho_cut", "must be in (0, 1]"
    )

    charts_per_axis = raw.get("charts_per_axis")
    if charts_per_axis is not None:
        _require(
            isinstance(charts_per_axis, int) and charts_per_axis >= 1,
            "charts_per_axis",
            "must be a positive integer",
        )

    extra = set(raw) - {
        "n",
        "lattice",
        "metric",
        "resolution",
        "q",
        "tolerances",
        "caps",
        "seeds",
        "rho_cut",
        "charts_per_axis",
        "injectivity_samples",
        "workers",
    }
    _require(not extra, sorted(extra)[0] if extra else "", "unknown key")

    return RunConfig(
        n=n,
        lattice=[float(v) for v in lattice],
        metric=metric,
        resolution=list(resolution),
        q=q,
        seeds=seeds,
        tolerances=tolerances,
        caps=caps,
        rho_cut=rho_cut,
        charts_per_axis=charts_per_axis,
        injectivity_samples=int(raw.get("injectivity_samples", 10000)),
        workers=int(raw.get("workers", 1)),
    )
