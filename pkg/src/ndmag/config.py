"""Run configuration: a flat dotted namespace with typed defaults.

Precedence is defaults < config file < environment < command-line ``--set``.
"""

import json
import math
import os

from .errors import ConfigError

THREADS_ENV = "NDMAG_THREADS"

# key -> (kind, default). kind is one of float, int, bool, "vec2", "float?".
DEFAULTS = {
    "detect.threshold_sigma": (float, 5.0),
    "detect.min_radius": (float, 2.0),
    "detect.max_area": (int, 100),
    "detect.min_area": (int, 3),
    # -1 uses the per-pixel maximum over the stack.
    "detect.reference_frame": (int, -1),
    "track.enabled": (bool, True),
    "track.max_drift_px": (float, 3.0),
    "track.reference_index": (int, 0),
    # null: use each spot's detected radius.
    "extract.radius": ("float?", None),
    "extract.baseline_fraction": (float, 0.1),
    "fit.expected_pairs": (int, 4),
    "fit.max_iter": (int, 500),
    "fit.lambda0": (float, 1e-3),
    "fit.tol_residual": (float, 1e-10),
    "fit.tol_step": (float, 1e-12),
    "fit.zero_field_splitting_hz": (float, 2.870e9),
    "field.closure_tolerance": (float, 0.05),
    "field.pairing_quality_hz": (float, 5e6),
    "geometry.wire_point_um": ("vec2", (0.0, 0.0)),
    "geometry.wire_direction": ("vec2", (1.0, 0.0)),
    "geometry.antenna_point_um": ("vec2", (0.0, 0.0)),
    "geometry.antenna_direction": ("vec2", (1.0, 0.0)),
    # null: Silverman's rule.
    "report.kde_bandwidth": ("float?", None),
    "report.photon_rate_per_s": (float, 1e12),
    "report.current_ma": ("float?", None),
    "runtime.threads": (int, 1),
}


def _coerce(key, value):
    kind, _ = DEFAULTS[key]
    bad = ConfigError(f"{key}: invalid value {value!r}")
    if kind == "float?":
        if value is None:
            return None
        kind = float
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise bad
    if kind == "vec2":
        if isinstance(value, str):
            value = [v for v in value.split(",")]
        try:
            out = tuple(float(v) for v in value)
        except (TypeError, ValueError):
            raise bad from None
        if len(out) != 2 or not all(math.isfinite(v) for v in out):
            raise bad
        return out
    if isinstance(value, bool):
        raise bad
    try:
        out = kind(value)
    except (TypeError, ValueError):
        raise bad from None
    if kind is int and isinstance(value, float) and out != value:
        raise bad
    if kind is float and not math.isfinite(out):
        raise bad
    return out


def _flatten(doc, prefix=""):
    flat = {}
    for k, v in doc.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, name + "."))
        else:
            flat[name] = v
    return flat


def parse_assignment(text):
    """``key=value`` from the command line; the value is read as JSON when possible."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_config(file_paths=(), overrides=(), environ=None):
    """Effective configuration dict; unknown keys raise :class:`ConfigError`.

    ``file_paths`` is one path or a sequence applied in order.
    """
    environ = os.environ if environ is None else environ
    if isinstance(file_paths, (str, os.PathLike)):
        file_paths = [file_paths]
    layers = []
    for file_path in file_paths or ():
        try:
            with open(file_path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{file_path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
        except OSError as exc:
            raise ConfigError(f"{file_path}: {exc.strerror}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{file_path}: expected a JSON object")
        layers.append(_flatten(doc))
    if environ.get(THREADS_ENV):
        layers.append({"runtime.threads": environ[THREADS_ENV]})
    layers.append(dict(parse_assignment(o) if isinstance(o, str) else o for o in overrides))

    cfg = {k: default for k, (_, default) in DEFAULTS.items()}
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    validate(cfg)
    return cfg


def validate(cfg):
    positive = ["detect.threshold_sigma", "detect.min_radius", "track.max_drift_px", "fit.lambda0",
                "field.pairing_quality_hz", "report.photon_rate_per_s"]
    for key in positive:
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be positive")
    if cfg["runtime.threads"] < 1:
        raise ConfigError("runtime.threads must be at least 1")
    if not 1 <= cfg["fit.expected_pairs"] <= 4:
        raise ConfigError("fit.expected_pairs must be between 1 and 4")
    if not 0 < cfg["extract.baseline_fraction"] <= 1:
        raise ConfigError("extract.baseline_fraction must be in (0, 1]")
    for key in ("extract.radius", "report.kde_bandwidth"):
        if cfg[key] is not None and not cfg[key] > 0:
            raise ConfigError(f"{key} must be positive or null")
    for key in ("geometry.wire_direction", "geometry.antenna_direction"):
        if math.hypot(*cfg[key]) == 0:
            raise ConfigError(f"{key} must be non-zero")


def to_json(cfg):
    """Nested JSON text of a flat config, keys sorted, LF line endings."""
    nested = {}
    for key in sorted(cfg):
        section, name = key.split(".", 1)
        v = cfg[key]
        nested.setdefault(section, {})[name] = list(v) if isinstance(v, tuple) else v
    return json.dumps(nested, indent=2, sort_keys=True) + "\n"
