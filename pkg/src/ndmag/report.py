"""Ensemble statistics, cw sensitivity and plot-ready CSV tables."""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import field
from .errors import DegenerateDataError, InvalidInputError, NdmagError
from .nvframe import CONSTANTS
from .stack_io import read_table, write_table

log = logging.getLogger("ndmag")

# Prefactor of the cw shot-noise sensitivity for a Lorentzian line.
LORENTZIAN_PREFACTOR = 4.0 / (3.0 * math.sqrt(3.0))
KDE_GRID_POINTS = 256


@dataclass(frozen=True)
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float


@dataclass(frozen=True)
class SensitivityEstimate:
    eta: float
    linewidth: float
    contrast: float
    photon_rate: float


def silverman_bandwidth(data):
    x = np.asarray(data, dtype=float)
    return 1.06 * float(np.std(x, ddof=1)) * x.size ** (-0.2)


def kde(data, bandwidth=None):
    """Gaussian kernel density on 256 points spanning the data +/- 3 bandwidths."""
    x = np.asarray(data, dtype=float).ravel()
    if x.size < 2:
        raise InvalidInputError("kde needs at least two data points")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("kde data must be finite")
    if np.std(x) == 0:
        raise DegenerateDataError("all data points are equal; bandwidth would be zero")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise InvalidInputError("bandwidth must be positive")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, KDE_GRID_POINTS)
    z = (grid[:, None] - x[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * math.sqrt(2 * math.pi))
    return KdeCurve(grid, density, h)


def sensitivity(linewidth, contrast, photon_rate):
    """Shot-noise limited cw sensitivity in T/sqrt(Hz)."""
    for name, v in (("linewidth", linewidth), ("contrast", contrast), ("photon_rate", photon_rate)):
        if not (math.isfinite(v) and v > 0):
            raise InvalidInputError(f"{name} must be positive, got {v!r}")
    eta = LORENTZIAN_PREFACTOR * CONSTANTS.planck_over_ge_muB * linewidth / (contrast * math.sqrt(photon_rate))
    return SensitivityEstimate(eta, linewidth, contrast, photon_rate)


def required_photon_rate(linewidth, contrast, eta):
    """Photon rate at which :func:`sensitivity` would return ``eta``."""
    return (LORENTZIAN_PREFACTOR * CONSTANTS.planck_over_ge_muB * linewidth / (contrast * eta)) ** 2


def describe(values):
    v = np.asarray(values, dtype=float)
    return {
        "n": int(v.size),
        "mean": float(np.mean(v)),
        "median": float(np.median(v)),
        "std": float(np.std(v, ddof=1)) if v.size > 1 else 0.0,
        "min": float(np.min(v)),
        "max": float(np.max(v)),
    }


@dataclass
class EnsembleSummary:
    rows: list
    kde_contrast: KdeCurve = None
    kde_fwhm: KdeCurve = None
    scatter: list = None


def ensemble_summary(stats, antenna_point_um=None, antenna_direction=(1.0, 0.0), positions_um=None, bandwidth=None):
    """Per-variable descriptive statistics, KDE curves and distance scatter data.

    ``stats`` are records with ``spot_id``, ``contrast`` and ``fwhm_hz``.
    Records are sorted by spot id first, so the output does not depend on
    input order. KDEs are skipped for a single record or constant data.
    """
    stats = sorted(stats, key=lambda r: r["spot_id"])
    if not stats:
        raise InvalidInputError("ensemble_summary needs at least one record")
    rows = []
    curves = {}
    for var in ("contrast", "fwhm_hz"):
        vals = [r[var] for r in stats]
        rows.append({"variable": var, **describe(vals)})
        if len(vals) > 1:
            try:
                curves[var] = kde(vals, bandwidth.get(var) if isinstance(bandwidth, dict) else bandwidth)
            except DegenerateDataError:
                log.warning(json.dumps({"event": "kde_skipped", "variable": var, "reason": "constant data"}))
    scatter = None
    if positions_um is not None and antenna_point_um is not None:
        pts = np.array([positions_um[r["spot_id"]] for r in stats])
        d = field.distance_to_line(pts, antenna_point_um, antenna_direction)
        scatter = [
            {"spot_id": r["spot_id"], "distance_to_antenna_um": float(dist), "contrast": r["contrast"], "fwhm_hz": r["fwhm_hz"]}
            for r, dist in zip(stats, d)
        ]
    return EnsembleSummary(rows, curves.get("contrast"), curves.get("fwhm_hz"), scatter)


def _kde_rows(curve):
    return [{"value": float(g), "density": float(d)} for g, d in zip(curve.grid, curve.density)]


def write_report(in_dir, out_dir, cfg):
    """Summary, KDE, gradient, sensitivity, map and scatter tables from analyze outputs.

    Returns the list of files written.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    fields_rows = read_table(in_dir / "fields.csv", "fields")
    stats_rows = read_table(in_dir / "stats.csv", "stats")
    run = json.loads((in_dir / "run.json").read_text(encoding="utf-8"))
    pitch = float(run["pixel_pitch_um"])
    if not stats_rows:
        raise InvalidInputError(f"{in_dir / 'stats.csv'} has no records")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(records, schema, name):
        write_table(records, schema, out_dir / name)
        written.append(name)

    positions = {r["spot_id"]: (r["x_px"] * pitch, r["y_px"] * pitch) for r in fields_rows}
    stats_rows = [r for r in stats_rows if r["spot_id"] in positions]
    summary = ensemble_summary(stats_rows, cfg["geometry.antenna_point_um"], cfg["geometry.antenna_direction"],
                               positions, cfg["report.kde_bandwidth"])
    rows = list(summary.rows)
    rows.append({"variable": "b_mag_t", **describe([r["b_mag_t"] for r in fields_rows])})
    emit(rows, "summary", "summary.csv")
    if len(stats_rows) == 1:
        log.warning(json.dumps({"event": "report_reduced", "reason": "single spot; summary only"}))
        return written

    if summary.kde_contrast is not None:
        emit(_kde_rows(summary.kde_contrast), "kde", "kde_contrast.csv")
    if summary.kde_fwhm is not None:
        emit(_kde_rows(summary.kde_fwhm), "kde", "kde_fwhm.csv")

    mean_fwhm = rows[1]["mean"]
    mean_contrast = rows[0]["mean"]
    try:
        s = sensitivity(mean_fwhm, mean_contrast, cfg["report.photon_rate_per_s"])
        emit([{"linewidth_hz": s.linewidth, "contrast": s.contrast, "photon_rate_per_s": s.photon_rate,
               "eta_t_per_sqrt_hz": s.eta}], "sensitivity", "sensitivity.csv")
    except InvalidInputError as exc:
        log.warning(json.dumps({"event": "sensitivity_skipped", "reason": str(exc)}))

    map_rows = [{"spot_id": r["spot_id"], "x_um": r["x_px"] * pitch, "y_um": r["y_px"] * pitch, "b_mag_t": r["b_mag_t"]}
                for r in sorted(fields_rows, key=lambda r: r["spot_id"])]
    emit(map_rows, "map", "map.csv")
    emit(summary.scatter, "scatter", "scatter.csv")

    if len(fields_rows) >= 3:
        try:
            g = field.gradient_from_points(
                [(r["x_px"] * pitch, r["y_px"] * pitch) for r in fields_rows],
                [r["b_mag_t"] for r in fields_rows],
                cfg["geometry.wire_point_um"], cfg["geometry.wire_direction"],
            )
            current = cfg["report.current_ma"]
            emit([{"current_ma": math.nan if current is None else current, "slope_t_per_um": g.slope,
                   "intercept_t": g.intercept, "ci95_halfwidth_at_mean": g.ci95_halfwidth_at_mean,
                   "slope_ci95_t_per_um": g.slope_ci95}],
                 "gradient", "gradient.csv")
        except NdmagError as exc:
            log.warning(json.dumps({"event": "gradient_skipped", "reason": str(exc)}))
    else:
        log.warning(json.dumps({"event": "gradient_skipped", "reason": "fewer than three spots"}))
    return written

