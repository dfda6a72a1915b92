"""End-to-end stack analysis: detect -> track -> extract -> fit -> reconstruct."""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import field, lorentz, spots
from .errors import NdmagError
from .stack_io import write_table

log = logging.getLogger("ndmag")


@dataclass
class SpotResult:
    spot: spots.DiamondSpot
    spectrum: spots.OdmrSpectrum = None
    fit: lorentz.FitResult = None
    estimate: field.FieldEstimate = None
    contrast: float = math.nan
    fwhm_hz: float = math.nan
    error: str = ""

    @property
    def ok(self):
        return self.estimate is not None


@dataclass
class AnalysisResult:
    spots: list
    results: list
    pixel_pitch: float
    config: dict

    @property
    def succeeded(self):
        return [r for r in self.results if r.ok]


def four_pairs_resolved(fit, min_rel_contrast=0.25, min_separation_gamma=0.5, pairing_tol_hz=5e6,
                        D=lorentz.ZERO_FIELD_SPLITTING):
    """True when the fit shows eight distinct, mirror-paired dips."""
    p = fit.params
    if not fit.converged or p.n_active != 8:
        return False
    c = np.sort(p.centers)
    if np.min(p.contrasts) < min_rel_contrast * np.max(p.contrasts):
        return False
    if np.min(np.diff(c)) < min_separation_gamma * p.gamma:
        return False
    return field.pair_resonances(c, D, pairing_tol_hz).pairing_quality <= pairing_tol_hz


def _analyze_one(stack, spot, cfg):
    res = SpotResult(spot)
    try:
        res.spectrum = spots.extract_spectrum(
            stack, spot, cfg["extract.radius"], cfg["extract.baseline_fraction"], cfg["track.enabled"]
        )
        res.fit = lorentz.fit_spectrum(
            res.spectrum,
            expected_pairs=cfg["fit.expected_pairs"],
            D=cfg["fit.zero_field_splitting_hz"],
            max_iter=cfg["fit.max_iter"],
            lambda0=cfg["fit.lambda0"],
            tol_residual=cfg["fit.tol_residual"],
            tol_step=cfg["fit.tol_step"],
        )
        res.contrast, res.fwhm_hz = lorentz.contrast_and_fwhm(res.fit)
        p = res.fit.params
        pairs = field.pair_resonances(p.centers[p.active], cfg["fit.zero_field_splitting_hz"],
                                      cfg["field.pairing_quality_hz"])
        res.estimate = field.estimate_field(pairs, spot.id, spot.centroid, stack.manifest.pixel_pitch,
                                            cfg["field.closure_tolerance"])
    except NdmagError as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def analyze_stack(stack, cfg=None):
    """Run the full per-spot chain; failures are recorded per spot, never raised."""
    cfg = config_mod.build_config(environ={}) if cfg is None else cfg
    ref = spots.reference_frame(stack, cfg["detect.reference_frame"])
    found = spots.detect_spots(ref, cfg["detect.threshold_sigma"], cfg["detect.min_radius"],
                               cfg["detect.max_area"], cfg["detect.min_area"])
    log.info(json.dumps({"event": "detect", "n_spots": len(found)}))
    if cfg["track.enabled"] and found:
        start = cfg["detect.reference_frame"] if cfg["detect.reference_frame"] >= 0 else cfg["track.reference_index"]
        found = spots.track_spots(stack, found, cfg["track.max_drift_px"], start, cfg["detect.threshold_sigma"],
                                  cfg["detect.max_area"], cfg["detect.min_area"])
    threads = cfg["runtime.threads"]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _analyze_one(stack, s, cfg), found))
    else:
        results = [_analyze_one(stack, s, cfg) for s in found]
    results.sort(key=lambda r: r.spot.id)
    for r in results:
        if r.error:
            log.warning(json.dumps({"event": "spot_failed", "spot_id": r.spot.id, "reason": r.error}))
        elif not four_pairs_resolved(r.fit, pairing_tol_hz=cfg["field.pairing_quality_hz"],
                                     D=cfg["fit.zero_field_splitting_hz"]):
            log.info(json.dumps({"event": "spot_degenerate", "spot_id": r.spot.id, "n_dips": r.fit.params.n_active}))
    return AnalysisResult(found, results, stack.manifest.pixel_pitch, cfg)


def spot_records(result):
    return [
        {"spot_id": s.id, "x_px": s.centroid[0], "y_px": s.centroid[1], "radius_px": s.radius, "area_px": s.area}
        for s in result.spots
    ]


def spectrum_records(result):
    rows = []
    for r in result.results:
        if r.spectrum is None:
            continue
        for f, v in zip(r.spectrum.frequencies, r.spectrum.intensity):
            rows.append({"spot_id": r.spot.id, "frequency_hz": f, "normalized_intensity": v})
    return rows


def fit_records(result):
    rows = []
    for r in result.results:
        if r.fit is None:
            continue
        p = r.fit.params
        row = {"spot_id": r.spot.id, "baseline": p.baseline, "gamma_hz": p.gamma}
        for i in range(8):
            row[f"center_{i + 1}_hz"] = p.centers[i]
            row[f"contrast_{i + 1}"] = p.contrasts[i]
        row["residual_rms"] = r.fit.residual_rms
        row["converged"] = bool(r.fit.converged)
        rows.append(row)
    return rows


def field_records(result):
    rows = []
    for r in result.succeeded:
        e = r.estimate
        m = e.projections.as_array()
        rows.append({
            "spot_id": e.spot_id,
            "x_px": e.position_px[0],
            "y_px": e.position_px[1],
            "m_a_t": m[0], "m_b_t": m[1], "m_c_t": m[2], "m_d_t": m[3],
            "b_i_t": e.field.B_i, "b_j_t": e.field.B_j, "b_k_t": e.field.B_k,
            "b_mag_t": e.field.magnitude,
        })
    return rows


def stats_records(result):
    cfg = result.config
    ok = result.succeeded
    if not ok:
        return []
    pts = np.array([r.estimate.position_um for r in ok])
    d = field.distance_to_line(pts, cfg["geometry.wire_point_um"], cfg["geometry.wire_direction"])
    return [
        {"spot_id": r.spot.id, "contrast": r.contrast, "fwhm_hz": r.fwhm_hz, "distance_to_wire_um": float(dist)}
        for r, dist in zip(ok, d)
    ]


def write_outputs(result, out_dir):
    """spots/spectra/fits/fields/stats CSVs plus the effective config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(spot_records(result), "spots", out / "spots.csv")
    write_table(spectrum_records(result), "spectra", out / "spectra.csv")
    write_table(fit_records(result), "fits", out / "fits.csv")
    write_table(field_records(result), "fields", out / "fields.csv")
    write_table(stats_records(result), "stats", out / "stats.csv")
    (out / "config.json").write_text(config_mod.to_json(result.config), encoding="utf-8", newline="\n")
    run = {"pixel_pitch_um": result.pixel_pitch, "n_detected": len(result.spots), "n_reconstructed": len(result.succeeded)}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")
