"""Per-spot vector field estimates from fitted resonance centers, and field maps."""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import nvframe
from .errors import InvalidInputError, RankDeficientError


@dataclass(frozen=True)
class ResonancePairSet:
    # (f_minus, f_plus) per pair, outermost first.
    pairs: tuple
    splittings: np.ndarray
    pairing_quality: float
    flagged: bool = False


@dataclass(frozen=True)
class FieldEstimate:
    spot_id: int
    projections: nvframe.AxisProjections
    field: nvframe.FieldVector
    position_px: tuple
    position_um: tuple
    sign_class: int
    # Number of global-sign classes tied at minimal closure residual.
    n_sign_classes: int
    closure_residual: float
    vector_valid: bool
    pairing_flagged: bool = False


@dataclass(frozen=True)
class GradientFit:
    slope: float
    intercept: float
    confidence_band_95: np.ndarray
    distances_um: np.ndarray
    slope_ci95: float
    ci95_halfwidth_at_mean: float
    n: int


def pair_resonances(centers, D=nvframe.D, quality_threshold=5e6):
    """Nest sorted centers outermost-inward: 1<->8, 2<->7, 3<->6, 4<->5.

    Fewer than eight centers are paired the same way; pairs that cannot be
    formed are reported as degenerate (splitting 0 at D).
    """
    c = np.sort(np.asarray(centers, dtype=float))
    if not np.all(np.isfinite(c)):
        raise InvalidInputError("resonance centers must be finite")
    if c.size > 8:
        raise InvalidInputError("at most eight resonance centers")
    pairs = []
    n = c.size
    for i in range(n // 2):
        pairs.append((float(c[i]), float(c[n - 1 - i])))
    if n % 2:
        mid = float(c[n // 2])
        pairs.append((mid, mid))
    while len(pairs) < 4:
        pairs.append((float(D), float(D)))
    splittings = np.array([hi - lo for lo, hi in pairs])
    formed = pairs[: max(n // 2, 1)] if n else []
    quality = max((abs(0.5 * (lo + hi) - D) for lo, hi in formed), default=0.0)
    return ResonancePairSet(tuple(pairs), splittings, float(quality), bool(quality > quality_threshold))


def _choose_signs(abs_m):
    """Minimal-residual sign pattern with B_k >= 0; ties resolved by class id."""
    ranked = nvframe.resolve_signs(abs_m)
    minimal = nvframe.minimal_sign_set(ranked)
    best = None
    for a in minimal:
        b = nvframe.reconstruct_field(np.array(a.signs) * abs_m)
        key = (b.B_k < 0, a.equivalence_class)
        if best is None or key < best[0]:
            best = (key, a, b)
    n_classes = len({a.equivalence_class for a in minimal})
    return best[1], best[2], n_classes


def estimate_field(pairs, spot_id=0, position_px=(math.nan, math.nan), pixel_pitch=1.0, closure_tolerance=0.05):
    """Vector field of one spot from its four splittings.

    Axis labels follow pair order (outermost pair is axis a). |B| comes from
    the labeling-invariant tight-frame sum; the component vector is the
    least-squares inversion of the chosen sign pattern, rescaled to that
    magnitude.
    """
    splittings = np.asarray(pairs.splittings, dtype=float)
    if splittings.shape != (4,):
        raise InvalidInputError("need four splittings")
    abs_m = nvframe.projection_from_splitting(splittings)
    magnitude = nvframe.field_magnitude_from_projections(abs_m)
    assignment, b_ls, n_classes = _choose_signs(abs_m)
    total = float(abs_m.sum())
    valid = total == 0.0 or assignment.residual <= closure_tolerance * total
    b = b_ls.as_array()
    norm = np.linalg.norm(b)
    if norm > 0:
        b = b * (magnitude / norm)
    signed = np.array(assignment.signs) * abs_m
    return FieldEstimate(
        spot_id=spot_id,
        projections=nvframe.AxisProjections.from_array(signed, sign_resolved=True),
        field=nvframe.FieldVector(float(b[0]), float(b[1]), float(b[2]), magnitude),
        position_px=tuple(float(v) for v in position_px),
        position_um=tuple(float(v) * pixel_pitch for v in position_px),
        sign_class=assignment.equivalence_class,
        n_sign_classes=n_classes,
        closure_residual=assignment.residual,
        vector_valid=bool(valid),
        pairing_flagged=pairs.flagged,
    )


def field_map(estimates, pixel_pitch=None):
    """Scatter-plot records (spot_id, x_um, y_um, b_mag_t) sorted by spot id."""
    if not estimates:
        raise InvalidInputError("field_map needs at least one estimate")
    rows = []
    for e in sorted(estimates, key=lambda e: e.spot_id):
        x, y = e.position_um if pixel_pitch is None else (p * pixel_pitch for p in e.position_px)
        rows.append({"spot_id": e.spot_id, "x_um": x, "y_um": y, "b_mag_t": e.field.magnitude})
    return rows


def distance_to_line(points_um, line_point_um, line_direction):
    """In-plane perpendicular distance of (x, y) points to a line."""
    p = np.asarray(points_um, dtype=float).reshape(-1, 2)
    u = np.asarray(line_direction, dtype=float)[:2]
    u = u / np.linalg.norm(u)
    rel = p - np.asarray(line_point_um, dtype=float)[:2]
    return np.abs(rel[:, 0] * u[1] - rel[:, 1] * u[0])


def linear_fit(x, y):
    """OLS line with 95% confidence band of the mean response."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n < 3:
        raise InvalidInputError("need at least three points for a linear fit with confidence band")
    xm = x.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx <= 1e-12 * max(1.0, float(np.max(np.abs(x)))) ** 2:
        raise RankDeficientError("all abscissae coincide")
    slope = float(np.sum((x - xm) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * xm)
    resid = y - (intercept + slope * x)
    s = math.sqrt(float(resid @ resid) / (n - 2))
    t = float(stats.t.ppf(0.975, n - 2))
    band = t * s * np.sqrt(1.0 / n + (x - xm) ** 2 / sxx)
    return slope, intercept, band, t * s / math.sqrt(sxx), t * s / math.sqrt(n)


def gradient_from_points(positions_um, magnitudes, wire_point_um=(0.0, 0.0), wire_direction=(1.0, 0.0),
                         min_span_um=50.0):
    """Linear fit of |B| against in-plane distance of (x, y) points from the wire axis."""
    pts = np.asarray(positions_um, dtype=float).reshape(-1, 2)
    b = np.asarray(magnitudes, dtype=float)
    if pts.shape[0] < 3 or b.shape != (pts.shape[0],):
        raise InvalidInputError("need at least three positions with one magnitude each")
    d = distance_to_line(pts, wire_point_um, wire_direction)
    if 0 < np.ptp(d) < min_span_um:
        warnings.warn(f"distances span only {np.ptp(d):.1f} um", RuntimeWarning, stacklevel=2)
    slope, intercept, band, slope_ci, mean_ci = linear_fit(d, b)
    return GradientFit(slope, intercept, band, d, slope_ci, mean_ci, int(d.size))


def gradient_vs_distance(estimates, wire_point_um=(0.0, 0.0), wire_direction=(1.0, 0.0), min_span_um=50.0):
    """:func:`gradient_from_points` over field estimates."""
    if len(estimates) < 3:
        raise InvalidInputError("need at least three estimates")
    return gradient_from_points([e.position_um for e in estimates], [e.field.magnitude for e in estimates],
                                wire_point_um, wire_direction, min_span_um)
