"""Bright-spot detection, frame-to-frame drift tracking and ODMR spectrum extraction."""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import CorruptFrameError, InvalidInputError, NdmagError
from .lorentz import contrast_and_fwhm, fit_spectrum

MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True)
class DiamondSpot:
    id: int
    centroid: tuple
    radius: float
    area: int
    per_frame_centroid: np.ndarray = field(default=None, repr=False)
    touches_border: bool = False
    # Frames where no candidate was found within max_drift_px.
    drift_lost_frames: tuple = ()

    @property
    def tracked(self):
        return self.per_frame_centroid is not None


@dataclass(frozen=True)
class OdmrSpectrum:
    spot_id: int
    frequencies: np.ndarray
    intensity: np.ndarray
    raw_mean: np.ndarray
    clipped: bool = False


def reference_frame(stack, index=None):
    """Per-pixel maximum over the stack, or a single frame when ``index`` is given."""
    if index is None or index < 0:
        return stack.frames.max(axis=0)
    if index >= stack.manifest.n_frames:
        raise InvalidInputError(f"reference frame {index} out of range")
    return stack.frames[index]


def detection_threshold(frame, threshold_sigma):
    med = float(np.median(frame))
    mad = float(np.median(np.abs(frame - med)))
    return med, med + threshold_sigma * MAD_TO_SIGMA * mad


def detect_spots(frame, threshold_sigma=5.0, min_radius=2.0, max_area=100, min_area=3):
    """Connected components above median + threshold_sigma * robust sigma.

    Components larger than ``max_area`` are treated as clusters of crystals
    and dropped; those smaller than ``min_area`` as hot pixels. Centroids are
    weighted by intensity above the frame median. Ids run from 1 in raster
    order of each component's first pixel.
    """
    frame = np.asarray(frame, dtype=float)
    if frame.ndim != 2:
        raise InvalidInputError("detect_spots expects a 2D frame")
    if not np.all(np.isfinite(frame)):
        raise CorruptFrameError("frame contains non-finite pixels")
    med, thr = detection_threshold(frame, threshold_sigma)
    labels, n = ndimage.label(frame > thr)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    com = ndimage.center_of_mass(frame - med, labels, idx)
    slices = ndimage.find_objects(labels)
    h, w = frame.shape
    spots = []
    for lab, area, (cy, cx), sl in zip(idx, areas, com, slices):
        if area > max_area or area < min_area:
            continue
        border = sl[0].start == 0 or sl[1].start == 0 or sl[0].stop == h or sl[1].stop == w
        radius = max(math.ceil(math.sqrt(area / math.pi)), min_radius)
        spots.append(DiamondSpot(len(spots) + 1, (float(cx), float(cy)), float(radius), int(area), None, bool(border)))
    return spots


def candidate_positions(frame, threshold_sigma=5.0, max_area=100, min_area=3):
    spots = detect_spots(frame, threshold_sigma, 1.0, max_area, min_area)
    return np.array([s.centroid for s in spots]).reshape(-1, 2)


def track_spot(position, candidates, max_drift_px=3.0):
    """Nearest candidate by squared Euclidean distance.

    Returns ``(new_position, lost)``; when the nearest candidate is farther
    than ``max_drift_px`` the previous position is kept and ``lost`` is True.
    """
    cand = np.asarray(candidates, dtype=float).reshape(-1, 2)
    if cand.shape[0] == 0:
        return tuple(position), True
    d2 = (cand[:, 0] - position[0]) ** 2 + (cand[:, 1] - position[1]) ** 2
    k = int(np.argmin(d2))
    if d2[k] > max_drift_px**2:
        return tuple(position), True
    return (float(cand[k, 0]), float(cand[k, 1])), False


def track_spots(stack, spots, max_drift_px=3.0, reference_index=0, threshold_sigma=5.0, max_area=100, min_area=3):
    """Follow each spot through every frame, starting from ``reference_index``.

    Candidates are re-detected in every frame. The returned spots have
    ``centroid`` equal to their frame-0 position.
    """
    n_frames = stack.manifest.n_frames
    ref = min(max(reference_index, 0), n_frames - 1)
    tracks = np.zeros((len(spots), n_frames, 2))
    lost = [[] for _ in spots]
    for n, s in enumerate(spots):
        tracks[n, ref] = s.centroid
    if spots:
        order = list(range(ref + 1, n_frames)) + list(range(ref - 1, -1, -1))
        for t in order:
            prev = t - 1 if t > ref else t + 1
            cand = candidate_positions(stack.frames[t], threshold_sigma, max_area, min_area)
            for n in range(len(spots)):
                pos, was_lost = track_spot(tracks[n, prev], cand, max_drift_px)
                tracks[n, t] = pos
                if was_lost:
                    lost[n].append(t)
    out = []
    for n, s in enumerate(spots):
        out.append(
            replace(
                s,
                centroid=(float(tracks[n, 0, 0]), float(tracks[n, 0, 1])),
                per_frame_centroid=tracks[n],
                drift_lost_frames=tuple(sorted(lost[n])),
            )
        )
    return out


def disk_weights(dist, radius):
    """Approximate pixel-area coverage of a disk: 1 inside, linear ramp over the edge pixel.

    A hard in/out mask makes the region mean jump whenever sub-pixel centroid
    jitter moves a boundary pixel across the edge.
    """
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _region_mean(frame, cx, cy, radius):
    h, w = frame.shape
    r = int(math.ceil(radius)) + 1
    x0, x1 = int(math.floor(cx)) - r, int(math.floor(cx)) + r + 2
    y0, y1 = int(math.floor(cy)) - r, int(math.floor(cy)) + r + 2
    yy, xx = np.mgrid[y0:y1, x0:x1]
    wgt = disk_weights(np.hypot(xx - cx, yy - cy), radius)
    in_frame = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
    clipped = bool(np.any((wgt > 0) & ~in_frame))
    wgt = np.where(in_frame, wgt, 0.0)
    total = wgt.sum()
    if total <= 0:
        return math.nan, True
    keep = wgt > 0
    return float(np.dot(frame[yy[keep], xx[keep]], wgt[keep]) / total), clipped


def extract_spectrum(stack, spot, radius=None, baseline_fraction=0.1, use_tracking=True):
    """Mean pixel value in a disk around the spot, per frame, normalized to off-resonance.

    Edge pixels are weighted by their approximate coverage (:func:`disk_weights`).

    The baseline is the mean of the brightest ``baseline_fraction`` of frames.
    Pixels of the disk that fall outside the frame are excluded and the
    spectrum is marked ``clipped``.
    """
    radius = spot.radius if radius is None else float(radius)
    if not radius > 0:
        raise InvalidInputError("radius must be positive")
    if not 0 < baseline_fraction <= 1:
        raise InvalidInputError("baseline_fraction must be in (0, 1]")
    n_frames = stack.manifest.n_frames
    if use_tracking and spot.per_frame_centroid is not None:
        centers = spot.per_frame_centroid
    else:
        centers = np.tile(spot.centroid, (n_frames, 1))
    raw = np.empty(n_frames)
    clipped = False
    for t in range(n_frames):
        raw[t], c = _region_mean(stack.frames[t], centers[t, 0], centers[t, 1], radius)
        clipped |= c
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError(f"spot {spot.id}: region lies outside the frame")
    k = max(1, int(math.ceil(baseline_fraction * n_frames)))
    baseline = float(np.mean(np.sort(raw)[-k:]))
    if not baseline > 0:
        raise InvalidInputError(f"spot {spot.id}: region has no signal")
    return OdmrSpectrum(spot.id, stack.frequencies.copy(), raw / baseline, raw, clipped)


def region_radius_sweep(stack, spot, radii, baseline_fraction=0.1, use_tracking=True, **fit_options):
    """Contrast and FWHM of the fitted spectrum for each disk radius.

    A failed fit yields a row with ``ok=False`` and NaN values.
    """
    radii = [float(r) for r in radii]
    if not radii or any(r <= 0 for r in radii) or any(b <= a for a, b in zip(radii, radii[1:])):
        raise InvalidInputError("radii must be positive and strictly ascending")
    rows = []
    for r in radii:
        try:
            spec = extract_spectrum(stack, spot, r, baseline_fraction, use_tracking)
            contrast, fwhm = contrast_and_fwhm(fit_spectrum(spec, **fit_options))
            rows.append({"radius_px": r, "contrast": contrast, "fwhm_hz": fwhm, "ok": True})
        except NdmagError:
            rows.append({"radius_px": r, "contrast": math.nan, "fwhm_hz": math.nan, "ok": False})
    return rows
