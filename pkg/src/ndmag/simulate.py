"""Forward model producing synthetic ODMR image stacks with ground truth.

Lab frame: x runs along image columns, y along image rows (both in um with
the origin on pixel (0, 0)), z = x cross y. Spots sit in the z = 0 plane;
the current wire runs parallel to the plane at z = -standoff.
"""

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import nvframe
from .errors import SceneError, SingularityError
from .lorentz import LorentzianModelParams, model_eval
from .spots import disk_weights
from .stack_io import DEFAULT_PATTERN, ImageStack, StackManifest

DEFAULT_PSF_SIGMA_UM = 0.6 / 2.355
POISSON_EXACT_BELOW = 50.0


@dataclass(frozen=True)
class CrystalOrientation:
    # Unit quaternion (w, x, y, z) of the lab -> crystal rotation.
    quaternion: tuple

    def matrix(self):
        w, x, y, z = self.quaternion
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def to_crystal(self, v_lab):
        return self.matrix() @ np.asarray(v_lab, dtype=float)

    @classmethod
    def from_quaternion(cls, q):
        q = np.asarray(q, dtype=float)
        norm = np.linalg.norm(q)
        if q.shape != (4,) or not norm > 0:
            raise SceneError("quaternion must be four numbers with non-zero norm", key="quaternion")
        return cls(tuple(float(v) for v in q / norm))


IDENTITY = CrystalOrientation((1.0, 0.0, 0.0, 0.0))


def sample_orientation(rng):
    """Uniform random rotation: a normalized 4D standard normal is uniform on S^3."""
    q = rng.standard_normal(4)
    return CrystalOrientation(tuple(float(v) for v in q / np.linalg.norm(q)))


def orientation_aligning(v_lab, target_crystal):
    """Rotation taking lab vector ``v_lab`` onto crystal direction ``target_crystal``."""
    a = np.asarray(v_lab, float) / np.linalg.norm(v_lab)
    b = np.asarray(target_crystal, float) / np.linalg.norm(target_crystal)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(a @ b)
    if s < 1e-12:
        if c > 0:
            return IDENTITY
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        perp /= np.linalg.norm(perp)
        return CrystalOrientation((0.0, *perp))
    half = 0.5 * math.atan2(s, c)
    axis = axis / s
    return CrystalOrientation((math.cos(half), *(math.sin(half) * axis)))


@dataclass(frozen=True)
class WireGeometry:
    axis_direction: tuple = (1.0, 0.0, 0.0)
    # In-plane (x, y) of a point on the wire, um; the wire sits at z = -standoff_z.
    axis_point: tuple = (0.0, 0.0)
    current: float = 0.0
    standoff_z: float = 1700.0

    def point(self):
        return np.array([self.axis_point[0], self.axis_point[1], -self.standoff_z], dtype=float)

    def direction(self):
        u = np.asarray(self.axis_direction, dtype=float)
        return u / np.linalg.norm(u)


def wire_field(position, wire):
    """Field of an infinite straight wire, mu0 I / (2 pi r) around the axis (right-hand rule).

    ``position`` is in um, shape (3,) or (N, 3); returns tesla with the same shape.
    """
    pos = np.asarray(position, dtype=float)
    u = wire.direction()
    rel = pos - wire.point()
    perp = rel - (rel @ u)[..., None] * u
    r_um = np.linalg.norm(perp, axis=-1)
    if np.any(r_um < 1.0):
        raise SingularityError("field point within 1 um of the wire axis")
    r_m = r_um * 1e-6
    magnitude = nvframe.MU0 * wire.current / (2 * math.pi * r_m)
    direction = np.cross(u, perp) / r_um[..., None]
    return magnitude[..., None] * direction


@dataclass(frozen=True)
class CameraModel:
    width: int = 256
    height: int = 256
    pixel_pitch: float = 0.24
    bit_depth: int = 12
    psf_sigma: float = DEFAULT_PSF_SIGMA_UM
    background: float = 100.0
    # Exposures summed then averaged per microwave step; scales shot noise by 1/sqrt(n).
    frames_averaged: int = 1

    @property
    def max_count(self):
        return (1 << self.bit_depth) - 1


@dataclass(frozen=True)
class SimSpot:
    x_um: float
    y_um: float
    orientation: CrystalOrientation
    peak_counts: float
    contrast: float
    gamma_hz: float
    size_scale: float = 1.0


@dataclass(frozen=True)
class SimScene:
    spots: tuple
    bias_field: tuple
    camera: CameraModel
    frequencies: tuple
    wire: WireGeometry = WireGeometry()
    drift: tuple = (0.0, 0.0)
    rng_seed: int = 0
    noise: bool = True

    def validate(self):
        cam = self.camera
        if not cam.psf_sigma > 0:
            raise SceneError("must be positive", key="camera.psf_sigma_um")
        if cam.bit_depth not in (8, 12, 16):
            raise SceneError("must be 8, 12 or 16", key="camera.bit_depth")
        if cam.frames_averaged < 1:
            raise SceneError("must be >= 1", key="camera.frames_averaged")
        f = np.asarray(self.frequencies, float)
        if f.size < 1 or np.any(np.diff(f) <= 0):
            raise SceneError("frequencies must be strictly increasing", key="sweep")
        w_um = cam.width * cam.pixel_pitch
        h_um = cam.height * cam.pixel_pitch
        for n, s in enumerate(self.spots):
            if not (0 <= s.x_um < w_um and 0 <= s.y_um < h_um):
                raise SceneError("spot outside the field of view", key=f"spots[{n}]")
            if not (s.gamma_hz > 0 and s.contrast >= 0 and s.peak_counts >= 0 and s.size_scale > 0):
                raise SceneError("gamma, size_scale must be positive; contrast, peak non-negative", key=f"spots[{n}]")


def total_field(position, scene):
    bias = np.asarray(scene.bias_field, dtype=float)
    if scene.wire.current == 0.0:
        return np.broadcast_to(bias, np.shape(position)).copy()
    return bias + wire_field(position, scene.wire)


def spot_centers(orientation, B_lab):
    """Eight resonance frequencies D -/+ gamma_e |m_x|, sorted ascending."""
    m = nvframe.axes_matrix() @ orientation.to_crystal(B_lab)
    half = nvframe.GAMMA_E * np.abs(m)
    return np.sort(np.concatenate([nvframe.D - half, nvframe.D + half]))


def spot_spectrum(orientation, B_lab, contrast, gamma, sweep):
    """Normalized fluorescence of one crystal: eight dips of depth ``contrast`` each."""
    centers = spot_centers(orientation, B_lab)
    p = LorentzianModelParams(1.0, gamma, centers, np.full(8, float(contrast)))
    return model_eval(p, np.asarray(sweep, dtype=float))


def _spot_sigma_px(spot, camera):
    return camera.psf_sigma * spot.size_scale / camera.pixel_pitch


def _gaussian_patch(cx, cy, sigma, width, height):
    r = int(math.ceil(5 * sigma))
    x0, x1 = max(int(math.floor(cx)) - r, 0), min(int(math.floor(cx)) + r + 2, width)
    y0, y1 = max(int(math.floor(cy)) - r, 0), min(int(math.floor(cy)) + r + 2, height)
    if x0 >= x1 or y0 >= y1:
        return None
    gx = np.exp(-0.5 * ((np.arange(x0, x1) - cx) / sigma) ** 2)
    gy = np.exp(-0.5 * ((np.arange(y0, y1) - cy) / sigma) ** 2)
    return (slice(y0, y1), slice(x0, x1)), np.outer(gy, gx)


def disk_mask(cx, cy, radius, width, height):
    """Coverage weight of each pixel by a disk of ``radius`` centred at (cx, cy)."""
    yy, xx = np.ogrid[:height, :width]
    return disk_weights(np.hypot(xx - cx, yy - cy), radius)


def region_signal(spot, camera, radius, center_px=None):
    """Ideal (spot counts, background counts) summed over a disk region, off resonance."""
    cx, cy = (spot.x_um / camera.pixel_pitch, spot.y_um / camera.pixel_pitch) if center_px is None else center_px
    wgt = disk_mask(cx, cy, radius, camera.width, camera.height)
    img = np.zeros((camera.height, camera.width))
    patch = _gaussian_patch(spot.x_um / camera.pixel_pitch, spot.y_um / camera.pixel_pitch,
                            _spot_sigma_px(spot, camera), camera.width, camera.height)
    if patch is not None:
        img[patch[0]] = spot.peak_counts * patch[1]
    return float((img * wgt).sum()), float(camera.background * wgt.sum())


def expected_region_contrast(spot, camera, radius, center_px=None):
    """Per-dip contrast seen in a region once background dilution is included."""
    s, b = region_signal(spot, camera, radius, center_px)
    return spot.contrast * s / (s + b) if s + b > 0 else 0.0


def spectral_snr(spot, camera):
    """Dip depth over per-frame noise of the region-mean spectrum (disk of radius 2 sigma)."""
    s, b = region_signal(spot, camera, max(2.0 * _spot_sigma_px(spot, camera), 1.0))
    if s + b <= 0:
        return 0.0
    return spot.contrast * s * math.sqrt(camera.frames_averaged) / math.sqrt(s + b)


def _frame_rngs(seed, n_frames):
    _, noise = np.random.SeedSequence(seed).spawn(2)
    return [np.random.default_rng(s) for s in noise.spawn(n_frames)]


def layout_rng(seed):
    layout, _ = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(layout)


def _shot_noise(ideal, rng, n_avg):
    mean = ideal * n_avg
    out = np.empty_like(mean)
    low = mean < POISSON_EXACT_BELOW
    out[low] = rng.poisson(mean[low])
    high = ~low
    out[high] = mean[high] + np.sqrt(mean[high]) * rng.standard_normal(int(high.sum()))
    return out / n_avg


def render_stack(scene):
    """Render every frame of the scene; returns (ImageStack, ground-truth dict).

    Each frame gets its own RNG stream spawned from the scene seed, so frames
    can be rendered in any order with identical results.
    """
    scene.validate()
    cam = scene.camera
    freqs = np.asarray(scene.frequencies, dtype=float)
    n_frames = freqs.size
    positions = np.array([[s.x_um, s.y_um, 0.0] for s in scene.spots]).reshape(-1, 3)
    fields = total_field(positions, scene) if len(scene.spots) else np.zeros((0, 3))
    spectra = [
        spot_spectrum(s.orientation, b, s.contrast, s.gamma_hz, freqs) for s, b in zip(scene.spots, fields)
    ]
    rngs = _frame_rngs(scene.rng_seed, n_frames)
    dx, dy = scene.drift
    frames = np.empty((n_frames, cam.height, cam.width), dtype=np.uint16)
    saturated = set()
    static = dx == 0 and dy == 0
    patches = {}
    for t in range(n_frames):
        ideal = np.full((cam.height, cam.width), float(cam.background))
        for n, s in enumerate(scene.spots):
            key = n if static else (n, t)
            if key not in patches:
                cx = s.x_um / cam.pixel_pitch + dx * t
                cy = s.y_um / cam.pixel_pitch + dy * t
                patches[key] = _gaussian_patch(cx, cy, _spot_sigma_px(s, cam), cam.width, cam.height)
            patch = patches[key] if static else patches.pop(key)
            if patch is not None:
                ideal[patch[0]] += s.peak_counts * spectra[n][t] * patch[1]
        if ideal.max() > cam.max_count:
            saturated.add(t)
        img = _shot_noise(ideal, rngs[t], cam.frames_averaged) if scene.noise else ideal
        frames[t] = np.clip(np.rint(img), 0, cam.max_count).astype(np.uint16)
    if saturated:
        warnings.warn(f"{len(saturated)} frames exceed the {cam.bit_depth}-bit range and were clipped",
                      RuntimeWarning, stacklevel=2)

    manifest = StackManifest(
        width=cam.width,
        height=cam.height,
        n_frames=n_frames,
        bit_depth=cam.bit_depth,
        pixel_pitch=cam.pixel_pitch,
        frequency_list=tuple(float(f) for f in freqs),
        exposure_note=f"simulated; seed={scene.rng_seed}; frames_averaged={cam.frames_averaged}",
        frame_file_pattern=DEFAULT_PATTERN,
    )
    return ImageStack(manifest, frames), ground_truth(scene, fields, sorted(saturated))


def ground_truth(scene, fields=None, saturated_frames=()):
    cam = scene.camera
    if fields is None:
        positions = np.array([[s.x_um, s.y_um, 0.0] for s in scene.spots]).reshape(-1, 3)
        fields = total_field(positions, scene)
    spots = []
    for n, (s, b) in enumerate(zip(scene.spots, fields)):
        bc = s.orientation.to_crystal(b)
        m = nvframe.axes_matrix() @ bc
        centers = spot_centers(s.orientation, b)
        spots.append(
            {
                "index": n,
                "x_px": s.x_um / cam.pixel_pitch,
                "y_px": s.y_um / cam.pixel_pitch,
                "x_um": s.x_um,
                "y_um": s.y_um,
                "quaternion": list(s.orientation.quaternion),
                "peak_counts": s.peak_counts,
                "contrast": s.contrast,
                "gamma_hz": s.gamma_hz,
                "size_scale": s.size_scale,
                "sigma_px": _spot_sigma_px(s, cam),
                "b_lab_t": [float(v) for v in b],
                "b_crystal_t": [float(v) for v in bc],
                "b_mag_t": float(np.linalg.norm(b)),
                "projections_t": [float(v) for v in m],
                "splittings_hz": [float(v) for v in nvframe.splitting_from_projection(m)],
                "centers_hz": [float(v) for v in centers],
                "min_center_separation_hz": float(np.min(np.diff(centers))),
                "snr": spectral_snr(s, cam),
            }
        )
    return {
        "seed": scene.rng_seed,
        "bias_field_t": list(scene.bias_field),
        "wire": {
            "axis_direction": list(scene.wire.axis_direction),
            "axis_point_um": list(scene.wire.axis_point),
            "current_a": scene.wire.current,
            "standoff_um": scene.wire.standoff_z,
        },
        "drift_px_per_frame": list(scene.drift),
        "pixel_pitch_um": cam.pixel_pitch,
        "saturated_frames": list(saturated_frames),
        "spots": spots,
    }


def is_resolvable(truth_spot, min_separation_gamma=1.0, sweep=None):
    """Planted spot shows eight dips at least ``min_separation_gamma`` linewidths apart."""
    if truth_spot["min_center_separation_hz"] < min_separation_gamma * truth_spot["gamma_hz"]:
        return False
    if sweep is not None:
        c = truth_spot["centers_hz"]
        g = truth_spot["gamma_hz"]
        if c[0] - sweep[0] < 2 * g or sweep[-1] - c[-1] < 2 * g:
            return False
    return True


# --- scene description (JSON) -------------------------------------------------

_TOP_KEYS = {"seed", "noise", "camera", "sweep", "bias_field_t", "wire", "drift_px_per_frame", "spots", "random_spots"}
_CAMERA_KEYS = {"width", "height", "pixel_pitch_um", "bit_depth", "psf_sigma_um", "background", "frames_averaged"}
_WIRE_KEYS = {"axis_direction", "axis_point_um", "current_a", "standoff_um"}
_SPOT_KEYS = {"x_um", "y_um", "quaternion", "peak_counts", "contrast", "gamma_hz", "size_scale"}
_RANDOM_KEYS = {"n", "min_separation_px", "margin_px", "peak_counts", "contrast", "gamma_hz", "size_scale"}


def _check_keys(doc, allowed, where):
    if not isinstance(doc, dict):
        raise SceneError("expected an object", key=where or "<root>")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise SceneError("unknown key", key=f"{where + '.' if where else ''}{unknown[0]}")


def _num(doc, key, where, default=None, kind=float):
    if key not in doc:
        if default is None:
            raise SceneError("required", key=f"{where}.{key}" if where else key)
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SceneError("expected a number", key=f"{where}.{key}" if where else key)
    if kind is int and int(v) != v:
        raise SceneError("expected an integer", key=f"{where}.{key}" if where else key)
    return kind(v)


def _vec(doc, key, n, where, default=None):
    name = f"{where}.{key}" if where else key
    if key not in doc:
        if default is None:
            raise SceneError("required", key=name)
        return tuple(default)
    v = doc[key]
    if not isinstance(v, list) or len(v) != n or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise SceneError(f"expected a list of {n} numbers", key=name)
    return tuple(float(x) for x in v)


def _range(doc, key, where, default):
    lo, hi = _vec(doc, key, 2, where, default)
    if hi < lo:
        raise SceneError("range must be [low, high]", key=f"{where}.{key}")
    return lo, hi


def _random_spots(opts, camera, rng):
    _check_keys(opts, _RANDOM_KEYS, "random_spots")
    n = _num(opts, "n", "random_spots", kind=int)
    min_sep = _num(opts, "min_separation_px", "random_spots", 12.0)
    margin = _num(opts, "margin_px", "random_spots", 10.0)
    peak = _range(opts, "peak_counts", "random_spots", (1500.0, 2500.0))
    contrast = _range(opts, "contrast", "random_spots", (0.01, 0.08))
    gamma = _range(opts, "gamma_hz", "random_spots", (10e6, 10e6))
    size = _range(opts, "size_scale", "random_spots", (1.0, 1.0))
    if camera.width <= 2 * margin or camera.height <= 2 * margin:
        raise SceneError("margin leaves no room in the frame", key="random_spots.margin_px")
    placed = []
    attempts = 0
    while len(placed) < n:
        attempts += 1
        if attempts > 1000 * max(n, 1):
            raise SceneError(f"could not place {n} spots at this separation", key="random_spots.min_separation_px")
        x = rng.uniform(margin, camera.width - margin)
        y = rng.uniform(margin, camera.height - margin)
        if all((x - px) ** 2 + (y - py) ** 2 >= min_sep**2 for px, py in placed):
            placed.append((x, y))
    spots = []
    for x, y in placed:
        spots.append(
            SimSpot(
                x_um=x * camera.pixel_pitch,
                y_um=y * camera.pixel_pitch,
                orientation=sample_orientation(rng),
                peak_counts=float(rng.uniform(*peak)),
                contrast=float(rng.uniform(*contrast)),
                gamma_hz=float(rng.uniform(*gamma)),
                size_scale=float(rng.uniform(*size)),
            )
        )
    return spots


def scene_from_dict(doc):
    """Build a scene from its JSON description; errors name the offending key."""
    _check_keys(doc, _TOP_KEYS, "")
    seed = _num(doc, "seed", "", 0, kind=int)
    noise = doc.get("noise", True)
    if not isinstance(noise, bool):
        raise SceneError("expected true/false", key="noise")

    cam_doc = doc.get("camera", {})
    _check_keys(cam_doc, _CAMERA_KEYS, "camera")
    camera = CameraModel(
        width=_num(cam_doc, "width", "camera", 256, int),
        height=_num(cam_doc, "height", "camera", 256, int),
        pixel_pitch=_num(cam_doc, "pixel_pitch_um", "camera", 0.24),
        bit_depth=_num(cam_doc, "bit_depth", "camera", 12, int),
        psf_sigma=_num(cam_doc, "psf_sigma_um", "camera", DEFAULT_PSF_SIGMA_UM),
        background=_num(cam_doc, "background", "camera", 100.0),
        frames_averaged=_num(cam_doc, "frames_averaged", "camera", 1, int),
    )
    if camera.width < 1 or camera.height < 1:
        raise SceneError("frame size must be positive", key="camera.width")
    if not camera.pixel_pitch > 0:
        raise SceneError("must be positive", key="camera.pixel_pitch_um")

    sweep = doc.get("sweep")
    if sweep is None:
        raise SceneError("required", key="sweep")
    if not isinstance(sweep, dict):
        raise SceneError("expected an object", key="sweep")
    if "frequencies_hz" in sweep:
        _check_keys(sweep, {"frequencies_hz"}, "sweep")
        freqs = sweep["frequencies_hz"]
        if not isinstance(freqs, list) or not all(isinstance(f, (int, float)) for f in freqs):
            raise SceneError("expected a list of numbers", key="sweep.frequencies_hz")
        freqs = tuple(float(f) for f in freqs)
    else:
        _check_keys(sweep, {"start_hz", "stop_hz", "n_frames"}, "sweep")
        start = _num(sweep, "start_hz", "sweep")
        stop = _num(sweep, "stop_hz", "sweep")
        n = _num(sweep, "n_frames", "sweep", kind=int)
        if n < 2 or stop <= start:
            raise SceneError("need n_frames >= 2 and stop_hz > start_hz", key="sweep")
        freqs = tuple(float(f) for f in np.linspace(start, stop, n))

    bias = _vec(doc, "bias_field_t", 3, "", (0.0, 0.0, 0.0))

    wire_doc = doc.get("wire", {})
    _check_keys(wire_doc, _WIRE_KEYS, "wire")
    direction = _vec(wire_doc, "axis_direction", 3, "wire", (1.0, 0.0, 0.0))
    if np.linalg.norm(direction) == 0:
        raise SceneError("must be non-zero", key="wire.axis_direction")
    wire = WireGeometry(
        axis_direction=tuple(np.asarray(direction) / np.linalg.norm(direction)),
        axis_point=_vec(wire_doc, "axis_point_um", 2, "wire", (0.0, 0.0)),
        current=_num(wire_doc, "current_a", "wire", 0.0),
        standoff_z=_num(wire_doc, "standoff_um", "wire", 1700.0),
    )
    drift = _vec(doc, "drift_px_per_frame", 2, "", (0.0, 0.0))

    spots = []
    spot_docs = doc.get("spots", [])
    if not isinstance(spot_docs, list):
        raise SceneError("expected a list", key="spots")
    for n, sd in enumerate(spot_docs):
        where = f"spots[{n}]"
        _check_keys(sd, _SPOT_KEYS, where)
        spots.append(
            SimSpot(
                x_um=_num(sd, "x_um", where),
                y_um=_num(sd, "y_um", where),
                orientation=CrystalOrientation.from_quaternion(_vec(sd, "quaternion", 4, where, (1, 0, 0, 0))),
                peak_counts=_num(sd, "peak_counts", where),
                contrast=_num(sd, "contrast", where),
                gamma_hz=_num(sd, "gamma_hz", where),
                size_scale=_num(sd, "size_scale", where, 1.0),
            )
        )
    if "random_spots" in doc:
        spots += _random_spots(doc["random_spots"], camera, layout_rng(seed))

    scene = SimScene(
        spots=tuple(spots),
        bias_field=bias,
        camera=camera,
        frequencies=freqs,
        wire=wire,
        drift=drift,
        rng_seed=seed,
        noise=noise,
    )
    scene.validate()
    return scene


def load_scene(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", key="<json>") from exc
    return scene_from_dict(doc)
