"""Image-stack directories and CSV tables.

A stack directory holds ``manifest.json`` plus one raw frame per microwave
frequency: little-endian uint16, row-major, top-left origin, no header.
"""

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFrameError,
    InconsistentStackError,
    InvalidRecordError,
    ManifestNotFoundError,
)

MANIFEST_NAME = "manifest.json"
DEFAULT_PATTERN = "frame_{index:05}.raw"
ALLOWED_BIT_DEPTHS = (8, 12, 16)


@dataclass(frozen=True)
class StackManifest:
    width: int
    height: int
    n_frames: int
    bit_depth: int
    pixel_pitch: float
    frequency_list: tuple
    exposure_note: str = ""
    frame_file_pattern: str = DEFAULT_PATTERN

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise InconsistentStackError(f"frame size must be positive, got {self.width}x{self.height}")
        if self.n_frames != len(self.frequency_list):
            raise InconsistentStackError(
                f"n_frames={self.n_frames} but {len(self.frequency_list)} frequencies listed"
            )
        if self.bit_depth not in ALLOWED_BIT_DEPTHS:
            raise InconsistentStackError(f"bit_depth must be one of {ALLOWED_BIT_DEPTHS}, got {self.bit_depth}")
        f = np.asarray(self.frequency_list, dtype=float)
        if f.size and (not np.all(np.isfinite(f)) or np.any(np.diff(f) <= 0)):
            raise InconsistentStackError("frequencies_hz must be finite and strictly increasing")
        if not self.pixel_pitch > 0:
            raise InconsistentStackError("pixel_pitch_um must be positive")
        try:
            self.frame_file_pattern.format(index=0)
        except (KeyError, IndexError, ValueError) as exc:
            raise InconsistentStackError(f"bad frame_file_pattern {self.frame_file_pattern!r}") from exc

    @property
    def frequencies(self):
        return np.asarray(self.frequency_list, dtype=float)

    def frame_name(self, index):
        return self.frame_file_pattern.format(index=index)

    def to_json(self):
        return {
            "width": self.width,
            "height": self.height,
            "n_frames": self.n_frames,
            "bit_depth": self.bit_depth,
            "pixel_pitch_um": self.pixel_pitch,
            "frequencies_hz": [float(x) for x in self.frequency_list],
            "exposure_note": self.exposure_note,
            "frame_file_pattern": self.frame_file_pattern,
        }

    @classmethod
    def from_json(cls, doc):
        try:
            m = cls(
                width=int(doc["width"]),
                height=int(doc["height"]),
                n_frames=int(doc["n_frames"]),
                bit_depth=int(doc["bit_depth"]),
                pixel_pitch=float(doc["pixel_pitch_um"]),
                frequency_list=tuple(float(x) for x in doc["frequencies_hz"]),
                exposure_note=str(doc.get("exposure_note", "")),
                frame_file_pattern=str(doc.get("frame_file_pattern", DEFAULT_PATTERN)),
            )
        except KeyError as exc:
            raise InconsistentStackError(f"manifest missing key {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise InconsistentStackError(f"manifest has malformed value: {exc}") from exc
        m.validate()
        return m


@dataclass(frozen=True)
class ImageStack:
    manifest: StackManifest
    frames: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = self.manifest
        if self.frames.shape != (m.n_frames, m.height, m.width):
            raise InconsistentStackError(
                f"frames shape {self.frames.shape} != ({m.n_frames}, {m.height}, {m.width})"
            )
        self.frames.setflags(write=False)

    @property
    def frequencies(self):
        return self.manifest.frequencies


def _check_range(frame, bit_depth, index):
    limit = 1 << bit_depth
    if frame.size and int(frame.max()) >= limit:
        raise CorruptFrameError(
            f"frame {index}: pixel value {int(frame.max())} exceeds {bit_depth}-bit range",
            frame_index=index,
        )


def load_stack(directory, max_workers=None):
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    if not mpath.is_file():
        raise ManifestNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InconsistentStackError(f"{mpath}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    m = StackManifest.from_json(doc)

    paths = [directory / m.frame_name(i) for i in range(m.n_frames)]
    present = sum(p.is_file() for p in paths)
    if present != m.n_frames:
        raise InconsistentStackError(f"manifest lists {m.n_frames} frames, {present} found in {directory}")
    nbytes = 2 * m.width * m.height

    def read(i):
        raw = paths[i].read_bytes()
        if len(raw) != nbytes:
            raise CorruptFrameError(f"frame {i}: {len(raw)} bytes, expected {nbytes}", frame_index=i)
        frame = np.frombuffer(raw, dtype="<u2").reshape(m.height, m.width)
        _check_range(frame, m.bit_depth, i)
        return frame

    frames = np.empty((m.n_frames, m.height, m.width), dtype=np.uint16)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for i, frame in enumerate(pool.map(read, range(m.n_frames))):
            frames[i] = frame
    return ImageStack(m, frames)


def save_stack(stack, directory):
    directory = Path(directory)
    m = stack.manifest
    m.validate()
    for i, frame in enumerate(stack.frames):
        _check_range(frame, m.bit_depth, i)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(stack.frames):
            (directory / m.frame_name(i)).write_bytes(np.ascontiguousarray(frame, dtype="<u2").tobytes())
        text = json.dumps(m.to_json(), indent=2) + "\n"
        (directory / MANIFEST_NAME).write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(exc.errno, f"writing stack to {directory}: {exc.strerror}", str(directory)) from exc


def _fits_columns():
    return (
        ["spot_id", "baseline", "gamma_hz"]
        + [f"center_{i}_hz" for i in range(1, 9)]
        + [f"contrast_{i}" for i in range(1, 9)]
        + ["residual_rms", "converged"]
    )


# Column name -> type for every table the package writes.
SCHEMAS = {
    "spots": {"spot_id": int, "x_px": float, "y_px": float, "radius_px": float, "area_px": int},
    "spectra": {"spot_id": int, "frequency_hz": float, "normalized_intensity": float},
    "fits": {c: (int if c == "spot_id" else bool if c == "converged" else float) for c in _fits_columns()},
    "fields": {
        "spot_id": int,
        "x_px": float,
        "y_px": float,
        "m_a_t": float,
        "m_b_t": float,
        "m_c_t": float,
        "m_d_t": float,
        "b_i_t": float,
        "b_j_t": float,
        "b_k_t": float,
        "b_mag_t": float,
    },
    "stats": {"spot_id": int, "contrast": float, "fwhm_hz": float, "distance_to_wire_um": float},
    "gradient": {
        "current_ma": float,
        "slope_t_per_um": float,
        "intercept_t": float,
        "ci95_halfwidth_at_mean": float,
        "slope_ci95_t_per_um": float,
    },
    "kde": {"value": float, "density": float},
    "summary": {
        "variable": str,
        "n": int,
        "mean": float,
        "median": float,
        "std": float,
        "min": float,
        "max": float,
    },
    "sensitivity": {
        "linewidth_hz": float,
        "contrast": float,
        "photon_rate_per_s": float,
        "eta_t_per_sqrt_hz": float,
    },
    "map": {"spot_id": int, "x_um": float, "y_um": float, "b_mag_t": float},
    "scatter": {"spot_id": int, "distance_to_antenna_um": float, "contrast": float, "fwhm_hz": float},
    "radius_sweep": {"radius_px": float, "contrast": float, "fwhm_hz": float, "ok": bool},
}


def format_value(value, kind):
    if kind is float:
        return "%.9g" % float(value)
    if kind is int:
        if isinstance(value, bool) or int(value) != value:
            raise InvalidRecordError(f"expected integer, got {value!r}")
        return str(int(value))
    if kind is bool:
        if not isinstance(value, (bool, np.bool_)):
            raise InvalidRecordError(f"expected bool, got {value!r}")
        return "true" if value else "false"
    return str(value)


def _parse_value(text, kind):
    if kind is bool:
        if text not in ("true", "false"):
            raise InvalidRecordError(f"expected true/false, got {text!r}")
        return text == "true"
    return kind(text)


def render_table(records, schema_id):
    try:
        schema = SCHEMAS[schema_id]
    except KeyError:
        raise InvalidRecordError(f"unknown schema {schema_id!r}") from None
    cols = list(schema)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for n, rec in enumerate(records):
        if set(rec) != set(cols):
            missing = sorted(set(cols) - set(rec))
            extra = sorted(set(rec) - set(cols))
            raise InvalidRecordError(f"{schema_id} record {n}: missing {missing}, unexpected {extra}")
        try:
            writer.writerow([format_value(rec[c], schema[c]) for c in cols])
        except (TypeError, ValueError) as exc:
            raise InvalidRecordError(f"{schema_id} record {n}: {exc}") from exc
    return buf.getvalue()


def write_table(records, schema_id, path):
    """Write records (mappings keyed by column name) as a deterministic CSV."""
    text = render_table(records, schema_id)
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def read_table(path, schema_id):
    schema = SCHEMAS[schema_id]
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(schema):
            raise InvalidRecordError(f"{os.fspath(path)}: header {header} does not match schema {schema_id!r}")
        return [{c: _parse_value(v, schema[c]) for c, v in zip(header, row)} for row in reader]
