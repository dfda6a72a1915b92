"""NV crystallographic frame, linear Zeeman conversions and field inversion.

All fields are in tesla and all frequencies in hertz. The diamond lattice
frame is (i, j, k); the four NV quantization axes a, b, c, d point along the
<111> directions listed in :func:`nv_axes`.
"""

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class PhysicalConstants:
    zero_field_splitting_D: float = 2.870e9
    # Shift of each resonance per tesla of axis projection; the pair splitting is twice this.
    gyromagnetic_slope: float = 28.024e9
    vacuum_permeability: float = 4e-7 * np.pi
    lorentzian_prefactor_P: float = 4.0 / (3.0 * np.sqrt(3.0))

    @property
    def planck_over_ge_muB(self):
        """h / (g_e mu_B) in T/Hz."""
        return 1.0 / self.gyromagnetic_slope


CONSTANTS = PhysicalConstants()
D = CONSTANTS.zero_field_splitting_D
GAMMA_E = CONSTANTS.gyromagnetic_slope
MU0 = CONSTANTS.vacuum_permeability

LINEAR_ZEEMAN_LIMIT_T = 10e-3

_AXES = np.array(
    [
        [1.0, 1.0, 1.0],
        [-1.0, -1.0, 1.0],
        [-1.0, 1.0, -1.0],
        [1.0, -1.0, -1.0],
    ]
) / np.sqrt(3.0)
_AXES.setflags(write=False)
_PINV = np.linalg.pinv(_AXES)
_PINV.setflags(write=False)

AXIS_NAMES = ("a", "b", "c", "d")


@dataclass(frozen=True)
class NvAxes:
    u_a: np.ndarray
    u_b: np.ndarray
    u_c: np.ndarray
    u_d: np.ndarray

    def as_matrix(self):
        """4x3 matrix whose rows are u_a..u_d."""
        return np.vstack([self.u_a, self.u_b, self.u_c, self.u_d])


@dataclass(frozen=True)
class AxisProjections:
    m_a: float
    m_b: float
    m_c: float
    m_d: float
    sign_resolved: bool = True

    def as_array(self):
        return np.array([self.m_a, self.m_b, self.m_c, self.m_d])

    @classmethod
    def from_array(cls, m, sign_resolved=True):
        m = np.asarray(m, dtype=float)
        return cls(float(m[0]), float(m[1]), float(m[2]), float(m[3]), sign_resolved)


@dataclass(frozen=True)
class FieldVector:
    B_i: float
    B_j: float
    B_k: float
    magnitude: float

    def as_array(self):
        return np.array([self.B_i, self.B_j, self.B_k])

    @classmethod
    def from_array(cls, b):
        b = np.asarray(b, dtype=float)
        return cls(float(b[0]), float(b[1]), float(b[2]), float(np.linalg.norm(b)))


@dataclass(frozen=True)
class SignAssignment:
    signs: tuple
    residual: float
    # Index shared by s and -s.
    equivalence_class: int
    minimal: bool = False


def nv_axes():
    return NvAxes(*(row.copy() for row in _AXES))


def axes_matrix():
    """Read-only 4x3 array of the NV unit vectors (rows a, b, c, d)."""
    return _AXES


def project_field(B):
    """Signed projections of a lattice-frame field onto the four NV axes."""
    b = B.as_array() if isinstance(B, FieldVector) else np.asarray(B, dtype=float)
    return AxisProjections.from_array(_AXES @ b, sign_resolved=True)


def splitting_from_projection(m):
    """Pair splitting 2*gamma*|m| in Hz. Resonances sit at D +/- splitting/2."""
    m = np.asarray(m, dtype=float)
    if np.any(np.abs(m) > LINEAR_ZEEMAN_LIMIT_T):
        warnings.warn(
            f"axis projection above {LINEAR_ZEEMAN_LIMIT_T * 1e3:g} mT; linear Zeeman model is approximate",
            RuntimeWarning,
            stacklevel=2,
        )
    out = 2.0 * GAMMA_E * np.abs(m)
    return float(out) if out.ndim == 0 else out


def projection_from_splitting(delta_f):
    delta_f = np.asarray(delta_f, dtype=float)
    if np.any(~np.isfinite(delta_f)) or np.any(delta_f < 0):
        raise InvalidInputError(f"splitting must be finite and non-negative, got {delta_f}")
    out = delta_f / (2.0 * GAMMA_E)
    return float(out) if out.ndim == 0 else out


def resolve_signs(abs_m, rtol=1e-12):
    """Rank all 16 sign patterns by closure residual |sum(s_x |m_x|)|.

    The four axes sum to zero, so the true signed projections of any field
    also sum to zero. Returns every assignment sorted by ascending residual;
    patterns s and -s share an ``equivalence_class``, and assignments tied
    with the best residual (relative tolerance ``rtol`` of sum |m|) carry
    ``minimal=True``. Ties keep enumeration order.
    """
    abs_m = np.asarray(abs_m, dtype=float)
    if abs_m.shape != (4,) or np.any(abs_m < 0):
        raise InvalidInputError("resolve_signs needs four non-negative projections")
    out = []
    for signs in itertools.product((1, -1), repeat=4):
        s = np.array(signs)
        # Class id: index of the representative with s_a = +1.
        rep = signs if signs[0] == 1 else tuple(-x for x in signs)
        cls = int("".join("0" if x == 1 else "1" for x in rep[1:]), 2)
        out.append(SignAssignment(signs, float(abs(s @ abs_m)), cls))
    out.sort(key=lambda a: a.residual)
    tol = out[0].residual + rtol * float(abs_m.sum())
    return [SignAssignment(a.signs, a.residual, a.equivalence_class, a.residual <= tol) for a in out]


def minimal_sign_set(assignments):
    return [a for a in assignments if a.minimal]


def reconstruct_field(m, sign_resolved=None):
    """Least-squares inversion of m_x = u_x . B via the axis pseudo-inverse."""
    if isinstance(m, AxisProjections):
        resolved = m.sign_resolved if sign_resolved is None else sign_resolved
        arr = m.as_array()
    else:
        resolved = True if sign_resolved is None else sign_resolved
        arr = np.asarray(m, dtype=float)
    if not resolved:
        raise InvalidInputError("projections must be sign-resolved before inversion")
    return FieldVector.from_array(_PINV @ arr)


def field_magnitude_from_projections(abs_m):
    """|B| = sqrt(3/4 * sum m_x^2); independent of signs and axis labels."""
    abs_m = np.asarray(abs_m, dtype=float)
    if np.any(abs_m < 0):
        raise InvalidInputError("projections must be non-negative magnitudes")
    return float(np.sqrt(0.75 * np.sum(abs_m**2)))
