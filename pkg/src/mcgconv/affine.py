"""Scale-rotation-shear transforms of the plane and their group structure.

A transform parameter vector packs ``(alpha, theta, s)``: the base-2 log of
an isotropic scale factor, a rotation angle in radians, and a shear
coefficient.  The 2x2 matrix attached to a parameter vector is::

    M(a) = R(theta) @ A(alpha) @ S(s)

with ``S`` an upper-triangular shear, ``A = 2**alpha * I`` and ``R`` a
rotation.  Group elements pair such a vector with a plane translation; the
product composes the translation of the right factor through the matrix of
the left one and adds parameter vectors component-wise.

Parameter addition is not a matrix homomorphism once rotation and shear
mix (``M(a1 + a2) != M(a1) @ M(a2)`` in general), so identities that rely
on it -- associativity, the left inverse law, action compatibility -- are
exact only on commuting sub-families (rotation-scale, or shear-scale).
The right inverse law ``g * inverse(g) == identity`` holds for every
element because the inverse carries the true matrix inverse in its
translation part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TransformParams:
    """Transform parameter vector (log2-scale, rotation angle, shear)."""

    alpha: float = 0.0
    theta: float = 0.0
    s: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "theta", "s"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"non-finite transform parameter {name}={value!r}")
            object.__setattr__(self, name, value)

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.theta, self.s], dtype=np.float64)

    @staticmethod
    def from_array(vec) -> "TransformParams":
        a = np.asarray(vec, dtype=np.float64)
        if a.shape != (3,):
            raise ValueError(f"expected a 3-vector, got shape {a.shape}")
        return TransformParams(float(a[0]), float(a[1]), float(a[2]))


IDENTITY_PARAMS = TransformParams()


@dataclass(frozen=True)
class GroupElement:
    """A plane translation paired with a transform parameter vector."""

    x: tuple[float, float] = (0.0, 0.0)
    a: TransformParams = IDENTITY_PARAMS

    def __post_init__(self):
        tx, ty = float(self.x[0]), float(self.x[1])
        if not (math.isfinite(tx) and math.isfinite(ty)):
            raise ValueError(f"non-finite translation {self.x!r}")
        object.__setattr__(self, "x", (tx, ty))

    @staticmethod
    def identity() -> "GroupElement":
        return GroupElement()


def shear_matrix(s: float) -> np.ndarray:
    return np.array([[1.0, s], [0.0, 1.0]])


def scale_matrix(alpha: float) -> np.ndarray:
    f = 2.0**alpha
    return np.array([[f, 0.0], [0.0, f]])


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]])


def transform_matrix(a: TransformParams) -> np.ndarray:
    """2x2 matrix R(theta) @ A(alpha) @ S(s); determinant is 2**(2*alpha)."""
    return rotation_matrix(a.theta) @ scale_matrix(a.alpha) @ shear_matrix(a.s)


def group_product(g1: GroupElement, g2: GroupElement) -> GroupElement:
    """(x1, a1) * (x2, a2) = (x1 + M(a1) x2, a1 + a2)."""
    x2 = np.array(g2.x)
    x = np.array(g1.x) + transform_matrix(g1.a) @ x2
    a = TransformParams(
        g1.a.alpha + g2.a.alpha, g1.a.theta + g2.a.theta, g1.a.s + g2.a.s
    )
    return GroupElement((float(x[0]), float(x[1])), a)


def group_inverse(g: GroupElement) -> GroupElement:
    """Inverse element (-M(a)^-1 x, -a).

    ``g * inverse(g)`` is the identity for any element.  ``inverse(g) * g``
    additionally requires ``M(-a) == M(a)^-1``, which holds on commuting
    sub-families only (see module docstring).
    """
    m_inv = np.linalg.inv(transform_matrix(g.a))
    x = -(m_inv @ np.array(g.x))
    a = TransformParams(-g.a.alpha, -g.a.theta, -g.a.s)
    return GroupElement((float(x[0]), float(x[1])), a)


def act_on_point(g: GroupElement, p) -> tuple[float, float]:
    """Apply the transform to a plane point: M(a) p + x."""
    q = transform_matrix(g.a) @ np.asarray(p, dtype=np.float64) + np.array(g.x)
    return (float(q[0]), float(q[1]))


@dataclass(frozen=True)
class SampleRanges:
    """Half-open sampling ranges for the three transform parameters.

    ``alpha`` is drawn uniformly from ``[alpha_lo, alpha_hi)``, the rotation
    angle from ``[-theta_max, theta_max)``, and the shear coefficient as
    ``tan(xi)`` with ``xi`` uniform on ``[-shear_max, shear_max)``; the
    shear bound is an angle and must stay below pi/2.
    """

    alpha_lo: float = 0.0
    alpha_hi: float = 0.0
    theta_max: float = 0.0
    shear_max: float = 0.0

    def __post_init__(self):
        for name in ("alpha_lo", "alpha_hi", "theta_max", "shear_max"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"non-finite range bound {name}={value!r}")
            object.__setattr__(self, name, value)
        if self.alpha_lo > self.alpha_hi:
            raise ValueError(
                f"alpha_lo={self.alpha_lo} exceeds alpha_hi={self.alpha_hi}"
            )
        if self.theta_max < 0.0:
            raise ValueError(f"theta_max={self.theta_max} must be >= 0")
        if not 0.0 <= self.shear_max < math.pi / 2.0:
            raise ValueError(
                f"shear_max={self.shear_max} must lie in [0, pi/2): "
                "tan diverges at pi/2"
            )

    @staticmethod
    def from_scale_factors(
        scale_lo: float, scale_hi: float, theta_max: float, shear_max: float
    ) -> "SampleRanges":
        """Build ranges from plain scale factors (converted to log2)."""
        if scale_lo <= 0.0 or scale_hi <= 0.0:
            raise ValueError("scale factors must be positive")
        return SampleRanges(
            math.log2(scale_lo), math.log2(scale_hi), theta_max, shear_max
        )

    def is_degenerate(self) -> bool:
        return self.alpha_lo == self.alpha_hi == 0.0 and (
            self.theta_max == 0.0 and self.shear_max == 0.0
        )


def _generator(seed: int) -> np.random.Generator:
    # Philox is counter-based and platform-stable; all sampling in the
    # package goes through it so seeds reproduce everywhere.
    return np.random.Generator(np.random.Philox(seed))


def sample_transforms(
    ranges: SampleRanges, n: int, seed: int
) -> list[TransformParams]:
    """Draw ``n`` i.i.d. parameter vectors from the configured ranges.

    Draw order is fixed: one (n, 3) block of raw uniforms, columns mapped
    to (alpha, theta, shear angle) in that order.
    """
    if n < 1:
        raise ValueError(f"need at least one draw, got n={n}")
    arr = sample_transform_array(ranges, n, seed)
    return [TransformParams(float(a), float(t), float(s)) for a, t, s in arr]


def sample_transform_array(ranges: SampleRanges, n: int, seed: int) -> np.ndarray:
    """Vectorized form of :func:`sample_transforms`; returns an (n, 3) array."""
    if n < 1:
        raise ValueError(f"need at least one draw, got n={n}")
    u = _generator(seed).random((n, 3))
    alpha = ranges.alpha_lo + (ranges.alpha_hi - ranges.alpha_lo) * u[:, 0]
    theta = -ranges.theta_max + 2.0 * ranges.theta_max * u[:, 1]
    shear = np.tan(-ranges.shear_max + 2.0 * ranges.shear_max * u[:, 2])
    return np.column_stack([alpha, theta, shear])
