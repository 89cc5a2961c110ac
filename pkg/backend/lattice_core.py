# backend/lattice_core.py
"""
Lattice Core

Momentum-lattice geometry on Z^d (d = 1, 2, 3), the Fermi ball, the two
hbar conventions and the Fourier-space interaction potential. Everything
here is immutable once built and is shared by the other backend modules.

Membership |k| <= k_F is decided in exact integer arithmetic: k_F^2 is
turned into a rational p/q and compared as q*|k|^2 <= p.
"""
import hashlib
import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from backend.errors import ValidationError

logger = logging.getLogger("lattice_core")

Vector = Tuple[int, ...]
RadiusLike = Union[int, float, Fraction, str]

SUPPORTED_DIMENSIONS = (1, 2, 3)


def as_vector(k: Iterable) -> Vector:
    """Normalize any integer sequence to a hashable lattice vector."""
    out = []
    for c in k:
        ci = int(round(float(c)))
        if ci != float(c):
            raise ValidationError(f"lattice vector {tuple(k)} has a non-integer component")
        out.append(ci)
    return tuple(out)


def exact_square(radius: RadiusLike) -> Fraction:
    """Square of a radius as an exact rational.

    Floats go through their shortest decimal repr, so k_F = 1.1 means 11/10.
    """
    if isinstance(radius, Fraction):
        r = radius
    elif isinstance(radius, int):
        r = Fraction(radius)
    else:
        r = Fraction(repr(float(radius))) if not isinstance(radius, str) else Fraction(radius)
    return r * r


def _check_dimension(d: int):
    if d not in SUPPORTED_DIMENSIONS:
        raise ValidationError(f"dimension must be one of {SUPPORTED_DIMENSIONS}, got {d}")


def _ball_points(d: int, radius_sq: Fraction) -> np.ndarray:
    """All k in Z^d with |k|^2 <= radius_sq, lexicographic order."""
    bound = int(math.isqrt(int(math.floor(radius_sq)))) + 1
    axis = np.arange(-bound, bound + 1, dtype=np.int64)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    norm_sq = np.sum(pts * pts, axis=1)
    keep = norm_sq * radius_sq.denominator <= radius_sq.numerator
    return pts[keep]


# -------------------------
# Types
# -------------------------
@dataclass(frozen=True, eq=False)
class MomentumLattice:
    """Ordered set of lattice vectors with |k| <= k_cut."""

    dimension: int
    k_cut: float
    vectors: np.ndarray
    _index: Dict[Vector, int] = field(repr=False, default_factory=dict)

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def norms_squared(self) -> np.ndarray:
        return np.sum(self.vectors * self.vectors, axis=1)

    @property
    def max_component(self) -> int:
        return int(np.max(np.abs(self.vectors))) if len(self) else 0

    def index_of(self, k: Iterable, default: int = -1) -> int:
        return self._index.get(tuple(int(c) for c in k), default)

    def contains(self, k: Iterable) -> bool:
        return self.index_of(k) >= 0

    def shift_index(self, q: Iterable) -> np.ndarray:
        """idx[i] = index of vectors[i] - q, or -1 when it leaves the lattice."""
        q = np.asarray(tuple(q), dtype=np.int64)
        shifted = self.vectors - q
        return np.array([self._index.get(tuple(v), -1) for v in shifted.tolist()], dtype=np.int64)

    def digest(self) -> bytes:
        """SHA-256 of the ordered vectors, used to tag exported matrices."""
        h = hashlib.sha256()
        h.update(np.int64(self.dimension).tobytes())
        h.update(np.ascontiguousarray(self.vectors, dtype="<i8").tobytes())
        return h.digest()


@dataclass(frozen=True, eq=False)
class FermiBall:
    k_f: float
    dimension: int
    kf_squared: Fraction
    members: np.ndarray

    @property
    def n_particles(self) -> int:
        return int(self.members.shape[0])

    def contains(self, k: Iterable) -> bool:
        n2 = sum(int(c) * int(c) for c in k)
        return n2 * self.kf_squared.denominator <= self.kf_squared.numerator

    def member_mask(self, vectors: np.ndarray) -> np.ndarray:
        """Vectorized membership over an (n, d) integer array."""
        n2 = np.sum(np.asarray(vectors, dtype=np.int64) ** 2, axis=1)
        return n2 * self.kf_squared.denominator <= self.kf_squared.numerator


class HbarConvention(str, Enum):
    BULK = "bulk"  # hbar = N^(-1/d)
    RPA = "rpa"    # hbar = kappa / k_F, d = 3 only


@dataclass(frozen=True)
class ScalingConstants:
    hbar: float
    kappa: float
    convention: HbarConvention


@dataclass(frozen=True, eq=False)
class Potential:
    """Finite Fourier coefficient map k -> V(k) with V(k) = V(-k)."""

    coefficients: Mapping[Vector, float]
    dimension: Optional[int]
    gamma_nor: Tuple[Vector, ...]
    strict_nonnegative: bool = False

    def value(self, k: Iterable) -> float:
        return float(self.coefficients.get(tuple(int(c) for c in k), 0.0))

    def items(self):
        return sorted(self.coefficients.items())

    @property
    def support(self) -> Tuple[Vector, ...]:
        return tuple(sorted(self.coefficients))

    @property
    def is_free(self) -> bool:
        return not self.coefficients

    @property
    def support_radius(self) -> float:
        """max |k| over supp V: the largest momentum a pair can exchange."""
        if not self.coefficients:
            return 0.0
        return max(math.sqrt(sum(c * c for c in k)) for k in self.coefficients)

    def scaled(self, factor: float) -> "Potential":
        return make_potential(
            {k: factor * v for k, v in self.coefficients.items()},
            strict_nonnegative=self.strict_nonnegative,
            dimension=self.dimension,
        )


# -------------------------
# Public API
# -------------------------
def build_lattice(d: int, k_cut: RadiusLike) -> MomentumLattice:
    _check_dimension(d)
    if float(k_cut) < 0:
        raise ValidationError(f"k_cut must be non-negative, got {k_cut}")
    pts = _ball_points(d, exact_square(k_cut))
    index = {tuple(v): i for i, v in enumerate(pts.tolist())}
    logger.debug(f"built lattice d={d} k_cut={k_cut}: {len(index)} modes")
    return MomentumLattice(dimension=d, k_cut=float(k_cut), vectors=pts, _index=index)


def build_fermi_ball(k_f: RadiusLike, d: int) -> FermiBall:
    _check_dimension(d)
    if float(k_f) <= 0:
        raise ValidationError(f"Fermi radius must be positive, got k_F={k_f}")
    kf2 = exact_square(k_f)
    members = _ball_points(d, kf2)
    return FermiBall(k_f=float(k_f), dimension=d, kf_squared=kf2, members=members)


def unit_ball_kappa(d: int) -> float:
    """kappa with N ~ (k_F/kappa)^d; equals (3/(4 pi))^(1/3) in three dimensions."""
    volume = math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)
    return (1.0 / volume) ** (1.0 / d)


def scaling_constants(fermi_ball: FermiBall, convention: Union[HbarConvention, str]) -> ScalingConstants:
    convention = HbarConvention(convention)
    d = fermi_ball.dimension
    kappa = unit_ball_kappa(d)
    if convention is HbarConvention.BULK:
        hbar = float(fermi_ball.n_particles) ** (-1.0 / d)
    else:
        if d != 3:
            raise ValidationError(f"the rpa hbar convention needs d = 3, got d = {d}")
        hbar = kappa / fermi_ball.k_f
    return ScalingConstants(hbar=hbar, kappa=kappa, convention=convention)


def dispersion(k: Iterable, fb: FermiBall, sc: ScalingConstants) -> float:
    """e(k) = hbar^2 * | |k|^2 - k_F^2 |."""
    n2 = sum(int(c) * int(c) for c in k)
    return sc.hbar ** 2 * abs(float(n2 - fb.kf_squared))


def in_northern_half(k: Sequence[int]) -> bool:
    """Sign rule: the last nonzero component is positive."""
    for c in reversed(tuple(k)):
        if c != 0:
            return c > 0
    return False


def make_potential(coeffs: Mapping, strict_nonnegative: bool = False,
                   dimension: Optional[int] = None) -> Potential:
    table: Dict[Vector, float] = {}
    for key, value in dict(coeffs).items():
        k = as_vector(key)
        v = float(value)
        if not math.isfinite(v):
            raise ValidationError(f"potential coefficient at {k} is not finite")
        if dimension is None:
            dimension = len(k)
        elif len(k) != dimension:
            raise ValidationError(f"potential key {k} has dimension {len(k)}, expected {dimension}")
        if v != 0.0:
            table[k] = v

    for k, v in table.items():
        mirror = tuple(-c for c in k)
        other = table.get(mirror, 0.0)
        if not math.isclose(v, other, rel_tol=1e-12, abs_tol=1e-15):
            raise ValidationError(
                f"potential violates the symmetry rule V(k) = V(-k): V{k} = {v} but V{mirror} = {other}"
            )
        if strict_nonnegative and v < 0:
            raise ValidationError(f"potential must be non-negative in rpa mode: V{k} = {v}")

    gamma_nor = tuple(sorted(k for k in table if in_northern_half(k)))
    return Potential(coefficients=table, dimension=dimension, gamma_nor=gamma_nor,
                     strict_nonnegative=strict_nonnegative)


def nearest_neighbour_potential(d: int, value: float, include_zero: Optional[float] = None,
                                strict_nonnegative: bool = False) -> Potential:
    """V supported on the 2d unit vectors (and optionally k = 0)."""
    coeffs: Dict[Vector, float] = {}
    for axis, sign in itertools.product(range(d), (1, -1)):
        k = [0] * d
        k[axis] = sign
        coeffs[tuple(k)] = value
    if include_zero is not None:
        coeffs[(0,) * d] = include_zero
    return make_potential(coeffs, strict_nonnegative=strict_nonnegative, dimension=d)
