# backend/trap_init.py
"""
Harmonic Trap Initial Data

Non-interacting ground state of an anisotropic harmonic oscillator,
represented as a diagonal projector in the occupation-number (Hermite)
basis |n1, n2, n3>, plus the semiclassical commutator trace norms
||[x_i, w]||_tr and ||[p_i, w]||_tr:

  - analytically, from the rank-2-per-transverse-mode structure, and
  - by brute force, summing singular values of an explicit matrix.

Operators per axis (frequency w_i):
  x_i = sqrt(hbar / (2 w_i)) (a + a*)
  p_i = i sqrt(hbar w_i / 2) (a* - a)

The momentum and position norms differ by the factor w_i; they coincide
for unit frequency.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import svdvals

from backend.errors import ValidationError

logger = logging.getLogger("trap_init")

OPERATORS = ("position", "momentum")


@dataclass(frozen=True)
class TrapSpec:
    frequencies: Tuple[float, ...]
    caps: Tuple[int, ...]
    hbar: float

    def __post_init__(self):
        if len(self.frequencies) != len(self.caps) or not 1 <= len(self.caps) <= 3:
            raise ValidationError("trap needs matching frequencies and caps for 1 to 3 axes")
        if any(w <= 0 for w in self.frequencies):
            raise ValidationError(f"trap frequencies must be positive: {self.frequencies}")
        if list(self.frequencies) != sorted(self.frequencies):
            raise ValidationError(f"trap frequencies must be sorted ascending: {self.frequencies}")
        if any(int(n) != n or n < 0 for n in self.caps):
            raise ValidationError(f"level caps must be non-negative integers: {self.caps}")
        if self.hbar <= 0:
            raise ValidationError(f"hbar must be positive, got {self.hbar}")

    @property
    def n_axes(self) -> int:
        return len(self.caps)

    @property
    def n_particles(self) -> int:
        return int(np.prod([n + 1 for n in self.caps]))


class LevelCaps(NamedTuple):
    caps: Tuple[int, ...]
    realized_n: int


@dataclass(frozen=True)
class HermiteDensityMatrix:
    """Diagonal projector onto {n : n_i <= cap_i for every axis}."""

    caps: Tuple[int, ...]
    truncation: Tuple[int, ...]

    def axis_occupation(self, axis: int) -> np.ndarray:
        return (np.arange(self.truncation[axis]) <= self.caps[axis]).astype(np.int64)

    def occupation(self) -> np.ndarray:
        occ = np.ones(1, dtype=np.int64)
        for axis in range(len(self.caps)):
            occ = np.kron(occ, self.axis_occupation(axis))
        return occ

    def as_matrix(self) -> np.ndarray:
        return np.diag(self.occupation().astype(float))

    @property
    def trace(self) -> int:
        return int(self.occupation().sum())

    @property
    def is_projector(self) -> bool:
        occ = self.occupation()
        return bool(np.array_equal(occ * occ, occ))


# -------------------------
# Level caps and ladder operators
# -------------------------
def make_trap_spec(frequencies: Sequence[float], caps: Sequence[int], hbar: float) -> TrapSpec:
    return TrapSpec(tuple(float(w) for w in frequencies), tuple(int(n) for n in caps), float(hbar))


def nmax_levels(n_target: int, energy: float, frequencies: Sequence[float]) -> LevelCaps:
    """Occupy every axis up to the same energy N^(1/3) E w_1 (floor rounding)."""
    if energy <= 0:
        raise ValidationError(f"energy scale E must be positive, got {energy}")
    if n_target <= 0:
        raise ValidationError(f"target particle number must be positive, got {n_target}")
    freqs = [float(w) for w in frequencies]
    if any(w <= 0 for w in freqs) or freqs != sorted(freqs):
        raise ValidationError(f"frequencies must be positive and sorted: {frequencies}")
    base = float(np.cbrt(float(n_target))) * energy
    caps = tuple(int(math.floor(base * freqs[0] / w * (1.0 + 1e-12))) for w in freqs)
    realized = int(np.prod([n + 1 for n in caps]))
    if realized != n_target:
        logger.info(f"nmax_levels: target N={n_target} realized N={realized} with caps {caps}")
    return LevelCaps(caps=caps, realized_n=realized)


def ladder_matrix(n_cap: int, truncation: Optional[int] = None) -> np.ndarray:
    """Annihilation operator a on the first `truncation` Hermite levels."""
    if n_cap < 0:
        raise ValidationError(f"n_cap must be non-negative, got {n_cap}")
    size = n_cap + 2 if truncation is None else int(truncation)
    if size < n_cap + 2:
        raise ValidationError(
            f"truncation {size} too small for cap {n_cap}: [x, w] couples level {n_cap} to {n_cap + 1}"
        )
    return np.diag(np.sqrt(np.arange(1, size, dtype=float)), k=1)


def ground_state_projector(spec: TrapSpec, truncation: Optional[Sequence[int]] = None) -> HermiteDensityMatrix:
    trunc = tuple(n + 2 for n in spec.caps) if truncation is None else tuple(int(t) for t in truncation)
    for n, t in zip(spec.caps, trunc):
        if t < n + 2:
            raise ValidationError(f"truncation {t} below cap + 2 = {n + 2}")
    return HermiteDensityMatrix(caps=spec.caps, truncation=trunc)


def axis_operator(spec: TrapSpec, operator: str, axis: int, size: int) -> np.ndarray:
    a = ladder_matrix(spec.caps[axis], size)
    w = spec.frequencies[axis]
    if operator == "position":
        return math.sqrt(spec.hbar / (2.0 * w)) * (a + a.T)
    if operator == "momentum":
        return 1j * math.sqrt(spec.hbar * w / 2.0) * (a.T - a)
    raise ValidationError(f"operator must be one of {OPERATORS}, got {operator!r}")


def embed_axis_operator(single: np.ndarray, axis: int, dims: Sequence[int]) -> np.ndarray:
    full = np.ones((1, 1))
    for j, n in enumerate(dims):
        full = np.kron(full, single if j == axis else np.eye(n))
    return full


def commutator_matrix(op: np.ndarray, occupation: np.ndarray) -> np.ndarray:
    """[op, diag(occupation)] without forming the diagonal."""
    occ = np.asarray(occupation, dtype=float)
    return op * (occ[None, :] - occ[:, None])


# -------------------------
# Trace norms
# -------------------------
def _transverse_count(spec: TrapSpec, axis: int, shift: int) -> int:
    return int(np.prod([n + shift for j, n in enumerate(spec.caps) if j != axis]))


def commutator_trace_norm_analytic(spec: TrapSpec, axis: int, operator: str = "position") -> float:
    if operator not in OPERATORS:
        raise ValidationError(f"operator must be one of {OPERATORS}, got {operator!r}")
    n = spec.caps[axis]
    w = spec.frequencies[axis]
    scale = math.sqrt(spec.hbar / (2.0 * w)) if operator == "position" else math.sqrt(spec.hbar * w / 2.0)
    return scale * math.sqrt(n + 1) * 2.0 * _transverse_count(spec, axis, 1)


def printed_trace_norm(spec: TrapSpec, axis: int, operator: str = "position") -> float:
    """Variant with transverse factor prod n_j instead of prod (n_j + 1)."""
    full = commutator_trace_norm_analytic(spec, axis, operator)
    return full / _transverse_count(spec, axis, 1) * _transverse_count(spec, axis, 0)


def _bruteforce_commutator(spec: TrapSpec, operator: str, axis: int) -> np.ndarray:
    rho = ground_state_projector(spec)
    single = axis_operator(spec, operator, axis, rho.truncation[axis])
    op = embed_axis_operator(single, axis, rho.truncation)
    return commutator_matrix(op, rho.occupation())


def commutator_trace_norm_bruteforce(spec: TrapSpec, operator: str, axis: int) -> float:
    sv = svdvals(_bruteforce_commutator(spec, operator, axis))
    return float(np.sum(sv))


def commutator_rank(spec: TrapSpec, operator: str, axis: int, rtol: float = 1e-10) -> int:
    sv = svdvals(_bruteforce_commutator(spec, operator, axis))
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


def spatial_extension(spec: TrapSpec, axis: int) -> float:
    """sqrt(hbar (n_i + 1) / (2 w_i)), the width of the occupied region along axis i."""
    return math.sqrt(spec.hbar * (spec.caps[axis] + 1) / (2.0 * spec.frequencies[axis]))


def trace_norm_table(spec: TrapSpec) -> pd.DataFrame:
    """Analytic vs brute-force norms for both operators on every axis."""
    rows: List[dict] = []
    for axis in range(spec.n_axes):
        for operator in OPERATORS:
            analytic = commutator_trace_norm_analytic(spec, axis, operator)
            brute = commutator_trace_norm_bruteforce(spec, operator, axis)
            printed = printed_trace_norm(spec, axis, operator)
            rows.append({
                "axis": axis + 1,
                "operator": operator,
                "analytic": analytic,
                "bruteforce": brute,
                "printed": printed,
                "rel_diff": abs(analytic - brute) / analytic,
                "rank": commutator_rank(spec, operator, axis),
                "spatial_extension": spatial_extension(spec, axis),
            })
            logger.info(
                f"axis {axis + 1} {operator}: analytic={analytic:.12g} bruteforce={brute:.12g} "
                f"printed={printed:.12g}"
            )
    return pd.DataFrame(rows)


def scaling_trend(n_targets: Sequence[int], energy: float = 1.0,
                  frequencies: Sequence[float] = (1.0, 1.0, 1.0), bruteforce: bool = False) -> pd.DataFrame:
    """||[x_1, w]||_tr / (N hbar) along a sequence of target sizes, hbar = N^(-1/3)."""
    rows = []
    for n_target in n_targets:
        caps, realized = nmax_levels(n_target, energy, frequencies)
        hbar = realized ** (-1.0 / len(caps))
        spec = make_trap_spec(frequencies, caps, hbar)
        norm = (commutator_trace_norm_bruteforce(spec, "position", 0) if bruteforce
                else commutator_trace_norm_analytic(spec, 0, "position"))
        rows.append({
            "n_target": int(n_target),
            "caps": "x".join(str(c) for c in caps),
            "realized_n": realized,
            "hbar": hbar,
            "trace_norm": norm,
            "ratio": norm / (realized * hbar),
            "spatial_extension": spatial_extension(spec, 0),
        })
    return pd.DataFrame(rows)
