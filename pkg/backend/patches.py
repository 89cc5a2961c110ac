# backend/patches.py
"""
Fermi-surface patch decomposition (d = 3).

The northern hemisphere is cut into M/2 equal-area cells: a polar cap
followed by zonal bands in the polar angle, each band split evenly in
azimuth (the regular-placement recipe for points on a sphere, applied to
cells). Southern patches are point reflections of the northern ones.

Lattice points of the shell k_F - R < |q| <= k_F + R (R = diam supp V)
join the cell containing their direction when they sit at least half a
corridor away from its boundary. The corridor widens geometrically until
every pair of points from different patches is more than 2R apart.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from backend.errors import ValidationError
from backend.lattice_core import FermiBall, Potential, Vector, build_lattice

logger = logging.getLogger("patches")

HEMISPHERE_AREA = 2.0 * math.pi


@dataclass(frozen=True)
class Zone:
    theta_lo: float
    theta_hi: float
    phi_lo: float
    phi_hi: float
    cells_in_band: int

    @property
    def center(self) -> np.ndarray:
        theta = 0.0 if self.theta_lo == 0.0 and self.cells_in_band == 1 else 0.5 * (self.theta_lo + self.theta_hi)
        phi = 0.5 * (self.phi_lo + self.phi_hi)
        return np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])


@dataclass(frozen=True, eq=False)
class PatchDecomposition:
    n_patches: int
    k_f: float
    support_radius: float
    centers: np.ndarray
    members: Tuple[np.ndarray, ...]
    reflection: Tuple[int, ...]
    corridor_width: float
    degenerate: bool = False
    _member_sets: Tuple[FrozenSet[Vector], ...] = field(repr=False, default=())

    def __post_init__(self):
        if not self._member_sets:
            sets = tuple(frozenset(map(tuple, m.tolist())) for m in self.members)
            object.__setattr__(self, "_member_sets", sets)

    @property
    def unit_centers(self) -> np.ndarray:
        return self.centers / np.linalg.norm(self.centers, axis=1, keepdims=True)

    @property
    def shell_counts(self) -> np.ndarray:
        return np.array([m.shape[0] for m in self.members])

    def contains(self, q: Sequence[int], alpha: int) -> bool:
        return tuple(int(c) for c in q) in self._member_sets[alpha]

    def patch_of(self, q: Sequence[int]) -> Optional[int]:
        key = tuple(int(c) for c in q)
        for alpha, members in enumerate(self._member_sets):
            if key in members:
                return alpha
        return None

    def permuted(self, perm: Sequence[int]) -> "PatchDecomposition":
        """Relabel: old patch alpha becomes patch perm[alpha]."""
        perm = list(perm)
        if sorted(perm) != list(range(self.n_patches)):
            raise ValidationError(f"not a permutation of {self.n_patches} patches: {perm}")
        inverse = np.argsort(perm)
        return PatchDecomposition(
            n_patches=self.n_patches,
            k_f=self.k_f,
            support_radius=self.support_radius,
            centers=self.centers[inverse],
            members=tuple(self.members[i] for i in inverse),
            reflection=tuple(perm[self.reflection[i]] for i in inverse),
            corridor_width=self.corridor_width,
            degenerate=self.degenerate,
        )


# -------------------------
# Hemisphere partition
# -------------------------
def equal_area_zones(n_cells: int) -> List[Zone]:
    """Polar cap plus azimuthally split bands, every cell of area 2 pi / n_cells."""
    if n_cells < 1:
        raise ValidationError(f"need at least one cell, got {n_cells}")
    if n_cells == 1:
        return [Zone(0.0, 0.5 * math.pi, 0.0, 2.0 * math.pi, 1)]

    area = HEMISPHERE_AREA / n_cells
    theta_cap = math.acos(1.0 - area / (2.0 * math.pi))
    remaining = n_cells - 1
    n_bands = max(1, int(round((0.5 * math.pi - theta_cap) / math.sqrt(area))))

    while True:
        edges = np.linspace(theta_cap, 0.5 * math.pi, n_bands + 1)
        ideal = [2.0 * math.pi * (math.cos(edges[i]) - math.cos(edges[i + 1])) / area for i in range(n_bands)]
        counts, carry = [], 0.0
        for value in ideal:
            c = int(round(value + carry))
            carry += value - c
            counts.append(c)
        counts[-1] += remaining - sum(counts)
        if all(c >= 1 for c in counts) or n_bands == 1:
            break
        n_bands -= 1

    zones = [Zone(0.0, theta_cap, 0.0, 2.0 * math.pi, 1)]
    cumulative = 1
    theta_lo = theta_cap
    for count in counts:
        cumulative += count
        theta_hi = math.acos(max(-1.0, min(1.0, 1.0 - cumulative * area / (2.0 * math.pi))))
        if cumulative == n_cells:
            theta_hi = 0.5 * math.pi
        width = 2.0 * math.pi / count
        for j in range(count):
            zones.append(Zone(theta_lo, theta_hi, j * width, (j + 1) * width, count))
        theta_lo = theta_hi
    return zones


def _assign(points: np.ndarray, zones: List[Zone], margin: float) -> np.ndarray:
    """Zone label per northern point, -1 when inside a corridor."""
    r = np.linalg.norm(points, axis=1)
    theta = np.arccos(np.clip(points[:, 2] / r, -1.0, 1.0))
    phi = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2.0 * math.pi)
    labels = np.full(points.shape[0], -1, dtype=np.int64)
    for z_index, zone in enumerate(zones):
        inside = (theta >= zone.theta_lo) & (theta < zone.theta_hi) & (phi >= zone.phi_lo) & (phi < zone.phi_hi)
        if not np.any(inside):
            continue
        dist = zone.theta_hi - theta
        if zone.theta_lo > 0.0:
            dist = np.minimum(dist, theta - zone.theta_lo)
        if zone.cells_in_band > 1:
            dphi = np.minimum(phi - zone.phi_lo, zone.phi_hi - phi)
            dist = np.minimum(dist, np.arcsin(np.clip(np.sin(theta) * np.sin(dphi), 0.0, 1.0)))
        labels[inside & (dist >= margin)] = z_index
    return labels


def shell_points(fb: FermiBall, width: float) -> np.ndarray:
    """Lattice points with k_F - width < |q| <= k_F + width."""
    lattice = build_lattice(3, fb.k_f + width)
    inner = fb.k_f - width
    if inner <= 0:
        return lattice.vectors
    n2 = lattice.norms_squared.astype(float)
    return lattice.vectors[n2 > inner * inner + 1e-12]


def _cross_patch_pairs(points: np.ndarray, labels: np.ndarray, distance: float) -> np.ndarray:
    if points.shape[0] < 2:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = cKDTree(points).query_pairs(r=distance, output_type="ndarray")
    if pairs.size == 0:
        return pairs
    return pairs[labels[pairs[:, 0]] != labels[pairs[:, 1]]]


def min_cross_patch_distance(pd: PatchDecomposition) -> float:
    """Smallest Euclidean distance between shell points of different patches."""
    best = math.inf
    trees = [cKDTree(m) for m in pd.members]
    for alpha in range(pd.n_patches):
        for beta in range(alpha + 1, pd.n_patches):
            dist, _ = trees[beta].query(pd.members[alpha], k=1)
            best = min(best, float(np.min(dist)))
    return best


def default_patch_count(n_particles: int, delta: float) -> int:
    """Even integer nearest N^(4 delta), at least 2."""
    return max(2, 2 * int(round(0.5 * n_particles ** (4.0 * delta))))


# -------------------------
# Public API
# -------------------------
def build_patches(fb: FermiBall, n_patches: int, V: Potential, growth: float = 1.05,
                  max_rounds: int = 400) -> PatchDecomposition:
    if fb.dimension != 3:
        raise ValidationError(f"patch decomposition needs d = 3, got d = {fb.dimension}")
    if n_patches < 2 or n_patches % 2:
        raise ValidationError(f"number of patches must be even and >= 2, got {n_patches}")
    radius = V.support_radius if not V.is_free else 1.0
    inner = fb.k_f - radius
    if inner <= 0:
        raise ValidationError(f"shell of width {radius} swallows the Fermi ball of radius {fb.k_f}")

    zones = equal_area_zones(n_patches // 2)
    shell = shell_points(fb, radius)
    north = shell[shell[:, 2] > 0]
    if north.shape[0] == 0:
        raise ValidationError("shell has no lattice points")

    width = 2.0 * radius * (1.0 + 1e-4)
    last_violation: Optional[Tuple[int, int]] = None
    for round_no in range(max_rounds):
        labels_n = _assign(north, zones, 0.5 * width / inner)
        kept = labels_n >= 0
        pts_n = north[kept]
        lab_n = labels_n[kept]
        counts = np.bincount(lab_n, minlength=len(zones))
        if np.any(counts == 0):
            empty = int(np.argmin(counts))
            pair = last_violation if last_violation is not None else (empty, empty)
            raise ValidationError(
                f"infeasible corridor constraint at k_F={fb.k_f}, M={n_patches}: patch {empty} emptied "
                f"while separating patches {pair[0]} and {pair[1]} by more than {2.0 * radius:g}"
            )
        points = np.vstack([pts_n, -pts_n])
        labels = np.concatenate([lab_n, lab_n + len(zones)])
        bad = _cross_patch_pairs(points, labels, 2.0 * radius)
        if bad.shape[0] == 0:
            break
        last_violation = (int(labels[bad[0, 0]]), int(labels[bad[0, 1]]))
        width *= growth
    else:
        raise ValidationError(
            f"corridor constraint not met after {max_rounds} rounds; last violated pair {last_violation}"
        )

    half = len(zones)
    members_n = [pts_n[lab_n == z] for z in range(half)]
    centers_n = []
    for z, m in enumerate(members_n):
        c = m.sum(axis=0).astype(float)
        norm = np.linalg.norm(c)
        centers_n.append(fb.k_f * (c / norm if norm > 0 else zones[z].center))
    centers = np.vstack([np.asarray(centers_n), -np.asarray(centers_n)])
    members = tuple(members_n) + tuple(-m for m in members_n)
    reflection = tuple(list(range(half, 2 * half)) + list(range(half)))

    counts = np.array([m.shape[0] for m in members])
    mean = counts.mean()
    degenerate = bool(np.any(counts * 4 < mean) or np.any(counts > 4 * mean))
    if degenerate:
        logger.warning(f"patch sizes {counts.tolist()} leave the factor-4 band around the mean {mean:.1f}")
    logger.info(
        f"patches: M={n_patches} k_F={fb.k_f} corridor={width:.4g} shell points per patch "
        f"min={counts.min()} max={counts.max()}"
    )
    return PatchDecomposition(
        n_patches=n_patches,
        k_f=fb.k_f,
        support_radius=radius,
        centers=centers,
        members=members,
        reflection=reflection,
        corridor_width=width,
        degenerate=degenerate,
    )
