# backend/exact_oracle.py
"""
Exact Many-Fermion Oracle

Occupation-number machinery for desk-scale checks.

Basis states are integer bitmasks over an ordered mode list; bit j set
means mode j is occupied. A state with occupied modes s_1 < ... < s_N is
a*_{s_1} ... a*_{s_N} Omega, so a*_j and a_j pick up the sign
(-1)^(number of occupied modes with index < j).

Two kinds of basis are built here:
  - fixed-N sectors over a momentum lattice, for the Hamiltonian
    hbar^2 sum |p|^2 n_p + (1/2N) sum V(k) a*_{p+k} a*_{q-k} a_q a_p, and
  - particle-hole spaces, where the Fermi sea is the vacuum and every
    materialized mode is a particle (outside B_F) or a hole (inside).
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.linalg import eigh
from scipy.sparse.linalg import expm_multiply
from scipy.special import comb

from backend.errors import NumericalError, ResourceCapError, ValidationError
from backend.hartree_fock import DensityMatrix
from backend.lattice_core import FermiBall, MomentumLattice, Potential, ScalingConstants, Vector, as_vector
from backend.patches import PatchDecomposition
from backend.rpa import PairExcitationSpec, patch_pairs

logger = logging.getLogger("exact_oracle")

DEFAULT_DIMENSION_CAP = 200_000
DENSE_BELOW = 2000

Pair = Tuple[Vector, Vector]


def _parity_below(mask: int, j: int) -> int:
    return -1 if bin(mask & ((1 << j) - 1)).count("1") % 2 else 1


def _create(mask: int, j: int) -> Tuple[int, int]:
    """(sign, new mask) of a*_j; sign 0 when mode j is already occupied."""
    if mask >> j & 1:
        return 0, mask
    return _parity_below(mask, j), mask | (1 << j)


def _annihilate(mask: int, j: int) -> Tuple[int, int]:
    if not mask >> j & 1:
        return 0, mask
    return _parity_below(mask, j), mask & ~(1 << j)


def _occupied(mask: int) -> List[int]:
    out, j = [], 0
    while mask:
        if mask & 1:
            out.append(j)
        mask >>= 1
        j += 1
    return out


# -------------------------
# Types
# -------------------------
@dataclass(frozen=True, eq=False)
class FockBasis:
    modes: np.ndarray
    states: Tuple[int, ...]
    n_particles: Optional[int] = None
    lattice: Optional[MomentumLattice] = None
    hole_flags: Optional[np.ndarray] = None
    max_pairs: Optional[int] = None
    _index: Dict[int, int] = field(repr=False, default_factory=dict)
    _mode_index: Dict[Vector, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self._index:
            object.__setattr__(self, "_index", {m: i for i, m in enumerate(self.states)})
        if not self._mode_index:
            object.__setattr__(self, "_mode_index", {tuple(v): i for i, v in enumerate(self.modes.tolist())})

    @property
    def dimension(self) -> int:
        return len(self.states)

    @property
    def n_modes(self) -> int:
        return int(self.modes.shape[0])

    def index_of(self, mask: int) -> Optional[int]:
        return self._index.get(mask)

    def mode_index(self, k: Iterable) -> Optional[int]:
        return self._mode_index.get(as_vector(k))

    def mask_of(self, occupied: Iterable) -> int:
        mask = 0
        for k in occupied:
            j = self.mode_index(k)
            if j is None:
                raise ValidationError(f"mode {tuple(k)} is not in the basis")
            if mask >> j & 1:
                raise ValidationError(f"mode {tuple(k)} listed twice")
            mask |= 1 << j
        return mask


@dataclass(frozen=True, eq=False)
class FockState:
    basis: FockBasis
    amplitudes: np.ndarray

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def with_amplitudes(self, amplitudes: np.ndarray) -> "FockState":
        return FockState(self.basis, np.asarray(amplitudes, dtype=np.complex128))


# -------------------------
# Fixed-N sector
# -------------------------
def build_fock_basis(modes: Union[MomentumLattice, np.ndarray], n_particles: int,
                     dimension_cap: int = DEFAULT_DIMENSION_CAP) -> FockBasis:
    lattice = modes if isinstance(modes, MomentumLattice) else None
    vectors = np.asarray(modes.vectors if lattice is not None else modes, dtype=np.int64)
    n_modes = vectors.shape[0]
    if not 0 < n_particles <= n_modes:
        raise ValidationError(f"particle number N={n_particles} out of range for {n_modes} modes")
    dim = int(comb(n_modes, n_particles, exact=True))
    if dim > dimension_cap:
        raise ResourceCapError(f"Fock dimension C({n_modes}, {n_particles}) = {dim} exceeds cap {dimension_cap}")
    states = tuple(sum(1 << j for j in occ) for occ in itertools.combinations(range(n_modes), n_particles))
    logger.debug(f"fock basis: {n_modes} modes, N={n_particles}, dimension {dim}")
    return FockBasis(modes=vectors, states=states, n_particles=n_particles, lattice=lattice)


def build_hamiltonian(basis: FockBasis, V: Potential, sc: ScalingConstants) -> sparse.csr_matrix:
    """Sparse N-particle Hamiltonian; transfers leaving the lattice are dropped."""
    if basis.lattice is None or basis.n_particles is None:
        raise ValidationError("the Hamiltonian needs a fixed-N basis built over a lattice")
    lattice = basis.lattice
    n = basis.n_particles
    kinetic = sc.hbar ** 2 * lattice.norms_squared.astype(float)
    terms = [(v / (2.0 * n), lattice.shift_index(tuple(-c for c in k)), lattice.shift_index(k))
             for k, v in V.items()]

    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    for col, mask in enumerate(basis.states):
        occ = _occupied(mask)
        rows.append(col)
        cols.append(col)
        vals.append(float(np.sum(kinetic[occ])))
        for coef, plus, minus in terms:
            for p, q in itertools.permutations(occ, 2):
                p_out, q_out = plus[p], minus[q]
                if p_out < 0 or q_out < 0:
                    continue
                s1, m = _annihilate(mask, p)
                s2, m = _annihilate(m, q)
                s3, m = _create(m, q_out)
                if not s3:
                    continue
                s4, m = _create(m, p_out)
                if not s4:
                    continue
                rows.append(basis.index_of(m))
                cols.append(col)
                vals.append(coef * s1 * s2 * s3 * s4)
    dim = basis.dimension
    h = sparse.coo_matrix((vals, (rows, cols)), shape=(dim, dim)).tocsr()
    h.sum_duplicates()
    logger.info(f"fock hamiltonian: dimension {dim}, {h.nnz} nonzeros")
    return h


def momentum_operator_diagonal(basis: FockBasis) -> np.ndarray:
    """Total momentum sum_k k n_k of every basis state, shape (dimension, d)."""
    out = np.zeros((basis.dimension, basis.modes.shape[1]), dtype=np.int64)
    for i, mask in enumerate(basis.states):
        occ = _occupied(mask)
        if occ:
            out[i] = basis.modes[occ].sum(axis=0)
    return out


def slater_state(basis: FockBasis, occupied: Iterable) -> FockState:
    occupied = [as_vector(k) for k in occupied]
    if basis.n_particles is not None and len(occupied) != basis.n_particles:
        raise ValidationError(f"Slater state needs {basis.n_particles} modes, got {len(occupied)}")
    idx = basis.index_of(basis.mask_of(occupied))
    if idx is None:
        raise ValidationError("occupation set is not a basis state")
    amps = np.zeros(basis.dimension, dtype=np.complex128)
    amps[idx] = 1.0
    return FockState(basis, amps)


def slater_from_orbitals(basis: FockBasis, orbitals: np.ndarray) -> FockState:
    """prod_j (sum_k phi_j(k) a*_k) Omega: amplitude det phi[S, :] per occupation set S."""
    phi = np.asarray(orbitals, dtype=np.complex128)
    if phi.shape != (basis.n_modes, basis.n_particles):
        raise ValidationError(f"orbitals must have shape ({basis.n_modes}, {basis.n_particles}), got {phi.shape}")
    amps = np.array([np.linalg.det(phi[_occupied(mask), :]) for mask in basis.states], dtype=np.complex128)
    return FockState(basis, amps)


def expectation(psi: FockState, H) -> float:
    return float(np.real(np.vdot(psi.amplitudes, H @ psi.amplitudes)))


def _check_dimension(dim: int, dimension_cap: int):
    if dim > dimension_cap:
        raise ResourceCapError(f"state dimension {dim} exceeds cap {dimension_cap}")


def evolve_exact(psi0: FockState, H, t: float, sc: ScalingConstants,
                 dimension_cap: int = DEFAULT_DIMENSION_CAP) -> FockState:
    """psi(t) = exp(-i H t / hbar) psi0; dense below DENSE_BELOW, Krylov above."""
    return psi0.with_amplitudes(evolve_exact_trajectory(psi0, H, [t], sc, dimension_cap)[-1])


def evolve_exact_trajectory(psi0: FockState, H, times: Sequence[float], sc: ScalingConstants,
                            dimension_cap: int = DEFAULT_DIMENSION_CAP) -> np.ndarray:
    dim = psi0.basis.dimension
    _check_dimension(dim, dimension_cap)
    v0 = np.asarray(psi0.amplitudes, dtype=np.complex128)
    out = np.empty((len(times), dim), dtype=np.complex128)
    if dim < DENSE_BELOW:
        dense = H.toarray() if sparse.issparse(H) else np.asarray(H)
        evals, evecs = eigh(0.5 * (dense + dense.conj().T))
        coeffs = evecs.conj().T @ v0
        for i, t in enumerate(times):
            out[i] = evecs @ (np.exp(-1j * t * evals / sc.hbar) * coeffs)
    else:
        generator = sparse.csr_matrix(H) * (-1j / sc.hbar)
        current, t_prev = v0, 0.0
        for i, t in enumerate(times):
            if t != t_prev:
                current = expm_multiply(generator * (t - t_prev), current)
            out[i] = current
            t_prev = t
    drift = float(np.max(np.abs(np.linalg.norm(out, axis=1) - np.linalg.norm(v0)))) if len(times) else 0.0
    if drift > 1e-8:
        raise NumericalError(f"exact evolution lost unitarity: norm drift {drift:.3e}")
    return out


def reduced_density_matrix(psi: FockState, hbar: Optional[float] = None) -> DensityMatrix:
    """gamma[k, k'] = <psi, a*_k' a_k psi>, trace N."""
    basis = psi.basis
    if basis.lattice is None:
        raise ValidationError("reduced density matrices need a basis built over a lattice")
    n_modes = basis.n_modes
    gamma = np.zeros((n_modes, n_modes), dtype=np.complex128)
    amps = psi.amplitudes
    for col, mask in enumerate(basis.states):
        a = amps[col]
        if a == 0:
            continue
        for k in _occupied(mask):
            s1, m = _annihilate(mask, k)
            for kp in range(n_modes):
                s2, m2 = _create(m, kp)
                if not s2:
                    continue
                row = basis.index_of(m2)
                if row is not None:
                    gamma[k, kp] += np.conj(amps[row]) * s1 * s2 * a
    return DensityMatrix(matrix=gamma, lattice=basis.lattice, hbar=1.0 if hbar is None else hbar)


# -------------------------
# Particle-hole spaces
# -------------------------
def shell_pairs(k: Sequence[int], alpha: int, pd: PatchDecomposition, fb: FermiBall) -> List[Pair]:
    return patch_pairs(k, alpha, pd, fb)


def particle_hole_modes(pd: PatchDecomposition, fb: FermiBall,
                        entries: Iterable[Tuple[Sequence[int], int]]) -> Dict[Tuple[Vector, int], List[Pair]]:
    """Pair lists of every (k, alpha) that will be materialized."""
    out: Dict[Tuple[Vector, int], List[Pair]] = {}
    for k, alpha in entries:
        key = (as_vector(k), int(alpha))
        if key not in out:
            out[key] = shell_pairs(key[0], key[1], pd, fb)
    return out


def build_pair_basis(pairs: Iterable[Pair], max_pairs: int,
                     dimension_cap: int = DEFAULT_DIMENSION_CAP) -> FockBasis:
    """States reached from the vacuum by at most max_pairs disjoint pair creations."""
    if max_pairs < 1:
        raise ValidationError(f"max_pairs must be at least 1, got {max_pairs}")
    modes: List[Vector] = []
    flags: List[bool] = []
    index: Dict[Vector, int] = {}
    pair_masks = []
    for p, h in pairs:
        for v, is_hole in ((as_vector(p), False), (as_vector(h), True)):
            if v not in index:
                index[v] = len(modes)
                modes.append(v)
                flags.append(is_hole)
            elif flags[index[v]] != is_hole:
                raise ValidationError(f"mode {v} appears both as particle and as hole")
        pair_masks.append((1 << index[as_vector(p)]) | (1 << index[as_vector(h)]))
    pair_masks = sorted(set(pair_masks))

    seen = {0}
    level = [0]
    for _ in range(max_pairs):
        nxt = set()
        for mask in level:
            for pm in pair_masks:
                if not mask & pm:
                    nxt.add(mask | pm)
        nxt -= seen
        seen |= nxt
        if len(seen) > dimension_cap:
            raise ResourceCapError(f"pair basis exceeds cap {dimension_cap}")
        level = sorted(nxt)
    states = tuple(sorted(seen, key=lambda m: (bin(m).count("1"), m)))
    logger.info(f"pair basis: {len(modes)} modes, {len(pair_masks)} pairs, up to {max_pairs} pairs, dimension {len(states)}")
    return FockBasis(modes=np.asarray(modes, dtype=np.int64).reshape(len(modes), -1), states=states,
                     hole_flags=np.asarray(flags, dtype=bool), max_pairs=max_pairs)


def _pair_matrix(basis: FockBasis, pairs: Sequence[Pair], coefficient: float) -> sparse.csr_matrix:
    indexed = []
    for p, h in pairs:
        ip, ih = basis.mode_index(p), basis.mode_index(h)
        if ip is None or ih is None:
            raise ValidationError(f"pair ({p}, {h}) is not materialized in the basis")
        indexed.append((ip, ih))
    rows, cols, vals = [], [], []
    for col, mask in enumerate(basis.states):
        for ip, ih in indexed:
            s1, m = _create(mask, ih)
            if not s1:
                continue
            s2, m = _create(m, ip)
            if not s2:
                continue
            row = basis.index_of(m)
            if row is None:
                if bin(mask).count("1") // 2 >= basis.max_pairs:
                    continue
                raise ValidationError("pair basis is not closed under the requested pair operator")
            rows.append(row)
            cols.append(col)
            vals.append(coefficient * s1 * s2)
    dim = basis.dimension
    return sparse.coo_matrix((vals, (rows, cols)), shape=(dim, dim)).tocsr()


def pair_operator_matrix(k: Sequence[int], alpha: Optional[int], pd: Optional[PatchDecomposition],
                         fb: FermiBall, basis: FockBasis) -> sparse.csr_matrix:
    """b*_alpha(k) = (1/n_alpha(k)) sum a*_p a*_h, or the delocalized b*(k) when alpha is None.

    Creation beyond the top pair sector of the basis is dropped.
    """
    if basis.hole_flags is None:
        raise ValidationError("pair operators need a particle-hole basis")
    kv = as_vector(k)
    if alpha is None:
        pairs = []
        for j, v in enumerate(basis.modes.tolist()):
            if basis.hole_flags[j]:
                continue
            h = tuple(a - b for a, b in zip(v, kv))
            jh = basis.mode_index(h)
            if jh is not None and basis.hole_flags[jh] and fb.contains(h) and not fb.contains(v):
                pairs.append((tuple(v), h))
        return _pair_matrix(basis, pairs, 1.0)
    pairs = shell_pairs(kv, alpha, pd, fb)
    if not pairs:
        raise ValidationError(f"n_alpha(k) = 0 for k={kv}, alpha={alpha}")
    return _pair_matrix(basis, pairs, 1.0 / math.sqrt(len(pairs)))


def number_operator_matrix(basis: FockBasis, kind: str = "all") -> sparse.csr_matrix:
    if kind == "all":
        select = np.ones(basis.n_modes, dtype=bool)
    elif kind in ("particles", "holes"):
        if basis.hole_flags is None:
            raise ValidationError("particle and hole numbers need a particle-hole basis")
        select = basis.hole_flags if kind == "holes" else ~basis.hole_flags
    else:
        raise ValidationError(f"number operator kind must be all, particles or holes, got {kind!r}")
    chosen = sum(1 << j for j in np.flatnonzero(select).tolist())
    counts = np.array([bin(m & chosen).count("1") for m in basis.states], dtype=float)
    return sparse.diags(counts, format="csr")


def vacuum_state(basis: FockBasis) -> FockState:
    idx = basis.index_of(0)
    if idx is None:
        raise ValidationError("basis does not contain the vacuum")
    amps = np.zeros(basis.dimension, dtype=np.complex128)
    amps[idx] = 1.0
    return FockState(basis, amps)


def build_excitation_basis(spec: PairExcitationSpec, pd: PatchDecomposition, fb: FermiBall,
                           dimension_cap: int = DEFAULT_DIMENSION_CAP) -> FockBasis:
    """Smallest pair basis that holds every c*(phi_1) ... c*(phi_m) Omega in the excitation spec."""
    entries = [(k, alpha) for phi in spec.states for k, alpha, _ in phi.entries()]
    modes = particle_hole_modes(pd, fb, entries)
    pairs = [pair for key in sorted(modes) for pair in modes[key]]
    return build_pair_basis(pairs, spec.m, dimension_cap)


def materialize_pair_state(spec: PairExcitationSpec, pd: PatchDecomposition, fb: FermiBall,
                           basis: FockBasis) -> Tuple[FockState, float]:
    """xi = c*(phi_1) ... c*(phi_m) Omega / Z_m; returns (xi, Z_m)."""
    if spec.m > (basis.max_pairs or 0):
        raise ValidationError(f"basis holds at most {basis.max_pairs} pairs, state needs {spec.m}")
    cache: Dict[Tuple[Vector, int], sparse.csr_matrix] = {}
    psi = vacuum_state(basis).amplitudes
    for phi in reversed(spec.states):
        op = sparse.csr_matrix((basis.dimension, basis.dimension), dtype=np.complex128)
        for k, alpha, amp in phi.entries():
            key = (k, alpha)
            if key not in cache:
                cache[key] = pair_operator_matrix(k, alpha, pd, fb, basis)
            op = op + amp * cache[key]
        psi = op @ psi
    z = float(np.linalg.norm(psi))
    if z == 0.0:
        raise NumericalError("pair excitation state vanished")
    return FockState(basis, psi / z), z
