# backend/hartree_fock.py
"""
Time-dependent Hartree-Fock on the torus, plane-wave basis.

Fourier convention (used identically by the direct term, the exchange
term and phase_space.mean_field_force):

    e_k(x)   = (2 pi)^(-d/2) exp(i k.x)
    V(x)     = sum_k V(k) exp(i k.x)
    (V*rho)  = integral over [0, 2 pi)^d of V(x - y) rho(y) dy

With this choice the constant in front of V(k) is c_d = 1:

    <k| (1/N) V*rho |k'> = (1/N) V(k - k') rho(k - k'),   rho(q) = sum_m w[m+q, m]
    X[k, k']              = (1/N) sum_q V(q) w[k-q, k'-q]

Worked one-mode example: rho(x) = cos x, V(+-1) = v gives V*rho = 2 pi v cos x.

Matrix entries whose index leaves the lattice are dropped, the same rule
the exact oracle applies to its Fock Hamiltonian.
"""
import functools
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import eigh, svdvals

from backend.errors import NumericalError, ValidationError
from backend.lattice_core import FermiBall, MomentumLattice, Potential, ScalingConstants

logger = logging.getLogger("hartree_fock")

FOURIER_CONSTANT = 1.0


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Hermitian one-particle operator over an ordered plane-wave lattice basis."""

    matrix: np.ndarray
    lattice: MomentumLattice
    hbar: float
    basis: str = "plane-wave"
    _trace: float = field(init=False, repr=False, default=0.0)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.complex128)
        if m.shape != (len(self.lattice), len(self.lattice)):
            raise ValidationError(f"density matrix shape {m.shape} does not match basis of {len(self.lattice)}")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_trace", float(np.real(np.trace(m))))

    @property
    def trace(self) -> float:
        return self._trace

    def hermiticity_residual(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T))) if self.matrix.size else 0.0

    def idempotency_residual(self) -> float:
        """Hilbert-Schmidt norm of w^2 - w."""
        return float(np.linalg.norm(self.matrix @ self.matrix - self.matrix))

    def spectrum(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.conj().T))

    def is_projector(self, tol: float = 1e-10) -> bool:
        return self.hermiticity_residual() <= 1e-13 and self.idempotency_residual() <= tol

    def check_spectrum(self, tol: float = 1e-8):
        ev = self.spectrum()
        if ev.size and (ev[0] < -tol or ev[-1] > 1.0 + tol):
            raise NumericalError(f"density matrix spectrum left [0, 1]: min {ev[0]:.3e}, max {ev[-1]:.3e}")

    def with_matrix(self, matrix: np.ndarray) -> "DensityMatrix":
        return DensityMatrix(matrix=matrix, lattice=self.lattice, hbar=self.hbar, basis=self.basis)


@dataclass(frozen=True)
class HfTrajectory:
    times: np.ndarray
    states: Tuple[DensityMatrix, ...]
    energies: np.ndarray
    include_exchange: bool
    midpoint_iterations: int

    @property
    def final(self) -> DensityMatrix:
        return self.states[-1]

    def summary_frame(self, n_particles: Optional[float] = None) -> pd.DataFrame:
        return pd.DataFrame({
            "t": self.times,
            "trace": [s.trace for s in self.states],
            "energy": self.energies,
            "idempotency": [s.idempotency_residual() for s in self.states],
        })


# -------------------------
# Basis helpers
# -------------------------
@functools.lru_cache(maxsize=512)
def _shift_table(lattice: MomentumLattice, q: Tuple[int, ...]) -> np.ndarray:
    return lattice.shift_index(q)


def _check_potential(lattice: MomentumLattice, V: Potential):
    if V.dimension is not None and V.dimension != lattice.dimension:
        raise ValidationError(f"potential dimension {V.dimension} does not match lattice dimension {lattice.dimension}")


def validate_truncation(lattice: MomentumLattice, fb: FermiBall, V: Potential):
    """K_cut must reach k_F + diam supp V so scattering off the ball stays in the basis."""
    needed = fb.k_f + V.support_radius
    if lattice.k_cut + 1e-12 < needed:
        raise ValidationError(
            f"basis cutoff K_cut={lattice.k_cut} below k_F + diam supp V = {needed:.6g}"
        )


def kinetic_matrix(lattice: MomentumLattice, hbar: float) -> np.ndarray:
    return np.diag(hbar ** 2 * lattice.norms_squared.astype(float))


def fermi_ball_density_matrix(lattice: MomentumLattice, fb: FermiBall, hbar: float) -> DensityMatrix:
    occ = fb.member_mask(lattice.vectors).astype(float)
    if int(occ.sum()) != fb.n_particles:
        raise ValidationError("lattice does not contain the whole Fermi ball")
    return DensityMatrix(matrix=np.diag(occ), lattice=lattice, hbar=hbar)


def density_matrix_from_orbitals(lattice: MomentumLattice, orbitals: np.ndarray, hbar: float) -> DensityMatrix:
    """Projector sum_j |phi_j><phi_j| for orthonormal columns phi_j."""
    phi = np.asarray(orbitals, dtype=np.complex128)
    return DensityMatrix(matrix=phi @ phi.conj().T, lattice=lattice, hbar=hbar)


def confinement_matrix(lattice: MomentumLattice, strength: float) -> np.ndarray:
    """Matrix of -u * sum_axes cos(x_axis) in the plane-wave basis."""
    n = len(lattice)
    mat = np.zeros((n, n))
    for axis in range(lattice.dimension):
        e = [0] * lattice.dimension
        e[axis] = 1
        idx = _shift_table(lattice, tuple(e))
        rows = np.nonzero(idx >= 0)[0]
        mat[rows, idx[rows]] -= 0.5 * strength
        mat[idx[rows], rows] -= 0.5 * strength
    return mat


def trap_orbitals(lattice: MomentumLattice, n_particles: int, hbar: float, strength: float) -> np.ndarray:
    """Lowest n_particles eigenvectors of hbar^2 |k|^2 - u sum cos(x)."""
    if not 0 < n_particles <= len(lattice):
        raise ValidationError(f"cannot place {n_particles} particles in {len(lattice)} modes")
    h = kinetic_matrix(lattice, hbar) + confinement_matrix(lattice, strength)
    evals, evecs = eigh(h)
    if n_particles < len(lattice) and abs(evals[n_particles] - evals[n_particles - 1]) < 1e-10:
        logger.warning(f"trap ground state is degenerate at the Fermi level (gap {evals[n_particles] - evals[n_particles - 1]:.2e})")
    return evecs[:, :n_particles]


def trap_ground_density_matrix(lattice: MomentumLattice, n_particles: int, hbar: float,
                               strength: float) -> DensityMatrix:
    return density_matrix_from_orbitals(lattice, trap_orbitals(lattice, n_particles, hbar, strength), hbar)


def extract_orbitals(omega: DensityMatrix, n: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Occupations and natural orbitals, largest occupation first."""
    evals, evecs = eigh(0.5 * (omega.matrix + omega.matrix.conj().T))
    order = np.argsort(evals)[::-1]
    if n is not None:
        order = order[:n]
    return evals[order], evecs[:, order]


def number_check(omega: DensityMatrix, n_particles: float) -> float:
    return abs(omega.trace - n_particles)


def spatial_second_moment(omega: DensityMatrix, axis: int = 0) -> float:
    """tr (x_axis - pi)^2 w, with (x - pi)^2 expanded on the periodic cell."""
    vec = omega.lattice.vectors
    diff = vec[:, None, :] - vec[None, :, :]
    others = np.delete(diff, axis, axis=2)
    same_rest = np.all(others == 0, axis=2) if others.shape[2] else np.ones(diff.shape[:2], dtype=bool)
    q = diff[:, :, axis].astype(float)
    with np.errstate(divide="ignore"):
        coeff = np.where(q == 0, math.pi ** 2 / 3.0, 2.0 / np.where(q == 0, 1.0, q) ** 2)
    op = np.where(same_rest, coeff, 0.0)
    return float(np.real(np.trace(op @ omega.matrix)))


# -------------------------
# Mean-field terms
# -------------------------
def density_fourier(omega: DensityMatrix, q: Sequence[int]) -> complex:
    """rho(q) = sum_m w[m+q, m]."""
    plus = _shift_table(omega.lattice, tuple(-c for c in q))
    cols = np.nonzero(plus >= 0)[0]
    return complex(np.sum(omega.matrix[plus[cols], cols]))


def direct_term(omega: DensityMatrix, V: Potential, n_particles: float) -> np.ndarray:
    lattice = omega.lattice
    _check_potential(lattice, V)
    out = np.zeros_like(omega.matrix)
    for q, v in V.items():
        rho_q = density_fourier(omega, q)
        plus = _shift_table(lattice, tuple(-c for c in q))
        cols = np.nonzero(plus >= 0)[0]
        out[plus[cols], cols] += FOURIER_CONSTANT * v * rho_q / n_particles
    return out


def exchange_term(omega: DensityMatrix, V: Potential, n_particles: float) -> np.ndarray:
    lattice = omega.lattice
    _check_potential(lattice, V)
    out = np.zeros_like(omega.matrix)
    for q, v in V.items():
        minus = _shift_table(lattice, q)
        valid = np.nonzero(minus >= 0)[0]
        out[np.ix_(valid, valid)] += (FOURIER_CONSTANT * v / n_particles) * omega.matrix[np.ix_(minus[valid], minus[valid])]
    return out


def hf_generator(omega: DensityMatrix, V: Potential, n_particles: float,
                 include_exchange: bool = True) -> np.ndarray:
    h = kinetic_matrix(omega.lattice, omega.hbar).astype(np.complex128)
    if V.is_free:
        return h
    h += direct_term(omega, V, n_particles)
    if include_exchange:
        h -= exchange_term(omega, V, n_particles)
    return h


def hf_energy(omega: DensityMatrix, V: Potential, n_particles: float, include_exchange: bool = True) -> float:
    w = omega.matrix
    energy = np.real(np.trace(kinetic_matrix(omega.lattice, omega.hbar) @ w))
    if not V.is_free:
        energy += 0.5 * np.real(np.trace(direct_term(omega, V, n_particles) @ w))
        if include_exchange:
            energy -= 0.5 * np.real(np.trace(exchange_term(omega, V, n_particles) @ w))
    return float(energy)


def plane_wave_energy(fb: FermiBall, V: Potential, sc: ScalingConstants, include_exchange: bool = True) -> float:
    """hf_energy of the Fermi-ball projector, evaluated without a basis."""
    members = fb.members
    n = fb.n_particles
    kinetic = sc.hbar ** 2 * float(np.sum(members * members))
    direct = 0.5 * V.value((0,) * fb.dimension) * n
    exchange = 0.0
    if include_exchange:
        for q, v in V.items():
            exchange += v * int(np.sum(fb.member_mask(members - np.asarray(q))))
        exchange *= 0.5 / n
    return kinetic + direct - exchange


def trace_norm_distance(a: DensityMatrix, b: DensityMatrix) -> float:
    if a.lattice is not b.lattice and not np.array_equal(a.lattice.vectors, b.lattice.vectors):
        raise ValidationError("trace-norm distance needs both matrices in the same basis")
    return float(np.sum(svdvals(a.matrix - b.matrix)))


# -------------------------
# Time evolution
# -------------------------
def _propagator(h: np.ndarray, dt: float, hbar: float) -> np.ndarray:
    evals, evecs = eigh(0.5 * (h + h.conj().T))
    return (evecs * np.exp(-1j * dt * evals / hbar)) @ evecs.conj().T


def free_evolution(omega0: DensityMatrix, t: float) -> DensityMatrix:
    phase = np.exp(-1j * t * omega0.hbar * omega0.lattice.norms_squared)
    return omega0.with_matrix(phase[:, None] * omega0.matrix * phase.conj()[None, :])


def _time_grid(t_final: float, dt: float) -> Tuple[int, float]:
    if dt <= 0:
        raise ValidationError(f"time step must be positive, got dt={dt}")
    if t_final < 0:
        raise ValidationError(f"t_final must be non-negative, got {t_final}")
    n_steps = int(round(t_final / dt))
    if n_steps and abs(n_steps * dt - t_final) > 1e-9 * max(t_final, 1.0):
        n_steps = int(math.ceil(t_final / dt))
    step = t_final / n_steps if n_steps else dt
    if n_steps and abs(step - dt) > 1e-12 * dt:
        logger.info(f"time step adjusted from {dt} to {step} to land on t_final={t_final}")
    return n_steps, step


def hf_evolve(omega0: DensityMatrix, V: Potential, t_final: float, dt: float,
              include_exchange: bool = True, midpoint_iters: int = 50, tol: float = 1e-12,
              n_particles: Optional[float] = None, record_every: int = 1) -> HfTrajectory:
    """Self-consistent midpoint propagation w -> U w U*, U = exp(-i dt h((w + w')/2) / hbar)."""
    if omega0.hermiticity_residual() > 1e-10:
        raise ValidationError("initial density matrix is not Hermitian")
    omega0.check_spectrum()
    n = float(n_particles) if n_particles is not None else omega0.trace
    n_steps, step = _time_grid(t_final, dt)
    hbar = omega0.hbar

    w = omega0.matrix
    times: List[float] = [0.0]
    states: List[DensityMatrix] = [omega0]
    energies: List[float] = [hf_energy(omega0, V, n, include_exchange)]
    total_iters = 0

    for step_no in range(1, n_steps + 1):
        w_next = w
        residual = np.inf
        for _ in range(max(1, midpoint_iters)):
            mid = omega0.with_matrix(0.5 * (w + w_next))
            u = _propagator(hf_generator(mid, V, n, include_exchange), step, hbar)
            candidate = u @ w @ u.conj().T
            residual = float(np.linalg.norm(candidate - w_next))
            w_next = candidate
            total_iters += 1
            if residual < tol or V.is_free:
                break
        else:
            raise NumericalError(
                f"midpoint iteration did not converge at step {step_no}: residual {residual:.3e} > tol {tol:.1e}"
            )
        if not np.all(np.isfinite(w_next)):
            raise NumericalError(f"non-finite density matrix at step {step_no}")
        w = w_next
        if step_no % record_every == 0 or step_no == n_steps:
            state = omega0.with_matrix(w)
            state.check_spectrum()
            times.append(step_no * step)
            states.append(state)
            energies.append(hf_energy(state, V, n, include_exchange))
            logger.debug(f"hf step {step_no}/{n_steps}: energy {energies[-1]:.15g}")

    return HfTrajectory(times=np.asarray(times), states=tuple(states), energies=np.asarray(energies),
                        include_exchange=include_exchange, midpoint_iterations=total_iters)
