# backend/phase_space.py
"""
Phase Space

Wigner transform and Weyl quantization of plane-wave density matrices,
the W^{1,1} norm, the self-consistent force and a Strang-split Vlasov
solver for

    d/dt f + 2p . grad_x f = -F . grad_p f,    F = -grad(V * rho_f)

Note the transport velocity is 2p (kinetic energy |p|^2, no 1/2m).

Grid: x_j = 2 pi j / n_x on [0, 2 pi)^d and p_s = hbar s / 2 for integer
s in [-s_max, s_max]. Plane-wave data has its Wigner function on the
half-integer lattice hbar (a + b) / 2, so this grid represents it
exactly and the Wigner/Weyl pair is a bijection on it.

Normalization: sum f * cell_volume = hbar^d tr(gamma).
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from backend.errors import NumericalError, ResourceCapError, ValidationError
from backend.hartree_fock import FOURIER_CONSTANT, DensityMatrix
from backend.lattice_core import FermiBall, MomentumLattice, Potential, as_vector

logger = logging.getLogger("phase_space")

MAX_GRID_POINTS = 50_000_000


@dataclass(frozen=True)
class PhaseSpaceGrid:
    dimension: int
    n_x: int
    s_max: int
    hbar: float

    @property
    def n_p(self) -> int:
        return 2 * self.s_max + 1

    @property
    def dx(self) -> float:
        return 2.0 * math.pi / self.n_x

    @property
    def dp(self) -> float:
        return 0.5 * self.hbar

    @property
    def cell_volume(self) -> float:
        return (self.dx * self.dp) ** self.dimension

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.n_x,) * self.dimension + (self.n_p,) * self.dimension

    @property
    def x_axis(self) -> np.ndarray:
        return self.dx * np.arange(self.n_x)

    @property
    def p_axis(self) -> np.ndarray:
        return self.dp * np.arange(-self.s_max, self.s_max + 1)

    @property
    def x_axes(self) -> Tuple[int, ...]:
        return tuple(range(self.dimension))

    @property
    def p_axes(self) -> Tuple[int, ...]:
        return tuple(range(self.dimension, 2 * self.dimension))

    def momentum_mesh(self, axis: int) -> np.ndarray:
        """p_axis broadcast to the full phase-space shape along momentum axis `axis`."""
        shape = [1] * (2 * self.dimension)
        shape[self.dimension + axis] = self.n_p
        return self.p_axis.reshape(shape)


@dataclass(frozen=True, eq=False)
class PhaseSpaceDensity:
    values: np.ndarray
    grid: PhaseSpaceGrid

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValidationError(f"phase-space array shape {vals.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", vals)

    @property
    def hbar(self) -> float:
        return self.grid.hbar

    def mass(self) -> float:
        return float(np.sum(self.values) * self.grid.cell_volume)

    def spatial_density(self) -> np.ndarray:
        return np.sum(self.values, axis=self.grid.p_axes) * self.grid.dp ** self.grid.dimension


# -------------------------
# Grid construction
# -------------------------
def phase_space_grid(lattice: MomentumLattice, hbar: float, headroom: float = 2.0,
                     n_x: Optional[int] = None) -> PhaseSpaceGrid:
    """Smallest alias-free grid for the lattice, momentum box widened by `headroom`."""
    k_max = max(lattice.max_component, 1)
    min_nx = 4 * k_max + 1
    if n_x is None:
        n_x = max(min_nx, 9)
        if n_x % 2 == 0:
            n_x += 1
    s_max = int(math.ceil(2.0 * headroom * k_max))
    grid = PhaseSpaceGrid(dimension=lattice.dimension, n_x=int(n_x), s_max=s_max, hbar=float(hbar))
    _check_grid(grid, lattice)
    total = int(np.prod(grid.shape))
    if total > MAX_GRID_POINTS:
        raise ResourceCapError(f"phase-space grid of {total} points exceeds cap {MAX_GRID_POINTS}")
    return grid


def _check_grid(grid: PhaseSpaceGrid, lattice: MomentumLattice):
    if grid.dimension != lattice.dimension:
        raise ValidationError(f"grid dimension {grid.dimension} does not match lattice dimension {lattice.dimension}")
    k_max = lattice.max_component
    if grid.s_max < 2 * k_max:
        raise ValidationError(
            f"momentum grid too small: s_max={grid.s_max} cannot hold hbar*(a+b)/2 up to index {2 * k_max}"
        )
    if grid.n_x < 4 * k_max + 1:
        raise ValidationError(f"spatial grid n_x={grid.n_x} aliases frequencies up to {2 * k_max}; need >= {4 * k_max + 1}")


def _pair_indices(lattice: MomentumLattice, grid: PhaseSpaceGrid):
    vec = lattice.vectors
    s = vec[:, None, :] + vec[None, :, :]
    q = vec[:, None, :] - vec[None, :, :]
    d = grid.dimension
    s_idx = tuple((s[..., i] + grid.s_max).ravel() for i in range(d))
    q_idx = tuple((q[..., i] % grid.n_x).ravel() for i in range(d))
    return s_idx + q_idx


def _swap_halves(values: np.ndarray, d: int) -> np.ndarray:
    """(x..., p...) <-> (p..., x...)."""
    return np.transpose(values, tuple(range(d, 2 * d)) + tuple(range(d)))


# -------------------------
# Wigner / Weyl
# -------------------------
def wigner_transform(gamma: DensityMatrix, grid: PhaseSpaceGrid, hbar: Optional[float] = None) -> PhaseSpaceDensity:
    hbar = gamma.hbar if hbar is None else hbar
    if hbar <= 0:
        raise ValidationError(f"hbar must be positive, got {hbar}")
    if not math.isclose(hbar, grid.hbar, rel_tol=1e-12):
        raise ValidationError(f"grid built for hbar={grid.hbar}, density matrix carries hbar={hbar}")
    if gamma.hermiticity_residual() > 1e-10:
        raise ValidationError("Wigner transform needs a Hermitian density matrix")
    _check_grid(grid, gamma.lattice)
    d = grid.dimension

    coeffs = np.zeros((grid.n_p,) * d + (grid.n_x,) * d, dtype=np.complex128)
    np.add.at(coeffs, _pair_indices(gamma.lattice, grid), gamma.matrix.ravel())
    x_axes = tuple(range(d, 2 * d))
    field_px = sfft.ifftn(coeffs, axes=x_axes) * (grid.n_x ** d) / math.pi ** d
    imag = float(np.max(np.abs(field_px.imag))) if field_px.size else 0.0
    if imag > 1e-10 * max(1.0, float(np.max(np.abs(field_px.real)))):
        logger.warning(f"Wigner transform has imaginary residue {imag:.2e}")
    f = PhaseSpaceDensity(values=_swap_halves(field_px.real, d), grid=grid)
    neg = wigner_negativity(f)
    if neg > 0:
        logger.debug(f"Wigner function carries negative mass fraction {neg:.3e}")
    return f


def weyl_quantize(f: PhaseSpaceDensity, lattice: MomentumLattice) -> DensityMatrix:
    """Exact inverse of wigner_transform on the lattice.

    The kernel is gamma(x; y) = hbar^(-d) * integral f((x + y) / 2, p) exp(i p.(x - y) / hbar) dp.
    No particle number is taken: the prefactor N is read as hbar^(-d), which
    equals N in bulk units. Under the rpa convention pass f built with that
    scenario's hbar and the prefactor follows it.
    """
    grid = f.grid
    try:
        _check_grid(grid, lattice)
    except ValidationError as e:
        raise ValidationError(f"incompatible grids for Weyl quantization: {e}") from e
    d = grid.dimension
    x_axes = tuple(range(d, 2 * d))
    coeffs = sfft.fftn(_swap_halves(f.values, d), axes=x_axes) / (grid.n_x ** d)
    n = len(lattice)
    matrix = (math.pi ** d) * coeffs[_pair_indices(lattice, grid)].reshape(n, n)
    return DensityMatrix(matrix=matrix, lattice=lattice, hbar=grid.hbar)


def fermi_ball_density(fb: FermiBall, grid: PhaseSpaceGrid) -> PhaseSpaceDensity:
    """(2 pi)^(-d) momentum indicator of hbar * B_F, per lattice-momentum cell hbar^d.

    On the half-spaced grid the whole cell weight sits on the site s = 2k,
    so the site value is (2 pi)^(-d) (hbar / dp)^d = pi^(-d).
    """
    d = grid.dimension
    values = np.zeros(grid.shape)
    site_value = (2.0 * math.pi) ** (-d) * (grid.hbar / grid.dp) ** d
    for k in fb.members.tolist():
        idx = tuple(2 * c + grid.s_max for c in k)
        if any(i < 0 or i >= grid.n_p for i in idx):
            raise ValidationError(f"Fermi ball momentum {tuple(k)} lies outside the momentum grid")
        values[(Ellipsis,) + idx] = site_value
    return PhaseSpaceDensity(values=values, grid=grid)


def wigner_negativity(f: PhaseSpaceDensity) -> float:
    """Fraction of the L1 mass carried by negative cells."""
    total = float(np.sum(np.abs(f.values)))
    if total == 0.0:
        return 0.0
    return float(-np.sum(f.values[f.values < 0])) / total


# -------------------------
# Norms and force
# -------------------------
def _centered_difference(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2.0 * h)


def w11_norm(f: PhaseSpaceDensity) -> float:
    grid = f.grid
    total = np.sum(np.abs(f.values))
    for axis in grid.x_axes:
        total += np.sum(np.abs(_centered_difference(f.values, axis, grid.dx)))
    for axis in grid.p_axes:
        total += np.sum(np.abs(_centered_difference(f.values, axis, grid.dp)))
    return float(total * grid.cell_volume)


def mean_field_force(f: PhaseSpaceDensity, V: Potential) -> np.ndarray:
    """F = -grad(V * rho_f), shape (d,) + (n_x,)*d, computed on spatial Fourier modes."""
    grid = f.grid
    d = grid.dimension
    force = np.zeros((d,) + (grid.n_x,) * d)
    if V.is_free:
        return force
    if V.dimension is not None and V.dimension != d:
        raise ValidationError(f"potential dimension {V.dimension} does not match grid dimension {d}")
    rho_hat = sfft.fftn(f.spatial_density()) / (grid.n_x ** d)
    for axis in range(d):
        grad_hat = np.zeros((grid.n_x,) * d, dtype=np.complex128)
        for q, v in V.items():
            if any(2 * abs(c) >= grid.n_x for c in q):
                raise ValidationError(f"potential mode {q} is not resolved by n_x={grid.n_x}")
            idx = tuple(c % grid.n_x for c in q)
            conv = FOURIER_CONSTANT * (2.0 * math.pi) ** d * v * rho_hat[idx]
            grad_hat[idx] += 1j * q[axis] * conv
        force[axis] = -np.real(sfft.ifftn(grad_hat) * grid.n_x ** d)
    return force


# -------------------------
# Vlasov evolution
# -------------------------
def _transport(values: np.ndarray, grid: PhaseSpaceGrid, tau: float) -> np.ndarray:
    """f(x, p) -> f(x - 2 p tau, p), exact on the spatial Fourier modes."""
    d = grid.dimension
    spectrum = sfft.fftn(values, axes=grid.x_axes)
    freq = sfft.fftfreq(grid.n_x, d=1.0 / grid.n_x)
    phase = np.zeros(grid.shape)
    for axis in range(d):
        shape = [1] * (2 * d)
        shape[axis] = grid.n_x
        phase = phase + freq.reshape(shape) * grid.momentum_mesh(axis)
    spectrum *= np.exp(-2j * tau * phase)
    return np.real(sfft.ifftn(spectrum, axes=grid.x_axes))


def _kick(values: np.ndarray, grid: PhaseSpaceGrid, force: np.ndarray, dt: float) -> np.ndarray:
    """Semi-Lagrangian p -> p - F(x) dt with periodic cubic splines in p."""
    d = grid.dimension
    out = np.empty_like(values)
    for x_index in np.ndindex(*(grid.n_x,) * d):
        shift = [force[(axis,) + x_index] * dt / grid.dp for axis in range(d)]
        out[x_index] = ndimage.shift(values[x_index], shift, order=3, mode="grid-wrap")
    return out


def vlasov_evolve(f0: PhaseSpaceDensity, V: Potential, t_final: float, dt: float) -> PhaseSpaceDensity:
    """Strang splitting: half transport, force kick, half transport."""
    if dt <= 0:
        raise ValidationError(f"time step must be positive, got dt={dt}")
    grid = f0.grid
    n_steps = int(round(t_final / dt))
    if n_steps == 0:
        return f0
    step = t_final / n_steps

    p_max = float(np.max(np.abs(grid.p_axis)))
    if 2.0 * p_max * step > grid.dx:
        logger.warning(f"CFL check: 2 p_max dt = {2.0 * p_max * step:.3g} exceeds dx = {grid.dx:.3g}")

    mass0 = f0.mass()
    values = f0.values.copy()
    for step_no in range(1, n_steps + 1):
        values = _transport(values, grid, 0.5 * step)
        if not V.is_free:
            force = mean_field_force(PhaseSpaceDensity(values, grid), V)
            if step_no == 1 and float(np.max(np.abs(force))) * step > grid.dp:
                logger.warning("CFL check: force kick moves more than one momentum cell per step")
            values = _kick(values, grid, force, step)
        values = _transport(values, grid, 0.5 * step)
        if not np.all(np.isfinite(values)):
            raise NumericalError(f"Vlasov solution blew up at step {step_no} (t={step_no * step:.6g})")
        if step_no % 100 == 0:
            logger.debug(f"vlasov step {step_no}/{n_steps}")

    f = PhaseSpaceDensity(values=values, grid=grid)
    logger.info(f"vlasov: {n_steps} steps, relative mass drift {abs(f.mass() - mass0) / max(abs(mass0), 1e-300):.2e}")
    return f


# -------------------------
# Observable
# -------------------------
def semiclassical_observable(gamma: DensityMatrix, alpha: Sequence[float], beta: Sequence[float],
                             hbar: Optional[float] = None) -> complex:
    """tr exp(i(alpha.x + beta.p)) gamma.

    On the torus alpha must be a lattice vector. The Weyl operator then acts
    as <k + alpha| exp(i(alpha.x + beta.p)) |k> = exp(i hbar beta.(k + alpha/2)).
    """
    hbar = gamma.hbar if hbar is None else hbar
    lattice = gamma.lattice
    a = as_vector(alpha)
    b = np.asarray(beta, dtype=float)
    if len(a) != lattice.dimension or b.shape != (lattice.dimension,):
        raise ValidationError("alpha and beta must match the lattice dimension")
    target = lattice.shift_index(tuple(-c for c in a))
    rows = np.nonzero(target >= 0)[0]
    k = lattice.vectors[rows].astype(float) + 0.5 * np.asarray(a, dtype=float)
    phases = np.exp(1j * hbar * (k @ b))
    return complex(np.sum(phases * gamma.matrix[rows, target[rows]]))


def observable_gap(gamma: DensityMatrix, f: PhaseSpaceDensity, alpha: Sequence[float],
                   beta: Sequence[float]) -> Tuple[complex, complex, float]:
    """Quantum value, Weyl-quantized phase-space value and their distance."""
    quantum = semiclassical_observable(gamma, alpha, beta)
    classical = semiclassical_observable(weyl_quantize(f, gamma.lattice), alpha, beta)
    return quantum, classical, abs(quantum - classical)
