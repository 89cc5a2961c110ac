# backend/rpa.py
"""
Bosonization pipeline in the random phase approximation (d = 3).

Per momentum k in the northern half of supp V:
  index sets I_k = I_k^+ followed by I_{-k}^+,
  pair counts n_alpha(k),
  block matrices D, W, W~ and the Bogoliubov kernel E, S, K,
  the diagonalized block and its off-diagonal residual.

Scenario-level evaluation fans the modes out over a thread pool and
joins them in the order of Gamma^nor.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import factorial2

from backend.errors import NumericalError, ValidationError
from backend.lattice_core import (
    FermiBall,
    HbarConvention,
    Potential,
    ScalingConstants,
    Vector,
    as_vector,
)
from backend.patches import PatchDecomposition

logger = logging.getLogger("rpa")

DEFAULT_DELTA = 2.0 / 45.0
PD_TOLERANCE = 1e-12


class IndexSets(NamedTuple):
    plus: Tuple[int, ...]
    minus: Tuple[int, ...]
    combined: Tuple[int, ...]


class PairCount(NamedTuple):
    n_exact: float
    n_approx: float
    count: int


@dataclass(frozen=True, eq=False)
class RpaBlock:
    """Quadratic block of one boson mode k; matrices are indexed by I_k."""

    k: Vector
    index_sets: IndexSets
    normalizations: np.ndarray
    D: np.ndarray
    W: np.ndarray
    W_tilde: np.ndarray
    E: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    curly_k: Optional[np.ndarray] = None
    residual: Optional[np.ndarray] = None

    @property
    def indices(self) -> Tuple[int, ...]:
        return self.index_sets.combined

    @property
    def size(self) -> int:
        return len(self.index_sets.combined)

    @property
    def k_norm(self) -> float:
        return math.sqrt(sum(c * c for c in self.k))

    @property
    def solved(self) -> bool:
        return self.E is not None


class DroppedMode(NamedTuple):
    k: Vector
    reason: str


@dataclass(frozen=True)
class BosonState:
    """Amplitudes phi(k)_alpha, one vector per mode aligned with I_k."""

    amplitudes: Mapping[Vector, np.ndarray]
    patches: Mapping[Vector, Tuple[int, ...]]

    def norm(self) -> float:
        return math.sqrt(sum(float(np.vdot(v, v).real) for v in self.amplitudes.values()))

    def normalized(self) -> "BosonState":
        n = self.norm()
        if n == 0.0:
            raise ValidationError("cannot normalize the zero boson state")
        return BosonState({k: v / n for k, v in self.amplitudes.items()}, dict(self.patches))

    def entries(self):
        """(k, alpha, amplitude) over the support."""
        for k in sorted(self.amplitudes):
            for alpha, amp in zip(self.patches[k], self.amplitudes[k]):
                if amp != 0:
                    yield k, alpha, complex(amp)


@dataclass(frozen=True)
class PairExcitationSpec:
    states: Tuple[BosonState, ...]
    m: int
    m_condition_value: int
    m_condition_threshold: float

    @property
    def m_condition_satisfied(self) -> bool:
        return self.m_condition_value < self.m_condition_threshold


@dataclass(frozen=True, eq=False)
class RpaEvaluation:
    blocks: Dict[Vector, RpaBlock]
    dropped: List[DroppedMode]
    contributions: Dict[Vector, float]
    energy: float
    n_particles: int
    k_f: float
    n_patches: int
    delta: float
    hbar: float
    kappa: float
    extras: Dict[str, float] = field(default_factory=dict)


# -------------------------
# Symmetric matrix functions
# -------------------------
def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _matrix_function(a: np.ndarray, fn, name: str, positive: bool = False) -> np.ndarray:
    vals, vecs = np.linalg.eigh(_sym(a))
    if positive:
        scale = max(1.0, float(np.max(np.abs(vals)))) if vals.size else 1.0
        if vals.size and vals[0] <= PD_TOLERANCE * scale:
            raise NumericalError(f"{name} lost positive definiteness: minimum eigenvalue {vals[0]:.3e}")
    return _sym((vecs * fn(vals)) @ vecs.T)


def _cosh_sinh(K: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(_sym(K))
    return (vecs * np.cosh(vals)) @ vecs.T, (vecs * np.sinh(vals)) @ vecs.T


# -------------------------
# Index sets and pair counts
# -------------------------
def _check_rpa_inputs(pd: PatchDecomposition, fb: FermiBall):
    if fb.dimension != 3:
        raise ValidationError(f"bosonization needs d = 3, got d = {fb.dimension}")
    if not math.isclose(pd.k_f, fb.k_f):
        raise ValidationError(f"patches built for k_F={pd.k_f}, Fermi ball has k_F={fb.k_f}")


def index_sets(k: Sequence[int], pd: PatchDecomposition, delta: float, n_particles: int) -> IndexSets:
    """I_k^+ = {alpha : k . w_alpha / |w_alpha| >= N^-delta}, same for -k."""
    if delta <= 0:
        raise ValidationError(f"cut-off exponent delta must be positive, got {delta}")
    kv = np.asarray(as_vector(k), dtype=float)
    threshold = float(n_particles) ** (-delta)
    dots = pd.unit_centers @ kv
    plus = tuple(int(a) for a in np.flatnonzero(dots >= threshold))
    minus = tuple(int(a) for a in np.flatnonzero(-dots >= threshold))
    if not plus and not minus:
        logger.warning(f"index set I_k is empty for k={tuple(k)} at threshold {threshold:.4g}")
    return IndexSets(plus=plus, minus=minus, combined=plus + minus)


def _orientation(k: Sequence[int], alpha: int, pd: PatchDecomposition) -> Tuple[int, float]:
    dot = float(pd.unit_centers[alpha] @ np.asarray(k, dtype=float))
    return (1 if dot > 0 else -1), dot


def patch_pairs(k: Sequence[int], alpha: int, pd: PatchDecomposition, fb: FermiBall) -> List[Tuple[Vector, Vector]]:
    """(p, h) in patch alpha, p outside and h inside B_F, with p - h = +k or -k.

    The sign follows the orientation of k relative to the patch center, so
    that c*_alpha(k) is b*_alpha(k) on I_k^+ and b*_alpha(-k) on I_{-k}^+.
    """
    sign, _ = _orientation(k, alpha, pd)
    shift = sign * np.asarray(as_vector(k), dtype=np.int64)
    members = pd.members[alpha]
    holes = members[fb.member_mask(members)]
    candidates = holes + shift
    outside = ~fb.member_mask(candidates) if candidates.size else np.zeros(0, dtype=bool)
    pairs = []
    for p, h, out in zip(candidates.tolist(), holes.tolist(), outside):
        if out and pd.contains(p, alpha):
            pairs.append((tuple(p), tuple(h)))
    return pairs


def approximate_pair_count(k: Sequence[int], alpha: int, pd: PatchDecomposition) -> float:
    _, dot = _orientation(k, alpha, pd)
    return math.sqrt(4.0 * math.pi * pd.k_f ** 2 / pd.n_patches * abs(dot))


def pair_count(k: Sequence[int], alpha: int, pd: PatchDecomposition, fb: FermiBall) -> PairCount:
    count = len(patch_pairs(k, alpha, pd, fb))
    if count == 0:
        raise ValidationError(f"patch {alpha} holds no particle-hole pair for k={tuple(k)}")
    return PairCount(n_exact=math.sqrt(count), n_approx=approximate_pair_count(k, alpha, pd), count=count)


def linearization_residual(k: Sequence[int], alpha: int, pd: PatchDecomposition, fb: FermiBall,
                           sc: ScalingConstants) -> float:
    """max |e(p) - e(h) - 2 hbar^2 k_F k.w^| / (2 hbar^2 k_F |k.w^|) over the patch pairs."""
    pairs = patch_pairs(k, alpha, pd, fb)
    if not pairs:
        raise ValidationError(f"patch {alpha} holds no particle-hole pair for k={tuple(k)}")
    sign, dot = _orientation(k, alpha, pd)
    h2 = sc.hbar ** 2
    linear = 2.0 * h2 * pd.k_f * sign * dot
    worst = 0.0
    for p, h in pairs:
        excitation = h2 * (sum(c * c for c in p) - sum(c * c for c in h))
        worst = max(worst, abs(excitation - linear))
    return worst / abs(linear)


# -------------------------
# Blocks
# -------------------------
def build_blocks(k: Sequence[int], pd: PatchDecomposition, V: Potential, fb: FermiBall,
                 sc: ScalingConstants, delta: float = DEFAULT_DELTA) -> RpaBlock:
    _check_rpa_inputs(pd, fb)
    if HbarConvention(sc.convention) is not HbarConvention.RPA:
        raise ValidationError("block matrices need the rpa hbar convention")
    kv = as_vector(k)
    n_particles = fb.n_particles
    sets = index_sets(kv, pd, delta, n_particles)

    counts = {}
    for alpha in sets.combined:
        c = len(patch_pairs(kv, alpha, pd, fb))
        if c == 0:
            logger.warning(f"k={kv}: patch {alpha} has no pairs, excluded from I_k")
        else:
            counts[alpha] = c
    plus = tuple(a for a in sets.plus if a in counts)
    minus = tuple(a for a in sets.minus if a in counts)
    sets = IndexSets(plus=plus, minus=minus, combined=plus + minus)
    if not sets.combined:
        raise ValidationError(f"mode k={kv} has an empty index set")

    k_norm = math.sqrt(sum(c * c for c in kv))
    unit = pd.unit_centers[list(sets.combined)]
    D = np.diag(np.abs(unit @ np.asarray(kv, dtype=float)) / k_norm)
    n = np.sqrt(np.array([counts[a] for a in sets.combined], dtype=float))
    coupling = V.value(kv) / (2.0 * sc.hbar * sc.kappa * n_particles * k_norm)
    outer = coupling * np.outer(n, n)
    side = np.array([0] * len(plus) + [1] * len(minus))
    same = side[:, None] == side[None, :]
    W = np.where(same, outer, 0.0)
    W_tilde = np.where(same, 0.0, outer)
    logger.debug(f"k={kv}: |I_k^+|={len(plus)} |I_-k^+|={len(minus)} coupling={coupling:.4g}")
    return RpaBlock(k=kv, index_sets=sets, normalizations=n, D=D, W=W, W_tilde=W_tilde)


def bogoliubov_kernel(D: np.ndarray, W: np.ndarray, W_tilde: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """E = [A^1/2 B A^1/2]^1/2, S = A^1/2 E^-1/2, K = log(S S^T)/2 with A = D+W-W~, B = D+W+W~."""
    A = D + W - W_tilde
    B = D + W + W_tilde
    root_a = _matrix_function(A, np.sqrt, "D + W - W~", positive=True)
    E = _matrix_function(root_a @ B @ root_a, np.sqrt, "A^1/2 (D + W + W~) A^1/2", positive=True)
    inv_root_e = _matrix_function(E, lambda x: 1.0 / np.sqrt(x), "E", positive=True)
    S = root_a @ inv_root_e
    K = 0.5 * _matrix_function(S @ S.T, np.log, "S S^T", positive=True)
    return E, S, K


def diagonalized_block(D: np.ndarray, W: np.ndarray, W_tilde: np.ndarray,
                       K: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return the diagonal block and the off-diagonal residual R of the rotated quadratic form."""
    ch, sh = _cosh_sinh(K)
    h = D + W
    curly = ch @ h @ ch + sh @ h @ sh + ch @ W_tilde @ sh + sh @ W_tilde @ ch
    residual = sh @ h @ ch + ch @ h @ sh + ch @ W_tilde @ ch + sh @ W_tilde @ sh
    return _sym(curly), residual


def solve_block(block: RpaBlock) -> RpaBlock:
    E, S, K = bogoliubov_kernel(block.D, block.W, block.W_tilde)
    curly, residual = diagonalized_block(block.D, block.W, block.W_tilde, K)
    return replace(block, E=E, S=S, K=K, curly_k=curly, residual=residual)


def residual_ratio(block: RpaBlock) -> float:
    scale = np.linalg.norm(block.D + block.W)
    return float(np.linalg.norm(block.residual) / scale)


def block_energy_term(block: RpaBlock) -> float:
    """tr(E - D - W) for one mode."""
    return float(np.trace(block.E - block.D - block.W))


def rpa_energy_correction(blocks: Mapping[Vector, RpaBlock], sc: ScalingConstants) -> Tuple[float, Dict[Vector, float]]:
    contributions = {}
    for k, block in blocks.items():
        if not block.solved:
            block = solve_block(block)
        contributions[k] = sc.hbar * sc.kappa * block.k_norm * block_energy_term(block)
    return float(sum(contributions.values())), contributions


def excitation_spectrum(block: RpaBlock, sc: ScalingConstants) -> np.ndarray:
    """Ascending eigenvalues of 2 hbar kappa |k| E(k)."""
    if not block.solved:
        block = solve_block(block)
    return np.sort(2.0 * sc.hbar * sc.kappa * block.k_norm * np.linalg.eigvalsh(_sym(block.E)))


# -------------------------
# One-boson dynamics
# -------------------------
def boson_state(blocks: Mapping[Vector, RpaBlock], amplitudes: Mapping) -> BosonState:
    """Boson state from {k: vector over I_k} or {(k, alpha): amplitude}."""
    vectors: Dict[Vector, np.ndarray] = {}
    patches: Dict[Vector, Tuple[int, ...]] = {}
    for key, value in amplitudes.items():
        if isinstance(key, tuple) and len(key) == 2 and isinstance(key[0], (tuple, list)):
            k, alpha = as_vector(key[0]), int(key[1])
        else:
            k, alpha = as_vector(key), None
        if k not in blocks:
            raise ValidationError(f"boson mode k={k} has no block")
        idx = blocks[k].indices
        vec = vectors.setdefault(k, np.zeros(len(idx), dtype=complex))
        patches[k] = idx
        if alpha is None:
            arr = np.asarray(value, dtype=complex)
            if arr.shape != vec.shape:
                raise ValidationError(f"mode k={k} needs {len(idx)} amplitudes, got {arr.shape}")
            vec[:] = arr
        else:
            if alpha not in idx:
                raise ValidationError(f"patch {alpha} is not in I_k for k={k}")
            vec[idx.index(alpha)] = complex(value)
    return BosonState(vectors, patches)


def boson_evolve(phi: BosonState, blocks: Mapping[Vector, RpaBlock], sc: ScalingConstants,
                 t: float) -> BosonState:
    """phi(k) -> exp(-i t 2 kappa |k| K(k)) phi(k); hbar cancels against the time scale."""
    out = {}
    for k, vec in phi.amplitudes.items():
        block = blocks.get(k)
        if block is None or block.indices != tuple(phi.patches[k]):
            raise ValidationError(f"boson state is supported on unsupported mode k={k}")
        if not block.solved:
            block = solve_block(block)
        vals, vecs = np.linalg.eigh(block.curly_k)
        phase = np.exp(-1j * t * 2.0 * sc.kappa * block.k_norm * vals)
        out[k] = vecs @ (phase * (vecs.conj().T @ vec))
    return BosonState(out, dict(phi.patches))


def m_condition(m: int, n_particles: int, delta: float) -> Tuple[int, float, bool]:
    value = int(m ** 3 * factorial2(2 * m - 1, exact=True))
    threshold = float(n_particles) ** delta
    return value, threshold, value < threshold


def pair_excitation_state(phis: Sequence[BosonState], n_particles: int,
                          delta: float = DEFAULT_DELTA) -> PairExcitationSpec:
    if not phis:
        raise ValidationError("pair excitation needs at least one boson state")
    for i, phi in enumerate(phis):
        if abs(phi.norm() - 1.0) > 1e-10:
            raise ValidationError(f"boson state {i} has norm {phi.norm():.12g}, expected 1")
    m = len(phis)
    value, threshold, ok = m_condition(m, n_particles, delta)
    if not ok:
        logger.warning(f"m-condition violated: m^3 (2m-1)!! = {value} vs N^delta = {threshold:.4g}")
    return PairExcitationSpec(states=tuple(phis), m=m, m_condition_value=value, m_condition_threshold=threshold)


# -------------------------
# Scenario evaluation
# -------------------------
def _mode_job(args):
    k, pd, V, fb, sc, delta = args
    try:
        return solve_block(build_blocks(k, pd, V, fb, sc, delta)), None
    except ValidationError as e:
        return None, DroppedMode(k=as_vector(k), reason=str(e))


def evaluate_rpa(fb: FermiBall, pd: PatchDecomposition, V: Potential, sc: ScalingConstants,
                 delta: float = DEFAULT_DELTA, max_workers: Optional[int] = None,
                 modes: Optional[Sequence[Sequence[int]]] = None) -> RpaEvaluation:
    """Blocks, spectra and the energy correction over Gamma^nor (or the given modes)."""
    _check_rpa_inputs(pd, fb)
    mode_list = [as_vector(k) for k in (modes if modes is not None else V.gamma_nor)]
    jobs = [(k, pd, V, fb, sc, delta) for k in mode_list]
    if max_workers is not None and max_workers <= 1:
        results = [_mode_job(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(_mode_job, jobs))

    blocks: Dict[Vector, RpaBlock] = {}
    dropped: List[DroppedMode] = []
    for block, drop in results:
        if drop is not None:
            logger.warning(f"dropping mode k={drop.k}: {drop.reason}")
            dropped.append(drop)
        else:
            blocks[block.k] = block

    energy, contributions = rpa_energy_correction(blocks, sc)
    logger.info(
        f"rpa: N={fb.n_particles} M={pd.n_patches} modes={len(blocks)} dropped={len(dropped)} "
        f"correction={energy:.10g}"
    )
    return RpaEvaluation(
        blocks=blocks,
        dropped=dropped,
        contributions=contributions,
        energy=energy,
        n_particles=fb.n_particles,
        k_f=fb.k_f,
        n_patches=pd.n_patches,
        delta=delta,
        hbar=sc.hbar,
        kappa=sc.kappa,
    )


def blocks_frame(evaluation: RpaEvaluation) -> pd.DataFrame:
    """Long table of every block entry: k, alpha, beta, matrix tag, value."""
    rows = []
    for k, block in evaluation.blocks.items():
        label = " ".join(str(c) for c in k)
        for tag in ("D", "W", "W_tilde", "E", "K"):
            mat = getattr(block, tag)
            for i, alpha in enumerate(block.indices):
                for j, beta in enumerate(block.indices):
                    rows.append({"k": label, "alpha": alpha, "beta": beta, "matrix": tag, "value": float(mat[i, j])})
    return pd.DataFrame(rows, columns=["k", "alpha", "beta", "matrix", "value"])


def spectra_frame(evaluation: RpaEvaluation, sc: ScalingConstants) -> pd.DataFrame:
    rows = []
    for k, block in evaluation.blocks.items():
        label = " ".join(str(c) for c in k)
        for j, value in enumerate(excitation_spectrum(block, sc)):
            rows.append({
                "k": label,
                "index": j,
                "excitation": float(value),
                "contribution": evaluation.contributions[k],
                "residual_ratio": residual_ratio(block),
            })
    return pd.DataFrame(rows, columns=["k", "index", "excitation", "contribution", "residual_ratio"])


def summary_dict(evaluation: RpaEvaluation, sc: ScalingConstants) -> Dict:
    return {
        "schema_version": 1,
        "n_particles": evaluation.n_particles,
        "k_f": evaluation.k_f,
        "patches": evaluation.n_patches,
        "delta": evaluation.delta,
        "hbar": evaluation.hbar,
        "kappa": evaluation.kappa,
        "energy_correction": evaluation.energy,
        "modes": [
            {
                "k": list(k),
                "contribution": evaluation.contributions[k],
                "spectrum": [float(v) for v in excitation_spectrum(block, sc)],
            }
            for k, block in evaluation.blocks.items()
        ],
        "dropped": [{"k": list(d.k), "reason": d.reason} for d in evaluation.dropped],
        **evaluation.extras,
    }
