# backend/experiment_runner.py
"""
ExperimentRunner

Runs one subcommand of a scenario and writes its artifacts plus a run
manifest into the output directory:

  trap-commutators  trace norms of [x_i, w] and [p_i, w] for the trap ground state
  quench-hf         Hartree-Fock trajectory from the scenario's initial state
  vlasov-compare    Hartree-Fock vs Vlasov observable over a ladder of sizes
  rpa-spectrum      bosonized blocks, spectra and the RPA energy correction
  oracle-compare    exact many-body dynamics vs Hartree-Fock over couplings

run() maps failures to exit codes: 2 invalid input, 3 numerical
failure, 4 resource cap, 1 anything else.
"""
import logging
import os
import threading
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from backend import artifacts
from backend import exact_oracle as oracle
from backend import hartree_fock as hf
from backend import phase_space as ps
from backend import rpa
from backend import trap_init
from backend.errors import FermiDynError, NumericalError, ValidationError
from backend.lattice_core import (
    FermiBall,
    HbarConvention,
    MomentumLattice,
    Potential,
    build_fermi_ball,
    build_lattice,
    scaling_constants,
)
from backend.patches import build_patches, default_patch_count
from backend.scenario import Scenario, serialize_scenario

logger = logging.getLogger("experiment_runner")

SUBCOMMANDS = ("trap-commutators", "quench-hf", "vlasov-compare", "rpa-spectrum", "oracle-compare")
THREADS_ENV = "FERMIDYN_THREADS"

TRACE_TOL = 1e-10
IDEMPOTENCY_TOL = 1e-8
TRAP_AGREEMENT_TOL = 1e-9


def resolve_threads(threads: Optional[int] = None) -> Optional[int]:
    """--threads wins over FERMIDYN_THREADS; None lets the pool decide."""
    if threads is not None:
        if threads < 1:
            raise ValidationError(f"--threads must be at least 1, got {threads}")
        return threads
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if value < 1:
        raise ValidationError(f"{THREADS_ENV} must be at least 1, got {value}")
    return value


class ExperimentRunner:
    def __init__(self, scenario: Scenario, out_dir: Optional[str] = None, threads: Optional[int] = None,
                 log: Optional[Callable] = None):
        self.scenario = scenario
        self.out_dir = out_dir or scenario.output_dir
        self.threads = threads
        self._log = log or logger.info
        self._running_lock = threading.Lock()
        self._is_running = False
        self.manifest: Optional[artifacts.RunManifest] = None

    def log(self, message: str):
        self._log(message)

    # -------------------------
    # Public API
    # -------------------------
    def run(self, subcommand: str) -> int:
        """Run a subcommand; returns the process exit code."""
        with self._running_lock:
            if self._is_running:
                self.log("ExperimentRunner: already running")
                return 1
            self._is_running = True
        try:
            return self._dispatch(subcommand)
        finally:
            with self._running_lock:
                self._is_running = False

    def _dispatch(self, subcommand: str) -> int:
        handlers: Dict[str, Callable[[], None]] = {
            "trap-commutators": self._run_trap_commutators,
            "quench-hf": self._run_quench_hf,
            "vlasov-compare": self._run_vlasov_compare,
            "rpa-spectrum": self._run_rpa_spectrum,
            "oracle-compare": self._run_oracle_compare,
        }
        try:
            if subcommand not in handlers:
                raise ValidationError(f"unknown subcommand {subcommand!r}; choose from {SUBCOMMANDS}")
            os.makedirs(self.out_dir, exist_ok=True)
            self.manifest = artifacts.RunManifest(subcommand, serialize_scenario(self.scenario), self.scenario.seed)
            self.log(f"ExperimentRunner: {subcommand} -> {self.out_dir}")
            handlers[subcommand]()
            self.manifest.write(self.out_dir)
            self.log(f"ExperimentRunner: {subcommand} finished")
            return 0
        except FermiDynError as e:
            logger.error(f"{subcommand} failed: {e}", exc_info=True)
            return e.exit_code
        except Exception as e:
            logger.error(f"{subcommand} failed unexpectedly: {e}", exc_info=True)
            return 1

    # -------------------------
    # Shared setup
    # -------------------------
    def _path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _write_csv(self, frame: pd.DataFrame, name: str):
        self.manifest.add(artifacts.write_csv(frame, self._path(name)), kind="csv")

    def _potential(self, strict_nonnegative: Optional[bool] = None) -> Potential:
        return self.scenario.build_potential(strict_nonnegative)

    def _basis(self, fb: FermiBall, V: Potential, k_cut: Optional[float] = None) -> MomentumLattice:
        cut = k_cut if k_cut is not None else self.scenario.k_cut
        if cut is None:
            cut = fb.k_f + V.support_radius
        lattice = build_lattice(fb.dimension, cut)
        hf.validate_truncation(lattice, fb, V)
        return lattice

    def _initial_density(self, lattice: MomentumLattice, fb: FermiBall, hbar: float) -> hf.DensityMatrix:
        init = self.scenario.initial_state
        if init.kind == "fermi-ball":
            return hf.fermi_ball_density_matrix(lattice, fb, hbar)
        return hf.trap_ground_density_matrix(lattice, fb.n_particles, hbar, init.trap_strength)

    def _hf_run(self, omega0: hf.DensityMatrix, V: Potential, n: int, include_exchange: Optional[bool] = None):
        cfg = self.scenario.hartree_fock
        return hf.hf_evolve(
            omega0, V, self.scenario.time.t_final, self.scenario.time.dt,
            include_exchange=cfg.include_exchange if include_exchange is None else include_exchange,
            midpoint_iters=cfg.midpoint_iters, tol=cfg.tol, n_particles=n, record_every=cfg.record_every,
        )

    @staticmethod
    def _check_structure(trajectory: hf.HfTrajectory, n: int):
        for t, state in zip(trajectory.times, trajectory.states):
            if hf.number_check(state, n) > TRACE_TOL:
                raise NumericalError(f"particle number drifted to {state.trace:.15g} at t={t:.6g}")
            if state.idempotency_residual() > IDEMPOTENCY_TOL:
                raise NumericalError(f"idempotency residual {state.idempotency_residual():.3e} at t={t:.6g}")

    # -------------------------
    # trap-commutators
    # -------------------------
    def _run_trap_commutators(self):
        cfg = self.scenario.trap
        with self.manifest.stage("trace_norms"):
            caps = cfg.caps
            if caps is None:
                caps = trap_init.nmax_levels(cfg.n_targets[0], cfg.energy, cfg.frequencies).caps
            spec = trap_init.make_trap_spec(cfg.frequencies, caps, cfg.hbar)
            table = trap_init.trace_norm_table(spec)
        self._write_csv(table, "trap_commutators.csv")
        worst = float(table["rel_diff"].max())
        if worst > TRAP_AGREEMENT_TOL:
            raise NumericalError(f"analytic and brute-force trace norms differ by {worst:.3e}")

        if self.scenario.tiers.trap_scaling:
            with self.manifest.stage("scaling_trend"):
                trend = trap_init.scaling_trend(cfg.n_targets, cfg.energy, cfg.frequencies, cfg.bruteforce_trend)
            self._write_csv(trend, "trap_scaling.csv")
            spread = float(trend["ratio"].max() / trend["ratio"].min())
            self.log(f"trap scaling: ratio spread factor {spread:.4g} over N={trend['realized_n'].tolist()}")

    # -------------------------
    # quench-hf
    # -------------------------
    def _run_quench_hf(self):
        s = self.scenario
        V = self._potential()
        fb = s.fermi_ball()
        sc = scaling_constants(fb, s.hbar_convention)
        n = fb.n_particles
        lattice = self._basis(fb, V)
        omega0 = self._initial_density(lattice, fb, sc.hbar)

        with self.manifest.stage("hf_evolve"):
            traj = self._hf_run(omega0, V, n)
        self._check_structure(traj, n)
        drift = abs(traj.energies[-1] - traj.energies[0]) / max(abs(traj.energies[0]), 1e-300)
        if drift > IDEMPOTENCY_TOL:
            logger.warning(f"relative HF energy drift {drift:.3e}")

        frame = traj.summary_frame()
        if s.tiers.free_reference:
            frame["free_drift"] = [hf.trace_norm_distance(w, hf.free_evolution(omega0, t))
                                   for t, w in zip(traj.times, traj.states)]
        else:
            frame["free_drift"] = np.nan
        if traj.include_exchange and not V.is_free:
            with self.manifest.stage("hartree_only"):
                hartree = self._hf_run(omega0, V, n, include_exchange=False)
            frame["exchange_gap"] = [hf.trace_norm_distance(a, b) for a, b in zip(traj.states, hartree.states)]
        else:
            frame["exchange_gap"] = 0.0
        if s.initial_state.kind == "trap-ground":
            frame["x2"] = [hf.spatial_second_moment(w) for w in traj.states]
        self._write_csv(frame, "hf_summary.csv")
        occupations, _ = hf.extract_orbitals(traj.final, n)
        self.log(f"quench-hf: natural occupations in [{occupations.min():.12f}, {occupations.max():.12f}]")

        final_t = float(traj.times[-1])
        path = artifacts.write_trajectory_binary(traj.final, n, final_t, self._path("hf_trajectory.bin"))
        self.manifest.add(path, kind="trajectory-binary")
        if s.tiers.hf_archive:
            self.manifest.add(artifacts.write_hf_archive(traj, n, self._path("hf_trajectory.h5")), kind="hdf5")
        self.log(f"quench-hf: N={n} hbar={sc.hbar:.6g} steps={len(traj.times) - 1} energy drift {drift:.2e}")

    # -------------------------
    # vlasov-compare
    # -------------------------
    def _run_vlasov_compare(self):
        s = self.scenario
        cfg = s.vlasov
        V = self._potential()
        d = s.dimension
        alpha = cfg.alpha if cfg.alpha is not None else (1,) + (0,) * (d - 1)
        beta = cfg.beta if cfg.beta is not None else (1.0,) + (0.0,) * (d - 1)
        rows: List[dict] = []
        final_f = None
        for k_f in (cfg.k_f_values or (s.k_f,)):
            fb = build_fermi_ball(k_f, d)
            sc = scaling_constants(fb, s.hbar_convention)
            n = fb.n_particles
            lattice = self._basis(fb, V, k_cut=fb.k_f + V.support_radius + cfg.basis_margin)
            omega0 = self._initial_density(lattice, fb, sc.hbar)
            with self.manifest.stage(f"hf_N{n}"):
                traj = self._hf_run(omega0, V, n)
            grid = ps.phase_space_grid(lattice, sc.hbar, headroom=cfg.headroom, n_x=cfg.n_x)
            f0 = ps.wigner_transform(omega0, grid)
            with self.manifest.stage(f"vlasov_N{n}"):
                f_t = ps.vlasov_evolve(f0, V, s.time.t_final, s.time.dt)
            quantum, classical, gap = ps.observable_gap(traj.final, f_t, alpha, beta)
            rows.append({
                "n_particles": n,
                "hbar": sc.hbar,
                "obs_hf_re": quantum.real,
                "obs_hf_im": quantum.imag,
                "obs_vlasov_re": classical.real,
                "obs_vlasov_im": classical.imag,
                "gap": gap,
                "normalized_gap": gap / n,
                "w11_initial": ps.w11_norm(f0),
                "mass_drift": abs(f_t.mass() - f0.mass()),
            })
            self.log(f"vlasov-compare: N={n} gap/N={gap / n:.6g}")
            final_f = f_t
        self._write_csv(pd.DataFrame(rows), "vlasov_compare.csv")
        if s.tiers.phase_space_export and final_f is not None:
            self.manifest.add(artifacts.phase_space_to_csv(final_f, self._path("phase_space_final.csv")), kind="csv")
            path = artifacts.write_phase_space_binary(final_f, self._path("phase_space_final.bin"))
            self.manifest.add_phase_space_binary(path)

    # -------------------------
    # rpa-spectrum
    # -------------------------
    def _rpa_modes(self, V: Potential):
        if self.scenario.rpa.modes is not None:
            return list(self.scenario.rpa.modes)
        if V.is_free:
            return [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
        return list(V.gamma_nor)

    def _boson_states(self, evaluation: rpa.RpaEvaluation) -> List[rpa.BosonState]:
        cfg = self.scenario.rpa
        states = []
        for excitation in cfg.excitations:
            amplitudes: Dict = {}
            for k, alpha, amp in excitation:
                amplitudes[(k, alpha)] = amplitudes.get((k, alpha), 0.0) + amp
            states.append(rpa.boson_state(evaluation.blocks, amplitudes).normalized())
        rng = np.random.default_rng(self.scenario.seed)
        modes = list(evaluation.blocks)
        for _ in range(cfg.random_excitations):
            if not modes:
                break
            k = modes[int(rng.integers(len(modes)))]
            size = evaluation.blocks[k].size
            vec = rng.normal(size=size) + 1j * rng.normal(size=size)
            states.append(rpa.boson_state(evaluation.blocks, {k: vec}).normalized())
        return states

    def _run_rpa_spectrum(self):
        s = self.scenario
        cfg = s.rpa
        if s.dimension != 3 or s.hbar_convention is not HbarConvention.RPA:
            raise ValidationError("rpa-spectrum needs dimension 3 and hbar_convention 'rpa'")
        V = self._potential(strict_nonnegative=True)
        fb = s.fermi_ball()
        sc = scaling_constants(fb, HbarConvention.RPA)
        n_patches = cfg.patches or default_patch_count(fb.n_particles, cfg.delta)
        with self.manifest.stage("patches"):
            pd_ = build_patches(fb, n_patches, V)
        with self.manifest.stage("blocks"):
            evaluation = rpa.evaluate_rpa(fb, pd_, V, sc, cfg.delta, resolve_threads(self.threads),
                                          modes=self._rpa_modes(V))

        excitations = []
        for i, phi in enumerate(self._boson_states(evaluation)):
            spec = rpa.pair_excitation_state([phi], fb.n_particles, cfg.delta)
            evolved = rpa.boson_evolve(phi, evaluation.blocks, sc, cfg.boson_time)
            excitations.append({
                "index": i,
                "m": spec.m,
                "m_condition_value": spec.m_condition_value,
                "m_condition_threshold": spec.m_condition_threshold,
                "m_condition_satisfied": spec.m_condition_satisfied,
                "norm_drift": abs(evolved.norm() - phi.norm()),
            })

        self._write_csv(rpa.blocks_frame(evaluation), "rpa_blocks.csv")
        self._write_csv(rpa.spectra_frame(evaluation, sc), "rpa_spectra.csv")
        summary = rpa.summary_dict(evaluation, sc)
        summary.update({
            "plane_wave_energy": hf.plane_wave_energy(fb, V, sc),
            "corridor_width": pd_.corridor_width,
            "degenerate_patches": pd_.degenerate,
            "excitations": excitations,
        })
        self.manifest.add(artifacts.write_json(summary, self._path("rpa_summary.json")), kind="json")

    # -------------------------
    # oracle-compare
    # -------------------------
    def _run_oracle_compare(self):
        s = self.scenario
        cfg = s.oracle
        V = self._potential()
        fb = s.fermi_ball()
        sc = scaling_constants(fb, s.hbar_convention)
        n = fb.n_particles
        lattice = self._basis(fb, V, k_cut=cfg.k_cut)
        basis = oracle.build_fock_basis(lattice, n, cfg.dimension_cap)
        if s.initial_state.kind == "fermi-ball":
            psi0 = oracle.slater_state(basis, fb.members.tolist())
            omega0 = hf.fermi_ball_density_matrix(lattice, fb, sc.hbar)
        else:
            orbitals = hf.trap_orbitals(lattice, n, sc.hbar, s.initial_state.trap_strength)
            psi0 = oracle.slater_from_orbitals(basis, orbitals)
            omega0 = hf.density_matrix_from_orbitals(lattice, orbitals, sc.hbar)

        rows = []
        t = s.time.t_final
        for v in cfg.couplings:
            Vv = V.scaled(v)
            with self.manifest.stage(f"exact_v{v:g}"):
                H = oracle.build_hamiltonian(basis, Vv, sc)
                psi_t = oracle.evolve_exact(psi0, H, t, sc, cfg.dimension_cap)
                gamma = oracle.reduced_density_matrix(psi_t, sc.hbar)
            with self.manifest.stage(f"hf_v{v:g}"):
                traj = self._hf_run(omega0, Vv, n)
            e0, e1 = oracle.expectation(psi0, H), oracle.expectation(psi_t, H)
            rows.append({
                "coupling": v,
                "trace_norm_distance": hf.trace_norm_distance(gamma, traj.final),
                "exact_norm_drift": abs(psi_t.norm() - psi0.norm()),
                "exact_energy_drift": abs(e1 - e0) / max(abs(e0), 1e-300),
                "hf_energy_drift": abs(traj.energies[-1] - traj.energies[0]) / max(abs(traj.energies[0]), 1e-300),
            })
            self.log(f"oracle-compare: v={v:g} distance={rows[-1]['trace_norm_distance']:.6e}")
        self._write_csv(pd.DataFrame(rows), "oracle_compare.csv")
