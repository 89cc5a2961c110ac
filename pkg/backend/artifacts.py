# backend/artifacts.py
"""
Artifact writers and the run manifest.

Every file is written to a temporary sibling first and moved into place
with os.replace, so a reader never sees a half-written artifact.

Binary layouts (little endian):

  phase space   int64 d, n_x, n_p | float64 dx, dp, hbar, p_min, timestamp
                (64-byte header), then the values row-major as float64
  trajectory    32-byte SHA-256 of the lattice | int64 n_modes, N |
                float64 hbar, t, then the lower triangle of the density
                matrix (diagonal included, row-major) as complex128
"""
import hashlib
import json
import logging
import os
import struct
import tempfile
import time
from contextlib import contextmanager
from importlib import metadata
from typing import Any, Dict, List, Optional, Tuple

import h5py
import numpy as np
import pandas as pd

from backend.errors import ValidationError
from backend.hartree_fock import DensityMatrix, HfTrajectory
from backend.lattice_core import MomentumLattice
from backend.phase_space import PhaseSpaceDensity, PhaseSpaceGrid

logger = logging.getLogger("artifacts")

PHASE_SPACE_HEADER = struct.Struct("<qqqddddd")
PHASE_SPACE_TIMESTAMP = (56, 64)
TRAJECTORY_HEADER = struct.Struct("<qqdd")
DIGEST_SIZE = 32
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "h5py")


# -------------------------
# Atomic writes
# -------------------------
@contextmanager
def _atomic_path(path: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_bytes(path: str, data: bytes) -> str:
    with _atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(data)
    return path


def write_csv(frame: pd.DataFrame, path: str) -> str:
    text = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    return write_bytes(path, text.encode("utf-8"))


def write_json(payload: Dict[str, Any], path: str) -> str:
    text = json.dumps(payload, indent=2) + "\n"
    return write_bytes(path, text.encode("utf-8"))


# -------------------------
# Phase space
# -------------------------
def phase_space_frame(f: PhaseSpaceDensity) -> pd.DataFrame:
    grid = f.grid
    d = grid.dimension
    axes = [grid.x_axis] * d + [grid.p_axis] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    columns = {}
    for i in range(d):
        columns[f"x{i + 1}" if d > 1 else "x"] = mesh[i].ravel()
    for i in range(d):
        columns[f"p{i + 1}" if d > 1 else "p"] = mesh[d + i].ravel()
    columns["f"] = f.values.ravel()
    return pd.DataFrame(columns)


def phase_space_to_csv(f: PhaseSpaceDensity, path: str) -> str:
    return write_csv(phase_space_frame(f), path)


def write_phase_space_binary(f: PhaseSpaceDensity, path: str, timestamp: Optional[float] = None) -> str:
    grid = f.grid
    stamp = time.time() if timestamp is None else float(timestamp)
    header = PHASE_SPACE_HEADER.pack(grid.dimension, grid.n_x, grid.n_p, grid.dx, grid.dp, grid.hbar,
                                     float(grid.p_axis[0]), stamp)
    body = np.ascontiguousarray(f.values, dtype="<f8").tobytes()
    return write_bytes(path, header + body)


def read_phase_space_binary(path: str) -> Tuple[Dict[str, float], PhaseSpaceDensity]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < PHASE_SPACE_HEADER.size:
        raise ValidationError(f"{path}: truncated phase-space header")
    d, n_x, n_p, dx, dp, hbar, p_min, stamp = PHASE_SPACE_HEADER.unpack_from(data)
    header = {"dimension": d, "n_x": n_x, "n_p": n_p, "dx": dx, "dp": dp, "hbar": hbar,
              "p_min": p_min, "timestamp": stamp}
    shape = (n_x,) * d + (n_p,) * d
    values = np.frombuffer(data, dtype="<f8", offset=PHASE_SPACE_HEADER.size)
    if values.size != int(np.prod(shape)):
        raise ValidationError(f"{path}: payload has {values.size} values, header promises {int(np.prod(shape))}")
    grid = PhaseSpaceGrid(dimension=d, n_x=n_x, s_max=(n_p - 1) // 2, hbar=hbar)
    return header, PhaseSpaceDensity(values=values.reshape(shape).copy(), grid=grid)


# -------------------------
# Density matrices
# -------------------------
def write_trajectory_binary(state: DensityMatrix, n_particles: int, t: float, path: str) -> str:
    n = len(state.lattice)
    rows, cols = np.tril_indices(n)
    header = state.lattice.digest() + TRAJECTORY_HEADER.pack(n, int(n_particles), state.hbar, float(t))
    body = np.ascontiguousarray(state.matrix[rows, cols], dtype="<c16").tobytes()
    return write_bytes(path, header + body)


def read_trajectory_binary(path: str, lattice: MomentumLattice) -> Tuple[DensityMatrix, int, float]:
    """Returns (state, N, t); the lattice digest must match the file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:DIGEST_SIZE] != lattice.digest():
        raise ValidationError(f"{path}: lattice digest does not match the supplied basis")
    n, n_particles, hbar, t = TRAJECTORY_HEADER.unpack_from(data, DIGEST_SIZE)
    if n != len(lattice):
        raise ValidationError(f"{path}: file has {n} modes, lattice has {len(lattice)}")
    packed = np.frombuffer(data, dtype="<c16", offset=DIGEST_SIZE + TRAJECTORY_HEADER.size)
    rows, cols = np.tril_indices(n)
    matrix = np.zeros((n, n), dtype=np.complex128)
    matrix[rows, cols] = packed
    matrix[cols, rows] = np.conj(packed)
    return DensityMatrix(matrix=matrix, lattice=lattice, hbar=hbar), n_particles, t


def write_hf_archive(trajectory: HfTrajectory, n_particles: int, path: str) -> str:
    lattice = trajectory.final.lattice
    stack = np.stack([s.matrix for s in trajectory.states])
    with _atomic_path(path) as tmp:
        with h5py.File(tmp, "w", track_order=True) as f:
            f.create_dataset("times", data=trajectory.times, track_times=False)
            f.create_dataset("density_matrices", data=stack, compression="gzip", track_times=False)
            f.create_dataset("energies", data=trajectory.energies, track_times=False)
            f.create_dataset("lattice", data=lattice.vectors, track_times=False)
            f.attrs["hbar"] = trajectory.final.hbar
            f.attrs["n_particles"] = int(n_particles)
            f.attrs["include_exchange"] = bool(trajectory.include_exchange)
    return path


def read_hf_archive(path: str) -> Dict[str, Any]:
    with h5py.File(path, "r") as f:
        return {
            "times": f["times"][:],
            "density_matrices": f["density_matrices"][:],
            "energies": f["energies"][:],
            "lattice": f["lattice"][:],
            "hbar": float(f.attrs["hbar"]),
            "n_particles": int(f.attrs["n_particles"]),
        }


# -------------------------
# Manifest
# -------------------------
def file_digest(path: str, skip: Optional[Tuple[int, int]] = None) -> str:
    """SHA-256 of a file, optionally leaving out one byte range."""
    with open(path, "rb") as fh:
        data = fh.read()
    if skip is not None:
        data = data[:skip[0]] + data[skip[1]:]
    return hashlib.sha256(data).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


class RunManifest:
    """Inputs, versions, timings and hashed artifacts of one run."""

    def __init__(self, subcommand: str, scenario: Dict[str, Any], seed: int):
        self.subcommand = subcommand
        self.scenario = scenario
        self.seed = seed
        self.timings: Dict[str, float] = {}
        self.artifacts: List[Dict[str, str]] = []

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - start
            logger.debug(f"stage {name}: {self.timings[name]:.3f} s")

    def add(self, path: str, kind: str = "data", skip: Optional[Tuple[int, int]] = None):
        self.artifacts.append({
            "path": os.path.basename(path),
            "kind": kind,
            "sha256": file_digest(path, skip),
        })
        logger.info(f"wrote {path}")

    def add_phase_space_binary(self, path: str):
        self.add(path, kind="phase-space-binary", skip=PHASE_SPACE_TIMESTAMP)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": 1,
            "subcommand": self.subcommand,
            "seed": self.seed,
            "scenario": self.scenario,
            "versions": package_versions(),
            "timings": self.timings,
            "artifacts": self.artifacts,
        }

    def write(self, directory: str) -> str:
        return write_json(self.as_dict(), os.path.join(directory, "run_manifest.json"))
