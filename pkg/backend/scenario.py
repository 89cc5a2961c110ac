# backend/scenario.py
"""
Scenario files.

A scenario is a JSON document. Required top-level keys:

    schema_version   1
    dimension        1, 2 or 3
    k_f              Fermi radius
    hbar_convention  "bulk" (hbar = N^(-1/d)) or "rpa" (hbar = kappa / k_F, d = 3)

Every other section is optional and falls back to default_scenario().
Unknown keys are errors in strict mode and warnings otherwise.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

from backend.errors import ValidationError
from backend.lattice_core import (
    SUPPORTED_DIMENSIONS,
    FermiBall,
    HbarConvention,
    Potential,
    Vector,
    build_fermi_ball,
    make_potential,
)

logger = logging.getLogger("scenario")

SCHEMA_VERSION = 1
INITIAL_STATES = ("fermi-ball", "trap-ground")

BosonEntry = Tuple[Vector, int, complex]


# -------------------------
# Sections
# -------------------------
@dataclass(frozen=True)
class PotentialSection:
    coefficients: Tuple[Tuple[Vector, float], ...] = ()
    strict_nonnegative: bool = False


@dataclass(frozen=True)
class InitialStateSection:
    kind: str = "fermi-ball"
    trap_strength: float = 0.0


@dataclass(frozen=True)
class TimeSection:
    t_final: float = 1.0
    dt: float = 0.01


@dataclass(frozen=True)
class HartreeFockSection:
    include_exchange: bool = True
    midpoint_iters: int = 50
    tol: float = 1e-12
    record_every: int = 1


@dataclass(frozen=True)
class TrapSection:
    frequencies: Tuple[float, ...] = (1.0, 1.0, 1.0)
    caps: Optional[Tuple[int, ...]] = None
    hbar: float = 1.0
    n_targets: Tuple[int, ...] = (8, 64, 216, 729)
    energy: float = 1.0
    bruteforce_trend: bool = False


@dataclass(frozen=True)
class VlasovSection:
    n_x: Optional[int] = None
    headroom: float = 2.0
    alpha: Optional[Tuple[int, ...]] = None
    beta: Optional[Tuple[float, ...]] = None
    k_f_values: Tuple[float, ...] = ()
    basis_margin: int = 2


@dataclass(frozen=True)
class RpaSection:
    patches: Optional[int] = None
    delta: float = 2.0 / 45.0
    modes: Optional[Tuple[Vector, ...]] = None
    excitations: Tuple[Tuple[BosonEntry, ...], ...] = ()
    random_excitations: int = 0
    boson_time: float = 1.0


@dataclass(frozen=True)
class OracleSection:
    couplings: Tuple[float, ...] = (0.4, 0.2, 0.1, 0.0)
    dimension_cap: int = 200_000
    k_cut: Optional[float] = None


@dataclass(frozen=True)
class TiersSection:
    trap_scaling: bool = True
    hf_archive: bool = True
    phase_space_export: bool = True
    free_reference: bool = True


@dataclass(frozen=True)
class Scenario:
    dimension: int
    k_f: float
    hbar_convention: HbarConvention
    k_cut: Optional[float] = None
    potential: PotentialSection = field(default_factory=PotentialSection)
    initial_state: InitialStateSection = field(default_factory=InitialStateSection)
    time: TimeSection = field(default_factory=TimeSection)
    hartree_fock: HartreeFockSection = field(default_factory=HartreeFockSection)
    trap: TrapSection = field(default_factory=TrapSection)
    vlasov: VlasovSection = field(default_factory=VlasovSection)
    rpa: RpaSection = field(default_factory=RpaSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    tiers: TiersSection = field(default_factory=TiersSection)
    output_dir: str = "results"
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def build_potential(self, strict_nonnegative: Optional[bool] = None) -> Potential:
        strict = self.potential.strict_nonnegative if strict_nonnegative is None else strict_nonnegative
        return make_potential(dict(self.potential.coefficients), strict_nonnegative=strict, dimension=self.dimension)

    def fermi_ball(self) -> FermiBall:
        return build_fermi_ball(self.k_f, self.dimension)


# -------------------------
# Field readers
# -------------------------
def _check_keys(raw: Mapping, allowed: Sequence[str], path: str, strict: bool):
    if not isinstance(raw, Mapping):
        raise ValidationError(f"{path or 'scenario'}: expected an object, got {type(raw).__name__}")
    for key in raw:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            if strict:
                raise ValidationError(f"{where}: unknown key")
            logger.warning(f"ignoring unknown key {where}")


def _number(value: Any, path: str, positive: bool = False, nonnegative: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{path}: expected a number, got {value!r}")
    v = float(value)
    if not math.isfinite(v):
        raise ValidationError(f"{path}: must be finite")
    if positive and v <= 0:
        raise ValidationError(f"{path}: must be positive, got {v}")
    if nonnegative and v < 0:
        raise ValidationError(f"{path}: must be non-negative, got {v}")
    return v


def _integer(value: Any, path: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        else:
            raise ValidationError(f"{path}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValidationError(f"{path}: must be >= {minimum}, got {value}")
    return int(value)


def _boolean(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ValidationError(f"{path}: expected true or false, got {value!r}")
    return value


def _vector(value: Any, path: str, dimension: int) -> Vector:
    if not isinstance(value, list) or len(value) != dimension:
        raise ValidationError(f"{path}: expected a list of {dimension} integers, got {value!r}")
    return tuple(_integer(c, f"{path}[{i}]") for i, c in enumerate(value))


def _list(value: Any, path: str) -> list:
    if not isinstance(value, list):
        raise ValidationError(f"{path}: expected a list, got {value!r}")
    return value


def _complex(value: Any, path: str) -> complex:
    if isinstance(value, list):
        if len(value) != 2:
            raise ValidationError(f"{path}: complex amplitude must be [re, im]")
        return complex(_number(value[0], f"{path}[0]"), _number(value[1], f"{path}[1]"))
    return complex(_number(value, path), 0.0)


# -------------------------
# Section parsers
# -------------------------
def _parse_potential(raw: Mapping, d: int, strict: bool) -> PotentialSection:
    _check_keys(raw, ("coefficients", "strict_nonnegative"), "potential", strict)
    table: Dict[Vector, float] = {}
    for i, entry in enumerate(_list(raw.get("coefficients", []), "potential.coefficients")):
        path = f"potential.coefficients[{i}]"
        _check_keys(entry, ("k", "value"), path, strict)
        if "k" not in entry or "value" not in entry:
            raise ValidationError(f"{path}: needs both k and value")
        k = _vector(entry["k"], f"{path}.k", d)
        if k in table:
            raise ValidationError(f"{path}.k: duplicate coefficient for {k}")
        table[k] = _number(entry["value"], f"{path}.value")
    strict_nn = _boolean(raw.get("strict_nonnegative", False), "potential.strict_nonnegative")
    make_potential(table, strict_nonnegative=strict_nn, dimension=d)
    return PotentialSection(coefficients=tuple(sorted(table.items())), strict_nonnegative=strict_nn)


def _parse_initial_state(raw: Mapping, strict: bool) -> InitialStateSection:
    _check_keys(raw, ("kind", "trap_strength"), "initial_state", strict)
    kind = raw.get("kind", "fermi-ball")
    if kind not in INITIAL_STATES:
        raise ValidationError(f"initial_state.kind: must be one of {INITIAL_STATES}, got {kind!r}")
    strength = _number(raw.get("trap_strength", 0.0), "initial_state.trap_strength", nonnegative=True)
    if kind == "trap-ground" and strength == 0.0:
        raise ValidationError("initial_state.trap_strength: trap-ground needs a positive strength")
    return InitialStateSection(kind=kind, trap_strength=strength)


def _parse_time(raw: Mapping, strict: bool) -> TimeSection:
    _check_keys(raw, ("t_final", "dt"), "time", strict)
    d = TimeSection()
    return TimeSection(
        t_final=_number(raw.get("t_final", d.t_final), "time.t_final", nonnegative=True),
        dt=_number(raw.get("dt", d.dt), "time.dt", positive=True),
    )


def _parse_hartree_fock(raw: Mapping, strict: bool) -> HartreeFockSection:
    _check_keys(raw, ("include_exchange", "midpoint_iters", "tol", "record_every"), "hartree_fock", strict)
    d = HartreeFockSection()
    return HartreeFockSection(
        include_exchange=_boolean(raw.get("include_exchange", d.include_exchange), "hartree_fock.include_exchange"),
        midpoint_iters=_integer(raw.get("midpoint_iters", d.midpoint_iters), "hartree_fock.midpoint_iters", 1),
        tol=_number(raw.get("tol", d.tol), "hartree_fock.tol", positive=True),
        record_every=_integer(raw.get("record_every", d.record_every), "hartree_fock.record_every", 1),
    )


def _parse_trap(raw: Mapping, strict: bool) -> TrapSection:
    _check_keys(raw, ("frequencies", "caps", "hbar", "n_targets", "energy", "bruteforce_trend"), "trap", strict)
    d = TrapSection()
    freqs = tuple(_number(w, f"trap.frequencies[{i}]", positive=True)
                  for i, w in enumerate(_list(raw.get("frequencies", list(d.frequencies)), "trap.frequencies")))
    if not 1 <= len(freqs) <= 3:
        raise ValidationError(f"trap.frequencies: need 1 to 3 axes, got {len(freqs)}")
    if list(freqs) != sorted(freqs):
        raise ValidationError(f"trap.frequencies: must be sorted ascending, got {list(freqs)}")
    caps = None
    if raw.get("caps") is not None:
        caps = tuple(_integer(n, f"trap.caps[{i}]", 0) for i, n in enumerate(_list(raw["caps"], "trap.caps")))
        if len(caps) != len(freqs):
            raise ValidationError(f"trap.caps: {len(caps)} caps for {len(freqs)} frequencies")
    targets = tuple(_integer(n, f"trap.n_targets[{i}]", 1)
                    for i, n in enumerate(_list(raw.get("n_targets", list(d.n_targets)), "trap.n_targets")))
    return TrapSection(
        frequencies=freqs,
        caps=caps,
        hbar=_number(raw.get("hbar", d.hbar), "trap.hbar", positive=True),
        n_targets=targets,
        energy=_number(raw.get("energy", d.energy), "trap.energy", positive=True),
        bruteforce_trend=_boolean(raw.get("bruteforce_trend", d.bruteforce_trend), "trap.bruteforce_trend"),
    )


def _parse_vlasov(raw: Mapping, dim: int, strict: bool) -> VlasovSection:
    _check_keys(raw, ("n_x", "headroom", "alpha", "beta", "k_f_values", "basis_margin"), "vlasov", strict)
    d = VlasovSection()
    n_x = None if raw.get("n_x") is None else _integer(raw["n_x"], "vlasov.n_x", 1)
    alpha = None if raw.get("alpha") is None else _vector(raw["alpha"], "vlasov.alpha", dim)
    beta = None
    if raw.get("beta") is not None:
        items = _list(raw["beta"], "vlasov.beta")
        if len(items) != dim:
            raise ValidationError(f"vlasov.beta: expected {dim} numbers, got {len(items)}")
        beta = tuple(_number(b, f"vlasov.beta[{i}]") for i, b in enumerate(items))
    kfs = tuple(_number(k, f"vlasov.k_f_values[{i}]", positive=True)
                for i, k in enumerate(_list(raw.get("k_f_values", []), "vlasov.k_f_values")))
    return VlasovSection(
        n_x=n_x,
        headroom=_number(raw.get("headroom", d.headroom), "vlasov.headroom", positive=True),
        alpha=alpha,
        beta=beta,
        k_f_values=kfs,
        basis_margin=_integer(raw.get("basis_margin", d.basis_margin), "vlasov.basis_margin", 0),
    )


def _parse_excitation(raw: Any, path: str, dim: int, strict: bool) -> Tuple[BosonEntry, ...]:
    entries = []
    for j, entry in enumerate(_list(raw, path)):
        epath = f"{path}[{j}]"
        _check_keys(entry, ("k", "alpha", "amplitude"), epath, strict)
        for key in ("k", "alpha"):
            if key not in entry:
                raise ValidationError(f"{epath}: missing {key}")
        entries.append((
            _vector(entry["k"], f"{epath}.k", dim),
            _integer(entry["alpha"], f"{epath}.alpha", 0),
            _complex(entry.get("amplitude", 1.0), f"{epath}.amplitude"),
        ))
    if not entries:
        raise ValidationError(f"{path}: an excitation needs at least one entry")
    return tuple(entries)


def _parse_rpa(raw: Mapping, dim: int, strict: bool) -> RpaSection:
    _check_keys(raw, ("patches", "delta", "modes", "excitations", "random_excitations", "boson_time"), "rpa", strict)
    d = RpaSection()
    patches = None
    if raw.get("patches") is not None:
        patches = _integer(raw["patches"], "rpa.patches", 2)
        if patches % 2:
            raise ValidationError(f"rpa.patches: must be even, got {patches}")
    modes = None
    if raw.get("modes") is not None:
        modes = tuple(_vector(k, f"rpa.modes[{i}]", dim) for i, k in enumerate(_list(raw["modes"], "rpa.modes")))
    excitations = tuple(_parse_excitation(e, f"rpa.excitations[{i}]", dim, strict)
                        for i, e in enumerate(_list(raw.get("excitations", []), "rpa.excitations")))
    return RpaSection(
        patches=patches,
        delta=_number(raw.get("delta", d.delta), "rpa.delta", positive=True),
        modes=modes,
        excitations=excitations,
        random_excitations=_integer(raw.get("random_excitations", 0), "rpa.random_excitations", 0),
        boson_time=_number(raw.get("boson_time", d.boson_time), "rpa.boson_time", nonnegative=True),
    )


def _parse_oracle(raw: Mapping, strict: bool) -> OracleSection:
    _check_keys(raw, ("couplings", "dimension_cap", "k_cut"), "oracle", strict)
    d = OracleSection()
    couplings = tuple(_number(v, f"oracle.couplings[{i}]")
                      for i, v in enumerate(_list(raw.get("couplings", list(d.couplings)), "oracle.couplings")))
    return OracleSection(
        couplings=couplings,
        dimension_cap=_integer(raw.get("dimension_cap", d.dimension_cap), "oracle.dimension_cap", 1),
        k_cut=None if raw.get("k_cut") is None else _number(raw["k_cut"], "oracle.k_cut", nonnegative=True),
    )


def _parse_tiers(raw: Mapping, strict: bool) -> TiersSection:
    names = [f for f in asdict(TiersSection())]
    _check_keys(raw, names, "tiers", strict)
    d = asdict(TiersSection())
    return TiersSection(**{name: _boolean(raw.get(name, d[name]), f"tiers.{name}") for name in names})


TOP_LEVEL_KEYS = (
    "schema_version", "dimension", "k_f", "k_cut", "hbar_convention", "potential", "initial_state", "time",
    "hartree_fock", "trap", "vlasov", "rpa", "oracle", "tiers", "output_dir", "seed",
)


def _from_mapping(raw: Mapping, strict: bool) -> Scenario:
    _check_keys(raw, TOP_LEVEL_KEYS, "", strict)
    for key in ("schema_version", "dimension", "k_f", "hbar_convention"):
        if key not in raw:
            raise ValidationError(f"{key}: required key missing")
    version = _integer(raw["schema_version"], "schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"schema_version: unsupported version {version}, expected {SCHEMA_VERSION}")
    dim = _integer(raw["dimension"], "dimension")
    if dim not in SUPPORTED_DIMENSIONS:
        raise ValidationError(f"dimension: must be one of {SUPPORTED_DIMENSIONS}, got {dim}")
    k_f = _number(raw["k_f"], "k_f", positive=True)
    try:
        convention = HbarConvention(raw["hbar_convention"])
    except ValueError:
        raise ValidationError(f"hbar_convention: must be 'bulk' or 'rpa', got {raw['hbar_convention']!r}")
    if convention is HbarConvention.RPA and dim != 3:
        raise ValidationError(f"hbar_convention: 'rpa' needs dimension 3, got {dim}")

    scenario = Scenario(
        dimension=dim,
        k_f=k_f,
        hbar_convention=convention,
        k_cut=None if raw.get("k_cut") is None else _number(raw["k_cut"], "k_cut", nonnegative=True),
        potential=_parse_potential(raw.get("potential", {}), dim, strict),
        initial_state=_parse_initial_state(raw.get("initial_state", {}), strict),
        time=_parse_time(raw.get("time", {}), strict),
        hartree_fock=_parse_hartree_fock(raw.get("hartree_fock", {}), strict),
        trap=_parse_trap(raw.get("trap", {}), strict),
        vlasov=_parse_vlasov(raw.get("vlasov", {}), dim, strict),
        rpa=_parse_rpa(raw.get("rpa", {}), dim, strict),
        oracle=_parse_oracle(raw.get("oracle", {}), strict),
        tiers=_parse_tiers(raw.get("tiers", {}), strict),
        output_dir=str(raw.get("output_dir", "results")),
        seed=_integer(raw.get("seed", 0), "seed", 0),
        schema_version=version,
    )
    _check_references(scenario)
    return scenario


def _check_references(scenario: Scenario):
    """Excitation modes must be modes the rpa run builds."""
    if not scenario.rpa.excitations:
        return
    V = scenario.build_potential()
    available = set(scenario.rpa.modes) if scenario.rpa.modes is not None else set(V.gamma_nor)
    for i, excitation in enumerate(scenario.rpa.excitations):
        for j, (k, _, _) in enumerate(excitation):
            if k not in available:
                raise ValidationError(f"rpa.excitations[{i}][{j}].k: mode {list(k)} is not among the rpa modes")


# -------------------------
# Public API
# -------------------------
def parse_scenario_text(text: str, strict: bool = False, source: str = "<scenario>") -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from e
    return _from_mapping(raw, strict)


def parse_scenario(path: str, strict: bool = False) -> Scenario:
    if not os.path.isfile(path):
        raise ValidationError(f"scenario file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    scenario = parse_scenario_text(text, strict=strict, source=path)
    logger.info(f"Loaded scenario {path}: d={scenario.dimension} k_F={scenario.k_f} "
                f"hbar convention {scenario.hbar_convention.value}")
    return scenario


def serialize_scenario(scenario: Scenario) -> Dict[str, Any]:
    """JSON-ready mapping; parse_scenario_text(json.dumps(...)) gives back an equal Scenario."""
    rpa = scenario.rpa
    return {
        "schema_version": scenario.schema_version,
        "dimension": scenario.dimension,
        "k_f": scenario.k_f,
        "k_cut": scenario.k_cut,
        "hbar_convention": scenario.hbar_convention.value,
        "potential": {
            "coefficients": [{"k": list(k), "value": v} for k, v in scenario.potential.coefficients],
            "strict_nonnegative": scenario.potential.strict_nonnegative,
        },
        "initial_state": asdict(scenario.initial_state),
        "time": asdict(scenario.time),
        "hartree_fock": asdict(scenario.hartree_fock),
        "trap": {
            "frequencies": list(scenario.trap.frequencies),
            "caps": None if scenario.trap.caps is None else list(scenario.trap.caps),
            "hbar": scenario.trap.hbar,
            "n_targets": list(scenario.trap.n_targets),
            "energy": scenario.trap.energy,
            "bruteforce_trend": scenario.trap.bruteforce_trend,
        },
        "vlasov": {
            "n_x": scenario.vlasov.n_x,
            "headroom": scenario.vlasov.headroom,
            "alpha": None if scenario.vlasov.alpha is None else list(scenario.vlasov.alpha),
            "beta": None if scenario.vlasov.beta is None else list(scenario.vlasov.beta),
            "k_f_values": list(scenario.vlasov.k_f_values),
            "basis_margin": scenario.vlasov.basis_margin,
        },
        "rpa": {
            "patches": rpa.patches,
            "delta": rpa.delta,
            "modes": None if rpa.modes is None else [list(k) for k in rpa.modes],
            "excitations": [
                [{"k": list(k), "alpha": a, "amplitude": [amp.real, amp.imag]} for k, a, amp in exc]
                for exc in rpa.excitations
            ],
            "random_excitations": rpa.random_excitations,
            "boson_time": rpa.boson_time,
        },
        "oracle": {
            "couplings": list(scenario.oracle.couplings),
            "dimension_cap": scenario.oracle.dimension_cap,
            "k_cut": scenario.oracle.k_cut,
        },
        "tiers": asdict(scenario.tiers),
        "output_dir": scenario.output_dir,
        "seed": scenario.seed,
    }


def default_scenario() -> Dict[str, Any]:
    """Free three-dimensional gas with every optional section at its default."""
    return serialize_scenario(Scenario(dimension=3, k_f=2.0, hbar_convention=HbarConvention.BULK))


def create_scenario_file(output_path: str, **overrides) -> str:
    config = default_scenario()
    config.update(overrides)
    _from_mapping(config, strict=True)
    directory = os.path.dirname(output_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(output_path, "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2)
    logger.info(f"Created scenario file: {output_path}")
    return output_path
