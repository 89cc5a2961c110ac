import glob
import json
import logging
import os

import pytest

from backend.errors import ValidationError
from backend.lattice_core import HbarConvention
from backend.scenario import (
    create_scenario_file,
    default_scenario,
    parse_scenario,
    parse_scenario_text,
    serialize_scenario,
)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "config")


def _text(**fields):
    raw = {"schema_version": 1, "dimension": 1, "k_f": 2, "hbar_convention": "bulk"}
    raw.update(fields)
    return json.dumps(raw)


class TestParse:
    def test_minimal_scenario(self):
        s = parse_scenario_text(_text(), strict=True)
        assert s.dimension == 1
        assert s.hbar_convention is HbarConvention.BULK
        assert s.build_potential().is_free
        assert s.fermi_ball().n_particles == 5
        assert s.time.dt == 0.01
        assert s.rpa.delta == pytest.approx(2 / 45)

    def test_potential_entries(self):
        s = parse_scenario_text(_text(potential={"coefficients": [{"k": [1], "value": 0.3}, {"k": [-1], "value": 0.3}]}))
        assert s.build_potential().value((1,)) == 0.3
        assert s.build_potential().gamma_nor == ((1,),)

    @pytest.mark.parametrize(["fields", "match"], [
        ({"potential": {"coefficients": [{"k": [1], "value": 1.0}]}}, "symmetry rule"),
        ({"potential": {"coefficients": [{"k": [1, 0], "value": 1.0}]}}, r"potential.coefficients\[0\].k"),
        ({"potential": {"coefficients": [{"k": [1], "value": 1.0}, {"k": [1], "value": 1.0}]}}, "duplicate"),
        ({"time": {"dt": 0}}, "time.dt: must be positive"),
        ({"time": {"t_final": -1.0}}, "time.t_final"),
        ({"hartree_fock": {"midpoint_iters": 0}}, "hartree_fock.midpoint_iters"),
        ({"hbar_convention": "rpa"}, "'rpa' needs dimension 3"),
        ({"hbar_convention": "natural"}, "hbar_convention"),
        ({"schema_version": 2}, "unsupported version"),
        ({"dimension": 4}, "dimension: must be one of"),
        ({"k_f": True}, "k_f: expected a number"),
        ({"k_f": -1}, "k_f: must be positive"),
        ({"trap": {"frequencies": [2.0, 1.0]}}, "sorted ascending"),
        ({"trap": {"frequencies": [1.0, 2.0], "caps": [3]}}, "trap.caps"),
        ({"initial_state": {"kind": "trap-ground"}}, "positive strength"),
        ({"initial_state": {"kind": "vortex"}}, "initial_state.kind"),
        ({"vlasov": {"beta": [1.0, 2.0]}}, "vlasov.beta"),
    ])
    def test_rejects(self, fields, match):
        with pytest.raises(ValidationError, match=match):
            parse_scenario_text(_text(**fields))

    def test_missing_required_key(self):
        with pytest.raises(ValidationError, match="k_f: required key missing"):
            parse_scenario_text(json.dumps({"schema_version": 1, "dimension": 1, "hbar_convention": "bulk"}))

    def test_unknown_key_strict(self):
        with pytest.raises(ValidationError, match="time.steps: unknown key"):
            parse_scenario_text(_text(time={"steps": 10}), strict=True)

    def test_unknown_key_lenient(self, caplog):
        with caplog.at_level(logging.WARNING):
            s = parse_scenario_text(_text(comment="quench"))
        assert s.dimension == 1
        assert "ignoring unknown key comment" in caplog.text

    def test_json_syntax_error_position(self):
        text = '{\n  "schema_version": 1,\n  "dimension": 1\n  "k_f": 2\n}'
        with pytest.raises(ValidationError, match="<scenario>:4:"):
            parse_scenario_text(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            parse_scenario(str(tmp_path / "absent.json"))


class TestRpaSection:
    def _rpa(self, **rpa):
        return _text(dimension=3, hbar_convention="rpa", rpa=rpa,
                     potential={"coefficients": [{"k": [0, 0, 1], "value": 1.0}, {"k": [0, 0, -1], "value": 1.0}]})

    def test_odd_patch_count(self):
        with pytest.raises(ValidationError, match="must be even"):
            parse_scenario_text(self._rpa(patches=3))

    def test_excitation_must_use_built_modes(self):
        excitation = [[{"k": [1, 0, 0], "alpha": 0}]]
        with pytest.raises(ValidationError, match="not among the rpa modes"):
            parse_scenario_text(self._rpa(excitations=excitation))

    def test_excitation_amplitudes(self):
        excitation = [[{"k": [0, 0, 1], "alpha": 0, "amplitude": [0.5, -0.5]}, {"k": [0, 0, 1], "alpha": 1}]]
        s = parse_scenario_text(self._rpa(excitations=excitation))
        assert s.rpa.excitations == ((((0, 0, 1), 0, 0.5 - 0.5j), ((0, 0, 1), 1, 1 + 0j)),)

    def test_empty_excitation(self):
        with pytest.raises(ValidationError, match="at least one entry"):
            parse_scenario_text(self._rpa(excitations=[[]]))


class TestFiles:
    def test_serialize_round_trip(self):
        s = parse_scenario(os.path.join(CONFIG_DIR, "scenarios", "rpa_spectrum.json"), strict=True)
        again = parse_scenario_text(json.dumps(serialize_scenario(s)), strict=True)
        assert again == s

    @pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(CONFIG_DIR, "scenarios", "*.json"))))
    def test_shipped_scenarios_parse_strict(self, path):
        parse_scenario(path, strict=True)

    def test_default_file(self):
        s = parse_scenario(os.path.join(CONFIG_DIR, "default_scenario.json"), strict=True)
        assert s.rpa.delta == pytest.approx(2 / 45)
        assert s.trap.n_targets == (8, 64, 216, 729)
        assert s == parse_scenario_text(json.dumps(default_scenario()), strict=True)

    def test_create_scenario_file(self, tmp_path):
        path = create_scenario_file(str(tmp_path / "nested" / "scenario.json"), k_f=3.0, seed=4)
        s = parse_scenario(path, strict=True)
        assert (s.k_f, s.seed, s.dimension) == (3.0, 4, 3)

    def test_create_scenario_file_validates(self, tmp_path):
        with pytest.raises(ValidationError):
            create_scenario_file(str(tmp_path / "bad.json"), dimension=5)
        assert not (tmp_path / "bad.json").exists()
