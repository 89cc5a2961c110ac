import math

import numpy as np
import pytest

from backend.errors import ValidationError
from backend.trap_init import (
    commutator_rank,
    commutator_trace_norm_analytic,
    commutator_trace_norm_bruteforce,
    ground_state_projector,
    ladder_matrix,
    make_trap_spec,
    nmax_levels,
    printed_trace_norm,
    scaling_trend,
    spatial_extension,
    trace_norm_table,
)

_anisotropic = make_trap_spec((1.0, 2.0, 4.0), (5, 4, 3), 1.0)


class TestLevelCaps:
    def test_anisotropic_example(self):
        caps, realized = nmax_levels(1000, 1.0, (1.0, 2.0, 4.0))
        assert caps == (10, 5, 2)
        assert realized == 198

    @pytest.mark.parametrize(["target", "cap"], [(8, 2), (64, 4), (216, 6), (729, 9), (27, 3)])
    def test_isotropic_floor(self, target, cap):
        caps, realized = nmax_levels(target, 1.0, (1.0, 1.0, 1.0))
        assert caps == (cap, cap, cap)
        assert realized == (cap + 1) ** 3

    def test_unsorted_frequencies(self):
        with pytest.raises(ValidationError, match="sorted"):
            nmax_levels(100, 1.0, (2.0, 1.0, 1.0))

    def test_bad_energy(self):
        with pytest.raises(ValidationError):
            nmax_levels(100, 0.0, (1.0, 1.0, 1.0))


class TestTrapSpec:
    def test_particle_number(self):
        assert _anisotropic.n_particles == 6 * 5 * 4

    @pytest.mark.parametrize(["freqs", "caps", "hbar"], [
        ((2.0, 1.0, 1.0), (1, 1, 1), 1.0),
        ((1.0, 1.0, 1.0), (1, 1), 1.0),
        ((1.0, 1.0, 1.0), (1, -1, 1), 1.0),
        ((1.0, 1.0, 1.0), (1, 1, 1), 0.0),
        ((0.0, 1.0, 1.0), (1, 1, 1), 1.0),
    ])
    def test_invalid(self, freqs, caps, hbar):
        with pytest.raises(ValidationError):
            make_trap_spec(freqs, caps, hbar)

    def test_projector(self):
        rho = ground_state_projector(_anisotropic)
        assert rho.is_projector
        assert rho.trace == _anisotropic.n_particles
        assert rho.truncation == (7, 6, 5)
        matrix = rho.as_matrix()
        np.testing.assert_array_equal(matrix @ matrix, matrix)

    def test_truncation_too_small(self):
        with pytest.raises(ValidationError, match="truncation"):
            ground_state_projector(_anisotropic, truncation=(6, 6, 5))

    def test_ladder_operator(self):
        a = ladder_matrix(3)
        assert a.shape == (5, 5)
        np.testing.assert_allclose(np.diag(a.T @ a), [0, 1, 2, 3, 4])
        commutator = a @ a.T - a.T @ a
        np.testing.assert_allclose(np.diag(commutator)[:-1], 1.0)
        with pytest.raises(ValidationError, match="too small"):
            ladder_matrix(3, truncation=4)


class TestCommutatorNorms:
    @pytest.mark.parametrize("axis", [0, 1, 2])
    @pytest.mark.parametrize("operator", ["position", "momentum"])
    def test_analytic_matches_bruteforce(self, axis, operator):
        analytic = commutator_trace_norm_analytic(_anisotropic, axis, operator)
        brute = commutator_trace_norm_bruteforce(_anisotropic, operator, axis)
        assert abs(analytic - brute) <= 1e-9 * analytic

    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_momentum_position_ratio(self, axis):
        x = commutator_trace_norm_analytic(_anisotropic, axis, "position")
        p = commutator_trace_norm_analytic(_anisotropic, axis, "momentum")
        assert p / x == pytest.approx(_anisotropic.frequencies[axis], rel=1e-12)

    def test_closed_form(self):
        # sqrt(hbar / 2) sqrt(n_1 + 1) 2 (n_2 + 1)(n_3 + 1) on the first axis
        expected = math.sqrt(0.5) * math.sqrt(6) * 2 * 5 * 4
        assert commutator_trace_norm_analytic(_anisotropic, 0) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_rank(self, axis):
        transverse = np.prod([n + 1 for j, n in enumerate(_anisotropic.caps) if j != axis])
        assert commutator_rank(_anisotropic, "position", axis) == 2 * transverse

    def test_printed_variant(self):
        full = commutator_trace_norm_analytic(_anisotropic, 0)
        printed = printed_trace_norm(_anisotropic, 0)
        assert printed == pytest.approx(full * (4 * 3) / (5 * 4), rel=1e-14)

    def test_unit_frequency_operators_coincide(self):
        spec = make_trap_spec((1.0, 1.0, 1.0), (2, 2, 2), 0.5)
        for axis in range(3):
            assert commutator_trace_norm_analytic(spec, axis, "momentum") == pytest.approx(
                commutator_trace_norm_analytic(spec, axis, "position"), rel=1e-14)

    def test_unknown_operator(self):
        with pytest.raises(ValidationError):
            commutator_trace_norm_analytic(_anisotropic, 0, "spin")

    def test_spatial_extension(self):
        assert spatial_extension(_anisotropic, 2) == pytest.approx(math.sqrt(4 / 8))

    def test_table(self):
        table = trace_norm_table(_anisotropic)
        assert len(table) == 6
        assert set(table["operator"]) == {"position", "momentum"}
        assert (table["rel_diff"] <= 1e-9).all()


class TestScalingTrend:
    def test_realized_sizes(self):
        trend = scaling_trend((8, 64, 216, 729))
        assert list(trend["realized_n"]) == [27, 125, 343, 1000]

    def test_ratio_is_bounded(self):
        trend = scaling_trend((8, 64, 216, 729))
        ratios = trend["ratio"].to_numpy()
        assert ratios.max() / ratios.min() < 2.0
        np.testing.assert_allclose(ratios, math.sqrt(2), rtol=1e-12)

    @pytest.mark.slow
    def test_bruteforce_trend(self):
        trend = scaling_trend((8, 64, 216, 729), bruteforce=True)
        ratios = trend["ratio"].to_numpy()
        assert ratios.max() / ratios.min() < 2.0
