import functools

import numpy as np
import pytest

import backend.exact_oracle as oracle
from backend.errors import ResourceCapError, ValidationError
from backend.exact_oracle import (
    build_excitation_basis,
    build_fock_basis,
    build_hamiltonian,
    build_pair_basis,
    evolve_exact,
    evolve_exact_trajectory,
    expectation,
    materialize_pair_state,
    momentum_operator_diagonal,
    number_operator_matrix,
    pair_operator_matrix,
    reduced_density_matrix,
    shell_pairs,
    slater_from_orbitals,
    slater_state,
    vacuum_state,
)
from backend.hartree_fock import (
    density_matrix_from_orbitals,
    fermi_ball_density_matrix,
    hf_energy,
    hf_evolve,
    trace_norm_distance,
)
from backend.lattice_core import (
    build_fermi_ball,
    build_lattice,
    make_potential,
    nearest_neighbour_potential,
    scaling_constants,
)
from backend.patches import build_patches
from backend.rpa import boson_state, build_blocks, pair_excitation_state

_E3 = (0, 0, 1)


def _chain(v1=1.0, v2=0.5):
    fb = build_fermi_ball(1, 1)
    lattice = build_lattice(1, 3)
    sc = scaling_constants(fb, "bulk")
    V = make_potential({(1,): v1, (-1,): v1, (2,): v2, (-2,): v2})
    basis = build_fock_basis(lattice, fb.n_particles)
    return fb, lattice, sc, V, basis


def _random_orbitals(n_modes, n_particles, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_modes, n_particles)) + 1j * rng.normal(size=(n_modes, n_particles))
    q, _ = np.linalg.qr(a)
    return q


@functools.lru_cache(maxsize=None)
def _shell_space():
    fb = build_fermi_ball(3, 3)
    pd = build_patches(fb, 2, nearest_neighbour_potential(3, 1.0))
    pairs = shell_pairs(_E3, 0, pd, fb) + shell_pairs(_E3, 1, pd, fb)
    basis = build_pair_basis(pairs, max_pairs=3)
    b0 = pair_operator_matrix(_E3, 0, pd, fb, basis)
    c1 = pair_operator_matrix(_E3, 1, pd, fb, basis)
    return fb, pd, basis, b0, c1


def _low_sector_vectors(basis, b0, c1):
    omega = vacuum_state(basis).amplitudes
    rng = np.random.default_rng(0)
    low = np.array([bin(m).count("1") <= 4 for m in basis.states])
    mixed = np.where(low, rng.normal(size=basis.dimension), 0.0).astype(complex)
    return [omega, b0 @ omega, c1 @ omega, c1 @ (b0 @ omega), b0 @ (b0 @ omega), mixed / np.linalg.norm(mixed)]


class TestFockBasis:
    @pytest.mark.parametrize(["n_modes", "n_particles", "dim"], [(4, 2, 6), (7, 3, 35), (3, 3, 1), (5, 1, 5)])
    def test_dimension(self, n_modes, n_particles, dim):
        modes = np.arange(n_modes).reshape(-1, 1)
        assert build_fock_basis(modes, n_particles).dimension == dim

    def test_states_are_ordered_bitmasks(self):
        basis = build_fock_basis(np.arange(4).reshape(-1, 1), 2)
        assert basis.states == (0b0011, 0b0101, 0b1001, 0b0110, 0b1010, 0b1100)

    def test_particle_number_range(self):
        with pytest.raises(ValidationError, match="out of range"):
            build_fock_basis(np.arange(3).reshape(-1, 1), 4)

    def test_dimension_cap(self):
        with pytest.raises(ResourceCapError, match="exceeds cap"):
            build_fock_basis(build_lattice(1, 3), 3, dimension_cap=10)

    def test_mask_of(self):
        lattice = build_lattice(1, 1)
        basis = build_fock_basis(lattice, 2)
        expected = (1 << lattice.index_of((-1,))) | (1 << lattice.index_of((1,)))
        assert basis.mask_of([(-1,), (1,)]) == expected
        with pytest.raises(ValidationError, match="twice"):
            basis.mask_of([(0,), (0,)])
        with pytest.raises(ValidationError, match="not in the basis"):
            basis.mask_of([(0,), (5,)])


class TestHamiltonian:
    def test_hermitian(self):
        *_, V, basis = _chain()
        H = build_hamiltonian(basis, V, scaling_constants(build_fermi_ball(1, 1), "bulk"))
        assert abs(H - H.conj().T).max() <= 1e-14

    def test_free_hamiltonian_is_kinetic(self):
        fb, lattice, sc, _, basis = _chain()
        H = build_hamiltonian(basis, make_potential({}, dimension=1), sc)
        dense = H.toarray()
        np.testing.assert_array_equal(dense, np.diag(np.diag(dense)))
        for i, mask in enumerate(basis.states):
            occupied = [j for j in range(7) if mask >> j & 1]
            assert dense[i, i] == pytest.approx(sc.hbar ** 2 * np.sum(lattice.norms_squared[occupied]))

    def test_conserves_momentum(self):
        fb, lattice, sc, V, basis = _chain()
        H = build_hamiltonian(basis, V, sc).tocoo()
        momentum = momentum_operator_diagonal(basis)
        assert H.nnz > basis.dimension
        for i, j in zip(H.row, H.col):
            np.testing.assert_array_equal(momentum[i], momentum[j])

    def test_needs_lattice_basis(self):
        basis = build_fock_basis(np.arange(4).reshape(-1, 1), 2)
        with pytest.raises(ValidationError, match="lattice"):
            build_hamiltonian(basis, make_potential({}, dimension=1), scaling_constants(build_fermi_ball(1, 1), "bulk"))

    def test_slater_energy_matches_hartree_fock_functional(self):
        fb, lattice, sc, _, basis = _chain()
        V = make_potential({(0,): 0.3, (1,): 0.5, (-1,): 0.5, (2,): 0.2, (-2,): 0.2})
        H = build_hamiltonian(basis, V, sc)
        phi = _random_orbitals(len(lattice), 3, seed=7)
        psi = slater_from_orbitals(basis, phi)
        assert psi.norm() == pytest.approx(1.0, rel=1e-12)
        omega = density_matrix_from_orbitals(lattice, phi, sc.hbar)
        assert expectation(psi, H) == pytest.approx(hf_energy(omega, V, 3), rel=1e-10)


class TestStates:
    def test_slater_reduced_density_matrix(self):
        fb, lattice, sc, _, basis = _chain()
        psi = slater_state(basis, [(-2,), (0,), (3,)])
        gamma = reduced_density_matrix(psi, sc.hbar)
        expected = np.zeros(7)
        expected[[lattice.index_of((-2,)), lattice.index_of((0,)), lattice.index_of((3,))]] = 1.0
        np.testing.assert_allclose(gamma.matrix, np.diag(expected), atol=1e-15)

    def test_unit_orbitals_give_the_slater_state(self):
        fb, lattice, sc, _, basis = _chain()
        occupied = [1, 3, 4]
        phi = np.eye(7)[:, occupied]
        via_orbitals = slater_from_orbitals(basis, phi)
        direct = slater_state(basis, [lattice.vectors[j] for j in occupied])
        np.testing.assert_allclose(via_orbitals.amplitudes, direct.amplitudes, atol=1e-14)

    def test_orbital_slater_reduces_to_projector(self):
        fb, lattice, sc, _, basis = _chain()
        phi = _random_orbitals(7, 3, seed=3)
        gamma = reduced_density_matrix(slater_from_orbitals(basis, phi), sc.hbar)
        np.testing.assert_allclose(gamma.matrix, phi @ phi.conj().T, atol=1e-12)

    def test_two_slater_superposition(self):
        lattice = build_lattice(2, 1)
        basis = build_fock_basis(lattice, 2)
        first = slater_state(basis, [(0, 0), (1, 0)])
        second = slater_state(basis, [(-1, 0), (0, 1)])
        psi = first.with_amplitudes((first.amplitudes + second.amplitudes) / np.sqrt(2))
        gamma = reduced_density_matrix(psi)
        expected = np.full(5, 0.5)
        expected[lattice.index_of((0, -1))] = 0.0
        np.testing.assert_allclose(gamma.matrix, np.diag(expected), atol=1e-15)

    def test_random_state_reduced_density_matrix(self):
        fb, lattice, sc, _, basis = _chain()
        rng = np.random.default_rng(11)
        amps = rng.normal(size=basis.dimension) + 1j * rng.normal(size=basis.dimension)
        psi = slater_state(basis, [(-1,), (0,), (1,)]).with_amplitudes(amps / np.linalg.norm(amps))
        gamma = reduced_density_matrix(psi)
        np.testing.assert_allclose(gamma.matrix, gamma.matrix.conj().T, atol=1e-14)
        assert gamma.trace == pytest.approx(3.0)
        ev = gamma.spectrum()
        assert ev[0] >= -1e-12 and ev[-1] <= 1 + 1e-12

    def test_wrong_orbital_shape(self):
        *_, basis = _chain()
        with pytest.raises(ValidationError, match="shape"):
            slater_from_orbitals(basis, np.eye(7)[:, :2])


class TestEvolution:
    def test_zero_time(self):
        fb, lattice, sc, V, basis = _chain()
        H = build_hamiltonian(basis, V, sc)
        psi = slater_state(basis, [(-1,), (0,), (1,)])
        np.testing.assert_allclose(evolve_exact(psi, H, 0.0, sc).amplitudes, psi.amplitudes, atol=1e-14)

    def test_norm_and_energy(self):
        fb, lattice, sc, V, basis = _chain()
        H = build_hamiltonian(basis, V, sc)
        psi0 = slater_from_orbitals(basis, _random_orbitals(7, 3, seed=5))
        e0 = expectation(psi0, H)
        for t in (0.1, 0.5, 2.0):
            psi = evolve_exact(psi0, H, t, sc)
            assert psi.norm() == pytest.approx(1.0, abs=1e-12)
            assert expectation(psi, H) == pytest.approx(e0, abs=1e-10)

    def test_free_evolution_is_a_phase(self):
        fb, lattice, sc, _, basis = _chain()
        H = build_hamiltonian(basis, make_potential({}, dimension=1), sc)
        psi0 = slater_state(basis, [(-3,), (1,), (2,)])
        psi = evolve_exact(psi0, H, 0.4, sc)
        energy = sc.hbar ** 2 * (9 + 1 + 4)
        np.testing.assert_allclose(psi.amplitudes, np.exp(-1j * 0.4 * energy / sc.hbar) * psi0.amplitudes,
                                   atol=1e-13)

    def test_krylov_agrees_with_dense(self, monkeypatch):
        fb, lattice, sc, V, basis = _chain()
        H = build_hamiltonian(basis, V, sc)
        psi0 = slater_from_orbitals(basis, _random_orbitals(7, 3, seed=9))
        times = [0.0, 0.2, 0.7]
        dense = evolve_exact_trajectory(psi0, H, times, sc)
        monkeypatch.setattr(oracle, "DENSE_BELOW", 0)
        krylov = evolve_exact_trajectory(psi0, H, times, sc)
        np.testing.assert_allclose(krylov, dense, atol=1e-10)

    def test_dimension_cap(self):
        fb, lattice, sc, V, basis = _chain()
        psi0 = slater_state(basis, [(-1,), (0,), (1,)])
        with pytest.raises(ResourceCapError):
            evolve_exact(psi0, build_hamiltonian(basis, V, sc), 0.1, sc, dimension_cap=20)

    def test_hartree_fock_gap_shrinks_with_coupling(self):
        fb = build_fermi_ball(1, 1)
        lattice = build_lattice(1, 3)
        sc = scaling_constants(fb, "bulk")
        basis = build_fock_basis(lattice, 3)
        psi0 = slater_state(basis, fb.members)
        omega0 = fermi_ball_density_matrix(lattice, fb, sc.hbar)
        distances = []
        for v in (0.4, 0.2, 0.1, 0.0):
            V = make_potential({(1,): v, (-1,): v}, dimension=1)
            psi = evolve_exact(psi0, build_hamiltonian(basis, V, sc), 0.5, sc)
            hf = hf_evolve(omega0, V, 0.5, 1e-3, n_particles=3).final
            distances.append(trace_norm_distance(reduced_density_matrix(psi, sc.hbar), hf))
        assert distances[0] > distances[1] > distances[2] > distances[3]
        assert distances[3] <= 1e-8


class TestParticleHole:
    def test_pair_space(self):
        fb, pd, basis, b0, c1 = _shell_space()
        assert len(shell_pairs(_E3, 0, pd, fb)) == 21
        assert basis.n_modes == 84
        assert basis.dimension == 1 + 42 + 861 + 11480
        assert basis.hole_flags.sum() == 42

    def test_creation_is_normalized(self):
        fb, pd, basis, b0, c1 = _shell_space()
        omega = vacuum_state(basis).amplitudes
        assert np.linalg.norm(b0 @ omega) == pytest.approx(1.0, rel=1e-14)
        assert np.linalg.norm(c1 @ omega) == pytest.approx(1.0, rel=1e-14)

    def test_creation_operators_commute(self):
        fb, pd, basis, b0, c1 = _shell_space()
        assert abs(b0 @ c1 - c1 @ b0).max() <= 1e-14

    def test_commutator_error_bound(self):
        fb, pd, basis, b0, c1 = _shell_space()
        n_sq = len(shell_pairs(_E3, 0, pd, fb))
        b = b0.conj().T
        number = number_operator_matrix(basis)
        for psi in _low_sector_vectors(basis, b0, c1):
            error = b @ (b0 @ psi) - b0 @ (b @ psi) - psi
            assert np.linalg.norm(error) <= 2.0 / n_sq * np.linalg.norm(number @ psi) + 1e-12

    def test_commutator_on_the_vacuum(self):
        fb, pd, basis, b0, c1 = _shell_space()
        omega = vacuum_state(basis).amplitudes
        b = b0.conj().T
        np.testing.assert_allclose(b @ (b0 @ omega), omega, atol=1e-14)

    def test_different_patches_commute(self):
        fb, pd, basis, b0, c1 = _shell_space()
        c = c1.conj().T
        for psi in _low_sector_vectors(basis, b0, c1):
            np.testing.assert_allclose(c @ (b0 @ psi) - b0 @ (c @ psi), 0.0, atol=1e-14)

    def test_equal_particle_and_hole_numbers(self):
        fb, pd, basis, b0, c1 = _shell_space()
        difference = number_operator_matrix(basis, "particles") - number_operator_matrix(basis, "holes")
        for psi in _low_sector_vectors(basis, b0, c1):
            np.testing.assert_allclose(difference @ psi, 0.0, atol=1e-15)

    def test_delocalized_pair_operator(self):
        fb, pd, basis, b0, c1 = _shell_space()
        delocalized = pair_operator_matrix(_E3, None, pd, fb, basis)
        omega = vacuum_state(basis).amplitudes
        # only the northern pairs have p - h = e3; no normalization
        assert np.linalg.norm(delocalized @ omega) ** 2 == pytest.approx(21.0)

    def test_materialized_excitations(self):
        fb, pd, basis, b0, c1 = _shell_space()
        sc = scaling_constants(fb, "rpa")
        blocks = {_E3: build_blocks(_E3, pd, nearest_neighbour_potential(3, 1.0), fb, sc)}
        north = boson_state(blocks, {(_E3, 0): 1.0})
        south = boson_state(blocks, {(_E3, 1): 1.0})

        xi, z = materialize_pair_state(pair_excitation_state([north], fb.n_particles), pd, fb, basis)
        assert z == pytest.approx(1.0, rel=1e-14)
        np.testing.assert_allclose(xi.amplitudes, b0 @ vacuum_state(basis).amplitudes, atol=1e-15)

        one, z_one = materialize_pair_state(pair_excitation_state([north, south], fb.n_particles), pd, fb, basis)
        two, z_two = materialize_pair_state(pair_excitation_state([south, north], fb.n_particles), pd, fb, basis)
        assert z_one == pytest.approx(z_two, rel=1e-14)
        np.testing.assert_allclose(one.amplitudes, two.amplitudes, atol=1e-14)

    def test_excitation_basis(self):
        fb, pd, basis, b0, c1 = _shell_space()
        sc = scaling_constants(fb, "rpa")
        blocks = {_E3: build_blocks(_E3, pd, nearest_neighbour_potential(3, 1.0), fb, sc)}
        both = boson_state(blocks, {(_E3, 0): 1.0, (_E3, 1): 1.0}).normalized()
        spec = pair_excitation_state([both, both], fb.n_particles)
        small = build_excitation_basis(spec, pd, fb)
        assert small.max_pairs == 2
        assert small.dimension == 1 + 42 + 861
        xi_small, z_small = materialize_pair_state(spec, pd, fb, small)
        xi_large, z_large = materialize_pair_state(spec, pd, fb, basis)
        assert z_small == pytest.approx(z_large, rel=1e-13)
        assert xi_small.norm() == pytest.approx(1.0)

    def test_materialize_needs_room(self):
        fb, pd, basis, b0, c1 = _shell_space()
        sc = scaling_constants(fb, "rpa")
        blocks = {_E3: build_blocks(_E3, pd, nearest_neighbour_potential(3, 1.0), fb, sc)}
        north = boson_state(blocks, {(_E3, 0): 1.0})
        spec = pair_excitation_state([north] * 4, fb.n_particles)
        with pytest.raises(ValidationError, match="at most 3 pairs"):
            materialize_pair_state(spec, pd, fb, basis)

    def test_pair_basis_validation(self):
        with pytest.raises(ValidationError, match="max_pairs"):
            build_pair_basis([((0, 0, 3), (0, 0, 2))], 0)
        with pytest.raises(ValidationError, match="both as particle and as hole"):
            build_pair_basis([((0, 0, 3), (0, 0, 2)), ((0, 0, 4), (0, 0, 3))], 1)
        with pytest.raises(ValidationError, match="particle-hole basis"):
            number_operator_matrix(build_fock_basis(np.arange(3).reshape(-1, 1), 1), "holes")

    def test_pair_basis_cap(self):
        pairs = [((0, 0, 10 + j), (0, 0, j)) for j in range(8)]
        with pytest.raises(ResourceCapError):
            build_pair_basis(pairs, 3, dimension_cap=50)
