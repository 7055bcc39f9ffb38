import numpy as np
import pytest

from tensorpot import data
from tensorpot.data import (
    AtomicSystem,
    DataError,
    OracleParams,
    build_neighbor_list,
    fit_reference_energies,
    generate_toy_datasets,
    minimize_geometry,
    oracle_energy_forces,
    parse_extxyz,
    split,
    write_extxyz,
)
from tensorpot.tensors import random_orthogonal


def _random_system(seed, n=8, spread=4.0):
    rng = np.random.default_rng(seed)
    while True:
        pos = rng.uniform(0.0, spread, size=(n, 3))
        delta = pos[:, None] - pos[None, :]
        dist = np.sqrt((delta ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() > 0.6:
            return AtomicSystem(numbers=np.full(n, 1), positions=pos)


# ---------------------------------------------------------------------------
# AtomicSystem validation

def test_system_rejects_coincident_atoms():
    with pytest.raises(DataError):
        AtomicSystem(numbers=[1, 1], positions=[[0, 0, 0], [0, 0, 1e-8]])


def test_system_rejects_bad_charge_length():
    with pytest.raises(DataError):
        AtomicSystem(numbers=[1, 1], positions=[[0, 0, 0], [0, 0, 1.0]], charges=[0.1])


# ---------------------------------------------------------------------------
# extended XYZ

def test_parse_single_hydrogen_frame():
    text = "1\nenergy=0 total_charge=0 spin=0 columns=symbol:pos\nH 0 0 0\n"
    systems = parse_extxyz(text)
    assert len(systems) == 1
    assert systems[0].n_atoms == 1
    assert systems[0].energy == 0.0


def test_parse_count_mismatch_names_frame():
    text = (
        "2\nenergy=0 total_charge=0 spin=0 columns=symbol:pos\nH 0 0 0\nH 1 0 0\n"
        "3\nenergy=0 total_charge=0 spin=0 columns=symbol:pos\nH 0 0 0\nH 0 0 2\n"
    )
    with pytest.raises(DataError) as err:
        parse_extxyz(text)
    assert "frame 1" in str(err.value)


def test_extxyz_roundtrip_is_byte_fixpoint():
    rng = np.random.default_rng(0)
    systems = []
    for k in range(100):
        n = int(rng.integers(1, 6))
        pos = rng.normal(size=(n, 3)) * 3.0
        pos += np.arange(n)[:, None] * 2.5  # keep atoms apart
        systems.append(AtomicSystem(
            numbers=rng.choice([1, 6, 7, 8], size=n),
            positions=pos,
            total_charge=float(rng.integers(-1, 2)),
            spin=float(rng.integers(0, 2)),
            charges=rng.normal(size=n) if k % 3 == 0 else None,
            energy=float(rng.normal()) if k % 2 == 0 else None,
            forces=rng.normal(size=(n, 3)) if k % 2 == 0 else None,
        ))
    once = write_extxyz(systems)
    twice = write_extxyz(parse_extxyz(once))
    assert once == twice


# ---------------------------------------------------------------------------
# neighbor lists

def test_neighbor_list_empty_beyond_cutoff():
    sys_ = AtomicSystem(numbers=[1, 1], positions=[[0, 0, 0], [6.0, 0, 0]])
    nl = build_neighbor_list(sys_, cutoff=5.0)
    assert nl.n_edges == 0


def test_neighbor_list_single_pair():
    sys_ = AtomicSystem(numbers=[1, 1], positions=[[0, 0, 0], [3.0, 0, 0]])
    nl = build_neighbor_list(sys_, cutoff=5.0)
    pairs = set(zip(nl.receivers.tolist(), nl.senders.tolist()))
    assert pairs == {(0, 1), (1, 0)}
    assert np.allclose(nl.r, 3.0)


@pytest.mark.parametrize("seed", range(4))
def test_cell_list_matches_brute_force(seed):
    sys_ = _random_system(seed, n=200, spread=14.0)
    brute = build_neighbor_list(sys_, 5.0, method="brute")
    cell = build_neighbor_list(sys_, 5.0, method="cell")
    assert np.array_equal(brute.senders, cell.senders)
    assert np.array_equal(brute.receivers, cell.receivers)
    assert np.array_equal(brute.r, cell.r)


def test_neighbor_list_symmetry_and_completeness():
    for seed in range(3):
        sys_ = _random_system(seed + 10, n=60, spread=9.0)
        nl = build_neighbor_list(sys_, 4.0)
        pairs = set(zip(nl.receivers.tolist(), nl.senders.tolist()))
        assert all((j, i) in pairs for i, j in pairs)
        # brute-force completeness oracle
        pos = sys_.positions
        delta = pos[:, None] - pos[None, :]
        dist = np.sqrt((delta ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        expected = set(zip(*[arr.tolist() for arr in np.nonzero(dist <= 4.0)]))
        assert pairs == expected
        assert np.all(nl.r <= 4.0 + 1e-12)


def test_neighbor_list_canonical_order_is_permutation_covariant():
    sys_ = _random_system(3, n=12, spread=5.0)
    nl = build_neighbor_list(sys_, 4.0)
    perm = np.random.default_rng(0).permutation(12)
    inv = np.argsort(perm)
    permuted = AtomicSystem(numbers=sys_.numbers[perm], positions=sys_.positions[perm])
    nl_p = build_neighbor_list(permuted, 4.0)
    # same geometric edge sequence, relabeled
    assert np.array_equal(inv[nl.senders], nl_p.senders)
    assert np.array_equal(inv[nl.receivers], nl_p.receivers)
    assert np.array_equal(nl.r, nl_p.r)


# ---------------------------------------------------------------------------
# oracle

def test_oracle_lj_minimum_zero_force():
    params = OracleParams(chi={18: 0.0}, radii={18: 0.8})
    sigma = params.sigma(18, 18)
    r_min = 2.0 ** (1.0 / 6.0) * sigma
    sys_ = AtomicSystem(numbers=[18, 18], positions=[[0, 0, 0], [r_min, 0, 0]])
    _, forces = oracle_energy_forces(sys_, params)
    assert np.abs(forces).max() < 1e-12


def test_oracle_soft_coulomb_closed_form():
    params = OracleParams(epsilon=0.0, k_e=1.0, gamma=1.0, chi={1: 0.1}, radii={1: 0.35})
    sys_ = AtomicSystem(numbers=[1, 1], positions=[[0, 0, 0], [1.0, 0, 0]])
    energy, _ = oracle_energy_forces(sys_, params)
    assert energy == pytest.approx(0.01 / np.sqrt(2.0), rel=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_oracle_forces_match_central_differences(seed):
    sys_ = _random_system(seed + 20, n=5, spread=3.0)
    sys_ = AtomicSystem(numbers=np.array([8, 1, 1, 7, 1]), positions=sys_.positions,
                        total_charge=1.0)
    params = OracleParams()
    _, forces = oracle_energy_forces(sys_, params)
    h = 1e-6
    fd = np.zeros_like(forces)
    for i in range(sys_.n_atoms):
        for c in range(3):
            for sign_, slot in ((1.0, 0), (-1.0, 1)):
                pos = sys_.positions.copy()
                pos[i, c] += sign_ * h
                e = oracle_energy_forces(
                    AtomicSystem(numbers=sys_.numbers, positions=pos,
                                 total_charge=sys_.total_charge), params)[0]
                if slot == 0:
                    plus = e
                else:
                    fd[i, c] = -(plus - e) / (2 * h)
    scale = np.abs(fd).max()
    assert np.abs(forces - fd).max() / scale < 1e-7


def test_oracle_invariances():
    sys_ = _random_system(31, n=6, spread=3.5)
    sys_ = AtomicSystem(numbers=np.array([8, 1, 1, 7, 1, 6]), positions=sys_.positions)
    params = OracleParams()
    e0, f0 = oracle_energy_forces(sys_, params)
    assert np.abs(f0.sum(axis=0)).max() < 1e-10

    r = random_orthogonal(5, allow_reflection=True)
    rot = AtomicSystem(numbers=sys_.numbers, positions=sys_.positions @ r.T)
    e1, f1 = oracle_energy_forces(rot, params)
    assert e1 == pytest.approx(e0, rel=1e-12)
    assert np.abs(f1 - f0 @ r.T).max() < 1e-9

    shifted = AtomicSystem(numbers=sys_.numbers, positions=sys_.positions + [3.0, -1.0, 2.0])
    e2, _ = oracle_energy_forces(shifted, params)
    assert e2 == pytest.approx(e0, rel=1e-12)

    perm = np.random.default_rng(1).permutation(6)
    permuted = AtomicSystem(numbers=sys_.numbers[perm], positions=sys_.positions[perm])
    e3, f3 = oracle_energy_forces(permuted, params)
    assert e3 == pytest.approx(e0, rel=1e-12)
    assert np.abs(f3 - f0[perm]).max() < 1e-10


# ---------------------------------------------------------------------------
# toy generation

@pytest.fixture(scope="module")
def toy_small():
    return generate_toy_datasets(seed=7, n_pairs=3, frames_per_member=20)


def test_toy_generation_deterministic(toy_small):
    again = generate_toy_datasets(seed=7, n_pairs=3, frames_per_member=20)
    assert write_extxyz(toy_small[0]) == write_extxyz(again[0])
    assert write_extxyz(toy_small[1]) == write_extxyz(again[1])


def test_toy_force_filter_holds(toy_small):
    for frame in toy_small[0] + toy_small[1]:
        assert np.abs(frame.forces).max() < 100.0


def test_toy_pairs_share_geometry_but_not_labels(toy_small):
    a, b = toy_small
    assert len(a) == len(b) == 3 * 20
    for fa, fb in zip(a, b):
        assert np.abs(fa.positions - fb.positions).max() == 0.0
        assert fa.total_charge != fb.total_charge
        assert abs(fa.energy - fb.energy) > 0.1


def test_minimizer_converges_on_template():
    numbers = np.array([8, 1, 1])
    start = np.array([[0.0, 0, 0], [0.95, 0.1, 0], [-0.3, 0.9, 0.1]])
    pos = minimize_geometry(numbers, start)
    sys_ = AtomicSystem(numbers=numbers, positions=pos)
    _, forces = oracle_energy_forces(sys_)
    assert np.abs(forces).max() < 1e-3


# ---------------------------------------------------------------------------
# reference energies

def test_fit_reference_single_element_exact():
    systems = [
        AtomicSystem(numbers=np.full(n, 1),
                     positions=np.arange(n)[:, None] * [2.0, 0, 0],
                     energy=2.0 * n)
        for n in (1, 2, 3)
    ]
    refs = fit_reference_energies(systems)
    assert refs[1] == pytest.approx(2.0, abs=1e-12)


def test_fit_reference_matches_normal_equations():
    rng = np.random.default_rng(2)
    systems = []
    design = []
    for _ in range(12):
        counts = rng.integers(1, 4, size=3)  # H, N, O
        numbers = np.repeat([1, 7, 8], counts)
        n = numbers.shape[0]
        systems.append(AtomicSystem(
            numbers=numbers,
            positions=np.arange(n)[:, None] * [2.0, 0.1, 0.0],
            energy=float(rng.normal()),
        ))
        design.append(counts)
    refs = fit_reference_energies(systems)
    design = np.asarray(design, dtype=float)
    target = np.array([s.energy for s in systems])
    oracle = np.linalg.solve(design.T @ design, design.T @ target)
    assert np.abs(np.array([refs[1], refs[7], refs[8]]) - oracle).max() < 1e-9


def test_fit_reference_rank_deficiency_names_elements():
    # H and O always in 2:1 ratio -> inseparable
    systems = [
        AtomicSystem(numbers=np.array([1, 1, 8]),
                     positions=[[0, 0, 0], [1, 0, 0], [0, 1, 0]], energy=1.0),
        AtomicSystem(numbers=np.array([1, 1, 8, 1, 1, 8]),
                     positions=np.arange(6)[:, None] * [1.5, 0, 0], energy=2.0),
    ]
    with pytest.raises(DataError) as err:
        fit_reference_energies(systems)
    assert "H" in str(err.value) and "O" in str(err.value)


def test_fit_on_train_applies_to_val(toy_small):
    refs = fit_reference_energies(toy_small[0])
    for frame in toy_small[1][:5]:
        shift = sum(refs[int(z)] for z in frame.numbers)
        assert np.isfinite(frame.energy - shift)


# ---------------------------------------------------------------------------
# splits

def test_split_paper_fractions():
    s = split(10, 0.5, 0.1, seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == (5, 1, 4)


def test_split_deterministic_and_disjoint():
    a = split(100, 0.5, 0.1, seed=3)
    b = split(100, 0.5, 0.1, seed=3)
    assert np.array_equal(a.train, b.train)
    assert np.array_equal(a.val, b.val)
    everything = np.concatenate([a.train, a.val, a.test])
    assert np.array_equal(np.sort(everything), np.arange(100))


def test_split_overallocation_error():
    with pytest.raises(DataError):
        split(10, 8, 5, seed=0)


def test_manifest_roundtrip(tmp_path):
    entries = {"seed": "7", "dataset_a": "a.xyz", "frames_per_member": "500"}
    path = tmp_path / "manifest.txt"
    data.write_manifest(path, entries)
    assert data.read_manifest(path) == entries
