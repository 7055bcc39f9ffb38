"""Dataset ingestion, neighbor lists, splits, and the synthetic label oracle.

File format (extended XYZ, UTF-8):

    <n_atoms>
    key=value pairs: energy=<eV> total_charge=<int> spin=<0|1> columns=...
    <symbol> <x> <y> <z> [fx fy fz] [q]     (n_atoms lines)

``columns`` declares the per-atom fields after the coordinates, e.g.
``columns=symbol:pos:forces:charge``. Floats are serialized with 17
significant digits so parse -> write is a byte fixpoint.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import GroupPlan, make_group_plan

__all__ = [
    "AtomicSystem",
    "ConvergenceError",
    "DataError",
    "DatasetSplit",
    "NeighborList",
    "OracleParams",
    "build_neighbor_list",
    "fit_reference_energies",
    "generate_toy_datasets",
    "generate_two_state_dataset",
    "minimize_geometry",
    "oracle_energy_forces",
    "parse_extxyz",
    "read_manifest",
    "split",
    "symbol_to_z",
    "write_extxyz",
    "write_manifest",
    "z_to_symbol",
]

_SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn"
).split()
_Z_BY_SYMBOL = {s: z for z, s in enumerate(_SYMBOLS)}


class DataError(ValueError):
    """Malformed input data (files, systems, splits)."""


class ConvergenceError(RuntimeError):
    """Geometry minimization failed to reach the force tolerance."""


def symbol_to_z(symbol: str) -> int:
    try:
        return _Z_BY_SYMBOL[symbol]
    except KeyError:
        raise DataError(f"unknown element symbol {symbol!r}")


def z_to_symbol(z: int) -> str:
    if not 1 <= z < len(_SYMBOLS):
        raise DataError(f"unknown atomic number {z}")
    return _SYMBOLS[z]


@dataclass
class AtomicSystem:
    """One configuration: atomic numbers, positions and optional labels."""

    numbers: np.ndarray                 # (N,) int
    positions: np.ndarray               # (N, 3) Angstrom
    total_charge: float = 0.0           # elementary charges, integer-valued
    spin: float = 0.0                   # 0 singlet, 1 triplet
    charges: np.ndarray | None = None   # optional per-atom attribute values
    energy: float | None = None         # eV
    forces: np.ndarray | None = None    # (N, 3) eV/Angstrom

    def __post_init__(self):
        self.numbers = np.asarray(self.numbers, dtype=np.intp)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        n = self.numbers.shape[0]
        if n < 1:
            raise DataError("system must contain at least one atom")
        if self.positions.shape != (n, 3) or not np.all(np.isfinite(self.positions)):
            raise DataError(f"positions must be finite with shape ({n}, 3)")
        if np.any(self.numbers < 1):
            raise DataError("atomic numbers must be positive")
        if self.charges is not None:
            self.charges = np.asarray(self.charges, dtype=np.float64)
            if self.charges.shape != (n,):
                raise DataError(f"per-atom charges must have length {n}")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != (n, 3):
                raise DataError(f"forces must have shape ({n}, 3)")
        if float(self.spin) not in (0.0, 1.0):
            raise DataError("spin must be 0 (singlet) or 1 (triplet)")
        if n > 1:
            delta = self.positions[:, None, :] - self.positions[None, :, :]
            dist = np.sqrt((delta ** 2).sum(-1))
            np.fill_diagonal(dist, np.inf)
            if dist.min() <= 1e-6:
                raise DataError("coincident atoms (min pair distance <= 1e-6 A)")

    @property
    def n_atoms(self) -> int:
        return int(self.numbers.shape[0])


# ---------------------------------------------------------------------------
# extended XYZ

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_extxyz(systems, fh=None) -> str | None:
    """Serialize systems; returns the text when ``fh`` is None."""
    buf = fh or io.StringIO()
    for sys_ in systems:
        cols = ["symbol", "pos"]
        if sys_.forces is not None:
            cols.append("forces")
        if sys_.charges is not None:
            cols.append("charge")
        keys = []
        if sys_.energy is not None:
            keys.append(f"energy={_fmt(sys_.energy)}")
        keys.append(f"total_charge={int(round(sys_.total_charge))}")
        keys.append(f"spin={int(round(sys_.spin))}")
        keys.append("columns=" + ":".join(cols))
        buf.write(f"{sys_.n_atoms}\n")
        buf.write(" ".join(keys) + "\n")
        for i in range(sys_.n_atoms):
            fields = [z_to_symbol(int(sys_.numbers[i]))]
            fields += [_fmt(v) for v in sys_.positions[i]]
            if sys_.forces is not None:
                fields += [_fmt(v) for v in sys_.forces[i]]
            if sys_.charges is not None:
                fields.append(_fmt(sys_.charges[i]))
            buf.write(" ".join(fields) + "\n")
    if fh is None:
        return buf.getvalue()
    return None


def parse_extxyz(text: str) -> list[AtomicSystem]:
    lines = text.splitlines()
    systems = []
    pos = 0
    frame = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise DataError(f"frame {frame}: expected atom count, got {lines[pos]!r}")
        if pos + 1 >= len(lines):
            raise DataError(f"frame {frame}: missing property line")
        props = _parse_props(lines[pos + 1], frame)
        cols = props.get("columns", "symbol:pos").split(":")
        body = lines[pos + 2: pos + 2 + n]
        if len(body) < n or any(len(ln.split()) < 4 for ln in body):
            raise DataError(
                f"frame {frame}: header declares {n} atoms but fewer atom lines follow"
            )
        numbers = np.zeros(n, dtype=np.intp)
        positions = np.zeros((n, 3))
        forces = np.zeros((n, 3)) if "forces" in cols else None
        charges = np.zeros(n) if "charge" in cols else None
        n_fields = 4 + (3 if forces is not None else 0) + (1 if charges is not None else 0)
        for i, ln in enumerate(body):
            parts = ln.split()
            if len(parts) != n_fields:
                raise DataError(
                    f"frame {frame}: atom line {i} has {len(parts)} fields, expected {n_fields}"
                )
            numbers[i] = symbol_to_z(parts[0])
            positions[i] = [float(v) for v in parts[1:4]]
            k = 4
            if forces is not None:
                forces[i] = [float(v) for v in parts[k:k + 3]]
                k += 3
            if charges is not None:
                charges[i] = float(parts[k])
        systems.append(AtomicSystem(
            numbers=numbers,
            positions=positions,
            total_charge=float(props.get("total_charge", 0.0)),
            spin=float(props.get("spin", 0.0)),
            charges=charges,
            energy=float(props["energy"]) if "energy" in props else None,
            forces=forces,
        ))
        pos += 2 + n
        frame += 1
    return systems


def _parse_props(line: str, frame: int) -> dict:
    props = {}
    for tok in line.split():
        if "=" not in tok:
            raise DataError(f"frame {frame}: malformed property token {tok!r}")
        key, value = tok.split("=", 1)
        props[key] = value
    return props


# ---------------------------------------------------------------------------
# neighbor lists

@dataclass(frozen=True)
class NeighborList:
    """Directed pairs within the cutoff in a canonical geometric order.

    Edges are sorted by (distance, sender position, receiver position); this
    order is invariant under relabeling of atoms, which is what makes scatter
    accumulations (and therefore features and forces) bitwise permutation
    equivariant. ``recv_plan`` / ``send_plan`` pre-group the edges for
    deterministic edge->atom reductions.
    """

    senders: np.ndarray      # (E,) neighbor j providing the message
    receivers: np.ndarray    # (E,) atom i receiving it
    r: np.ndarray            # (E,) distances
    unit: np.ndarray         # (E, 3) unit vectors from receiver to sender
    n_atoms: int
    recv_plan: GroupPlan = field(repr=False)
    send_plan: GroupPlan = field(repr=False)

    @property
    def n_edges(self) -> int:
        return int(self.senders.shape[0])


def _finalize_pairs(positions, send, recv, n_atoms) -> NeighborList:
    delta = positions[send] - positions[recv]
    r = np.sqrt((delta ** 2).sum(-1))
    keys = (
        positions[send, 2], positions[send, 1], positions[send, 0],
        positions[recv, 2], positions[recv, 1], positions[recv, 0],
        r,
    )
    order = np.lexsort(keys)
    send, recv, r, delta = send[order], recv[order], r[order], delta[order]
    unit = delta / r[:, None] if r.size else delta
    return NeighborList(
        senders=send,
        receivers=recv,
        r=r,
        unit=unit,
        n_atoms=n_atoms,
        recv_plan=make_group_plan(recv, size=n_atoms),
        send_plan=make_group_plan(send, size=n_atoms),
    )


def _brute_pairs(positions, cutoff):
    n = positions.shape[0]
    delta = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((delta ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    recv, send = np.nonzero(dist <= cutoff)
    return send.astype(np.intp), recv.astype(np.intp)


def _cell_pairs(positions, cutoff):
    n = positions.shape[0]
    lo = positions.min(axis=0)
    cell_idx = np.floor((positions - lo) / cutoff).astype(np.int64)
    buckets: dict[tuple, list[int]] = {}
    for i, key in enumerate(map(tuple, cell_idx)):
        buckets.setdefault(key, []).append(i)
    send, recv = [], []
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
    for key, members in buckets.items():
        neighborhood = []
        for off in offsets:
            other = (key[0] + off[0], key[1] + off[1], key[2] + off[2])
            neighborhood.extend(buckets.get(other, ()))
        cand = np.asarray(neighborhood, dtype=np.intp)
        for i in members:
            # identical distance arithmetic to the brute-force path
            delta = positions[cand] - positions[i]
            dist = np.sqrt((delta ** 2).sum(-1))
            mask = (dist <= cutoff) & (cand != i)
            js = cand[mask]
            send.extend(js.tolist())
            recv.extend([i] * len(js))
    return np.asarray(send, dtype=np.intp), np.asarray(recv, dtype=np.intp)


def build_neighbor_list(system_or_positions, cutoff: float, method: str = "auto") -> NeighborList:
    """All directed pairs with r <= cutoff.

    ``method``: "brute" (O(N^2) reference), "cell" (linear-scaling cell
    list), or "auto" (cell list above 64 atoms). Both construct distances
    with identical arithmetic and emit the same canonical edge order.
    """
    if isinstance(system_or_positions, AtomicSystem):
        positions = system_or_positions.positions
    else:
        positions = np.asarray(system_or_positions, dtype=np.float64)
    n = positions.shape[0]
    if method == "auto":
        method = "cell" if n > 64 else "brute"
    if method == "brute":
        send, recv = _brute_pairs(positions, cutoff)
    elif method == "cell":
        send, recv = _cell_pairs(positions, cutoff)
    else:
        raise ValueError(f"unknown neighbor method {method!r}")
    return _finalize_pairs(positions, send, recv, n)


# ---------------------------------------------------------------------------
# synthetic label oracle: Lennard-Jones + soft Coulomb with charge spread

_DEFAULT_RADII = {1: 0.35, 6: 0.50, 7: 0.50, 8: 0.50, 11: 0.85, 17: 0.90, 18: 0.80, 47: 0.95}
_DEFAULT_CHI = {1: 0.10, 6: -0.20, 7: -0.18, 8: -0.22, 11: 0.30, 17: -0.30, 18: 0.0, 47: 0.15}


@dataclass(frozen=True)
class OracleParams:
    """Parameters of the analytic stand-in labeler.

    Per-atom charges are q_i = chi(Z_i) + Q/N: a fixed electronegativity-like
    table plus an even spread of the total charge, so equal geometries with
    different Q carry different labels.
    """

    epsilon: float = 0.1        # eV, LJ well depth
    k_e: float = 14.4           # eV * Angstrom, Coulomb constant
    gamma: float = 1.0          # Angstrom, soft-Coulomb smoothing
    radii: dict = field(default_factory=lambda: dict(_DEFAULT_RADII))
    chi: dict = field(default_factory=lambda: dict(_DEFAULT_CHI))

    def sigma(self, zi: int, zj: int) -> float:
        return self.radii[zi] + self.radii[zj]


def oracle_energy_forces(system: AtomicSystem, params: OracleParams | None = None):
    """Analytic energy (eV) and forces (eV/A): LJ plus soft Coulomb."""
    params = params or OracleParams()
    pos = system.positions
    n = system.n_atoms
    z = system.numbers
    q = np.array([params.chi[int(zi)] for zi in z]) + system.total_charge / n
    energy = 0.0
    forces = np.zeros((n, 3))
    for i in range(n - 1):
        delta = pos[i + 1:] - pos[i]
        r2 = (delta ** 2).sum(-1)
        r = np.sqrt(r2)
        sig = np.array([params.sigma(int(z[i]), int(zj)) for zj in z[i + 1:]])
        sr6 = (sig / r) ** 6
        energy += float(np.sum(4.0 * params.epsilon * (sr6 ** 2 - sr6)))
        dlj_dr = 4.0 * params.epsilon * (-12.0 * sr6 ** 2 + 6.0 * sr6) / r
        soft = np.sqrt(r2 + params.gamma ** 2)
        energy += float(np.sum(params.k_e * q[i] * q[i + 1:] / soft))
        dcoul_dr = -params.k_e * q[i] * q[i + 1:] * r / soft ** 3
        de_dr = dlj_dr + dcoul_dr
        pair_force = (de_dr / r)[:, None] * delta   # dE/dpos_j for each j > i
        forces[i + 1:] -= pair_force
        forces[i] += pair_force.sum(axis=0)
    return energy, forces


def minimize_geometry(
    numbers,
    positions,
    total_charge: float = 0.0,
    params: OracleParams | None = None,
    tol: float = 1e-3,
    max_iter: int = 10_000,
) -> np.ndarray:
    """Gradient descent with backtracking on the oracle surface.

    Stops when max |F| < tol (eV/A); raises ConvergenceError past max_iter.
    """
    params = params or OracleParams()
    pos = np.array(positions, dtype=np.float64)
    numbers = np.asarray(numbers, dtype=np.intp)

    def eval_at(p):
        return oracle_energy_forces(
            AtomicSystem(numbers=numbers, positions=p, total_charge=total_charge), params
        )

    energy, forces = eval_at(pos)
    step = 0.05
    for _ in range(max_iter):
        fmax = np.abs(forces).max()
        if fmax < tol:
            return pos
        direction = forces / max(fmax, 1e-12)
        while step > 1e-12:
            trial = pos + step * direction
            try:
                e_new, f_new = eval_at(trial)
            except DataError:
                step *= 0.5
                continue
            if e_new < energy:
                pos, energy, forces = trial, e_new, f_new
                step = min(step * 1.3, 0.2)
                break
            step *= 0.5
        else:
            return pos  # step underflow: flat to machine precision
    raise ConvergenceError(f"minimization did not reach max|F| < {tol} in {max_iter} iterations")


# ---------------------------------------------------------------------------
# toy dataset generation

_TOY_TEMPLATES = [
    # (numbers, starting geometry); compositions are linearly independent so
    # the element-wise reference fit is full rank over {H, N, O}
    (np.array([8, 1, 1]), np.array([[0.0, 0.0, 0.0], [0.95, 0.1, 0.0], [-0.3, 0.9, 0.1]])),
    (np.array([7, 1, 1]), np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.1], [-0.35, 0.95, 0.0]])),
    (np.array([7, 8, 1, 1, 1]), np.array([
        [0.0, 0.0, 0.0], [1.25, 0.0, 0.0], [-0.4, 0.9, 0.0],
        [1.7, 0.85, 0.2], [0.6, -0.9, -0.2],
    ])),
]


def _labelled_frame(numbers, positions, total_charge, params) -> AtomicSystem:
    sys_ = AtomicSystem(numbers=numbers, positions=positions, total_charge=total_charge)
    energy, forces = oracle_energy_forces(sys_, params)
    return replace(sys_, energy=energy, forces=forces)


def _sample_conformers(numbers, base, charges, n_frames, sigma, rng, params,
                       force_limit=100.0, max_attempts=1000):
    """Shared-geometry conformers labelled at each charge state.

    A displacement is kept only if every charge state passes the max-force
    filter, so the per-pair geometries stay strictly identical.
    """
    per_charge = [[] for _ in charges]
    for _ in range(n_frames):
        for _ in range(max_attempts):
            disp = rng.normal(scale=sigma, size=base.shape)
            positions = base + disp
            try:
                frames = [_labelled_frame(numbers, positions, q, params) for q in charges]
            except DataError:
                continue
            if all(np.abs(f.forces).max() < force_limit for f in frames):
                for store, frame in zip(per_charge, frames):
                    store.append(frame)
                break
        else:
            raise ConvergenceError(
                f"could not draw a conformer passing the <{force_limit} eV/A filter"
            )
    return per_charge


def generate_toy_datasets(
    seed: int,
    n_pairs: int = 3,
    frames_per_member: int = 500,
    sigma: float = 0.2,
    charge_pair=(0.0, 1.0),
    params: OracleParams | None = None,
):
    """Two datasets of molecule pairs degenerate in everything but Q.

    Dataset A holds the first charge state of each pair, dataset B the
    second, over *identical* conformer geometries, so the merged corpus maps
    equal inputs to different labels unless the model sees the charge.
    """
    params = params or OracleParams()
    rng = np.random.default_rng(seed)
    dataset_a: list[AtomicSystem] = []
    dataset_b: list[AtomicSystem] = []
    for pair_idx in range(n_pairs):
        numbers, start = _TOY_TEMPLATES[pair_idx % len(_TOY_TEMPLATES)]
        if pair_idx >= len(_TOY_TEMPLATES):
            start = start + rng.normal(scale=0.05, size=start.shape)
        base = minimize_geometry(numbers, start, total_charge=0.0, params=params)
        stores = _sample_conformers(
            numbers, base, charge_pair, frames_per_member, sigma, rng, params
        )
        dataset_a.extend(stores[0])
        dataset_b.extend(stores[1])
    return dataset_a, dataset_b


def generate_two_state_dataset(
    numbers,
    label_charges,
    state_values,
    state_kind: str,
    n_frames: int,
    sigma: float,
    seed: int,
    params: OracleParams | None = None,
):
    """Identical-geometry two-class dataset for hard degeneracy experiments.

    Labels come from the oracle at ``label_charges``; the systems' declared
    attribute (``total_charge`` or ``spin``) is set to ``state_values``.
    """
    params = params or OracleParams()
    rng = np.random.default_rng(seed)
    numbers = np.asarray(numbers, dtype=np.intp)
    start = rng.normal(scale=0.3, size=(numbers.shape[0], 3)) + np.arange(numbers.shape[0])[:, None] * [1.0, 0.1, 0.0]
    base = minimize_geometry(numbers, start, total_charge=0.0, params=params)
    stores = _sample_conformers(numbers, base, label_charges, n_frames, sigma, rng, params)
    out = []
    for state, frames in zip(state_values, stores):
        for f in frames:
            if state_kind == "total_charge":
                out.append(replace(f, total_charge=float(state)))
            elif state_kind == "spin":
                out.append(replace(f, total_charge=0.0, spin=float(state)))
            else:
                raise ValueError(f"unknown state kind {state_kind!r}")
    return out


# ---------------------------------------------------------------------------
# reference energies and splits

def fit_reference_energies(systems) -> dict[int, float]:
    """Least-squares per-element energies over the training systems.

    Raises on a rank-deficient composition matrix, naming the confounded
    elements (they cannot be separated by the compositions present).
    """
    elements = sorted({int(z) for s in systems for z in s.numbers})
    design = np.zeros((len(systems), len(elements)))
    target = np.zeros(len(systems))
    for row, s in enumerate(systems):
        if s.energy is None:
            raise DataError("reference-energy fit needs energy labels")
        target[row] = s.energy
        for z in s.numbers:
            design[row, elements.index(int(z))] += 1.0
    rank = np.linalg.matrix_rank(design)
    if rank < len(elements):
        _, _, vt = np.linalg.svd(design)
        null = vt[rank:]
        confounded = [elements[i] for i in range(len(elements)) if np.abs(null[:, i]).max() > 1e-8]
        raise DataError(
            "reference-energy fit is rank deficient; confounded elements: "
            + ", ".join(z_to_symbol(z) for z in confounded)
        )
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    return {z: float(c) for z, c in zip(elements, coef)}


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int


def split(n_items: int, train_size, val_size, seed: int) -> DatasetSplit:
    """Deterministic shuffled split; sizes are fractions (<= 1) or counts."""
    def resolve(x):
        if isinstance(x, float) and x <= 1.0:
            return int(x * n_items)
        return int(x)

    n_train, n_val = resolve(train_size), resolve(val_size)
    if n_train + n_val > n_items:
        raise DataError(
            f"split over-allocated: train {n_train} + val {n_val} > {n_items} items"
        )
    order = np.random.default_rng(seed).permutation(n_items)
    return DatasetSplit(
        train=order[:n_train],
        val=order[n_train:n_train + n_val],
        test=order[n_train + n_val:],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# manifest files

def write_manifest(path, entries: dict):
    lines = [f"{k} {entries[k]}" for k in entries]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(" ")
            out[key] = value
    return out
