"""Symmetry verification suite: rotations, reflections, translations,
permutations, and force consistency, run against a model instance.

Feature transformation law: the trace and symmetric-traceless components
conjugate as R X Rt for every orthogonal R; the antisymmetric component is
built from direction pseudo-tensors and carries an extra det(R). Energies
must be invariant and forces covariant under the full O(3) either way.
Permutation and (grid-aligned) translation checks are bitwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensors
from .data import AtomicSystem
from .model import ModelConfig, ModelParams, build_energy_graph, make_batch

__all__ = [
    "CheckReport",
    "graded_transform",
    "random_test_system",
    "run_equivariance_suite",
    "snap_to_grid",
]

GRID = 2.0 ** -20  # positions on this grid make small translations exact


def snap_to_grid(positions, step: float = GRID) -> np.ndarray:
    return np.round(np.asarray(positions, dtype=np.float64) / step) * step


def graded_transform(features: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Expected features after rotating the input by ``r``."""
    dec = tensors.decompose(features)
    det = float(np.linalg.det(r))
    even = dec.scalar_part + dec.traceless_part
    return r @ even @ r.T + det * (r @ dec.vector_part @ r.T)


def random_test_system(rng, elements, n_atoms: int, cutoff: float,
                       min_gap: float = 0.75, boundary_margin: float = 1e-3,
                       spread: float = 4.0) -> AtomicSystem:
    """Random configuration with no pair distance near the cutoff boundary,
    so edge sets stay stable under the tiny numeric drift of a rotation."""
    elements = np.asarray(elements)
    for _ in range(2000):
        pos = snap_to_grid(rng.uniform(0.0, spread, size=(n_atoms, 3)))
        delta = pos[:, None] - pos[None, :]
        dist = np.sqrt((delta ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= min_gap:
            continue
        finite = dist[np.isfinite(dist)]
        if np.abs(finite - cutoff).min() <= boundary_margin:
            continue
        numbers = elements[rng.integers(0, len(elements), size=n_atoms)]
        return AtomicSystem(numbers=numbers, positions=pos)
    raise RuntimeError("could not sample a boundary-safe test system")


def _forward(params, config, system, corrupt):
    batch = make_batch([system], config.cutoff_upper)
    eg = build_energy_graph(params, config, batch, corrupt_skew_sign=corrupt)
    energy = float(eg.energies.val[0])
    forces = -ad.backward(eg.total, wrt=[eg.positions]).get(eg.positions)
    feats = [f.val for f in eg.layer_features]
    return energy, forces, feats


@dataclass
class CheckReport:
    trials: int
    tol_feature: float
    tol_energy: float
    tol_force: float
    max_feature_dev: float = 0.0
    max_energy_rel: float = 0.0
    max_force_rel: float = 0.0
    max_perm_feature_dev: float = 0.0
    max_perm_force_dev: float = 0.0
    max_translation_dev: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [
            f"trials                {self.trials}",
            f"feature law max dev   {self.max_feature_dev:.3e} (tol {self.tol_feature:.1e})",
            f"energy invariance     {self.max_energy_rel:.3e} (tol {self.tol_energy:.1e})",
            f"force covariance      {self.max_force_rel:.3e} (tol {self.tol_force:.1e})",
            f"permutation features  {self.max_perm_feature_dev:.3e} (bitwise)",
            f"permutation forces    {self.max_perm_force_dev:.3e} (bitwise)",
            f"translation energy    {self.max_translation_dev:.3e} (bitwise)",
            "PASS" if self.passed else "FAIL: " + "; ".join(self.failures),
        ]
        return "\n".join(lines)


def run_equivariance_suite(
    params: ModelParams,
    config: ModelConfig,
    trials: int = 100,
    seed: int = 0,
    tol_feature: float = 1e-10,
    tol_energy: float = 1e-9,
    tol_force: float = 1e-9,
    corrupt_skew_sign: bool = False,
) -> CheckReport:
    """Rotation/reflection/translation/permutation checks over random systems."""
    report = CheckReport(trials=trials, tol_feature=tol_feature,
                         tol_energy=tol_energy, tol_force=tol_force)
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        n = int(rng.integers(4, 9))
        system = random_test_system(rng, config.elements, n, config.cutoff_upper)
        e0, f0, feats0 = _forward(params, config, system, corrupt_skew_sign)

        r = tensors.random_orthogonal(int(rng.integers(0, 2 ** 31)), allow_reflection=True)
        rotated = AtomicSystem(numbers=system.numbers, positions=system.positions @ r.T)
        e1, f1, feats1 = _forward(params, config, rotated, corrupt_skew_sign)

        for layer, (fa, fb) in enumerate(zip(feats1, feats0)):
            dev = float(np.abs(fa - graded_transform(fb, r)).max())
            report.max_feature_dev = max(report.max_feature_dev, dev)
        e_rel = abs(e1 - e0) / max(abs(e0), 1e-6)
        report.max_energy_rel = max(report.max_energy_rel, e_rel)
        f_scale = max(float(np.abs(f0).max()), 1e-12)
        f_rel = float(np.abs(f1 - f0 @ r.T).max()) / f_scale
        report.max_force_rel = max(report.max_force_rel, f_rel)

        perm = rng.permutation(n)
        permuted = AtomicSystem(numbers=system.numbers[perm],
                                positions=system.positions[perm])
        _, f2, feats2 = _forward(params, config, permuted, corrupt_skew_sign)
        perm_feat = max(float(np.abs(fa - fb[perm]).max())
                        for fa, fb in zip(feats2, feats0))
        report.max_perm_feature_dev = max(report.max_perm_feature_dev, perm_feat)
        report.max_perm_force_dev = max(report.max_perm_force_dev,
                                        float(np.abs(f2 - f0[perm]).max()))

        shift = snap_to_grid(rng.uniform(-4.0, 4.0, size=3))
        shifted = AtomicSystem(numbers=system.numbers, positions=system.positions + shift)
        e3, _, _ = _forward(params, config, shifted, corrupt_skew_sign)
        report.max_translation_dev = max(report.max_translation_dev, abs(e3 - e0))

    if trials == 0:
        return report
    if report.max_feature_dev > tol_feature:
        report.failures.append(f"feature law violated ({report.max_feature_dev:.3e})")
    if report.max_energy_rel > tol_energy:
        report.failures.append(f"energy not invariant ({report.max_energy_rel:.3e})")
    if report.max_force_rel > tol_force:
        report.failures.append(f"forces not covariant ({report.max_force_rel:.3e})")
    if report.max_perm_feature_dev > 0.0 or report.max_perm_force_dev > 0.0:
        report.failures.append("permutation equivariance not bitwise")
    if report.max_translation_dev > 0.0:
        report.failures.append("translation invariance not bitwise")
    return report
