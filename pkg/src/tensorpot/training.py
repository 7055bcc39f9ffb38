"""Loss construction, Adam, LR scheduling, train/eval loops, checkpoints.

The training gradient for force matching needs the mixed second derivative
d/dparams (dE/dpositions . residual). Per batch this costs one forward, one
reverse pass for the forces, a tangent subgraph seeded with the force-loss
residual, and one reverse pass over the extended tape; see autodiff.

Determinism contract: a fixed (seed, config, data) triple reproduces the
metrics history and the checkpoints bitwise. Batch order is drawn from a
per-epoch generator seeded with (seed, epoch), so a resumed run replays the
exact same batches.
"""
from __future__ import annotations

import gc
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import DataError, DatasetSplit, build_neighbor_list, fit_reference_energies, split
from .model import (
    Batch,
    ModelConfig,
    ModelParams,
    build_energy_graph,
    init_params,
    load_checkpoint,
    make_batch,
    save_checkpoint,
)

__all__ = [
    "EvalResult",
    "Metrics",
    "NumericalFailure",
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "adam_step",
    "batch_gradients",
    "clip_gradients",
    "compute_metrics",
    "evaluate",
    "loss_value",
    "train",
    "warmup_lr",
    "write_metrics_log",
]

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class NumericalFailure(RuntimeError):
    """Non-finite loss/gradients; carries the offending batch diagnostics."""

    def __init__(self, message, batch_indices=None, grad_norms=None):
        super().__init__(message)
        self.batch_indices = batch_indices
        self.grad_norms = grad_norms


@dataclass
class TrainConfig:
    """Optimization hyperparameters; field names match the config-file keys."""

    batch_size: int = 16
    lr: float = 1e-3
    lr_factor: float = 0.5
    lr_min: float = 1e-7
    lr_patience: int = 15
    lr_warmup_steps: int = 0
    early_stopping_patience: int = 100
    gradient_clipping: float = 40.0
    y_weight: float = 1.0
    neg_dy_weight: float = 10.0
    max_epochs: int = 100
    seed: int = 1
    derivative: bool = True
    train_size: float = 0.5
    val_size: float = 0.1

    def __post_init__(self):
        if not (self.lr > self.lr_min > 0.0):
            raise ValueError("need lr > lr_min > 0")
        if not (0.0 < self.lr_factor < 1.0):
            raise ValueError("need 0 < lr_factor < 1")
        if min(self.y_weight, self.neg_dy_weight) < 0.0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size >= 1 and max_epochs >= 0 required")


@dataclass
class TrainState:
    """Serializable optimizer/progress state; resuming from it reproduces
    the continuation bitwise."""

    base_lr: float
    epoch: int = 0
    step: int = 0
    adam_t: int = 0
    best_val: float = math.inf
    epochs_since_best: int = 0
    plateau_count: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)

    def ensure_moments(self, params: ModelParams):
        for name in params.trainable_names():
            if name not in self.adam_m:
                self.adam_m[name] = np.zeros_like(params[name])
                self.adam_v[name] = np.zeros_like(params[name])


# ---------------------------------------------------------------------------
# loss

def loss_value(pred_energies, label_energies, pred_forces, label_forces, config: TrainConfig):
    """y_weight * MSE(energies) + neg_dy_weight * MSE(force components).

    The force term is dropped when ``derivative`` is off; it is an error to
    weight forces without force labels.
    """
    pred_energies = np.asarray(pred_energies, dtype=np.float64)
    label_energies = np.asarray(label_energies, dtype=np.float64)
    e_term = float(np.mean((pred_energies - label_energies) ** 2))
    f_term = 0.0
    if config.derivative and config.neg_dy_weight > 0.0:
        if pred_forces is None or label_forces is None:
            raise DataError("force-weighted loss requires force labels (neg_dy_weight > 0)")
        diff = np.asarray(pred_forces) - np.asarray(label_forces)
        f_term = float(np.mean(diff ** 2))
    return config.y_weight * e_term + config.neg_dy_weight * f_term, e_term, f_term


def batch_gradients(params: ModelParams, model_config: ModelConfig, batch: Batch,
                    config: TrainConfig):
    """One training step's loss and parameter gradients for a batch.

    Returns (grads by name, loss, energy term, force term). The energy-term
    gradient flows through an on-tape MSE node; the force-term gradient is
    the tangent of the total energy seeded with the force residual,
    differentiated by the same reverse pass.
    """
    if batch.energies is None:
        raise DataError("training batch lacks energy labels")
    eg = build_energy_graph(params, model_config, batch)
    graph = eg.graph
    b = batch.n_systems

    forces = None
    if config.derivative:
        if batch.forces is None and config.neg_dy_weight > 0.0:
            raise DataError("force-weighted loss requires force labels (neg_dy_weight > 0)")
        grads_pos = ad.backward(eg.total, wrt=[eg.positions])
        forces = -grads_pos.get(eg.positions)

    loss, e_term, f_term = loss_value(
        eg.energies.val, batch.energies, forces, batch.forces, config
    )

    diff = ad.sub(eg.energies, graph.constant(batch.energies))
    loss_energy = ad.scale(ad.sum_reduce(ad.mul(diff, diff)), config.y_weight / b)
    surrogate = loss_energy
    if config.derivative and config.neg_dy_weight > 0.0:
        residual = 2.0 * config.neg_dy_weight * (forces - batch.forces) / batch.forces.size
        tangent = ad.tangent_forward(eg.total, {eg.positions: residual})
        # d loss_force / d params = -d/dparams (residual . dE/dpositions)
        surrogate = ad.sub(surrogate, tangent)
    grads = ad.backward(surrogate)
    out = {name: grads.get(leaf) for name, leaf in eg.params.items()}
    graph.release()
    return out, loss, e_term, f_term


# ---------------------------------------------------------------------------
# optimizer and schedules

def clip_gradients(grads: dict, max_norm: float):
    """Scale the global L2 norm down to max_norm; direction is preserved."""
    if max_norm <= 0.0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}, total


def adam_step(params: ModelParams, grads: dict, state: TrainState, lr: float):
    """Bias-corrected Adam update, in place, in fixed parameter order."""
    state.ensure_moments(params)
    state.adam_t += 1
    t = state.adam_t
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name in params.trainable_names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient for {name}")
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        params.arrays[name] = params.arrays[name] - update
    return params


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear ramp from 0 to base_lr over warmup_steps (step counts from 1)."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


# ---------------------------------------------------------------------------
# metrics

@dataclass
class Metrics:
    """Error statistics in meV / meV-per-atom / meV-per-Angstrom."""

    count: int
    energy_mae: float
    energy_rmse: float
    energy_mae_per_atom: float
    energy_rmse_per_atom: float
    force_mae: float | None = None
    force_rmse: float | None = None
    force_mae_vector: float | None = None

    def as_dict(self):
        return asdict(self)


def compute_metrics(pred_e, label_e, n_atoms, pred_f=None, label_f=None) -> Metrics:
    pred_e, label_e = np.asarray(pred_e), np.asarray(label_e)
    n_atoms = np.asarray(n_atoms, dtype=np.float64)
    de = (pred_e - label_e) * 1000.0
    de_atom = de / n_atoms
    force_mae = force_rmse = force_vec = None
    if pred_f is not None and label_f is not None:
        df = (np.concatenate([np.ravel(a) for a in pred_f])
              - np.concatenate([np.ravel(a) for a in label_f])) * 1000.0
        force_mae = float(np.mean(np.abs(df)))
        force_rmse = float(np.sqrt(np.mean(df ** 2)))
        vec = [
            np.linalg.norm(np.asarray(p) - np.asarray(l), axis=1) * 1000.0
            for p, l in zip(pred_f, label_f)
        ]
        force_vec = float(np.mean(np.concatenate(vec)))
    return Metrics(
        count=int(pred_e.shape[0]),
        energy_mae=float(np.mean(np.abs(de))),
        energy_rmse=float(np.sqrt(np.mean(de ** 2))),
        energy_mae_per_atom=float(np.mean(np.abs(de_atom))),
        energy_rmse_per_atom=float(np.sqrt(np.mean(de_atom ** 2))),
        force_mae=force_mae,
        force_rmse=force_rmse,
        force_mae_vector=force_vec,
    )


@dataclass
class EvalResult:
    overall: Metrics
    groups: dict
    pred_energies: np.ndarray
    pred_forces: list


def evaluate(params: ModelParams, model_config: ModelConfig, systems, indices=None,
             group_by: str | None = None, batch_size: int = 16,
             with_forces: bool = True, neighbor_cache: dict | None = None) -> EvalResult:
    """Metrics against labels, overall and per attribute group."""
    systems = list(systems)
    if indices is None:
        indices = np.arange(len(systems))
    indices = np.asarray(indices)
    pred_e = np.zeros(len(indices))
    pred_f: list = [None] * len(indices)
    for lo in range(0, len(indices), batch_size):
        chunk_ids = indices[lo:lo + batch_size]
        chunk = [systems[i] for i in chunk_ids]
        nls = None
        if neighbor_cache is not None:
            nls = [_cached_nl(neighbor_cache, systems, i, model_config.cutoff_upper)
                   for i in chunk_ids]
        batch = make_batch(chunk, model_config.cutoff_upper, neighbor_lists=nls)
        eg = build_energy_graph(params, model_config, batch)
        pred_e[lo:lo + len(chunk)] = eg.energies.val
        if with_forces:
            grads = ad.backward(eg.total, wrt=[eg.positions])
            f_all = -grads.get(eg.positions)
            bounds = batch.system_starts + [batch.n_atoms]
            for k in range(len(chunk)):
                pred_f[lo + k] = f_all[bounds[k]:bounds[k + 1]]
        eg.graph.release()

    chosen = [systems[i] for i in indices]
    label_e = np.array([s.energy for s in chosen])
    n_atoms = np.array([s.n_atoms for s in chosen])
    have_force_labels = with_forces and all(s.forces is not None for s in chosen)
    label_f = [s.forces for s in chosen] if have_force_labels else None
    overall = compute_metrics(pred_e, label_e, n_atoms,
                              pred_f if have_force_labels else None, label_f)

    groups = {}
    if group_by is not None:
        keys = np.array([getattr(s, group_by) for s in chosen])
        for key in np.unique(keys):
            mask = keys == key
            groups[float(key)] = compute_metrics(
                pred_e[mask], label_e[mask], n_atoms[mask],
                [f for f, m in zip(pred_f, mask) if m] if have_force_labels else None,
                [f for f, m in zip(label_f, mask) if m] if have_force_labels else None,
            )
    return EvalResult(overall=overall, groups=groups, pred_energies=pred_e, pred_forces=pred_f)


def _cached_nl(cache: dict, systems, idx, cutoff):
    key = int(idx)
    if key not in cache:
        cache[key] = build_neighbor_list(systems[key], cutoff)
    return cache[key]


# ---------------------------------------------------------------------------
# training loop

_LOG_COLUMNS = (
    "epoch", "step", "lr", "train_loss", "val_loss",
    "val_energy_mae", "val_force_mae",
)


def write_metrics_log(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + "\t".join(_LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(_format_cell(row[c]) for c in _LOG_COLUMNS) + "\n")


def _format_cell(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


@dataclass
class TrainResult:
    history: list
    best_path: Path
    last_path: Path
    state: TrainState
    split: DatasetSplit
    ref_energies: dict


def _state_extras(state: TrainState) -> dict:
    extras = {
        "state/epoch": np.array(state.epoch),
        "state/step": np.array(state.step),
        "state/adam_t": np.array(state.adam_t),
        "state/base_lr": np.array(state.base_lr),
        "state/best_val": np.array(state.best_val),
        "state/epochs_since_best": np.array(state.epochs_since_best),
        "state/plateau_count": np.array(state.plateau_count),
    }
    for name, arr in state.adam_m.items():
        extras[f"adam_m/{name}"] = arr
    for name, arr in state.adam_v.items():
        extras[f"adam_v/{name}"] = arr
    return extras


def _state_from_extras(extras: dict, base_lr: float) -> TrainState:
    state = TrainState(base_lr=float(extras.get("state/base_lr", base_lr)))
    state.epoch = int(extras.get("state/epoch", 0))
    state.step = int(extras.get("state/step", 0))
    state.adam_t = int(extras.get("state/adam_t", 0))
    state.best_val = float(extras.get("state/best_val", math.inf))
    state.epochs_since_best = int(extras.get("state/epochs_since_best", 0))
    state.plateau_count = int(extras.get("state/plateau_count", 0))
    for key, arr in extras.items():
        if key.startswith("adam_m/"):
            state.adam_m[key[len("adam_m/"):]] = np.array(arr)
        elif key.startswith("adam_v/"):
            state.adam_v[key[len("adam_v/"):]] = np.array(arr)
    return state


def train(systems, model_config: ModelConfig, config: TrainConfig, out_dir,
          data_split: DatasetSplit | None = None, resume_from=None,
          log=None) -> TrainResult:
    """Run the optimization loop; writes metrics.tsv plus best/last checkpoints.

    ``data_split`` defaults to a deterministic (train_size, val_size) split
    with the training seed. Reference energies are fitted on the train split
    only and stored inside the checkpoints.
    """
    systems = list(systems)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.ckpt.npz"
    last_path = out_dir / "last.ckpt.npz"

    if data_split is None:
        data_split = split(len(systems), config.train_size, config.val_size, config.seed)

    train_systems = [systems[i] for i in data_split.train]
    refs = fit_reference_energies(train_systems)
    for z in {int(z) for s in systems for z in s.numbers}:
        model_config.element_index(z)  # raises on uncovered elements

    history: list[dict] = []
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        params = ckpt.params
        state = _state_from_extras(ckpt.extras, config.lr)
        history = list(ckpt.meta.get("history", []))
    else:
        params = init_params(model_config, config.seed)
        ref_row = np.array([refs.get(z, 0.0) for z in model_config.elements])
        params.arrays["ref_energies"] = ref_row
        state = TrainState(base_lr=config.lr)
    state.ensure_moments(params)

    nl_cache: dict = {}
    meta_common = {"train_config": asdict(config)}

    def emit(path, meta_extra=None):
        meta = dict(meta_common)
        meta["history"] = history
        if meta_extra:
            meta.update(meta_extra)
        save_checkpoint(path, model_config, params, extras=_state_extras(state), meta=meta)

    if state.epoch >= config.max_epochs:
        emit(best_path)
        emit(last_path)
        return TrainResult(history, best_path, last_path, state, data_split, refs)

    gc_threshold = gc.get_threshold()
    gc.set_threshold(100_000, gc_threshold[1], gc_threshold[2])
    try:
        for epoch in range(state.epoch + 1, config.max_epochs + 1):
            order = np.random.default_rng([config.seed, epoch]).permutation(data_split.train)
            epoch_loss = 0.0
            n_batches = 0
            for lo in range(0, len(order), config.batch_size):
                ids = order[lo:lo + config.batch_size]
                nls = [_cached_nl(nl_cache, systems, i, model_config.cutoff_upper) for i in ids]
                batch = make_batch([systems[i] for i in ids], model_config.cutoff_upper,
                                   neighbor_lists=nls)
                state.step += 1
                lr = warmup_lr(state.base_lr, state.step, config.lr_warmup_steps)
                grads, loss, _, _ = batch_gradients(params, model_config, batch, config)
                if not math.isfinite(loss):
                    norms = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
                    raise NumericalFailure(
                        f"non-finite loss at epoch {epoch} step {state.step}",
                        batch_indices=ids.tolist(), grad_norms=norms,
                    )
                grads, _ = clip_gradients(grads, config.gradient_clipping)
                adam_step(params, grads, state, lr)
                epoch_loss += loss
                n_batches += 1

            val = evaluate(params, model_config, systems, data_split.val,
                           batch_size=config.batch_size, with_forces=config.derivative,
                           neighbor_cache=nl_cache)
            label_e = np.array([systems[i].energy for i in data_split.val])
            label_f = [systems[i].forces for i in data_split.val] if config.derivative else None
            val_loss, _, _ = loss_value(
                val.pred_energies, label_e,
                np.concatenate([f.ravel() for f in val.pred_forces]) if config.derivative else None,
                np.concatenate([f.ravel() for f in label_f]) if config.derivative else None,
                config,
            )

            state.epoch = epoch
            row = {
                "epoch": epoch,
                "step": state.step,
                "lr": warmup_lr(state.base_lr, state.step, config.lr_warmup_steps),
                "train_loss": epoch_loss / max(n_batches, 1),
                "val_loss": val_loss,
                "val_energy_mae": val.overall.energy_mae,
                "val_force_mae": val.overall.force_mae if config.derivative else float("nan"),
            }
            history.append(row)
            if log is not None:
                log(row)

            if val_loss < state.best_val:
                state.best_val = val_loss
                state.epochs_since_best = 0
                state.plateau_count = 0
                emit(best_path, {"best_epoch": epoch})
            else:
                state.epochs_since_best += 1
                state.plateau_count += 1
                if state.plateau_count >= config.lr_patience:
                    state.base_lr = max(config.lr_min, state.base_lr * config.lr_factor)
                    state.plateau_count = 0

            if state.epochs_since_best >= config.early_stopping_patience:
                break
            gc.collect()
    finally:
        gc.set_threshold(*gc_threshold)

    if not best_path.exists():
        emit(best_path)
    emit(last_path)
    write_metrics_log(out_dir / "metrics.tsv", history)
    return TrainResult(history, best_path, last_path, state, data_split, refs)
