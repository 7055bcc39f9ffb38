"""Tensor message-passing potential with attribute conditioning.

Per atom the model carries one 3x3 tensor per channel. Each interaction
layer normalizes the features, exchanges neighbor messages built from the
three irreducible components weighted by learned radial functions, combines
node and message tensors through the symmetrized matrix product
Y M + M Y, and applies a residual update with a squared term. A scalar
attribute psi (total charge, spin, or a per-atom value) rescales the
product and squared-residual terms by (1 + lam * psi) and
(1 + lam_tilde * psi); with psi = 0 the conditioned model reduces bitwise
to the unconditioned one.

Transformation law: under an orthogonal input transform R the trace and
symmetric-traceless components conjugate as R X Rt while the antisymmetric
component (seeded from a direction pseudo-tensor) picks up an extra det(R).
Scalar invariants, and therefore energies and forces, are exact O(3)
scalars/vectors. Node-level transforms are per-component channel mixes with
silu gates computed from component norms; activations never touch raw
tensor entries, which would break this law.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffGraph, DiffValue, GroupPlan, make_group_plan
from .data import AtomicSystem, build_neighbor_list

__all__ = [
    "AttributeValue",
    "Batch",
    "Checkpoint",
    "EnergyGraph",
    "ModelConfig",
    "ModelParams",
    "UnknownElementError",
    "attribute_values",
    "build_energy_graph",
    "cosine_cutoff",
    "init_params",
    "load_checkpoint",
    "make_batch",
    "predict",
    "radial_weights",
    "save_checkpoint",
]

ATTRIBUTE_MODES = ("none", "total_charge", "spin", "per_atom_charge")

# generators of the cross-product (vector seed) matrix
_GEN_X = np.array([[0.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
_GEN_Y = np.array([[0.0, 0, 1.0], [0, 0, 0], [-1.0, 0, 0]])
_GEN_Z = np.array([[0.0, -1.0, 0], [1.0, 0, 0], [0, 0, 0]])
_EYE = np.eye(3)


class UnknownElementError(KeyError):
    """An atomic number has no embedding row / reference energy."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; names follow the training-config keys."""

    elements: tuple[int, ...]
    cutoff_lower: float = 0.0
    cutoff_upper: float = 5.0
    num_channels: int = 128      # embedding_dimension
    num_layers: int = 2
    num_rbf: int = 32
    head_hidden: int = 0         # 0 -> num_channels
    attribute_mode: str = "none"
    lam: tuple[float, ...] = 0.1          # per-layer attribute weight
    lam_tilde: tuple[float, ...] = None   # defaults to lam
    lambdas_learnable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(sorted(int(z) for z in self.elements)))
        if len(set(self.elements)) != len(self.elements) or not self.elements:
            raise ValueError("elements must be a non-empty set of atomic numbers")
        if not (self.cutoff_upper > self.cutoff_lower >= 0.0):
            raise ValueError("need cutoff_upper > cutoff_lower >= 0")
        if min(self.num_layers, self.num_rbf, self.num_channels) < 1:
            raise ValueError("num_layers, num_rbf and num_channels must be >= 1")
        if self.attribute_mode not in ATTRIBUTE_MODES:
            raise ValueError(f"attribute_mode must be one of {ATTRIBUTE_MODES}")
        lam = self.lam if isinstance(self.lam, (tuple, list)) else (float(self.lam),) * self.num_layers
        lam_tilde = self.lam_tilde if self.lam_tilde is not None else tuple(lam)
        if not isinstance(lam_tilde, (tuple, list)):
            lam_tilde = (float(lam_tilde),) * self.num_layers
        if len(lam) != self.num_layers or len(lam_tilde) != self.num_layers:
            raise ValueError("lam / lam_tilde must provide one value per layer")
        object.__setattr__(self, "lam", tuple(float(v) for v in lam))
        object.__setattr__(self, "lam_tilde", tuple(float(v) for v in lam_tilde))

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.num_channels

    def element_index(self, z: int) -> int:
        try:
            return self.elements.index(int(z))
        except ValueError:
            raise UnknownElementError(
                f"element Z={int(z)} is not covered by this model (knows {self.elements})"
            )

    def to_json(self) -> str:
        return json.dumps({
            "elements": list(self.elements),
            "cutoff_lower": self.cutoff_lower,
            "cutoff_upper": self.cutoff_upper,
            "num_channels": self.num_channels,
            "num_layers": self.num_layers,
            "num_rbf": self.num_rbf,
            "head_hidden": self.head_hidden,
            "attribute_mode": self.attribute_mode,
            "lam": list(self.lam),
            "lam_tilde": list(self.lam_tilde),
            "lambdas_learnable": self.lambdas_learnable,
        })

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        raw["elements"] = tuple(raw["elements"])
        raw["lam"] = tuple(raw["lam"])
        raw["lam_tilde"] = tuple(raw["lam_tilde"])
        return cls(**raw)


class ModelParams:
    """Named parameter arrays in a fixed creation order.

    ``ref_energies`` (per-element, eV) rides along but is never trainable;
    the lam/lam_tilde scalars are trainable only when the config says so.
    """

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def trainable_names(self) -> list[str]:
        return [n for n in self.arrays if n != "ref_energies"]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def ref_energy(self, config: ModelConfig, z: int) -> float:
        return float(self.arrays["ref_energies"][config.element_index(z)])


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic parameter initialization (Glorot-uniform linear maps)."""
    rng = np.random.default_rng(seed)
    c, k, h = config.num_channels, config.num_rbf, config.hidden

    def glorot(*shape):
        bound = np.sqrt(6.0 / (shape[0] + shape[-1]))
        return rng.uniform(-bound, bound, size=shape)

    arrays: dict[str, np.ndarray] = {}
    arrays["embed.z"] = rng.normal(size=(len(config.elements), c))

    def add_block(prefix: str):
        for part in ("I", "A", "S"):
            arrays[f"{prefix}.rbf_{part}.w"] = glorot(k, c)
            arrays[f"{prefix}.rbf_{part}.b"] = np.zeros(c)

    add_block("embed")
    for part in ("I", "A", "S"):
        arrays[f"embed.mix_{part}"] = glorot(c, c)
    arrays["embed.gate.w"] = glorot(3 * c, 3 * c)
    arrays["embed.gate.b"] = np.ones(3 * c)

    for layer in range(config.num_layers):
        p = f"layer{layer}"
        add_block(p)
        for part in ("I", "A", "S"):
            arrays[f"{p}.mix_y_{part}"] = glorot(c, c)
            arrays[f"{p}.mix_d_{part}"] = glorot(c, c)
        arrays[f"{p}.gate.w"] = glorot(3 * c, 3 * c)
        arrays[f"{p}.gate.b"] = np.ones(3 * c)
        if config.lambdas_learnable:
            arrays[f"{p}.lam"] = np.asarray(config.lam[layer])
            arrays[f"{p}.lam_tilde"] = np.asarray(config.lam_tilde[layer])

    arrays["head.w1"] = glorot(3 * c, h)
    arrays["head.b1"] = np.zeros(h)
    arrays["head.w2"] = glorot(h, 1)
    arrays["head.b2"] = np.zeros(1)
    arrays["ref_energies"] = np.zeros(len(config.elements))
    return ModelParams(arrays)


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    """Systems concatenated into one disconnected graph."""

    numbers: np.ndarray          # (sum N,)
    positions: np.ndarray        # (sum N, 3)
    segment: np.ndarray          # (sum N,) owning system id
    system_starts: list[int]
    n_systems: int
    senders: np.ndarray
    receivers: np.ndarray
    recv_plan: GroupPlan
    send_plan: GroupPlan
    total_charge: np.ndarray     # (B,)
    spin: np.ndarray             # (B,)
    charges: np.ndarray | None   # (sum N,)
    energies: np.ndarray | None  # (B,) labels
    forces: np.ndarray | None    # (sum N, 3) labels

    @property
    def n_atoms(self) -> int:
        return int(self.numbers.shape[0])


def make_batch(systems, cutoff: float, neighbor_lists=None) -> Batch:
    """Concatenate systems; per-system neighbor lists may be passed in cached."""
    systems = list(systems)
    if neighbor_lists is None:
        neighbor_lists = [build_neighbor_list(s, cutoff) for s in systems]
    starts, offset = [], 0
    numbers, positions, segment = [], [], []
    senders, receivers = [], []
    for sid, (s, nl) in enumerate(zip(systems, neighbor_lists)):
        starts.append(offset)
        numbers.append(s.numbers)
        positions.append(s.positions)
        segment.append(np.full(s.n_atoms, sid, dtype=np.intp))
        senders.append(nl.senders + offset)
        receivers.append(nl.receivers + offset)
        offset += s.n_atoms
    numbers = np.concatenate(numbers)
    send = np.concatenate(senders) if senders else np.zeros(0, dtype=np.intp)
    recv = np.concatenate(receivers) if receivers else np.zeros(0, dtype=np.intp)
    has_charges = all(s.charges is not None for s in systems)
    has_energy = all(s.energy is not None for s in systems)
    has_forces = all(s.forces is not None for s in systems)
    return Batch(
        numbers=numbers,
        positions=np.concatenate(positions),
        segment=np.concatenate(segment),
        system_starts=starts,
        n_systems=len(systems),
        senders=send,
        receivers=recv,
        recv_plan=make_group_plan(recv, size=numbers.shape[0]),
        send_plan=make_group_plan(send, size=numbers.shape[0]),
        total_charge=np.array([s.total_charge for s in systems]),
        spin=np.array([s.spin for s in systems]),
        charges=np.concatenate([s.charges for s in systems]) if has_charges else None,
        energies=np.array([s.energy for s in systems]) if has_energy else None,
        forces=np.concatenate([s.forces for s in systems]) if has_forces else None,
    )


@dataclass(frozen=True)
class AttributeValue:
    """Attribute driving the (1 + lam * psi) scaling: one value per system
    for global kinds, one per atom for per_atom_charge."""

    kind: str
    values: np.ndarray


def attribute_values(config: ModelConfig, batch: Batch) -> AttributeValue | None:
    if config.attribute_mode == "none":
        return None
    if config.attribute_mode == "total_charge":
        return AttributeValue("total_charge", batch.total_charge)
    if config.attribute_mode == "spin":
        return AttributeValue("spin", batch.spin)
    if batch.charges is None:
        raise ValueError("attribute_mode=per_atom_charge but systems carry no charges")
    return AttributeValue("per_atom_charge", batch.charges)


def _per_atom_psi(attr: AttributeValue | None, batch: Batch) -> np.ndarray | None:
    if attr is None:
        return None
    if attr.kind == "per_atom_charge":
        return attr.values
    return attr.values[batch.segment]


# ---------------------------------------------------------------------------
# cutoff and radial basis

def cosine_cutoff(r, cutoff_lower: float, cutoff_upper: float) -> np.ndarray:
    """Smooth envelope: 1 below the lower cutoff, 0 at and beyond the upper."""
    r = np.asarray(r, dtype=np.float64)
    t = (r - cutoff_lower) / (cutoff_upper - cutoff_lower)
    phi = 0.5 * (np.cos(np.pi * t) + 1.0)
    phi = np.where(r < cutoff_lower, 1.0, phi)
    return np.where(r >= cutoff_upper, 0.0, phi)


def _cutoff_nodes(r: DiffValue, config: ModelConfig) -> DiffValue:
    span = config.cutoff_upper - config.cutoff_lower
    raw = ad.scale(
        ad.add_const(ad.cos(ad.scale(ad.add_const(r, -config.cutoff_lower), np.pi / span)), 1.0),
        0.5,
    )
    if config.cutoff_lower > 0.0:
        below = (r.val < config.cutoff_lower).astype(float)
        keep = r.graph.constant(1.0 - below)
        one = r.graph.constant(below)
        raw = ad.add(ad.mul(raw, keep), one)
    return raw


def _rbf_nodes(r: DiffValue, config: ModelConfig) -> DiffValue:
    """Exponentially warped Gaussian basis on [cutoff_lower, cutoff_upper]."""
    span = config.cutoff_upper - config.cutoff_lower
    means = np.linspace(np.exp(-span), 1.0, config.num_rbf)
    beta = (2.0 * (1.0 - np.exp(-span)) / config.num_rbf) ** -2
    x = ad.exp(ad.neg(ad.add_const(r, -config.cutoff_lower)))        # (E, 1)
    diff = ad.sub(x, r.graph.constant(means))                        # (E, K)
    return ad.exp(ad.scale(ad.mul(diff, diff), -beta))


def radial_weights(params: ModelParams, config: ModelConfig, r, source: str = "embed"):
    """Evaluate the learned distance filters f_I, f_A, f_S at distances r.

    ``source`` selects the parameter block ("embed" or "layer<k>"). Runs the
    same tape ops as the forward pass.
    """
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    graph = DiffGraph()
    r_node = graph.constant(r[:, None])
    rbf = _rbf_nodes(r_node, config)
    out = []
    for part in ("I", "A", "S"):
        w = graph.constant(params[f"{source}.rbf_{part}.w"])
        b = graph.constant(params[f"{source}.rbf_{part}.b"])
        out.append(ad.linear(rbf, w, b).val)
    return tuple(out)


# ---------------------------------------------------------------------------
# forward pass

@dataclass
class EnergyGraph:
    """Forward tape plus handles needed for gradients and inspection."""

    graph: DiffGraph
    energies: DiffValue              # (B,) per-system energies, eV
    total: DiffValue                 # scalar sum over systems
    positions: DiffValue             # leaf
    params: dict[str, DiffValue]     # leaves by name
    layer_features: list[DiffValue]  # embedding output + each layer output
    batch: Batch


def _channel_mix(x: DiffValue, w: DiffValue) -> DiffValue:
    moved = ad.moveaxis(x, 1, 3)                     # (N, 3, 3, C)
    zero = x.graph.constant(np.zeros(w.shape[1]))
    return ad.moveaxis(ad.linear(moved, w, zero), 3, 1)


def _decompose(x: DiffValue, eye: DiffValue):
    tr = ad.trace_last2(x)
    i_part = ad.mul(ad.scale(tr, 1.0 / 3.0), eye)
    xt = ad.transpose_last2(x)
    a_part = ad.scale(ad.sub(x, xt), 0.5)
    s_part = ad.sub(ad.scale(ad.add(x, xt), 0.5), i_part)
    return i_part, a_part, s_part


def _part_norms(parts, n: int, c: int) -> DiffValue:
    feats = [ad.frob2_last2(p) for p in parts]
    return ad.concat_last(feats)                      # (N, 3C)


def _gated_recombine(parts, prefix: str, mix_key: str, p: dict, n: int, c: int):
    inv = _part_norms(parts, n, c)
    gates = ad.silu(ad.linear(inv, p[f"{prefix}.gate.w"], p[f"{prefix}.gate.b"]))
    out = None
    for k, (tag, part) in enumerate(zip(("I", "A", "S"), parts)):
        gate = ad.reshape(ad.slice_last(gates, k * c, (k + 1) * c), (n, c, 1, 1))
        mixed = _channel_mix(part, p[f"{prefix}.{mix_key}{tag}"])
        term = ad.mul(gate, mixed)
        out = term if out is None else ad.add(out, term)
    return out


def _normalize(x: DiffValue) -> DiffValue:
    frob2 = ad.frob2_last2(x, keepdims=True)
    # tiny floor keeps d(sqrt) finite on an exactly-zero channel
    norm = ad.sqrt(ad.add_const(frob2, 1e-30))
    return ad.mul(x, ad.reciprocal(ad.add_const(norm, 1.0)))


def _radial_heads(rbf: DiffValue, phi: DiffValue, prefix: str, p: dict, e: int, c: int):
    out = []
    for part in ("I", "A", "S"):
        f = ad.linear(rbf, p[f"{prefix}.rbf_{part}.w"], p[f"{prefix}.rbf_{part}.b"])
        out.append(ad.reshape(ad.mul(phi, f), (e, c, 1, 1)))
    return out


def _scale_factor(graph, psi_node, lam_value, lam_leaf) -> DiffValue | None:
    """Node computing (1 + lam * psi) with shape (N, 1, 1, 1)."""
    if psi_node is None:
        return None
    if lam_leaf is not None:
        return ad.add_const(ad.mul(psi_node, lam_leaf), 1.0)
    return ad.add_const(ad.scale(psi_node, lam_value), 1.0)


def build_energy_graph(
    params: ModelParams,
    config: ModelConfig,
    batch: Batch,
    *,
    corrupt_skew_sign: bool = False,
) -> EnergyGraph:
    """Record the full energy computation on a fresh tape.

    ``corrupt_skew_sign`` flips the z-generator of the vector seed: a
    deliberately frame-dependent defect used by the equivariance harness to
    prove it detects violations. (A global sign flip would be an exact gauge
    symmetry of the architecture and invisible to every observable.)
    """
    g = DiffGraph()
    n, c, e = batch.n_atoms, config.num_channels, batch.senders.shape[0]
    pos = g.leaf(batch.positions)
    p = {name: g.leaf(params[name]) for name in params.trainable_names()}

    zidx = np.array([config.element_index(z) for z in batch.numbers], dtype=np.intp)
    z_plan = make_group_plan(zidx, size=len(config.elements))
    emb_atom = ad.gather(p["embed.z"], z_plan)                    # (N, C)
    eye = g.constant(_EYE)

    psi = _per_atom_psi(attribute_values(config, batch), batch)
    psi_node = g.constant(psi.reshape(n, 1, 1, 1)) if psi is not None else None

    if e > 0:
        pi = ad.gather(pos, batch.recv_plan)
        pj = ad.gather(pos, batch.send_plan)
        dx = ad.sub(pj, pi)
        r2 = ad.sum_reduce(ad.mul(dx, dx), axis=-1, keepdims=True)
        r = ad.sqrt(r2)
        unit = ad.mul(dx, ad.reciprocal(r))
        phi = _cutoff_nodes(r, config)                            # (E, 1)
        rbf = _rbf_nodes(r, config)                               # (E, K)

        comps = []
        for axis in range(3):
            mask = np.zeros(3)
            mask[axis] = 1.0
            comp = ad.sum_reduce(ad.mul(unit, g.constant(mask)), axis=-1, keepdims=True)
            comps.append(ad.reshape(comp, (e, 1, 1)))
        gen_z = -_GEN_Z if corrupt_skew_sign else _GEN_Z
        skew = ad.add(
            ad.add(ad.mul(comps[0], g.constant(_GEN_X)), ad.mul(comps[1], g.constant(_GEN_Y))),
            ad.mul(comps[2], g.constant(gen_z)),
        )                                                          # (E, 3, 3)
        outer = ad.mul(ad.reshape(unit, (e, 3, 1)), ad.reshape(unit, (e, 1, 3)))
        traceless = ad.sub(outer, g.constant(_EYE / 3.0))

        f_heads = _radial_heads(rbf, phi, "embed", p, e, c)
        zi = ad.gather(emb_atom, batch.recv_plan)
        zj = ad.gather(emb_atom, batch.send_plan)
        zfac = ad.reshape(ad.mul(zi, zj), (e, c, 1, 1))
        seeds = [
            ad.reshape(s, (e, 1, 3, 3))
            for s in (g.constant(np.broadcast_to(_EYE, (e, 3, 3)).copy()), skew, traceless)
        ]
        edge_feat = None
        for f, seed in zip(f_heads, seeds):
            term = ad.mul(ad.mul(f, zfac), seed)
            edge_feat = term if edge_feat is None else ad.add(edge_feat, term)
        x = ad.scatter_sum(edge_feat, batch.recv_plan)             # (N, C, 3, 3)
        node_seed = ad.mul(ad.reshape(emb_atom, (n, c, 1, 1)), eye)
        x = ad.add(x, node_seed)
    else:
        x = ad.mul(ad.reshape(emb_atom, (n, c, 1, 1)), eye)

    x = _gated_recombine(_decompose(x, eye), "embed", "mix_", p, n, c)
    layer_features = [x]

    for layer in range(config.num_layers):
        prefix = f"layer{layer}"
        xn = _normalize(x)
        i_part, a_part, s_part = _decompose(xn, eye)
        y_parts = [
            _channel_mix(part, p[f"{prefix}.mix_y_{tag}"])
            for tag, part in zip(("I", "A", "S"), (i_part, a_part, s_part))
        ]
        y = ad.add(ad.add(y_parts[0], y_parts[1]), y_parts[2])

        if e > 0:
            f_heads = _radial_heads(rbf, phi, prefix, p, e, c)
            msg = None
            for f, part in zip(f_heads, y_parts):
                term = ad.mul(f, ad.gather(part, batch.send_plan))
                msg = term if msg is None else ad.add(msg, term)
            m = ad.scatter_sum(msg, batch.recv_plan)
            prod = ad.add(ad.matmul3(y, m), ad.matmul3(m, y))
        else:
            prod = ad.scale(ad.matmul3(y, y), 0.0)

        lam_leaf = p.get(f"{prefix}.lam")
        lam_tilde_leaf = p.get(f"{prefix}.lam_tilde")
        fac = _scale_factor(g, psi_node, config.lam[layer], lam_leaf)
        if fac is not None:
            prod = ad.mul(prod, fac)

        dx_upd = _gated_recombine(_decompose(prod, eye), prefix, "mix_d_", p, n, c)
        dx_sq = ad.matmul3(dx_upd, dx_upd)
        fac_tilde = _scale_factor(g, psi_node, config.lam_tilde[layer], lam_tilde_leaf)
        if fac_tilde is not None:
            dx_sq = ad.mul(dx_sq, fac_tilde)
        x = ad.add(ad.add(xn, dx_upd), dx_sq)
        layer_features.append(x)

    inv = _part_norms(_decompose(x, eye), n, c)                    # (N, 3C)
    hidden = ad.silu(ad.linear(inv, p["head.w1"], p["head.b1"]))
    e_atom = ad.reshape(ad.linear(hidden, p["head.w2"], p["head.b2"]), (n,))
    refs = np.array([params["ref_energies"][i] for i in zidx])
    e_atom = ad.add(e_atom, g.constant(refs))
    energies = ad.segment_tree_sum(e_atom, batch.system_starts)
    total = ad.sum_reduce(energies)
    return EnergyGraph(
        graph=g, energies=energies, total=total, positions=pos, params=p,
        layer_features=layer_features, batch=batch,
    )


# ---------------------------------------------------------------------------
# prediction

def predict(
    params: ModelParams,
    config: ModelConfig,
    systems,
    *,
    with_forces: bool = True,
    batch_size: int = 16,
):
    """Energies (eV) and per-system force arrays (eV/A) for a list of systems."""
    systems = list(systems)
    energies = np.zeros(len(systems))
    forces: list[np.ndarray | None] = [None] * len(systems)
    for lo in range(0, len(systems), batch_size):
        chunk = systems[lo:lo + batch_size]
        batch = make_batch(chunk, config.cutoff_upper)
        eg = build_energy_graph(params, config, batch)
        energies[lo:lo + len(chunk)] = eg.energies.val
        if with_forces:
            grads = ad.backward(eg.total)
            f_all = -grads.get(eg.positions)
            bounds = batch.system_starts + [batch.n_atoms]
            for k in range(len(chunk)):
                forces[lo + k] = f_all[bounds[k]:bounds[k + 1]]
    return energies, forces


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, config: ModelConfig, params: ModelParams,
                    extras: dict | None = None, meta: dict | None = None):
    payload = {
        "format_version": np.array(1),
        "config_json": np.array(config.to_json()),
        "meta_json": np.array(json.dumps(meta or {})),
    }
    for name, arr in params.arrays.items():
        payload[f"param/{name}"] = arr
    for name, arr in (extras or {}).items():
        payload[f"extra/{name}"] = np.asarray(arr)
    np.savez(path, **payload)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as blob:
        version = int(blob["format_version"])
        if version != 1:
            raise ValueError(f"unsupported checkpoint format version {version}")
        config = ModelConfig.from_json(str(blob["config_json"]))
        arrays, extras = {}, {}
        for key in blob.files:
            if key.startswith("param/"):
                arrays[key[len("param/"):]] = blob[key]
            elif key.startswith("extra/"):
                extras[key[len("extra/"):]] = blob[key]
        meta = json.loads(str(blob["meta_json"]))
    return Checkpoint(config=config, params=ModelParams(arrays), extras=extras, meta=meta)
