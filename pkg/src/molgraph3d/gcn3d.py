"""The scalar/vector graph-convolution model.

Per layer, every ordered atom pair (i, j) in a closed neighborhood
produces four intermediates that exchange information between per-atom
scalar channels s and per-atom 3-vector channels V, using the relative
position r_ij for the form changes:

    scalar -> scalar   relu[ W (s_i || s_j) + b ]
    vector -> scalar   relu[ (W (V_i || V_j) + B) . r_ij ]
    vector -> vector   tanh[ W (V_i || V_j) + B ]
    scalar -> vector   tanh[ (W (s_i || s_j) + b)  (x)  r_ij ]

The convolution then mixes each form's pair of intermediates and sums
over the closed neighborhood with the normalized-adjacency weights.
After the configured number of layers, per-atom features reduce to one
molecular feature (sum, or per-channel max with vector channels compared
by Euclidean norm) and a small fully connected head emits one value.

Vector-form linear maps contract the feature axis only; the three
spatial components always share weights and biases so that spatial
structure is never scrambled across axes.

Diagnostic equivariance mode replaces vector-form activations with the
identity and drops vector-form biases, which makes scalar outputs
exactly rotation invariant and vector outputs exactly equivariant; it
exists to isolate the architectural sources of non-equivariance (in the
standard configuration rotation robustness is learned, not algebraic).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .chemper import GraphTensors
from .numcore import Parameter, Tensor

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent parameter file."""


@dataclass(frozen=True)
class ModelConfig:
    in_features: int = 60
    hidden: int = 128
    conv_layers: int = 2
    aggregation: str = "sum"  # or "max"
    task: str = "regression"  # or "classification"
    fc_width: int = 128
    fc_layers: int = 2
    vector_fc_activation: str = "relu"  # or "tanh"
    diagnostic_equivariance: bool = False

    def __post_init__(self):
        if min(self.in_features, self.hidden, self.fc_width) <= 0:
            raise ValueError("widths must be positive")
        if self.conv_layers < 1 or self.fc_layers < 1:
            raise ValueError("need at least one layer")
        if self.aggregation not in ("sum", "max"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.vector_fc_activation not in ("relu", "tanh"):
            raise ValueError(f"unknown vector activation {self.vector_fc_activation!r}")


@dataclass
class NodeState:
    """Per-atom features at one layer: scalars [N, F], vectors [N, F, 3]."""

    scalars: Tensor
    vectors: Tensor
    layer: int


@dataclass
class PairwiseIntermediates:
    """The four interconversion outputs over all ordered pairs, plus the
    validity mask (True on closed-neighborhood pairs).  Entries outside
    the mask get computed densely but are annihilated by the zero
    adjacency weights downstream."""

    z_ss: Tensor  # [N, N, H]
    z_vs: Tensor  # [N, N, H]
    z_vv: Tensor  # [N, N, H, 3]
    z_sv: Tensor  # [N, N, H, 3]
    mask: np.ndarray


@dataclass
class LayerParams:
    w_ss: Parameter
    b_ss: Parameter
    w_vs: Parameter
    b_vs: Parameter  # [H, 3]
    w_vv: Parameter
    b_vv: Parameter  # [H, 3]
    w_sv: Parameter
    b_sv: Parameter
    w_s: Parameter
    b_s: Parameter
    w_v: Parameter
    b_v: Parameter  # [H, 3]

    def parameters(self):
        return [self.w_ss, self.b_ss, self.w_vs, self.b_vs, self.w_vv, self.b_vv,
                self.w_sv, self.b_sv, self.w_s, self.b_s, self.w_v, self.b_v]


@dataclass
class ModelParams:
    config: ModelConfig
    layers: list
    fc_scalar: list  # [(w, b), ...]
    fc_vector: list  # [(w, b[H,3]), ...]
    out_w: Parameter
    out_b: Parameter

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        for w, b in self.fc_scalar:
            out.extend([w, b])
        for w, b in self.fc_vector:
            out.extend([w, b])
        out.extend([self.out_w, self.out_b])
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_entries(self):
        return sum(p.value.data.size for p in self.parameters())


@dataclass
class MaxProvenance:
    """Winning atom index per channel under max aggregation."""

    scalar_winners: np.ndarray  # [F] ints
    vector_winners: np.ndarray  # [F] ints


@dataclass
class ForwardResult:
    """Prediction plus the activation cache needed for the backward pass
    and for contribution analysis."""

    prediction: float
    raw_output: float
    output: Tensor  # shape (1,), pre-squash
    final_state: NodeState
    s_mol: Tensor
    v_mol: Tensor
    provenance: MaxProvenance | None
    config: ModelConfig


# ---------------------------------------------------------------------------
# forward pieces


def interconvert(state: NodeState, rel_pos: np.ndarray, layer: LayerParams,
                 diagnostic: bool = False, mask: np.ndarray | None = None) -> PairwiseIntermediates:
    """The four pairwise form-exchange operations for one layer."""
    n = state.scalars.shape[0]
    if rel_pos.shape != (n, n, 3):
        raise nc.ShapeError(f"rel_pos {rel_pos.shape} does not match {n} atoms")
    if mask is None:
        mask = np.ones((n, n), dtype=bool)
    r = Tensor(rel_pos)
    s, v = state.scalars, state.vectors

    z_ss = nc.relu(nc.pair_linear(layer.w_ss.value, layer.b_ss.value, s))
    vs = nc.pair_linear(layer.w_vs.value,
                        None if diagnostic else layer.b_vs.value, v, vector=True)
    z_vs = nc.relu(nc.dot3(vs, r))
    vv = nc.pair_linear(layer.w_vv.value,
                        None if diagnostic else layer.b_vv.value, v, vector=True)
    z_vv = vv if diagnostic else nc.tanh(vv)
    sv = nc.outer3(nc.pair_linear(layer.w_sv.value, layer.b_sv.value, s), r)
    z_sv = sv if diagnostic else nc.tanh(sv)
    return PairwiseIntermediates(z_ss=z_ss, z_vs=z_vs, z_vv=z_vv, z_sv=z_sv, mask=mask)


def conv_update(inter: PairwiseIntermediates, adjacency: np.ndarray,
                layer: LayerParams, diagnostic: bool = False,
                layer_index: int = 0) -> NodeState:
    """Neighborhood aggregation: per form, concatenate the two
    intermediates, apply the shared linear map, and sum over the closed
    neighborhood with the adjacency weights.

    The linear map commutes with the weighted sum, so the cheap order
    (aggregate, then one linear per atom, then the row-weighted bias) is
    used; it is algebraically identical to mapping every pair first.
    """
    if not np.array_equal(inter.mask, adjacency != 0):
        raise RuntimeError("pair mask does not match the adjacency pattern")
    rowsum = adjacency.sum(axis=1)

    s_cat = nc.concat_features(inter.z_ss, inter.z_vs, axis=-1)
    s_lin = nc.linear_feature(layer.w_s.value, None, nc.neighbor_sum(s_cat, adjacency))
    s_new = nc.relu(nc.add(s_lin, nc.row_broadcast(layer.b_s.value, rowsum)))

    v_cat = nc.concat_features(inter.z_vv, inter.z_sv, axis=-2)
    v_lin = nc.linear_feature(layer.w_v.value, None,
                              nc.neighbor_sum(v_cat, adjacency), vector=True)
    if diagnostic:
        v_new = v_lin
    else:
        v_new = nc.tanh(nc.add(v_lin, nc.row_broadcast(layer.b_v.value, rowsum)))
    return NodeState(scalars=s_new, vectors=v_new, layer=layer_index + 1)


def aggregate(state: NodeState, strategy: str):
    """Reduce per-atom features to molecular features.

    sum: plain summation over atoms.  max: per scalar channel, the value
    of the atom with the largest entry; per vector channel, the whole
    3-vector of the atom with the largest Euclidean norm.  Ties break to
    the lowest atom index; winners are recorded for contribution maps.
    """
    if strategy == "sum":
        return nc.sum_atoms(state.scalars), nc.sum_atoms(state.vectors), None
    if strategy != "max":
        raise ValueError(f"unknown aggregation {strategy!r}")
    scalar_winners = np.argmax(state.scalars.data, axis=0)
    norms = np.linalg.norm(state.vectors.data, axis=2)  # [N, F]
    vector_winners = np.argmax(norms, axis=0)
    s_mol = nc.gather_atoms(state.scalars, scalar_winners)
    v_mol = nc.gather_atoms(state.vectors, vector_winners)
    return s_mol, v_mol, MaxProvenance(scalar_winners, vector_winners)


def fc_head(s_mol: Tensor, v_mol: Tensor, params: ModelParams,
            config: ModelConfig) -> Tensor:
    """Two dense layers per branch, the vector branch sharing weights
    across spatial components; flatten, concatenate, one output unit.

    In diagnostic mode the flattened vector block is zeroed before the
    output layer: flattening spatial components through fixed output
    weights is itself a source of rotation sensitivity, so diagnostic
    predictions depend on the (invariant) scalar branch only.
    """
    h = s_mol
    for w, b in params.fc_scalar:
        h = nc.relu(nc.linear_feature(w.value, b.value, h))
    g = v_mol
    for w, b in params.fc_vector:
        lin = nc.linear_feature(w.value,
                                None if config.diagnostic_equivariance else b.value,
                                g, vector=True)
        if config.diagnostic_equivariance:
            g = lin
        elif config.vector_fc_activation == "tanh":
            g = nc.tanh(lin)
        else:
            g = nc.relu(lin)
    flat = nc.flatten(g)
    if config.diagnostic_equivariance:
        flat = nc.affine(flat, 0.0, 0.0)
    joint = nc.concat_features(h, flat, axis=0)
    return nc.linear_feature(params.out_w.value, params.out_b.value, joint)


def forward(graph: GraphTensors, params: ModelParams,
            config: ModelConfig | None = None) -> ForwardResult:
    """Full pass: features in, single value out, cache retained.

    Scalar features start as the atom feature matrix; vector features
    start at zero.  For classification the prediction is the logistic
    squash of the raw output; the raw output is kept for loss evaluation
    in stable logit form.
    """
    if config is None:
        config = params.config
    n = graph.n_atoms
    if graph.features.shape != (n, config.in_features):
        raise nc.ShapeError(
            f"feature matrix {graph.features.shape} vs config width {config.in_features}")
    state = NodeState(
        scalars=Tensor(graph.features),
        vectors=Tensor(np.zeros((n, config.in_features, 3))),
        layer=0,
    )
    mask = graph.adjacency != 0
    diag = config.diagnostic_equivariance
    for li, layer in enumerate(params.layers):
        inter = interconvert(state, graph.rel_pos, layer, diagnostic=diag, mask=mask)
        state = conv_update(inter, graph.adjacency, layer, diagnostic=diag, layer_index=li)
    s_mol, v_mol, provenance = aggregate(state, config.aggregation)
    output = fc_head(s_mol, v_mol, params, config)
    raw = output.item()
    prediction = _logistic(raw) if config.task == "classification" else raw
    return ForwardResult(
        prediction=prediction,
        raw_output=raw,
        output=output,
        final_state=state,
        s_mol=s_mol,
        v_mol=v_mol,
        provenance=provenance,
        config=config,
    )


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def backward(result: ForwardResult, output_grad: float) -> None:
    """Accumulate d(loss)/d(parameter) into every parameter's grad
    buffer, given d(loss)/d(raw output)."""
    nc.backward(result.output, seed=np.array([float(output_grad)]))


# ---------------------------------------------------------------------------
# parameters


def _glorot(rng, fan_out, fan_in, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed) -> ModelParams:
    """Glorot-uniform weights, zero biases; fully determined by seed."""
    rng = np.random.default_rng(seed)
    h = config.hidden

    def make_layer(index, fin):
        def w(name, fan_out, fan_in):
            return Parameter(f"conv{index}.{name}", _glorot(rng, fan_out, fan_in, (fan_out, fan_in)))

        def zero(name, shape):
            return Parameter(f"conv{index}.{name}", np.zeros(shape))

        return LayerParams(
            w_ss=w("scalar_scalar.w", h, 2 * fin), b_ss=zero("scalar_scalar.b", (h,)),
            w_vs=w("vector_scalar.w", h, 2 * fin), b_vs=zero("vector_scalar.b", (h, 3)),
            w_vv=w("vector_vector.w", h, 2 * fin), b_vv=zero("vector_vector.b", (h, 3)),
            w_sv=w("scalar_vector.w", h, 2 * fin), b_sv=zero("scalar_vector.b", (h,)),
            w_s=w("scalar_conv.w", h, 2 * h), b_s=zero("scalar_conv.b", (h,)),
            w_v=w("vector_conv.w", h, 2 * h), b_v=zero("vector_conv.b", (h, 3)),
        )

    layers = []
    fin = config.in_features
    for li in range(config.conv_layers):
        layers.append(make_layer(li, fin))
        fin = h

    fc_scalar, fc_vector = [], []
    width = config.fc_width
    fin = h
    for k in range(config.fc_layers):
        fc_scalar.append((
            Parameter(f"fc_scalar{k}.w", _glorot(rng, width, fin, (width, fin))),
            Parameter(f"fc_scalar{k}.b", np.zeros(width)),
        ))
        fin = width
    fin = h
    for k in range(config.fc_layers):
        fc_vector.append((
            Parameter(f"fc_vector{k}.w", _glorot(rng, width, fin, (width, fin))),
            Parameter(f"fc_vector{k}.b", np.zeros((width, 3))),
        ))
        fin = width

    joint = width + 3 * width
    out_w = Parameter("out.w", _glorot(rng, 1, joint, (1, joint)))
    out_b = Parameter("out.b", np.zeros(1))
    return ModelParams(config=config, layers=layers, fc_scalar=fc_scalar,
                       fc_vector=fc_vector, out_w=out_w, out_b=out_b)


# ---------------------------------------------------------------------------
# checkpoint I/O: JSON manifest + hex-float nested lists (bit-exact)


def _encode_array(arr: np.ndarray):
    if arr.ndim == 0:
        return float(arr).hex()
    if arr.ndim == 1:
        return [float(v).hex() for v in arr.tolist()]
    return [_encode_array(sub) for sub in arr]


def _decode_array(nested, shape, name):
    flat = []

    def walk(node):
        if isinstance(node, list):
            for sub in node:
                walk(sub)
        else:
            flat.append(float.fromhex(node))

    try:
        walk(nested)
        arr = np.array(flat, dtype=np.float64).reshape(shape)
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"tensor {name!r}: cannot decode ({exc})") from None
    return arr


def save_params(params: ModelParams, path, extra: dict | None = None) -> None:
    """Write the checkpoint; ``extra`` adds caller-owned manifest blocks
    (e.g. the target scaler) that load_params ignores."""
    doc = {
        "format_version": FORMAT_VERSION,
        "config": asdict(params.config),
        "tensors": {
            p.name: {"shape": list(p.value.shape), "data": _encode_array(p.value.data)}
            for p in params.parameters()
        },
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def load_params(path) -> ModelParams:
    """Rebuild ModelParams from a checkpoint; shapes are validated
    against the manifest and against the configured architecture."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"format version {doc.get('format_version')!r}, "
                              f"expected {FORMAT_VERSION}")
    try:
        config = ModelConfig(**doc["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from None
    params = init_params(config, seed=0)
    tensors = doc.get("tensors", {})
    for p in params.parameters():
        if p.name not in tensors:
            raise CheckpointError(f"tensor {p.name!r} missing from checkpoint")
        entry = tensors[p.name]
        shape = tuple(entry.get("shape", ()))
        if shape != p.value.shape:
            raise CheckpointError(
                f"tensor {p.name!r}: manifest shape {shape} != expected {p.value.shape}")
        arr = _decode_array(entry["data"], shape, p.name)
        p.value.data[...] = arr
        p.zero_grad()
    extra = set(tensors) - {p.name for p in params.parameters()}
    if extra:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(extra)}")
    return params
