"""Dense float64 tensor kernels with reverse-mode gradients.

Every kernel is a pure function: it takes Tensor operands, returns a new
Tensor, and records a vector-Jacobian product (VJP) closure so that
``backward`` can push gradients from a scalar loss back to every
Parameter leaf.  The graph is rebuilt on every forward pass; nothing is
retained between passes except Parameter values and their accumulated
gradients.

Numerical conventions:
  * all arithmetic is float64,
  * relu subgradient at exactly 0 is 0,
  * gradients accumulate additively into Parameter.grad across uses of
    a parameter within one loss evaluation; callers zero grads between
    optimizer steps.

Kernels are pure and safe to call concurrently over distinct inputs.
Gradient accumulation is not synchronized: one backward writer per
Parameter at a time; parallel training needs per-worker parameter
copies (or buffers) merged deterministically.

Set the environment variable ``MOLGRAPH3D_DEBUG=1`` (or flip
``DEBUG_CHECK_FINITE``) to re-validate finiteness after every kernel.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

DEBUG_CHECK_FINITE = os.environ.get("MOLGRAPH3D_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Operand extents do not satisfy a kernel's shape contract."""


class NumericError(ArithmeticError):
    """A value that must be finite is NaN or infinite."""


class Tensor:
    """A dense float64 array, optionally a node in a backward graph.

    ``parents`` and ``_vjp`` are set by kernels; user-constructed
    tensors are leaves.  Construction rejects NaN/Inf.
    """

    __slots__ = ("data", "parents", "_vjp", "param")

    def __init__(self, data, _parents=(), _vjp=None, _validate=True):
        arr = np.asarray(data, dtype=np.float64)
        if _validate and not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains NaN or Inf")
        self.data = arr
        self.parents = _parents
        self._vjp = _vjp
        self.param = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter:
    """A named, trainable leaf: value plus a persistent gradient buffer."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = Tensor(value)
        self.value.param = self
        self.grad = np.zeros_like(self.value.data)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _result(data, parents, vjp):
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("kernel produced NaN or Inf")
    return Tensor(data, _parents=parents, _vjp=vjp, _validate=False)


def _as_const(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a[m,k] @ b[k,n] (b may also be a vector [k])."""
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 2-d x (1|2)-d, got {ad.shape} x {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {ad.shape} x {bd.shape}")
    out = ad @ bd

    def vjp(g):
        if bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        return np.outer(g, bd), ad.T @ g

    return _result(out, (a, b), vjp)


def _linear_is_vector(W, x, vector):
    fin = W.shape[1]
    if vector is not None:
        return vector
    if x.ndim >= 1 and x.shape[-1] == fin:
        return False  # scalar form wins ties; pass vector=True to override
    if x.ndim >= 2 and x.shape[-1] == 3 and x.shape[-2] == fin:
        return True
    raise ShapeError(f"linear_feature: weight {W.shape} cannot contract input {x.shape}")


def _contract_features_vec(m, x):
    """m[g, f] applied over the feature axis of x[..., f, 3] -> [..., g, 3]."""
    return np.swapaxes(np.tensordot(x, m, axes=([-2], [1])), -1, -2)


def linear_feature(W: Tensor, bias, x: Tensor, vector: bool | None = None) -> Tensor:
    """Feature-axis linear map y = W x (+ bias).

    Scalar form: x[..., F] -> y[..., F'].  Vector form: x[..., F, 3] ->
    y[..., F', 3], the same W applied to each of the three spatial
    components (bias then has shape [F', 3]).  ``vector`` forces the
    form when the shapes alone are ambiguous.
    """
    Wd, xd = W.data, x.data
    if Wd.ndim != 2:
        raise ShapeError(f"weight must be 2-d, got {Wd.shape}")
    vec = _linear_is_vector(Wd, xd, vector)
    fout, fin = Wd.shape
    if vec:
        if xd.ndim < 2 or xd.shape[-2] != fin or xd.shape[-1] != 3:
            raise ShapeError(f"vector input {xd.shape} incompatible with weight {Wd.shape}")
        out = _contract_features_vec(Wd, xd)
    else:
        if xd.shape[-1] != fin:
            raise ShapeError(f"scalar input {xd.shape} incompatible with weight {Wd.shape}")
        out = xd @ Wd.T

    parents = [W, x]
    if bias is not None:
        bd = bias.data
        want = (fout, 3) if vec else (fout,)
        if bd.shape != want:
            raise ShapeError(f"bias shape {bd.shape}, expected {want}")
        out = out + bd
        parents.insert(1, bias)

    lead = tuple(range(out.ndim - (2 if vec else 1)))

    def vjp(g):
        if vec:
            gW = np.tensordot(g.reshape(-1, fout, 3), xd.reshape(-1, fin, 3),
                              axes=([0, 2], [0, 2]))
            gx = _contract_features_vec(Wd.T, g)
        else:
            gW = g.reshape(-1, fout).T @ xd.reshape(-1, fin)
            gx = g @ Wd
        if bias is None:
            return gW, gx
        return gW, g.sum(axis=lead) if lead else g.copy(), gx

    return _result(out, tuple(parents), vjp)


def pair_linear(W: Tensor, bias, x: Tensor, vector: bool = False) -> Tensor:
    """Linear map over concatenated (center, neighbor) features of every
    ordered atom pair: out[i, j] = W (x_i || x_j) + bias.

    Scalar form: x[N, F] -> out[N, N, F'].  Vector form: x[N, F, 3] ->
    out[N, N, F', 3] with the feature axis contracted and the spatial
    axis untouched.  Computed as W_left x_i + W_right x_j, which avoids
    materializing the N^2 x 2F concatenation.
    """
    Wd, xd = W.data, x.data
    if Wd.ndim != 2 or Wd.shape[1] % 2 != 0:
        raise ShapeError(f"pair weight must be [F', 2F], got {Wd.shape}")
    fin = Wd.shape[1] // 2
    fout = Wd.shape[0]
    wl, wr = Wd[:, :fin], Wd[:, fin:]
    if vector:
        if xd.ndim != 3 or xd.shape[1] != fin or xd.shape[2] != 3:
            raise ShapeError(f"vector pair input {xd.shape}, expected [N, {fin}, 3]")
        li = _contract_features_vec(wl, xd)
        rj = _contract_features_vec(wr, xd)
        out = li[:, None] + rj[None, :]
    else:
        if xd.ndim != 2 or xd.shape[1] != fin:
            raise ShapeError(f"scalar pair input {xd.shape}, expected [N, {fin}]")
        li = xd @ wl.T
        rj = xd @ wr.T
        out = li[:, None, :] + rj[None, :, :]

    parents = [W, x]
    if bias is not None:
        bd = bias.data
        want = (fout, 3) if vector else (fout,)
        if bd.shape != want:
            raise ShapeError(f"pair bias shape {bd.shape}, expected {want}")
        out = out + bd
        parents.insert(1, bias)

    def vjp(g):
        gl = g.sum(axis=1)  # center share
        gr = g.sum(axis=0)  # neighbor share
        if vector:
            gW = np.concatenate(
                [np.tensordot(gl, xd, axes=([0, 2], [0, 2])),
                 np.tensordot(gr, xd, axes=([0, 2], [0, 2]))], axis=1)
            gx = _contract_features_vec(wl.T, gl) + _contract_features_vec(wr.T, gr)
        else:
            gW = np.concatenate([gl.T @ xd, gr.T @ xd], axis=1)
            gx = gl @ wl + gr @ wr
        if bias is None:
            return gW, gx
        return gW, g.sum(axis=(0, 1)), gx

    return _result(out, tuple(parents), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_arr(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_arr(x):
    # evaluate on the non-overflowing side of exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) evaluated in overflow-safe form."""
    out = np.logaddexp(0.0, x.data)
    return _result(out, (x,), lambda g: (g * _sigmoid_arr(x.data),))


def _spatial(r, target_ndim):
    """Align a relative-position operand r with a [..., F, 3] tensor."""
    if r.ndim == 1:
        if r.shape != (3,):
            raise ShapeError(f"position vector must have extent 3, got {r.shape}")
        return r
    if r.shape[-1] != 3 or r.ndim != target_ndim - 1:
        raise ShapeError(f"position operand {r.shape} incompatible with rank-{target_ndim} input")
    return r[..., None, :]  # broadcast over the feature axis


def dot3(m: Tensor, r: Tensor) -> Tensor:
    """Contract the trailing spatial axis: out[..., f] = sum_a m[..., f, a] r[..., a].

    r is a single 3-vector or carries the same leading axes as m.
    """
    md, rd = m.data, r.data
    if md.ndim < 2 or md.shape[-1] != 3:
        raise ShapeError(f"dot3 input must end in a spatial axis of 3, got {md.shape}")
    rb = _spatial(rd, md.ndim)
    out = (md * rb).sum(axis=-1)

    def vjp(g):
        gm = g[..., None] * rb
        gr_full = (g[..., None] * md).sum(axis=-2)  # collapse feature axis
        gr = gr_full.reshape(-1, 3).sum(axis=0) if rd.ndim == 1 else gr_full
        return gm, gr

    return _result(out, (m, r), vjp)


def outer3(a: Tensor, r: Tensor) -> Tensor:
    """Tensor product with a position vector: out[..., f, alpha] = a[..., f] r[..., alpha]."""
    ad, rd = a.data, r.data
    rb = _spatial(rd, ad.ndim + 1)
    out = ad[..., None] * rb

    def vjp(g):
        ga = (g * rb).sum(axis=-1)
        gr_full = (g * ad[..., None]).sum(axis=-2)
        gr = gr_full.reshape(-1, 3).sum(axis=0) if rd.ndim == 1 else gr_full
        return ga, gr

    return _result(out, (a, r), vjp)


def concat_features(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Join two tensors along a feature axis (a first, then b)."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim:
        raise ShapeError(f"concat rank mismatch: {ad.shape} vs {bd.shape}")
    ax = axis % ad.ndim if ad.ndim else 0
    for d in range(ad.ndim):
        if d != ax and ad.shape[d] != bd.shape[d]:
            raise ShapeError(f"concat extents disagree off-axis: {ad.shape} vs {bd.shape}")
    out = np.concatenate([ad, bd], axis=ax)
    na = ad.shape[ax]

    def vjp(g):
        ga, gb = np.split(g, [na], axis=ax)
        return ga, gb

    return _result(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """scale * x + shift with constant coefficients."""
    scale = float(scale)
    return _result(scale * x.data + float(shift), (x,), lambda g: (g * scale,))


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (g * 2.0 * x.data,))


def neighbor_sum(u: Tensor, weights) -> Tensor:
    """Weighted reduction over the neighbor axis: out[i, ...] = sum_j w[i, j] u[i, j, ...].

    ``weights`` is a constant [N, N] matrix (e.g. a normalized adjacency);
    it is not differentiated.
    """
    w = _as_const(weights)
    ud = u.data
    if w.ndim != 2 or ud.ndim < 2 or ud.shape[0] != w.shape[0] or ud.shape[1] != w.shape[1]:
        raise ShapeError(f"neighbor_sum: weights {w.shape} vs input {ud.shape}")
    n = w.shape[0]
    flat = ud.reshape(n, n, -1)
    out = np.matmul(w[:, None, :], flat).reshape((n,) + ud.shape[2:])
    wexp = w.reshape(w.shape + (1,) * (ud.ndim - 2))

    def vjp(g):
        return (wexp * g[:, None, ...],)

    return _result(out, (u,), vjp)


def row_broadcast(b: Tensor, weights) -> Tensor:
    """out[i, ...] = w[i] * b[...] for a constant weight vector w[N]."""
    w = _as_const(weights)
    if w.ndim != 1:
        raise ShapeError(f"row weights must be 1-d, got {w.shape}")
    out = np.multiply.outer(w, b.data)

    def vjp(g):
        return (np.tensordot(w, g, axes=(0, 0)),)

    return _result(out, (b,), vjp)


def sum_atoms(x: Tensor) -> Tensor:
    """Sum over the leading (atom) axis."""
    if x.ndim < 1:
        raise ShapeError("sum_atoms needs at least one axis")
    n = x.shape[0]

    def vjp(g):
        return (np.broadcast_to(g, (n,) + g.shape).copy(),)

    return _result(x.data.sum(axis=0), (x,), vjp)


def gather_atoms(x: Tensor, index) -> Tensor:
    """Per-channel atom selection: out[f, ...] = x[index[f], f, ...].

    ``index`` is a constant integer array of length F (one winning atom
    per channel); gradients scatter back to the selected entries only.
    """
    idx = np.asarray(index, dtype=np.intp)
    xd = x.data
    if xd.ndim < 2 or idx.shape != (xd.shape[1],):
        raise ShapeError(f"gather_atoms: index {idx.shape} vs input {xd.shape}")
    if xd.shape[0] and (idx.min() < 0 or idx.max() >= xd.shape[0]):
        raise ShapeError("gather_atoms: index out of range")
    cols = np.arange(xd.shape[1])
    out = xd[idx, cols]

    def vjp(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, (idx, cols), g)
        return (gx,)

    return _result(out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _result(out, (x,), vjp)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.data.size,))


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def backward(root: Tensor, seed=None) -> dict:
    """Push d(root)/d(node) gradients through the graph.

    ``seed`` defaults to ones (use 1.0 for a scalar loss).  Gradients
    for Parameter leaves are accumulated into ``Parameter.grad``; the
    returned dict maps id(tensor) -> gradient for every reached node.
    """
    if seed is None:
        seed = np.ones_like(root.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != root.data.shape:
        raise ShapeError(f"seed shape {seed.shape} != root shape {root.data.shape}")
    order = _topo_order(root)
    grads = {id(root): seed}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node.param is not None and id(node) in grads:
            node.param.grad += grads[id(node)]
    return grads


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckEntry:
    name: str
    checked: int
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def __str__(self):
        lines = [
            f"{'ok' if e.passed else 'FAIL'}  {e.name:30s} entries={e.checked:5d} "
            f"max_rel_err={e.max_rel_err:.3e}"
            for e in self.entries
        ]
        return "\n".join(lines)


def gradient_check(f, params, eps: float = 1e-6, tol: float = 1e-5,
                   max_entries: int | None = None, rng=None) -> GradCheckReport:
    """Compare analytic gradients of a scalar computation against central
    finite differences, entry by entry.

    ``f`` must be a deterministic zero-argument callable returning a
    scalar Tensor built on the current parameter values.  Relative error
    is measured against max(1, |analytic|, |numeric|) so that entries
    with near-zero gradients are compared absolutely, where central
    differences are at the limit of float64 resolution.  When
    ``max_entries`` is given, that many entries per parameter are
    sampled (all parameters are always touched).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"gradient_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("gradient_check target is not finite")
    backward(out, seed=np.ones_like(out.data))
    analytic = {p.name: p.grad.copy() for p in params}

    def value():
        v = f().item()
        if not np.isfinite(v):
            raise NumericError("gradient_check evaluation is not finite")
        return v

    if rng is None:
        rng = np.random.default_rng(0)
    report = GradCheckReport()
    for p in params:
        flat = p.value.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            picks = rng.choice(n, size=max_entries, replace=False)
        else:
            picks = np.arange(n)
        an = analytic[p.name].reshape(-1)
        worst = 0.0
        for k in picks:
            orig = flat[k]
            flat[k] = orig + eps
            f1 = value()
            flat[k] = orig - eps
            f2 = value()
            flat[k] = orig
            fd = (f1 - f2) / (2.0 * eps)
            rel = abs(fd - an[k]) / max(1.0, abs(fd), abs(an[k]))
            worst = max(worst, rel)
        report.entries.append(GradCheckEntry(p.name, len(picks), worst, worst <= tol))
    return report
