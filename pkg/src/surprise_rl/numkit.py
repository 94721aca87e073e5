"""Dense numeric kernel: flat parameter vectors and tanh MLPs.

Networks are evaluated row-wise on ``(batch, features)`` float64 arrays.
Gradients are exact reverse-mode; curvature products use the Gauss-Newton
form ``J^T M J v`` with a forward-mode Jacobian-vector product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a public operation would produce NaN or Inf."""


def check_finite(arr, what="array"):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def as_matrix(x, n_cols=None, name="x"):
    """Coerce ``x`` to a 2-D float64 array, checking the column count."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if n_cols == 1 else x.reshape(1, -1)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    if n_cols is not None and x.shape[1] != n_cols:
        raise ValueError(f"{name} has {x.shape[1]} columns, expected {n_cols}")
    return x


class Segment(NamedTuple):
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """Flat float64 parameter storage with a named segment layout.

    ``unpack`` returns views into ``data``, so in-place edits of the views
    write through.
    """

    __slots__ = ("data", "layout")

    def __init__(self, data, layout: Sequence[Segment]):
        data = np.ascontiguousarray(data, dtype=np.float64).ravel()
        layout = tuple(layout)
        expected = 0
        for seg in layout:
            if seg.offset != expected:
                raise ValueError(f"segment {seg.name!r} is not contiguous")
            expected += seg.size
        if expected != data.size:
            raise ValueError(
                f"layout covers {expected} entries but data has {data.size}")
        self.data = data
        self.layout = layout

    @classmethod
    def pack(cls, arrays: Iterable[Tuple[str, np.ndarray]]) -> "ParamVector":
        layout, chunks, offset = [], [], 0
        for name, arr in arrays:
            arr = np.asarray(arr, dtype=np.float64)
            layout.append(Segment(name, tuple(arr.shape), offset))
            chunks.append(arr.ravel())
            offset += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(data, layout)

    @classmethod
    def zeros_like(cls, other: "ParamVector") -> "ParamVector":
        return cls(np.zeros_like(other.data), other.layout)

    def unpack(self) -> Dict[str, np.ndarray]:
        return {
            seg.name: self.data[seg.offset:seg.offset + seg.size].reshape(seg.shape)
            for seg in self.layout
        }

    def with_data(self, data) -> "ParamVector":
        return ParamVector(np.array(data, dtype=np.float64), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)

    def __len__(self):
        return self.data.size

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.data, other.data)

    def __repr__(self):
        names = ", ".join(seg.name for seg in self.layout)
        return f"ParamVector(size={self.data.size}, segments=[{names}])"


@dataclass(frozen=True)
class MlpSpec:
    """Shape and seed of a fully connected tanh network."""

    input_dim: int
    hidden_sizes: Tuple[int, ...] = ()
    output_dim: int = 1
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        dims = (self.input_dim, *self.hidden_sizes, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_sizes, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)


def mlp_init(spec: MlpSpec, output_scale=1.0) -> ParamVector:
    """Glorot-uniform weights, zero biases, deterministic in ``spec.seed``.

    ``output_scale`` multiplies the last layer's weights (0 gives a network
    whose initial output is identically zero).
    """
    rng = np.random.default_rng(spec.seed)
    arrays = []
    last = len(spec.layer_dims) - 1
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays.append((f"W{i}", W * output_scale if i == last else W))
        arrays.append((f"b{i}", np.zeros(fan_out)))
    return ParamVector.pack(arrays)


def _layers(params: ParamVector, spec: MlpSpec):
    if len(params) != spec.n_params:
        raise ValueError(
            f"parameter vector has {len(params)} entries, spec needs {spec.n_params}")
    p = params.unpack()
    return [(p[f"W{i}"], p[f"b{i}"]) for i in range(len(spec.layer_dims))]


def _forward(params, spec, x):
    """Return the output and the list of layer inputs (post-activation)."""
    layers = _layers(params, spec)
    acts = [x]
    h = x
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        acts.append(h)
    return h, acts


def mlp_forward(params: ParamVector, spec: MlpSpec, x) -> np.ndarray:
    x = as_matrix(x, spec.input_dim)
    y, _ = _forward(params, spec, x)
    return check_finite(y, "network output")


def _backward(layers, acts, grad_output):
    grads = []
    delta = grad_output
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append((acts[i].T @ delta, delta.sum(axis=0)))
        delta = delta @ W.T
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
    flat = []
    for gW, gb in reversed(grads):
        flat.append(gW.ravel())
        flat.append(gb)
    return np.concatenate(flat), delta


def mlp_backward(params: ParamVector, spec: MlpSpec, x, grad_output):
    """Gradient of ``sum(grad_output * mlp_forward(x))``.

    Returns ``(grad_params, grad_x)``; ``grad_params`` shares the layout of
    ``params``.
    """
    x = as_matrix(x, spec.input_dim)
    grad_output = as_matrix(grad_output, spec.output_dim, "grad_output")
    if grad_output.shape[0] != x.shape[0]:
        raise ValueError("grad_output and x disagree on batch size")
    layers = _layers(params, spec)
    _, acts = _forward(params, spec, x)
    flat, grad_x = _backward(layers, acts, grad_output)
    return ParamVector(check_finite(flat, "gradient"), params.layout), grad_x


def mlp_jvp(params: ParamVector, spec: MlpSpec, x, v: ParamVector):
    """Forward-mode product ``J v`` of the outputs w.r.t. parameters.

    Returns ``(y, Jv)``, both of shape ``(batch, output_dim)``.
    """
    x = as_matrix(x, spec.input_dim)
    layers = _layers(params, spec)
    tangents = _layers(v, spec)
    h, dh = x, np.zeros_like(x)
    for i, ((W, b), (dW, db)) in enumerate(zip(layers, tangents)):
        z = h @ W + b
        dz = dh @ W + h @ dW + db
        if i < len(layers) - 1:
            h = np.tanh(z)
            dh = (1.0 - h ** 2) * dz
        else:
            h, dh = z, dz
    return h, dh


def apply_metric(metric, u):
    """Multiply per-row output vectors ``u`` by a per-row PSD metric.

    ``metric`` is either ``(batch, out)`` (diagonal entries) or
    ``(batch, out, out)`` (full matrices).
    """
    metric = np.asarray(metric, dtype=np.float64)
    if metric.ndim == 2:
        return metric * u
    if metric.ndim == 3:
        return np.einsum("bij,bj->bi", metric, u)
    raise ValueError(f"metric must be 2-D or 3-D, got shape {metric.shape}")


def gauss_newton_vector_product(params: ParamVector, spec: MlpSpec, x, metric, v):
    """Batch-averaged ``J^T M J v`` for the network Jacobian ``J``."""
    x = as_matrix(x, spec.input_dim)
    v = v if isinstance(v, ParamVector) else params.with_data(v)
    metric = np.asarray(metric, dtype=np.float64)
    if metric.shape[0] != x.shape[0] or metric.shape[1] != spec.output_dim:
        raise ValueError(f"metric shape {metric.shape} does not match batch/output")
    _, Jv = mlp_jvp(params, spec, x, v)
    MJv = apply_metric(metric, Jv) / x.shape[0]
    layers = _layers(params, spec)
    _, acts = _forward(params, spec, x)
    flat, _ = _backward(layers, acts, MJv)
    return ParamVector(check_finite(flat, "curvature product"), params.layout)


def weight_mask(params: ParamVector) -> np.ndarray:
    """Boolean mask over ``params.data`` selecting weight (non-bias) entries."""
    mask = np.zeros(len(params), dtype=bool)
    for seg in params.layout:
        if seg.name.startswith("W"):
            mask[seg.offset:seg.offset + seg.size] = True
    return mask
