"""Minimal reverse-mode differentiable arrays.

Provides exactly the tensor operations the completion network and its
losses need: shared per-point linear maps (kernel-size-1 convolutions),
batch normalization over the point axis, elementwise nonlinearities,
max pooling, concatenation/tiling, row-wise vector geometry (gather,
cross, dot, norm) and scalar reductions.  Everything runs on numpy;
arrays are float32 in the network path, while loss heads and the
finite-difference checker may run the same ops in float64.

A :class:`Tape` records backward closures during the forward pass and
replays them in exact reverse order.  There is no broadcasting beyond
what the ops below define, no GPU path and no higher-order derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateBatchError,
    DimensionError,
    EmptyInputError,
    NumericError,
    ParameterError,
)

_ALLOWED_DTYPES = (np.float32, np.float64)


class DiffArray:
    """Dense numeric array with an optional gradient slot.

    `data` is a contiguous float32 (or, in checking/loss contexts,
    float64) ndarray.  `grad` is lazily allocated with the same shape
    and dtype the first time an adjoint is accumulated.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.ascontiguousarray(data)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar array of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"DiffArray(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def asdiff(x) -> DiffArray:
    """Wrap numpy data as an untracked DiffArray; pass DiffArrays through."""
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x))


def _accumulate(arr: DiffArray, delta: np.ndarray):
    if arr.grad is None:
        arr.grad = np.zeros_like(arr.data)
    # Adjoints of float64 sub-graphs fold back into float32 parameters.
    arr.grad += delta.astype(arr.data.dtype, copy=False).reshape(arr.data.shape)


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed operations for one forward pass.

    Use as a context manager; ops executed inside record their backward
    closures.  `backward()` replays them in exact reverse order and may
    be called only once per recording.
    """

    def __init__(self):
        self._records: list = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ParameterError("a tape is already active; nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, backward_fn):
        self._records.append(backward_fn)

    def __len__(self):
        return len(self._records)

    def backward(self, loss: DiffArray):
        """Seed `loss` with unit adjoint and propagate to all inputs."""
        if self._consumed:
            raise ParameterError("tape already consumed; run a new forward pass before backward")
        if loss.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()


def _tape() -> Tape | None:
    return _ACTIVE_TAPE


def _tracked(*arrs: DiffArray) -> bool:
    return _ACTIVE_TAPE is not None and any(a.requires_grad for a in arrs)


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------

def pointwise_mlp(x: DiffArray, w: DiffArray, b: DiffArray) -> DiffArray:
    """Shared per-point linear map: out[o, n] = sum_i w[o, i] x[i, n] + b[o].

    Equivalent to a kernel-size-1 1D convolution over the point axis.
    """
    x, w, b = asdiff(x), asdiff(w), asdiff(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(
            f"pointwise_mlp expects x:(C_in,N) w:(C_out,C_in) b:(C_out,), "
            f"got {x.shape}, {w.shape}, {b.shape}"
        )
    if w.shape[1] != x.shape[0] or b.shape[0] != w.shape[0]:
        raise DimensionError(
            f"pointwise_mlp shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    out = DiffArray(w.data @ x.data + b.data[:, None], requires_grad=_tracked(x, w, b))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            g = out.grad
            if x.requires_grad:
                _accumulate(x, w.data.T @ g)
            if w.requires_grad:
                _accumulate(w, g @ x.data.T)
            if b.requires_grad:
                _accumulate(b, g.sum(axis=1))
        t.record(bwd)
    return out


@dataclass
class BatchNormState:
    """Per-channel running statistics; mutated by training-mode forward."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5,
               dtype=np.float32) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batchnorm1d(x: DiffArray, gamma: DiffArray, beta: DiffArray,
                state: BatchNormState, training: bool) -> DiffArray:
    """Normalize a (C, N) array per channel over the point axis.

    Training mode uses batch statistics (biased variance) and updates the
    running statistics with `state.momentum` (unbiased variance, matching
    the usual convention).  Inference mode uses the running statistics.
    """
    x, gamma, beta = asdiff(x), asdiff(gamma), asdiff(beta)
    if x.data.ndim != 2:
        raise DimensionError(f"batchnorm1d expects (C,N) input, got {x.shape}")
    c, n = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm1d affine params must have shape ({c},), got {gamma.shape}, {beta.shape}"
        )
    eps = x.data.dtype.type(state.eps)
    if training:
        if n < 2:
            raise DegenerateBatchError(
                f"batchnorm1d training mode needs at least 2 points, got {n}"
            )
        mu = x.data.mean(axis=1)
        var = x.data.var(axis=1)
        m = state.momentum
        state.running_mean[:] = (1.0 - m) * state.running_mean + m * mu
        state.running_var[:] = (1.0 - m) * state.running_var + m * var * (n / (n - 1))
    else:
        mu = state.running_mean.astype(x.data.dtype, copy=False)
        var = state.running_var.astype(x.data.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None]) * inv_std[:, None]
    out = DiffArray(gamma.data[:, None] * xhat + beta.data[:, None],
                    requires_grad=_tracked(x, gamma, beta))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            g = out.grad
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).sum(axis=1))
            if beta.requires_grad:
                _accumulate(beta, g.sum(axis=1))
            if x.requires_grad:
                scale = (gamma.data * inv_std)[:, None]
                if training:
                    gm = g.mean(axis=1, keepdims=True)
                    gxm = (g * xhat).mean(axis=1, keepdims=True)
                    _accumulate(x, scale * (g - gm - xhat * gxm))
                else:
                    _accumulate(x, scale * g)
        t.record(bwd)
    return out


def relu(x: DiffArray) -> DiffArray:
    x = asdiff(x)
    out = DiffArray(np.maximum(x.data, 0), requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        mask = x.data > 0
        def bwd():
            _accumulate(x, out.grad * mask)
        t.record(bwd)
    return out


def sigmoid(x: DiffArray) -> DiffArray:
    """Numerically stable logistic; output lies strictly inside (0, 1)."""
    x = asdiff(x)
    v = x.data
    out_data = np.empty_like(v)
    pos = v >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_data[~pos] = ev / (1.0 + ev)
    out = DiffArray(out_data, requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            _accumulate(x, out.grad * out_data * (1.0 - out_data))
        t.record(bwd)
    return out


def maxpool_points(x: DiffArray) -> DiffArray:
    """Per-channel maximum over the point axis of a (C, N) array.

    The adjoint routes to the lowest-index argmax element of each channel.
    """
    x = asdiff(x)
    if x.data.ndim != 2:
        raise DimensionError(f"maxpool_points expects (C,N) input, got {x.shape}")
    c, n = x.shape
    if n == 0:
        raise EmptyInputError("maxpool_points over an empty point axis")
    idx = np.argmax(x.data, axis=1)  # ties -> lowest index
    out = DiffArray(x.data[np.arange(c), idx], requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            delta = np.zeros_like(x.data)
            delta[np.arange(c), idx] = out.grad
            _accumulate(x, delta)
        t.record(bwd)
    return out


def concat(parts: list, axis: int = 0) -> DiffArray:
    """Concatenate along `axis`; all other extents must match."""
    parts = [asdiff(p) for p in parts]
    if not parts:
        raise EmptyInputError("concat of an empty list")
    ref = parts[0].data.shape
    for p in parts:
        s = p.data.shape
        if len(s) != len(ref) or any(
            a != b for k, (a, b) in enumerate(zip(s, ref)) if k != axis
        ):
            raise DimensionError(f"concat shape mismatch along non-joined axes: {[tuple(q.shape) for q in parts]}")
    out = DiffArray(np.concatenate([p.data for p in parts], axis=axis),
                    requires_grad=_tracked(*parts))
    t = _tape()
    if t is not None and out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def bwd():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    _accumulate(p, out.grad[tuple(sl)])
        t.record(bwd)
    return out


def tile(v: DiffArray, n: int, axis: int = 0) -> DiffArray:
    """Replicate a vector n times as rows (axis=0) or columns (axis=1).

    The adjoint sums over the replicas.
    """
    v = asdiff(v)
    if v.data.ndim != 1:
        raise DimensionError(f"tile expects a vector, got shape {v.shape}")
    if n < 1:
        raise ParameterError(f"tile count must be >= 1, got {n}")
    if axis == 0:
        data = np.tile(v.data, (n, 1))
    elif axis == 1:
        data = np.tile(v.data[:, None], (1, n))
    else:
        raise ParameterError(f"tile axis must be 0 or 1, got {axis}")
    out = DiffArray(data, requires_grad=_tracked(v))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            _accumulate(v, out.grad.sum(axis=axis))
        t.record(bwd)
    return out


def elementwise_mul(a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = asdiff(a), asdiff(b)
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")
    out = DiffArray(a.data * b.data, requires_grad=_tracked(a, b))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            if a.requires_grad:
                _accumulate(a, out.grad * b.data)
            if b.requires_grad:
                _accumulate(b, out.grad * a.data)
        t.record(bwd)
    return out


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = asdiff(a), asdiff(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = DiffArray(a.data + b.data, requires_grad=_tracked(a, b))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            if a.requires_grad:
                _accumulate(a, out.grad)
            if b.requires_grad:
                _accumulate(b, out.grad)
        t.record(bwd)
    return out


def sub(a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = asdiff(a), asdiff(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = DiffArray(a.data - b.data, requires_grad=_tracked(a, b))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            if a.requires_grad:
                _accumulate(a, out.grad)
            if b.requires_grad:
                _accumulate(b, -out.grad)
        t.record(bwd)
    return out


def affine(x: DiffArray, scale: float, shift: float = 0.0) -> DiffArray:
    """Elementwise scale*x + shift with python-float coefficients."""
    x = asdiff(x)
    out = DiffArray(x.data * scale + shift, requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            _accumulate(x, out.grad * scale)
        t.record(bwd)
    return out


def reshape(x: DiffArray, shape) -> DiffArray:
    x = asdiff(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from e
    out = DiffArray(data, requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            _accumulate(x, out.grad.reshape(x.data.shape))
        t.record(bwd)
    return out


def cast(x: DiffArray, dtype) -> DiffArray:
    """Change dtype (float32 <-> float64); the adjoint casts back."""
    x = asdiff(x)
    out = DiffArray(x.data.astype(dtype), requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            _accumulate(x, out.grad)
        t.record(bwd)
    return out


# ---------------------------------------------------------------------------
# row-wise vector geometry (used by the losses)
# ---------------------------------------------------------------------------

def gather_rows(x: DiffArray, idx: np.ndarray) -> DiffArray:
    """Select rows by index; the adjoint scatter-adds back."""
    x = asdiff(x)
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D array, got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"gather_rows index out of range for {x.shape[0]} rows")
    out = DiffArray(x.data[idx], requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            delta = np.zeros_like(x.data)
            np.add.at(delta, idx, out.grad)
            _accumulate(x, delta)
        t.record(bwd)
    return out


def cross_rows(a: DiffArray, b: DiffArray) -> DiffArray:
    """Row-wise 3-vector cross product."""
    a, b = asdiff(a), asdiff(b)
    if a.shape != b.shape or a.data.ndim != 2 or a.shape[1] != 3:
        raise DimensionError(f"cross_rows expects matching (K,3) arrays, got {a.shape}, {b.shape}")
    out = DiffArray(np.cross(a.data, b.data), requires_grad=_tracked(a, b))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, np.cross(b.data, g))
            if b.requires_grad:
                _accumulate(b, np.cross(g, a.data))
        t.record(bwd)
    return out


def row_dot(a: DiffArray, b: DiffArray) -> DiffArray:
    """Row-wise dot product of two (K,D) arrays -> (K,)."""
    a, b = asdiff(a), asdiff(b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise DimensionError(f"row_dot expects matching 2-D arrays, got {a.shape}, {b.shape}")
    out = DiffArray((a.data * b.data).sum(axis=1), requires_grad=_tracked(a, b))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            g = out.grad[:, None]
            if a.requires_grad:
                _accumulate(a, g * b.data)
            if b.requires_grad:
                _accumulate(b, g * a.data)
        t.record(bwd)
    return out


def row_norms(x: DiffArray, grad_floor: float = 1e-12) -> DiffArray:
    """Euclidean norm of each row.

    The adjoint uses x/||x|| and routes zero gradient to rows with norm
    below `grad_floor` (subgradient choice at the origin), so coincident
    point pairs contribute an exact zero instead of NaN.
    """
    x = asdiff(x)
    if x.data.ndim != 2:
        raise DimensionError(f"row_norms expects a 2-D array, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1))
    out = DiffArray(norms, requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            safe = np.maximum(norms, grad_floor)
            unit = x.data / safe[:, None]
            unit[norms <= grad_floor] = 0.0
            _accumulate(x, out.grad[:, None] * unit)
        t.record(bwd)
    return out


def normalize_rows(x: DiffArray, grad_floor: float = 1e-12) -> DiffArray:
    """Scale each row to unit Euclidean length.

    Rows with norm below `grad_floor` raise NumericError: callers are
    expected to screen degenerate rows (e.g. zero-area faces) first.
    """
    x = asdiff(x)
    if x.data.ndim != 2:
        raise DimensionError(f"normalize_rows expects a 2-D array, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1))
    if (norms <= grad_floor).any():
        raise NumericError(
            f"normalize_rows: near-zero row at index {int(np.argmin(norms))}"
        )
    unit = x.data / norms[:, None]
    out = DiffArray(unit, requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            g = out.grad
            radial = (g * unit).sum(axis=1, keepdims=True)
            _accumulate(x, (g - radial * unit) / norms[:, None])
        t.record(bwd)
    return out


def transpose(x: DiffArray) -> DiffArray:
    x = asdiff(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D array, got {x.shape}")
    out = DiffArray(np.ascontiguousarray(x.data.T), requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            _accumulate(x, out.grad.T)
        t.record(bwd)
    return out


def neighbor_mean_offset(x: DiffArray, indptr: np.ndarray,
                         indices: np.ndarray) -> DiffArray:
    """Per-row offset from the mean of CSR-listed neighbor rows.

    out[i] = x[i] - mean(x[j] for j in indices[indptr[i]:indptr[i+1]]);
    every row must have at least one neighbor.
    """
    x = asdiff(x)
    if x.data.ndim != 2 or x.shape[0] != indptr.shape[0] - 1:
        raise DimensionError(
            f"neighbor_mean_offset: array {x.shape} does not match indptr of {indptr.shape[0] - 1} rows"
        )
    degrees = np.diff(indptr)
    if (degrees < 1).any():
        raise DimensionError("neighbor_mean_offset: row without neighbors")
    inv_deg = 1.0 / degrees
    sums = np.add.reduceat(x.data[indices], indptr[:-1], axis=0)
    out = DiffArray(x.data - sums * inv_deg[:, None].astype(x.data.dtype),
                    requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        row_of_entry = np.repeat(np.arange(x.shape[0]), degrees)
        def bwd():
            g = out.grad
            delta = g.copy()
            np.subtract.at(delta, indices, g[row_of_entry] * inv_deg[row_of_entry, None])
            _accumulate(x, delta)
        t.record(bwd)
    return out


def sum_all(x: DiffArray) -> DiffArray:
    x = asdiff(x)
    out = DiffArray(np.asarray(x.data.sum(), dtype=x.data.dtype), requires_grad=_tracked(x))
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd():
            _accumulate(x, np.broadcast_to(out.grad, x.data.shape))
        t.record(bwd)
    return out


def mean_all(x: DiffArray) -> DiffArray:
    x = asdiff(x)
    if x.data.size == 0:
        raise EmptyInputError("mean_all over an empty array")
    return affine(sum_all(x), 1.0 / x.data.size)


def weighted_sum(scalars: list, weights: list) -> DiffArray:
    """Weighted sum of scalar DiffArrays with python-float weights."""
    if len(scalars) != len(weights) or not scalars:
        raise ParameterError("weighted_sum needs matching, non-empty scalars and weights")
    acc = affine(scalars[0], float(weights[0]))
    for s, w in zip(scalars[1:], weights[1:]):
        acc = add(acc, affine(s, float(w)))
    return acc


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradcheckReport:
    """Per-parameter worst-case relative error of analytic vs numeric grads."""

    params: dict = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params.values()), default=0.0)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def summary(self) -> str:
        lines = []
        for p in self.params.values():
            lines.append(
                f"{p.name}: max rel err {p.max_rel_err:.3e} at {p.worst_index} "
                f"(analytic {p.analytic:.6e}, numeric {p.numeric:.6e})"
            )
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def gradcheck(build_scalar, params: dict, h: float = 1e-3,
              probes_per_param: int = 12, seed: int = 0) -> GradcheckReport:
    """Check analytic adjoints of a scalar-valued computation.

    `build_scalar(arrays)` receives a dict of DiffArrays keyed like
    `params` and must return a scalar DiffArray; it is invoked once on
    tracked arrays for the analytic pass, then repeatedly on untracked
    copies for central finite differences with step `h`.  Both passes
    run in float64 so that data-dependent branch points (relu, argmax,
    nearest neighbors) resolve identically and the comparison isolates
    the adjoint formulas; float32 remains the production storage.  Up
    to `probes_per_param` coordinates per parameter are probed (all of
    them for small parameters), drawn deterministically from `seed`.
    Raises NumericError if any probe produces a non-finite value.
    """
    rng = np.random.default_rng(seed)

    tracked = {k: DiffArray(np.asarray(v, dtype=np.float64), requires_grad=True)
               for k, v in params.items()}
    with Tape() as t:
        loss = build_scalar(tracked)
        if loss.data.size != 1:
            raise ParameterError("gradcheck target must reduce to a scalar")
        t.backward(loss)
    analytic = {
        k: (np.zeros_like(a.data, dtype=np.float64) if a.grad is None
            else a.grad.astype(np.float64))
        for k, a in tracked.items()
    }

    base = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}

    def eval64() -> float:
        arrays = {k: DiffArray(v.copy()) for k, v in base.items()}
        val = build_scalar(arrays).item()
        return val

    report = GradcheckReport()
    for name, arr in base.items():
        flat = arr.reshape(-1)
        n_coords = flat.size
        if n_coords <= probes_per_param:
            coords = np.arange(n_coords)
        else:
            coords = rng.choice(n_coords, size=probes_per_param, replace=False)
        worst = ParamCheck(name, 0.0, (), 0.0, 0.0)
        a_flat = analytic[name].reshape(-1)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            f_plus = eval64()
            flat[c] = keep - h
            f_minus = eval64()
            flat[c] = keep
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(
                    f"non-finite value while probing {name}{np.unravel_index(c, arr.shape)}"
                )
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = _rel_err(float(a_flat[c]), numeric)
            if err >= worst.max_rel_err:
                worst = ParamCheck(name, err, tuple(np.unravel_index(c, arr.shape)),
                                   float(a_flat[c]), numeric)
        report.params[name] = worst
    return report
