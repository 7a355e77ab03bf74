"""A small tape-based reverse-mode autodiff engine.

Only the operators the forecaster needs are provided: 1D convolution and
transposed convolution, batch normalization, ReLU, channel concatenation,
MSE and a weighted sum. All data is float64.

Each op builds an output :class:`Tensor` that remembers its parents and a
closure computing parent gradients. :meth:`Tensor.backward` walks the graph
in reverse topological order and, unless asked to retain it, frees the tape.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DimensionError, UsageError

__all__ = [
    "Tensor", "Parameter", "BatchNorm", "no_grad",
    "conv1d", "deconv1d", "batchnorm1d", "relu", "concat_channels",
    "mse_loss", "tensor_sum", "adam_step", "gradcheck", "GradcheckReport",
    "inject_grad_fault", "BN_EPS", "BN_MOMENTUM",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_GRAD_ENABLED = True
# op name -> (rng, magnitude); see inject_grad_fault
_FAULTS: dict = {}
# list of relu masks while gradcheck is probing for kinks, else None
_RELU_TRACE = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def inject_grad_fault(op: str, magnitude: float = 1e-2, seed: int = 0):
    """Test hook: add seeded noise to every analytic gradient produced by ``op``.

    Used by the self-test to prove that a corrupted backward pass is caught.
    """
    _FAULTS[op] = (np.random.default_rng(seed), magnitude)
    try:
        yield
    finally:
        _FAULTS.pop(op, None)


def _faulty(op, g):
    fault = _FAULTS.get(op)
    if fault is None or g is None:
        return g
    rng, mag = fault
    return g + mag * rng.standard_normal(g.shape)


class Tensor:
    """Dense float64 array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, retain_graph=False):
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor with no recorded history")

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
            if not retain_graph:
                node._backward = None
                node._parents = ()


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward):
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=parents if track else (), _op=op)
    if track:
        out._backward = backward
    return out


def _check_3d(t, name):
    if t.data.ndim != 3:
        raise DimensionError(f"{name} must be [N, C, L], got shape {t.shape}")


def conv1d(input, weight, bias, padding=0):
    """Stride-1 cross-correlation with symmetric zero padding.

    input [N, C_in, L], weight [C_out, C_in, K], bias [C_out]
    -> [N, C_out, L + 2*padding - K + 1]
    """
    x, w, b = _as_tensor(input), _as_tensor(weight), _as_tensor(bias)
    _check_3d(x, "input")
    if w.data.ndim != 3 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"weight {w.shape} incompatible with input {x.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"bias {b.shape} does not match {w.shape[0]} output channels")
    if padding < 0 or x.shape[2] + 2 * padding < w.shape[2]:
        raise DimensionError(
            f"sequence length {x.shape[2]} with padding {padding} shorter than kernel {w.shape[2]}")
    out = _kernels.conv1d_forward(x.data, w.data, b.data, int(padding))

    def backward(g):
        gx, gw, gb = _kernels.conv1d_backward(x.data, w.data, np.ascontiguousarray(g), int(padding))
        return _faulty("conv1d", gx), _faulty("conv1d", gw), _faulty("conv1d", gb)

    return _make(out, (x, w, b), "conv1d", backward)


def deconv1d(input, weight, bias):
    """Stride-1 transposed convolution without padding.

    input [N, C_in, L], weight [C_in, C_out, K], bias [C_out] -> [N, C_out, L + K - 1]

    Computed as the input gradient of a ``conv1d`` whose weight is ``weight``
    read as [C_out', C_in', K]; the two are exact adjoints.
    """
    x, w, b = _as_tensor(input), _as_tensor(weight), _as_tensor(bias)
    _check_3d(x, "input")
    if w.data.ndim != 3 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"weight {w.shape} incompatible with input {x.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias {b.shape} does not match {w.shape[1]} output channels")
    length = x.shape[2] + w.shape[2] - 1
    out = _kernels.conv1d_input_grad(w.data, np.ascontiguousarray(x.data), length, 0)
    out += b.data[None, :, None]

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = _kernels.conv1d_forward(g, w.data, np.zeros(w.shape[0]), 0)
        gw, _ = _kernels.conv1d_weight_grad(g, np.ascontiguousarray(x.data), 0)
        gb = g.sum(axis=(0, 2))
        return _faulty("deconv1d", gx), _faulty("deconv1d", gw), _faulty("deconv1d", gb)

    return _make(out, (x, w, b), "deconv1d", backward)


def relu(input):
    x = _as_tensor(input)
    mask = x.data > 0
    if _RELU_TRACE is not None:
        _RELU_TRACE.append(mask)

    def backward(g):
        return (_faulty("relu", g * mask),)

    return _make(x.data * mask, (x,), "relu", backward)


def concat_channels(inputs):
    """Concatenate [N, C_i, L] tensors along the channel axis, in order."""
    ts = [_as_tensor(t) for t in inputs]
    if not ts:
        raise DimensionError("concat_channels needs at least one input")
    for t in ts:
        _check_3d(t, "input")
    n, length = ts[0].shape[0], ts[0].shape[2]
    for t in ts[1:]:
        if t.shape[0] != n or t.shape[2] != length:
            raise DimensionError(f"cannot concatenate {ts[0].shape} with {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def backward(g):
        return tuple(_faulty("concat", g[:, bounds[i]:bounds[i + 1]]) for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=1), tuple(ts), "concat", backward)


def mse_loss(pred, target):
    p, t = _as_tensor(pred), _as_tensor(target)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and target {t.shape} differ")
    diff = p.data - t.data
    count = diff.size

    def backward(g):
        gp = g * (2.0 / count) * diff
        return _faulty("mse", gp), _faulty("mse", -gp)

    return _make(np.array((diff * diff).sum() / count), (p, t), "mse", backward)


def tensor_sum(input, weights=None):
    """Sum of all elements, optionally weighted elementwise by a constant array."""
    x = _as_tensor(input)
    if weights is None:
        w = np.ones_like(x.data)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != x.shape:
            raise DimensionError(f"weights {w.shape} do not match input {x.shape}")

    def backward(g):
        return (g * w,)

    return _make(np.array((x.data * w).sum()), (x,), "sum", backward)


class Parameter:
    """A named trainable tensor plus its Adam moment estimates."""

    __slots__ = ("name", "tensor", "adam_m", "adam_v", "step_count")

    def __init__(self, name, data):
        self.name = name
        self.tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self.adam_m = np.zeros(self.tensor.size)
        self.adam_v = np.zeros(self.tensor.size)
        self.step_count = 0

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class BatchNorm:
    """Per-channel batch-norm state: affine parameters and running statistics."""

    def __init__(self, name, channels, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.channel_count = channels
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum
        self.mode = "train"

    def parameters(self):
        return [self.gamma, self.beta]


def batchnorm1d(input, state):
    """Normalize [N, C, L] per channel.

    Train mode uses batch statistics over N and L and updates the running
    statistics (running = (1 - momentum) * running + momentum * batch, with the
    unbiased batch variance). Eval mode applies the running statistics.
    """
    x = _as_tensor(input)
    _check_3d(x, "input")
    if x.shape[1] != state.channel_count:
        raise DimensionError(f"input has {x.shape[1]} channels, batch norm expects {state.channel_count}")
    gamma, beta = state.gamma.tensor, state.beta.tensor

    if state.mode == "train":
        m = x.shape[0] * x.shape[2]
        if m < 2:
            raise UsageError("train-mode batch norm needs at least two values per channel")
        y, xhat, mean, var = _kernels.batchnorm_forward(x.data, gamma.data, beta.data, state.eps)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        mom = state.momentum
        state.running_mean = (1.0 - mom) * state.running_mean + mom * mean
        state.running_var = (1.0 - mom) * state.running_var + mom * var * (m / (m - 1))

        def backward(g):
            gx, gg, gb = _kernels.batchnorm_backward(
                np.ascontiguousarray(g), xhat, gamma.data, inv_std)
            return _faulty("batchnorm1d", gx), _faulty("batchnorm1d", gg), _faulty("batchnorm1d", gb)

        return _make(y, (x, gamma, beta), "batchnorm1d", backward)

    if state.mode != "eval":
        raise UsageError(f"unknown batch-norm mode {state.mode!r}")
    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean[None, :, None]) * inv_std[None, :, None]
    y = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def backward(g):
        gx = g * (gamma.data * inv_std)[None, :, None]
        return (_faulty("batchnorm1d", gx),
                _faulty("batchnorm1d", (g * xhat).sum(axis=(0, 2))),
                _faulty("batchnorm1d", g.sum(axis=(0, 2))))

    return _make(y, (x, gamma, beta), "batchnorm1d", backward)


def adam_step(params, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every parameter, in place."""
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise UsageError(f"no gradient for parameters: {', '.join(missing[:5])}")
    for p in params:
        g = p.grad.reshape(-1)
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.tensor.data -= (learning_rate * m_hat / (np.sqrt(v_hat) + eps)).reshape(p.tensor.shape)


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: tuple | None
    checked: int
    skipped_kinks: int
    tolerance: float
    per_tensor: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def gradcheck(fragment, inputs, params=(), *, tolerance=1e-4, h=1e-5, seed=0,
              max_coords=None, floor=1e-4):
    """Compare analytic gradients with central finite differences.

    ``fragment`` maps a list of input Tensors to an output Tensor. ``inputs``
    holds arrays or shapes (shapes are filled with seeded U[-1, 1] values);
    ``params`` are Tensors or Parameters read by the fragment. The scalar
    objective is a fixed random projection of the output.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Coordinates whose +-h perturbation flips a ReLU mask are skipped and
    counted, since the derivative is undefined across the kink. When
    ``max_coords`` is set, that many seeded coordinates per tensor are checked.
    """
    global _RELU_TRACE
    rng = np.random.default_rng(seed)
    in_tensors = []
    for item in inputs:
        if isinstance(item, tuple):
            arr = rng.uniform(-1.0, 1.0, size=item)
        else:
            arr = np.array(item, dtype=np.float64)
        in_tensors.append(Tensor(arr, requires_grad=True))
    param_tensors = [p.tensor if isinstance(p, Parameter) else p for p in params]
    names = [f"input{i}" for i in range(len(in_tensors))]
    names += [getattr(p, "name", f"param{i}") for i, p in enumerate(params)]
    targets = in_tensors + param_tensors

    for t in targets:
        t.zero_grad()
        t.requires_grad = True
    out = fragment(in_tensors)
    proj = rng.standard_normal(out.shape)
    tensor_sum(out, proj).backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in targets]

    def objective():
        with no_grad():
            return float((fragment(in_tensors).data * proj).sum())

    def masks():
        global _RELU_TRACE
        _RELU_TRACE = []
        try:
            value = objective()
            return value, _RELU_TRACE
        finally:
            _RELU_TRACE = None

    _, base_masks = masks()
    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    per_tensor = {}
    for name, t, a in zip(names, targets, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        tensor_worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus, m_plus = masks()
            flat[i] = orig - h
            f_minus, m_minus = masks()
            flat[i] = orig
            if any(not np.array_equal(u, v) for u, v in zip(base_masks, m_plus)) or any(
                    not np.array_equal(u, v) for u, v in zip(base_masks, m_minus)):
                skipped += 1
                continue
            num = (f_plus - f_minus) / (2.0 * h)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            tensor_worst = max(tensor_worst, err)
            if err > worst:
                worst, worst_at = err, (name, int(i))
        per_tensor[name] = tensor_worst
    _RELU_TRACE = None
    return GradcheckReport(worst, worst_at, checked, skipped, tolerance, per_tensor)
