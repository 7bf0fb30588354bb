"""Minimal differentiable layer set with hand-written backward passes.

Tensors are plain numpy arrays. Image-like tensors are ``(C, H, W)`` (a batch
of one image, as in training); fully-connected inputs are ``(N, D)`` or
``(D,)``. ``forward`` and ``backward`` are pure functions of their arguments,
except that ``backward`` *accumulates* parameter gradients into the
:class:`LayerParams` it is given.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

PARAM_KINDS = ("conv3x3", "conv1x1", "fc")
FREE_KINDS = ("relu", "sigmoid", "maxpool", "upsample", "concat")
LAYER_KINDS = PARAM_KINDS + FREE_KINDS


class ShapeError(ValueError):
    """Raised when a layer receives tensors of incompatible shape."""


class TrainingDiverged(RuntimeError):
    """Raised by :func:`sgd_step` when a gradient is NaN or infinite."""


def _shape_fail(kind, what, got, expected):
    raise ShapeError(f"{kind}: {what} shape {tuple(got)} incompatible with {tuple(expected)}")


@dataclass
class LayerParams:
    kind: str
    weight: np.ndarray
    bias: np.ndarray
    weight_grad: np.ndarray = None
    bias_grad: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise ValueError(f"layer kind {self.kind!r} carries no parameters")
        if self.weight_grad is None:
            self.weight_grad = np.zeros_like(self.weight)
        if self.bias_grad is None:
            self.bias_grad = np.zeros_like(self.bias)

    @classmethod
    def init(cls, kind, n_in, n_out, rng, dtype=np.float32, name="", scheme="glorot"):
        """Uniform weights, zero bias.

        ``glorot``: limit sqrt(6 / (fan_in + fan_out)). ``he``: sqrt(6 / fan_in),
        which keeps activation scale through stacks of relu layers.
        """
        if kind == "conv3x3":
            shape, rf = (n_out, n_in, 3, 3), 9
        elif kind == "conv1x1":
            shape, rf = (n_out, n_in, 1, 1), 1
        elif kind == "fc":
            shape, rf = (n_out, n_in), 1
        else:
            raise ValueError(f"layer kind {kind!r} carries no parameters")
        if scheme == "glorot":
            limit = np.sqrt(6.0 / (n_in * rf + n_out * rf))
        elif scheme == "he":
            limit = np.sqrt(6.0 / (n_in * rf))
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        weight = rng.uniform(-limit, limit, size=shape).astype(dtype)
        return cls(kind, weight, np.zeros(n_out, dtype=dtype), name=name)

    def zero_grad(self):
        self.weight_grad[...] = 0
        self.bias_grad[...] = 0

    def astype(self, dtype):
        return LayerParams(self.kind, self.weight.astype(dtype), self.bias.astype(dtype), name=self.name)


# --------------------------------------------------------------------------
# forward


def _check_conv(kind, params, x):
    if x.ndim != 3 or x.shape[0] != params.weight.shape[1]:
        _shape_fail(kind, "input", x.shape, ("C=%d" % params.weight.shape[1], "H", "W"))


def forward(kind, params=None, *inputs):
    """Apply one layer. ``params`` is ``None`` for parameter-free kinds."""
    if kind in PARAM_KINDS and params is None:
        raise ValueError(f"{kind}: parameters required")
    if kind == "conv3x3":
        (x,) = inputs
        _check_conv(kind, params, x)
        c, h, w = x.shape
        cols = kernels.im2col3x3(x)
        out = params.weight.reshape(params.weight.shape[0], -1) @ cols
        out += params.bias[:, None]
        return out.reshape(-1, h, w)
    if kind == "conv1x1":
        (x,) = inputs
        _check_conv(kind, params, x)
        c, h, w = x.shape
        out = params.weight.reshape(params.weight.shape[0], c) @ x.reshape(c, h * w)
        out += params.bias[:, None]
        return out.reshape(-1, h, w)
    if kind == "fc":
        (x,) = inputs
        if x.shape[-1] != params.weight.shape[1] or x.ndim not in (1, 2):
            _shape_fail(kind, "input", x.shape, ("N", params.weight.shape[1]))
        return x @ params.weight.T + params.bias
    if kind == "relu":
        (x,) = inputs
        return np.maximum(x, 0)
    if kind == "sigmoid":
        (x,) = inputs
        return _sigmoid(x)
    if kind == "maxpool":
        (x,) = inputs
        if x.ndim != 3 or x.shape[1] % 2 or x.shape[2] % 2:
            _shape_fail(kind, "input", x.shape, ("C", "even H", "even W"))
        return kernels.maxpool2(x)[0]
    if kind == "upsample":
        (x,) = inputs
        if x.ndim != 3:
            _shape_fail(kind, "input", x.shape, ("C", "H", "W"))
        return x.repeat(2, axis=1).repeat(2, axis=2)
    if kind == "concat":
        if not inputs:
            raise ShapeError("concat: no inputs")
        ref = inputs[0].shape[1:]
        for t in inputs[1:]:
            if t.ndim != 3 or t.shape[1:] != ref:
                _shape_fail(kind, "input", t.shape, ("C",) + tuple(ref))
        return np.concatenate(inputs, axis=0)
    raise ValueError(f"unknown layer kind {kind!r}")


def _sigmoid(x):
    # split by sign to avoid exp overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# backward


def backward(kind, params, inputs, upstream):
    """Gradients w.r.t. each input (tuple); parameter grads accumulate in place."""
    inputs = tuple(inputs)
    out_shape = _output_shape(kind, params, inputs)
    if upstream.shape != out_shape:
        _shape_fail(kind, "upstream gradient", upstream.shape, out_shape)
    if kind == "conv3x3":
        (x,) = inputs
        c, h, w = x.shape
        g = upstream.reshape(upstream.shape[0], h * w)
        cols = kernels.im2col3x3(x)
        wm = params.weight.reshape(params.weight.shape[0], -1)
        params.weight_grad += (g @ cols.T).reshape(params.weight.shape)
        params.bias_grad += g.sum(axis=1)
        dx = kernels.col2im3x3(wm.T @ g, c, h, w)
        return (dx,)
    if kind == "conv1x1":
        (x,) = inputs
        c, h, w = x.shape
        g = upstream.reshape(upstream.shape[0], h * w)
        wm = params.weight.reshape(params.weight.shape[0], c)
        params.weight_grad += (g @ x.reshape(c, h * w).T).reshape(params.weight.shape)
        params.bias_grad += g.sum(axis=1)
        return ((wm.T @ g).reshape(c, h, w),)
    if kind == "fc":
        (x,) = inputs
        x2 = x.reshape(-1, x.shape[-1])
        g2 = upstream.reshape(-1, upstream.shape[-1])
        params.weight_grad += g2.T @ x2
        params.bias_grad += g2.sum(axis=0)
        return ((upstream @ params.weight).reshape(x.shape),)
    if kind == "relu":
        (x,) = inputs
        return (upstream * (x > 0),)
    if kind == "sigmoid":
        (x,) = inputs
        s = _sigmoid(x)
        return (upstream * s * (1 - s),)
    if kind == "maxpool":
        (x,) = inputs
        _, arg = kernels.maxpool2(x)
        return (kernels.maxpool2_backward(np.ascontiguousarray(upstream), arg),)
    if kind == "upsample":
        c, h, w = upstream.shape
        return (upstream.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4)),)
    if kind == "concat":
        splits = np.cumsum([t.shape[0] for t in inputs])[:-1]
        return tuple(np.split(upstream, splits, axis=0))
    raise ValueError(f"unknown layer kind {kind!r}")


def _output_shape(kind, params, inputs):
    if kind in ("conv3x3", "conv1x1"):
        _check_conv(kind, params, inputs[0])
        return (params.weight.shape[0],) + inputs[0].shape[1:]
    if kind == "fc":
        return inputs[0].shape[:-1] + (params.weight.shape[0],)
    if kind == "maxpool":
        c, h, w = inputs[0].shape
        return (c, h // 2, w // 2)
    if kind == "upsample":
        c, h, w = inputs[0].shape
        return (c, h * 2, w * 2)
    if kind == "concat":
        return (sum(t.shape[0] for t in inputs),) + inputs[0].shape[1:]
    return inputs[0].shape


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    kind: str
    passed: bool
    tolerance: float
    worst_error: float = 0.0
    worst_location: str = ""
    n_checked: int = 0
    errors: dict = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.kind}: worst rel err {self.worst_error:.3e} at "
                f"{self.worst_location or '-'} ({self.n_checked} elements, tol {self.tolerance:g})")


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def grad_check(kind, params, inputs, tolerance=1e-4, upstream=None, eps=1e-5, rng=None):
    """Compare ``backward`` against central finite differences.

    The scalar probed is ``sum(upstream * forward(...))``; ``upstream`` is drawn
    from ``rng`` when not given. Inputs and params must be float64.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = [np.array(t, dtype=np.float64) for t in inputs]
    out = forward(kind, params, *inputs)
    if upstream is None:
        upstream = rng.standard_normal(out.shape)
    if params is not None:
        params.zero_grad()
    analytic_inputs = backward(kind, params, inputs, upstream)

    def probe():
        return float(np.sum(upstream * forward(kind, params, *inputs)))

    report = GradCheckReport(kind, True, tolerance)
    targets = [(f"input{i}", t, a) for i, (t, a) in enumerate(zip(inputs, analytic_inputs))]
    if params is not None:
        targets += [("weight", params.weight, params.weight_grad.copy()),
                    ("bias", params.bias, params.bias_grad.copy())]
    for label, tensor, analytic in targets:
        num = numeric_grad(probe, tensor, eps)
        err = rel_error(analytic, num)
        report.n_checked += err.size
        if err.size:
            i = int(np.argmax(err))
            report.errors[label] = float(err.flat[i])
            if err.flat[i] > report.worst_error:
                report.worst_error = float(err.flat[i])
                report.worst_location = f"{label}{tuple(int(v) for v in np.unravel_index(i, err.shape))}"
    report.passed = report.worst_error <= tolerance
    return report


# --------------------------------------------------------------------------
# optimiser


def grad_norm(params):
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                              for p in params for g in (p.weight_grad, p.bias_grad))))


def sgd_step(params, lr, weight_decay=0.0, clip_norm=0.0):
    """Plain SGD with L2 decay: ``w <- w - lr * (grad + wd * w)``, then zero grads.

    ``params`` is an iterable of :class:`LayerParams`. Every gradient is checked
    for finiteness before any parameter is touched. With ``clip_norm > 0`` each
    layer's gradient (weight and bias together) is rescaled to L2 norm at most
    ``clip_norm``. Returns the global pre-clip gradient norm.
    """
    params = list(params)
    for p in params:
        for label, g in (("weight", p.weight_grad), ("bias", p.bias_grad)):
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite {label} gradient in layer {p.name or p.kind}")
    total = 0.0
    for p in params:
        n = grad_norm([p])
        total += n * n
        scale = clip_norm / n if clip_norm > 0 and n > clip_norm else 1.0
        p.weight -= lr * (scale * p.weight_grad + weight_decay * p.weight)
        p.bias -= lr * (scale * p.bias_grad + weight_decay * p.bias)
        p.zero_grad()
    return float(np.sqrt(total))


# --------------------------------------------------------------------------
# checkpoint container

MAGIC = b"CSK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, records):
    """Write ``{name: array}`` as little-endian f32 records behind a CSK1 header."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    for name, arr in records.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos, records = 8, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(data):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            records[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    return records
