"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Exactly the primitives the two-stage pipeline needs: elementwise ops,
matmul, 3D convolution and its transpose, max pooling, softmax, layer
norm, batch standardization of clinical columns, an AdamW optimizer and
a finite-difference gradient verifier.  Everything runs in float64 so
gradient checks stay tight at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class DegenerateBatch(ValueError):
    pass


class Tensor:
    """Shape-tagged float64 value array, optionally tracked for gradients."""

    __slots__ = ("values", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("output", "pull")

    def __init__(self, output, pull):
        self.output = output
        self.pull = pull


class Tape:
    """Append-only record of operations; construction order is topological."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def record_op(self, output: Tensor, pull) -> Tensor:
        """Register a backward rule: pull(out_grad) -> [(input, grad), ...]."""
        if output.requires_grad:
            self._nodes.append(_Node(output, pull))
        return output

    def __len__(self):
        return len(self._nodes)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse traversal of the tape; returns the accumulated gradient map.

    Gradients accumulate additively across fan-out.  The loss must be a
    scalar tensor produced on this tape.
    """
    if loss.values.shape != ():
        raise NotScalar(f"loss has shape {loss.values.shape}, expected scalar")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones((), dtype=np.float64)}
    for node in reversed(tape._nodes):
        out_grad = grads.get(node.output)
        if out_grad is None:
            continue
        for tensor, contrib in node.pull(out_grad):
            if not tensor.requires_grad:
                continue
            prev = grads.get(tensor)
            grads[tensor] = contrib if prev is None else prev + contrib
    return grads


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


as_tensor = _wrap


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    # exact match or scalar broadcast only
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


def _reduce_to(shape, grad):
    if shape == () and grad.shape != ():
        return grad.sum()
    return grad


def add(tape: Tape, a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "add")
    out = Tensor(a.values + b.values, a.requires_grad or b.requires_grad)
    return tape.record_op(
        out, lambda g: [(a, _reduce_to(a.shape, g)), (b, _reduce_to(b.shape, g))]
    )


def sub(tape: Tape, a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.values - b.values, a.requires_grad or b.requires_grad)
    return tape.record_op(
        out, lambda g: [(a, _reduce_to(a.shape, g)), (b, _reduce_to(b.shape, -g))]
    )


def mul(tape: Tape, a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.values * b.values, a.requires_grad or b.requires_grad)
    return tape.record_op(
        out,
        lambda g: [
            (a, _reduce_to(a.shape, g * b.values)),
            (b, _reduce_to(b.shape, g * a.values)),
        ],
    )


def neg(tape: Tape, a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.values, a.requires_grad)
    return tape.record_op(out, lambda g: [(a, -g)])


def relu(tape: Tape, a) -> Tensor:
    a = _wrap(a)
    mask = a.values > 0.0
    out = Tensor(np.where(mask, a.values, 0.0), a.requires_grad)
    return tape.record_op(out, lambda g: [(a, g * mask)])


def sigmoid(tape: Tape, a) -> Tensor:
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.values))
    out = Tensor(s, a.requires_grad)
    return tape.record_op(out, lambda g: [(a, g * s * (1.0 - s))])


def matmul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.values.ndim != 2 or b.values.ndim not in (1, 2):
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims: {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values, a.requires_grad or b.requires_grad)
    if b.values.ndim == 2:
        pull = lambda g: [(a, g @ b.values.T), (b, a.values.T @ g)]
    else:
        pull = lambda g: [(a, np.outer(g, b.values)), (b, a.values.T @ g)]
    return tape.record_op(out, pull)


def reshape(tape: Tape, a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.values.reshape(shape), a.requires_grad)
    return tape.record_op(out, lambda g: [(a, g.reshape(a.shape))])


def take_row(tape: Tape, a: Tensor, i: int) -> Tensor:
    a = _wrap(a)
    if a.values.ndim != 2:
        raise ShapeMismatch(f"take_row on shape {a.shape}")
    out = Tensor(a.values[i].copy(), a.requires_grad)

    def pull(g):
        full = np.zeros_like(a.values)
        full[i] = g
        return [(a, full)]

    return tape.record_op(out, pull)


def stack(tape: Tape, tensors) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(
        np.stack([t.values for t in tensors]),
        any(t.requires_grad for t in tensors),
    )
    return tape.record_op(
        out, lambda g: [(t, g[i]) for i, t in enumerate(tensors)]
    )


def add_channel_bias(tape: Tape, x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias vector to a [C, D, H, W] feature map."""
    x, bias = _wrap(x), _wrap(bias)
    if x.values.ndim != 4 or bias.shape != (x.shape[0],):
        raise ShapeMismatch(f"channel bias {bias.shape} for features {x.shape}")
    out = Tensor(x.values + bias.values[:, None, None, None],
                 x.requires_grad or bias.requires_grad)
    return tape.record_op(
        out, lambda g: [(x, g), (bias, g.sum(axis=(1, 2, 3)))]
    )


def sum_all(tape: Tape, a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.values.sum(), a.requires_grad)
    return tape.record_op(out, lambda g: [(a, g * np.ones_like(a.values))])


def softmax(tape: Tape, logits: Tensor) -> Tensor:
    """Max-subtracted stable softmax over a 1-D logit vector."""
    logits = _wrap(logits)
    shifted = logits.values - logits.values.max()
    e = np.exp(shifted)
    p = e / e.sum()
    out = Tensor(p, logits.requires_grad)
    return tape.record_op(out, lambda g: [(logits, p * (g - np.dot(g, p)))])


def layer_norm(tape: Tape, x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize a vector to zero mean / unit population variance, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    m = x.values.size
    mu = x.values.mean()
    var = x.values.var()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out = Tensor(xhat * gain.values + bias.values,
                 x.requires_grad or gain.requires_grad or bias.requires_grad)

    def pull(g):
        gg = g * gain.values
        dx = inv * (gg - gg.mean() - xhat * np.mean(gg * xhat))
        return [(x, dx), (gain, g * xhat), (bias, g.copy())]

    return tape.record_op(out, pull)


# ---------------------------------------------------------------------------
# 3D convolution via im2col
# ---------------------------------------------------------------------------

def _im2col3(xp: np.ndarray, k: int, s: int):
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::s, ::s, ::s]
    c, do, ho, wo = win.shape[:4]
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * k ** 3, do * ho * wo)
    return np.ascontiguousarray(cols), (do, ho, wo)


def _col2im3(mat: np.ndarray, c: int, k: int, s: int, out_extents, in_extents):
    """Scatter-add of kernel-offset slices; adjoint of _im2col3."""
    do, ho, wo = in_extents
    out = np.zeros((c,) + tuple(out_extents), dtype=np.float64)
    mat = mat.reshape(c, k, k, k, do, ho, wo)
    for a in range(k):
        for b in range(k):
            for cc in range(k):
                out[:, a:a + s * do:s, b:b + s * ho:s, cc:cc + s * wo:s] += \
                    mat[:, a, b, cc]
    return out


def conv3d(tape: Tape, x: Tensor, kernels: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of [C_in,D,H,W] with [C_out,C_in,k,k,k], zero padded."""
    x, kernels = _wrap(x), _wrap(kernels)
    if x.values.ndim != 4 or kernels.values.ndim != 5:
        raise ShapeMismatch(f"conv3d: input {x.shape}, kernels {kernels.shape}")
    c_out, c_in, k = kernels.shape[0], kernels.shape[1], kernels.shape[2]
    if x.shape[0] != c_in:
        raise ShapeMismatch(f"conv3d channels: input {x.shape[0]}, kernels expect {c_in}")
    ext = [(x.shape[i + 1] + 2 * padding - k) // stride + 1 for i in range(3)]
    if min(ext) < 1 or any((x.shape[i + 1] + 2 * padding - k) < 0 for i in range(3)):
        raise ShapeMismatch(f"conv3d: empty output for input {x.shape}, k={k}")
    xp = np.pad(x.values, ((0, 0),) + ((padding, padding),) * 3) if padding else x.values
    cols, out_ext = _im2col3(xp, k, stride)
    kmat = kernels.values.reshape(c_out, -1)
    out = Tensor((kmat @ cols).reshape((c_out,) + out_ext),
                 x.requires_grad or kernels.requires_grad)

    def pull(g):
        gmat = g.reshape(c_out, -1)
        dk = (gmat @ cols.T).reshape(kernels.shape)
        dxp = _col2im3(kmat.T @ gmat, c_in, k, stride, xp.shape[1:], out_ext)
        if padding:
            dxp = dxp[:, padding:-padding, padding:-padding, padding:-padding]
        return [(x, dxp), (kernels, dk)]

    return tape.record_op(out, pull)


def conv_transpose3d(tape: Tape, x: Tensor, kernels: Tensor,
                     stride: int = 1) -> Tensor:
    """Adjoint of conv3d with the same kernels: [C_out,T..] -> [C_in,(T-1)s+k..]."""
    x, kernels = _wrap(x), _wrap(kernels)
    if x.values.ndim != 4 or kernels.values.ndim != 5:
        raise ShapeMismatch(f"conv_transpose3d: input {x.shape}, kernels {kernels.shape}")
    c_out, c_in, k = kernels.shape[0], kernels.shape[1], kernels.shape[2]
    if x.shape[0] != c_out:
        raise ShapeMismatch(
            f"conv_transpose3d channels: input {x.shape[0]}, kernels expect {c_out}")
    in_ext = x.shape[1:]
    out_ext = tuple((n - 1) * stride + k for n in in_ext)
    kmat = kernels.values.reshape(c_out, -1)
    xmat = x.values.reshape(c_out, -1)
    out = Tensor(_col2im3(kmat.T @ xmat, c_in, k, stride, out_ext, in_ext),
                 x.requires_grad or kernels.requires_grad)

    def pull(g):
        cols_g, _ = _im2col3(g, k, stride)
        dx = (kmat @ cols_g).reshape(x.shape)
        dk = (xmat @ cols_g.T).reshape(kernels.shape)
        return [(x, dx), (kernels, dk)]

    return tape.record_op(out, pull)


def maxpool3d(tape: Tape, x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Per-window max with stride 2; odd extents padded with -inf.

    Gradient routes to the argmax voxel, first index on ties.
    """
    x = _wrap(x)
    if window != stride:
        raise ShapeMismatch("maxpool3d supports window == stride only")
    w = window
    c = x.shape[0]
    ext = x.shape[1:]
    pad = [(-n) % w for n in ext]
    xp = np.pad(x.values, ((0, 0),) + tuple((0, p) for p in pad),
                constant_values=-np.inf) if any(pad) else x.values
    pe = [n // w for n in xp.shape[1:]]
    blocks = xp.reshape(c, pe[0], w, pe[1], w, pe[2], w)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, *pe, w ** 3)
    arg = blocks.argmax(axis=-1)
    out = Tensor(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0],
                 x.requires_grad)

    def pull(g):
        flat = np.zeros((c, *pe, w ** 3), dtype=np.float64)
        np.put_along_axis(flat, arg[..., None], g[..., None], axis=-1)
        full = flat.reshape(c, pe[0], pe[1], pe[2], w, w, w)
        full = full.transpose(0, 1, 4, 2, 5, 3, 6).reshape(c, pe[0] * w, pe[1] * w, pe[2] * w)
        return [(x, full[:, :ext[0], :ext[1], :ext[2]])]

    return tape.record_op(out, pull)


# ---------------------------------------------------------------------------
# Clinical-column batch standardization (not tape-tracked; inputs only)
# ---------------------------------------------------------------------------

class BatchStandardizer:
    """Running-statistics standardizer for a scalar clinical column."""

    def __init__(self, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.running_mean = 0.0
        self.running_var = 1.0

    def train_batch(self, column: np.ndarray) -> np.ndarray:
        column = np.asarray(column, dtype=np.float64)
        if column.size < 2:
            raise DegenerateBatch(f"training batch of size {column.size}")
        mean = column.mean()
        var = column.var()
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        return (column - mean) / np.sqrt(var + self.eps)

    def apply(self, column: np.ndarray) -> np.ndarray:
        column = np.asarray(column, dtype=np.float64)
        return (column - self.running_mean) / np.sqrt(self.running_var + self.eps)

    def state(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_state(self, state: dict):
        self.running_mean = float(state["running_mean"])
        self.running_var = float(state["running_var"])


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    """Moment buffers plus hyperparameters for decoupled weight decay Adam."""

    lr: float = 5e-5
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: AdamWState) -> dict[str, Tensor]:
    """Bias-corrected Adam update plus decoupled decay, in place on params."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        # decoupled decay acts on the incoming weight, before the Adam step
        p.values -= state.lr * state.weight_decay * p.values
        p.values -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Verification oracle
# ---------------------------------------------------------------------------

def finite_difference_check(fn, point: np.ndarray, h: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    fn takes (tape, Tensor) and returns a scalar Tensor.  The relative
    error uses a small absolute floor so near-zero gradients compare
    absolutely.
    """
    point = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = Tensor(point.copy(), requires_grad=True)
    loss = fn(tape, x)
    grad = backward(tape, loss).get(x)
    if grad is None:
        grad = np.zeros_like(point)

    def value_at(vals):
        return float(fn(Tape(), Tensor(vals, requires_grad=True)).values)

    worst = 0.0
    flat = point.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        up = value_at((flat + bump).reshape(point.shape))
        down = value_at((flat - bump).reshape(point.shape))
        fd = (up - down) / (2.0 * h)
        g = grad.reshape(-1)[i]
        err = abs(fd - g) / max(abs(fd), abs(g), 1e-3)
        worst = max(worst, err)
    return worst
