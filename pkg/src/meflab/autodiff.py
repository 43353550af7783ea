"""Tape-based reverse-mode differentiation over numpy arrays.

Only the primitives needed by the model zoo are provided: dense matmul,
bias add, ReLU, stride-1 2-D convolution (valid/same padding), 2x2 max
pooling, flatten and per-sample softmax cross-entropy.  Every op checks its
output for NaN/Inf so numerical blow-ups surface at the op that produced
them instead of three layers later.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

Backward = Callable[[np.ndarray, tuple], tuple]


@dataclass(frozen=True)
class Record:
    op: str
    inputs: tuple
    output: int
    backward: Backward | None


class Var(NamedTuple):
    tape: "Tape"
    id: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Ordered record of primitive ops.

    Node ids are assigned in creation order, so the record list is already
    topologically sorted: an op can only consume nodes that exist.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.records: list[Record] = []
        self.named: dict[str, Var] = {}
        self.output: Var | None = None

    def leaf(self, value, name: str = "leaf") -> Var:
        value = np.asarray(value)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"{name}: non-finite input")
        return self._push(name, (), value, None)

    def apply(self, op: str, inputs: Sequence[Var], value: np.ndarray, backward: Backward) -> Var:
        if not np.isfinite(value).all():
            raise NonFiniteError(f"{op}: produced non-finite values")
        return self._push(op, tuple(v.id for v in inputs), value, backward)

    def _push(self, op, inputs, value, backward) -> Var:
        nid = len(self.values)
        self.values.append(value)
        self.records.append(Record(op, inputs, nid, backward))
        return Var(self, nid)

    def gradients(self, out: Var, wrt: Sequence[Var], seed: np.ndarray | None = None) -> list[np.ndarray]:
        """Backpropagate from ``out`` and return one gradient per ``wrt`` node.

        ``seed`` defaults to ones, i.e. the gradient of ``out.sum()``.
        Nodes that do not lie on a path to a requested input are skipped.
        """
        wanted = {v.id for v in wrt}
        needed = [False] * len(self.records)
        for rec in self.records:
            needed[rec.output] = rec.output in wanted or any(needed[i] for i in rec.inputs)

        grads: dict[int, np.ndarray] = {
            out.id: np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=out.value.dtype)
        }
        for rec in reversed(self.records[: out.id + 1]):
            g = grads.pop(rec.output, None) if rec.output not in wanted else grads.get(rec.output)
            if g is None or rec.backward is None:
                continue
            needs = tuple(needed[i] for i in rec.inputs)
            if not any(needs):
                continue
            for i, gi in zip(rec.inputs, rec.backward(g, needs)):
                if gi is None:
                    continue
                grads[i] = grads[i] + gi if i in grads else gi
        return [grads.get(v.id, np.zeros_like(v.value)) for v in wrt]


# -- primitives ---------------------------------------------------------------

def matmul(x: Var, w: Var, layer: str = "matmul") -> Var:
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"cannot multiply {xv.shape} by {wv.shape}", layer)

    def backward(g, needs):
        return (g @ wv.T if needs[0] else None, xv.T @ g if needs[1] else None)

    return x.tape.apply("matmul", (x, w), xv @ wv, backward)


def bias_add(x: Var, b: Var, layer: str = "bias") -> Var:
    xv, bv = x.value, b.value
    if bv.ndim != 1 or xv.ndim < 2 or xv.shape[1] != bv.shape[0]:
        raise ShapeError(f"bias {bv.shape} does not match activations {xv.shape}", layer)
    expand = (None, slice(None)) + (None,) * (xv.ndim - 2)
    sum_axes = (0,) + tuple(range(2, xv.ndim))

    def backward(g, needs):
        return (g if needs[0] else None, g.sum(axis=sum_axes) if needs[1] else None)

    return x.tape.apply("bias_add", (x, b), xv + bv[expand], backward)


def relu(x: Var) -> Var:
    xv = x.value
    mask = xv > 0  # subgradient 0 at the kink

    def backward(g, needs):
        return (g * mask,)

    return x.tape.apply("relu", (x,), np.where(mask, xv, 0).astype(xv.dtype), backward)


def flatten(x: Var) -> Var:
    shape = x.value.shape

    def backward(g, needs):
        return (g.reshape(shape),)

    return x.tape.apply("flatten", (x,), x.value.reshape(shape[0], -1), backward)


def _conv_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Var, w: Var, padding: str = "valid", layer: str = "conv2d") -> Var:
    """Stride-1 cross-correlation; ``w`` is (out_channels, in_channels, kh, kw)."""
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"input {xv.shape} incompatible with kernel {wv.shape}", layer)
    kh, kw = wv.shape[2:]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("'same' padding needs odd kernel sizes", layer)
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ShapeError(f"unknown padding {padding!r}", layer)
    if xv.shape[2] + 2 * ph < kh or xv.shape[3] + 2 * pw < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {xv.shape[2:]}", layer)
    xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xv

    def backward(g, needs):
        gx = gw = None
        if needs[0]:
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            full = _conv_valid(gp, wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = full[:, :, ph: full.shape[2] - ph, pw: full.shape[3] - pw]
        if needs[1]:
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw

    return x.tape.apply("conv2d", (x, w), _conv_valid(xp, wv), backward)


def maxpool2(x: Var, layer: str = "maxpool") -> Var:
    xv = x.value
    if xv.ndim != 4 or xv.shape[2] % 2 or xv.shape[3] % 2:
        raise ShapeError(f"2x2 pooling needs even spatial dims, got {xv.shape}", layer)
    b, c, h, w = xv.shape
    blocks = xv.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)  # first maximum wins on ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g, needs):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return x.tape.apply("maxpool2", (x,), out, backward)


def softmax_cross_entropy(logits: Var, y: np.ndarray) -> Var:
    """Per-sample cross-entropy, shape (B,)."""
    z = logits.value
    y = np.asarray(y)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeError(f"logits {z.shape} vs labels {y.shape}", "softmax_cross_entropy")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ShapeError(f"labels outside [0, {z.shape[1]})", "softmax_cross_entropy")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(z.shape[0])
    loss = -logp[rows, y]

    def backward(g, needs):
        d = np.exp(logp)
        d[rows, y] -= 1
        return (d * g[:, None],)

    return logits.tape.apply("softmax_cross_entropy", (logits,), loss, backward)


# -- model-level entry points ---------------------------------------------------

def forward_loss(model, x, y):
    """Record the forward pass of ``model`` and return ``(loss, tape)``.

    ``loss`` is the per-sample cross-entropy, shape (B,).  The tape keeps the
    input under ``tape.named["x"]`` and each parameter under its own name.
    """
    tape = Tape()
    xv = np.asarray(x, dtype=model.dtype)
    x_var = tape.leaf(xv, "x")
    tape.named["x"] = x_var
    params = {}
    for name, value in model.params.items():
        params[name] = tape.named[name] = tape.leaf(value, name)
    out = softmax_cross_entropy(model.forward(x_var, params), y)
    tape.output = out
    return out.value, tape


def loss_and_grad_input(model, x, y):
    loss, tape = forward_loss(model, x, y)
    (g,) = tape.gradients(tape.output, [tape.named["x"]])
    return loss, g


def grad_input(model, x, y) -> np.ndarray:
    """Gradient of the summed per-sample loss with respect to the input batch."""
    return loss_and_grad_input(model, x, y)[1]


def grad_params(model, x, y) -> dict[str, np.ndarray]:
    """Gradient of the summed loss for every non-frozen parameter."""
    _, tape = forward_loss(model, x, y)
    names = [n for n in model.params if n not in model.frozen]
    grads = tape.gradients(tape.output, [tape.named[n] for n in names])
    return dict(zip(names, grads))


# -- gradient checking ----------------------------------------------------------

def activation_pattern(tape: Tape) -> bytes:
    """Digest of every ReLU sign and max-pool winner recorded on ``tape``.

    Two inputs with equal patterns lie in the same linear piece of the
    network, so central differences between them are exact up to rounding.
    """
    h = hashlib.sha256()
    for rec in tape.records:
        if rec.op == "relu":
            h.update(np.packbits(tape.values[rec.inputs[0]] > 0).tobytes())
        elif rec.op == "maxpool2":
            xv = tape.values[rec.inputs[0]]
            b, c, hh, w = xv.shape
            blocks = xv.reshape(b, c, hh // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hh // 2, w // 2, 4)
            h.update(blocks.argmax(axis=-1).astype(np.uint8).tobytes())
    return h.digest()


def finite_diff_check(f, x, h: float = 1e-3, samples: int = 32, rng=None) -> float:
    """Compare an analytic gradient against central differences.

    ``f(x)`` must return ``(value, gradient)``.  Returns the largest relative
    error ``|analytic - numeric| / max(|analytic|, 1e-8)`` over ``samples``
    randomly chosen coordinates (all of them if fewer exist).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(rng)
    x = np.array(x, dtype=np.float64)
    value, grad = f(x)
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if not np.isfinite(value) or not np.isfinite(grad).all():
        raise NonFiniteError("f is not finite at x")
    flat = x.reshape(-1)
    idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
    worst = 0.0
    for i in idx:
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = float(f(xp.reshape(x.shape))[0]), float(f(xm.reshape(x.shape))[0])
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite near coordinate {i}")
        numeric = (fp - fm) / (2 * h)
        err = abs(grad[i] - numeric) / max(abs(grad[i]), 1e-8)
        worst = max(worst, err)
    return worst
