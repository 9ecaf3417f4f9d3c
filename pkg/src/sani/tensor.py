"""float64 tensors with tape-based reverse-mode differentiation.

Only the operations the tiny transformer needs: matmul on rank-matched
operands, elementwise add/mul, row bias add, GELU, row softmax, layer
norm, embedding gather, masked cross-entropy, and shape plumbing
(reshape / swapaxes / position slice).  No general broadcasting.

A Tape records backward closures during the forward pass; backward()
replays them in reverse and returns one gradient per named parameter.
When no tape is active every op runs as plain numpy, which is the
evaluation fast path (same code, no recording overhead).

Everything is float64 so analytic gradients can be checked against
central finite differences at tight tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteValue, NotScalarLoss, ShapeMismatch

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """Dense float64 array plus a gradient slot filled by backward()."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


# Parameter-name -> gradient tensor, one entry per model parameter.
GradientSet = dict


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Use as a context manager; ops executed inside record themselves.
    Training is single-writer, so a plain module-level stack suffices;
    evaluation threads simply run with no tape active.
    """

    def __init__(self):
        self.ops: list = []
        self._touched: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def _record(back, *touched: Tensor):
    if _TAPES:
        tape = _TAPES[-1]
        tape.ops.append(back)
        tape._touched.extend(touched)


def _acc(t: Tensor, g: np.ndarray):
    t.grad = g if t.grad is None else t.grad + g


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.ndim != B.ndim or A.ndim not in (2, 3):
        raise ShapeMismatch(f"matmul rank mismatch: {A.shape} @ {B.shape}")
    if A.shape[-1] != B.shape[-2] or (A.ndim == 3 and A.shape[0] != B.shape[0]):
        raise ShapeMismatch(f"matmul shape mismatch: {A.shape} @ {B.shape}")
    out = Tensor(A @ B)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(a, g @ _swap_last(B))
        _acc(b, _swap_last(A) @ g)

    _record(back, a, b, out)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.shape == B.shape:
        mode = "same"
    elif B.ndim == 1 and A.shape[-1] == B.shape[0]:
        mode = "bias"
    elif B.shape == A.shape[1:]:
        mode = "rows"  # shared rows added across the leading axis
    else:
        raise ShapeMismatch(f"add shape mismatch: {A.shape} + {B.shape}")
    out = Tensor(A + B)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(a, g)
        if mode == "same":
            _acc(b, g)
        elif mode == "bias":
            _acc(b, g.reshape(-1, B.shape[0]).sum(axis=0))
        else:
            _acc(b, g.sum(axis=0))

    _record(back, a, b, out)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.shape != B.shape:
        raise ShapeMismatch(f"mul shape mismatch: {A.shape} * {B.shape}")
    out = Tensor(A * B)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(a, g * B)
        _acc(b, g * A)

    _record(back, a, b, out)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(a, g * s)

    _record(back, a, out)
    return out


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable constant (e.g. an attention bias mask)."""
    out_data = a.data + c
    if out_data.shape != a.data.shape:
        raise ShapeMismatch(f"add_const must not broadcast output: {a.data.shape} + {c.shape}")
    out = Tensor(out_data)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(a, g)

    _record(back, a, out)
    return out


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    X = x.data
    x2 = X * X
    t = np.tanh(_GELU_C * (X + _GELU_A * (x2 * X)))
    out = Tensor(0.5 * X * (1.0 + t))

    def back():
        g = out.grad
        if g is None:
            return
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        d = 0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du
        _acc(x, g * d)

    _record(back, x, out)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    X = x.data
    m = X.max(axis=-1, keepdims=True)
    ex = np.exp(X - m)
    s = ex / ex.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def back():
        g = out.grad
        if g is None:
            return
        dot = (g * s).sum(axis=-1, keepdims=True)
        _acc(x, s * (g - dot))

    _record(back, x, out)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then gain*x+bias.

    eps is tiny because inputs are float64 and rows at this scale never
    have vanishing variance; this keeps the normalized variance within
    1e-8 of 1.
    """
    X = x.data
    d = X.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeMismatch("layer_norm gain/bias must match last axis")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(bias, g.reshape(-1, d).sum(axis=0))
        _acc(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        dxhat = g * gain.data
        term1 = dxhat.mean(axis=-1, keepdims=True)
        term2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _acc(x, inv * (dxhat - term1 - xhat * term2))

    _record(back, x, gain, bias, out)
    return out


def embed(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def back():
        g = out.grad
        if g is None:
            return
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _acc(table, buf)

    _record(back, table, out)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_id.

    logits is [N, vocab], targets is [N] ints.  If every target is
    ignored the loss is exactly 0 and contributes no gradient anywhere.
    """
    X = logits.data
    t = np.asarray(targets)
    if X.ndim != 2 or t.shape != (X.shape[0],):
        raise ShapeMismatch(f"cross_entropy expects [N,V] logits, [N] targets: {X.shape} vs {t.shape}")
    valid = t != ignore_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(0.0)

    m = X.max(axis=1, keepdims=True)
    p = np.exp(X - m)
    z = p.sum(axis=1, keepdims=True)
    p /= z
    lse = (m + np.log(z))[:, 0]
    nll = lse[valid] - X[valid, t[valid]]
    loss_val = nll.sum() / n_valid
    if not np.isfinite(loss_val):
        raise NonFiniteValue("cross_entropy produced a non-finite loss")
    out = Tensor(loss_val)

    def back():
        g = out.grad
        if g is None:
            return
        gl = np.zeros_like(X)
        gl[valid] = p[valid]
        gl[valid, t[valid]] -= 1.0
        gl *= float(g) / n_valid
        _acc(logits, gl)

    _record(back, logits, out)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def back():
        g = out.grad
        if g is None:
            return
        _acc(x, g.reshape(x.data.shape))

    _record(back, x, out)
    return out


def swap_axes(x: Tensor, a1: int, a2: int) -> Tensor:
    out = Tensor(np.swapaxes(x.data, a1, a2))

    def back():
        g = out.grad
        if g is None:
            return
        _acc(x, np.swapaxes(g, a1, a2))

    _record(back, x, out)
    return out


def first_position(x: Tensor) -> Tensor:
    """Slice [B, T, D] -> [B, D] at position 0 (classifier pooling)."""
    if x.ndim != 3:
        raise ShapeMismatch("first_position expects a [B,T,D] tensor")
    out = Tensor(x.data[:, 0, :])

    def back():
        g = out.grad
        if g is None:
            return
        buf = np.zeros_like(x.data)
        buf[:, 0, :] = g
        _acc(x, buf)

    _record(back, x, out)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def back():
        g = out.grad
        if g is None:
            return
        _acc(x, np.full_like(x.data, float(g)))

    _record(back, x, out)
    return out


def backward(tape: Tape, loss: Tensor, params: dict[str, Tensor] | None = None) -> GradientSet:
    """Reverse the tape from a scalar loss.

    Returns a GradientSet for `params` (zeros for parameters the loss
    never reached).  With params=None, returns gradients for every
    named tensor touched by the tape.
    """
    if loss.data.ndim != 0:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
    for t in tape._touched:
        t.grad = None
    loss.grad = np.ones(())
    for back in reversed(tape.ops):
        back()
    grads: GradientSet = {}
    if params is not None:
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            grads[name] = Tensor(g, name=name)
    else:
        for t in tape._touched:
            if t.name is not None and t.grad is not None and t.name not in grads:
                grads[t.name] = Tensor(t.grad, name=t.name)
    return grads


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: GradientSet,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update over all parameters."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        gd = g.data if isinstance(g, Tensor) else np.asarray(g)
        if gd.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape {gd.shape} != param shape {p.data.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * gd
        v *= beta2
        v += (1.0 - beta2) * (gd * gd)
        denom = np.sqrt(v)
        denom *= 1.0 / math.sqrt(c2)
        denom += eps
        upd = m / denom
        upd *= lr / c1
        p.data -= upd
