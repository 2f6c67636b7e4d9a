"""A small reverse-mode autodiff engine over numpy arrays.

Operations executed inside an active :class:`Tape` that touch a tensor with
``requires_grad`` are recorded together with a closure computing the
vector-Jacobian product.  ``Tape.backward`` walks the record in exact reverse
order and *adds* the resulting gradients into ``Tensor.grad`` (call
``zero_grad`` between steps).  Outside a tape nothing is recorded, which is
how inference runs.

Only what the models in this package need is implemented; broadcasting is
limited to the numpy rules and reduced on the way back.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import DataError, ShapeError

_ACTIVE: list["Tape"] = []


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run inside the ``with`` block are
    recorded.  A tape belongs to one thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate ``d loss / d t`` into ``t.grad`` for every recorded tensor."""
        if grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss or an explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        pending: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, np.asarray(grad, dtype=loss.dtype))}
        for node in reversed(self.nodes):
            entry = pending.pop(id(node.out), None)
            if entry is None:
                continue
            g = entry[1]
            _accumulate(node.out, g)
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = (parent, pending[key][1] + pg)
                else:
                    pending[key] = (parent, pg)
        for tensor, g in pending.values():
            _accumulate(tensor, g)


def _accumulate(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _cast_pair(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.dtype != b.dtype:
        # keep constants from silently promoting float32 activations
        if not b.requires_grad and b.size == 1:
            b = Tensor(b.data.astype(a.dtype))
        elif not a.requires_grad and a.size == 1:
            a = Tensor(a.data.astype(b.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _cast_pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _cast_pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _cast_pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _cast_pair(a, b)
    ad, bd = a.data, b.data
    return _make(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,))


# ---------------------------------------------------------------- shape and reductions


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with (possibly repeated) integer indices."""
    indices = np.asarray(indices)
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(g, axis, 0) if indices.ndim == 1 else g)
        return (out,)

    if axis != 0 and indices.ndim != 1:
        raise ShapeError("take supports multi-dimensional indices only along axis 0")
    return _make(np.take(x.data, indices, axis=axis), (x,), back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), np.asarray(1.0 / n, dtype=x.dtype))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape ``(..., n, k)`` and ``b`` of shape ``(k, m)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape ``(in, out)``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def bdot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis with broadcasting of leading axes."""
    ad, bd = a.data, b.data
    return _make(
        np.sum(ad * bd, axis=-1),
        (a, b),
        lambda g: (_unbroadcast(g[..., None] * bd, ad.shape), _unbroadcast(g[..., None] * ad, bd.shape)),
    )


# ---------------------------------------------------------------- softmax family and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax over the last axis."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    z = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    n = picked.size
    loss = -np.sum(picked) / n

    def back(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1, axis=-1)
        return (g * p / n,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def mse(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    return tmean(square(sub(pred, target)))


# ---------------------------------------------------------------- layers


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid (unpadded) 1-D convolution.

    ``x``: ``(B, C_in, L)``, ``weight``: ``(C_out, C_in, K)``; output length
    ``(L - K) // stride + 1``.
    """
    B, cin, L = x.shape
    cout, cin_w, K = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, weight {weight.shape}")
    if L < K:
        raise ShapeError(f"conv1d input length {L} shorter than kernel {K}")
    lout = (L - K) // stride + 1
    cols = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=2)[:, :, : (lout - 1) * stride + 1 : stride]
    cols = cols.transpose(0, 2, 1, 3).reshape(B * lout, cin * K)  # (B*lout, cin*K)
    wmat = weight.data.reshape(cout, cin * K)
    y = (cols @ wmat.T).reshape(B, lout, cout)
    if bias is not None:
        y = y + bias.data
    out = np.ascontiguousarray(y.transpose(0, 2, 1))
    xdtype = x.dtype

    def back(g):
        gy = g.transpose(0, 2, 1).reshape(B * lout, cout)
        gw = (gy.T @ cols).reshape(cout, cin, K)
        gcols = (gy @ wmat).reshape(B, lout, cin, K)
        gx = np.zeros((B, cin, L), dtype=xdtype)
        for k in range(K):
            gx[:, :, k : k + (lout - 1) * stride + 1 : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        gb = gy.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back)


def conv1d_output_length(length: int, kernels: Sequence[int], strides: Sequence[int]) -> int:
    for k, s in zip(kernels, strides):
        length = (length - k) // s + 1
    return length


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over axes (0, 2) of a ``(B, C, L)`` input.

    In training mode the running statistics are updated in place (unbiased
    variance, exponential ``momentum``); in eval mode the op is the affine map
    defined by the running statistics.
    """
    xd = x.data
    g_, b_ = gamma.data[None, :, None], beta.data[None, :, None]
    if not training:
        scale = g_ / np.sqrt(running_var[None, :, None] + eps)
        shift = b_ - running_mean[None, :, None] * scale
        xhat = (xd - running_mean[None, :, None]) / np.sqrt(running_var[None, :, None] + eps)

        def back_eval(g):
            return g * scale, np.sum(g * xhat, axis=(0, 2)), np.sum(g, axis=(0, 2))

        return _make((xd * scale + shift).astype(xd.dtype), (x, gamma, beta), back_eval)

    n = xd.shape[0] * xd.shape[2]
    mu = xd.mean(axis=(0, 2), keepdims=True)
    var = xd.var(axis=(0, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    running_mean *= 1 - momentum
    running_mean += momentum * mu.ravel()
    running_var *= 1 - momentum
    running_var += momentum * var.ravel() * (n / max(n - 1, 1))

    def back(g):
        gxhat = g * g_
        gx = inv / n * (n * gxhat - gxhat.sum(axis=(0, 2), keepdims=True) - xhat * np.sum(gxhat * xhat, axis=(0, 2), keepdims=True))
        return gx, np.sum(g * xhat, axis=(0, 2)), np.sum(g, axis=(0, 2))

    return _make((xhat * g_ + b_).astype(xd.dtype), (x, gamma, beta), back)


def dropout(x: Tensor, rate: float, seed: int | None, training: bool = True) -> Tensor:
    """Inverted dropout with an explicit seed; identity when not training."""
    if not training or rate == 0.0:
        return x
    if seed is None:
        raise DataError("dropout in training mode needs an explicit seed")
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def straight_through(z: Tensor, quantized: np.ndarray) -> Tensor:
    """Forward ``quantized``, backward identity onto ``z``."""
    quantized = np.asarray(quantized, dtype=z.dtype)
    if quantized.shape != z.shape:
        raise ShapeError(f"quantized {quantized.shape} does not match input {z.shape}")
    return _make(quantized.copy(), (z,), lambda g: (g,))


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


def gru_layer(x: Tensor, h0: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU layer unrolled over time.

    ``x``: ``(B, T, D)``, ``h0``: ``(B, H)``, ``w_ih``: ``(D, 3H)``,
    ``w_hh``: ``(H, 3H)``; gate blocks ordered (reset, update, candidate)::

        r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        u = sigmoid(x W_iu + b_iu + h W_hu + b_hu)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - u) * n + u * h

    Returns the hidden sequence ``(B, T, H)``.
    """
    B, T, D = x.shape
    H = h0.shape[-1]
    if w_ih.shape != (D, 3 * H) or w_hh.shape != (H, 3 * H) or h0.shape != (B, H):
        raise ShapeError(
            f"GRU shape mismatch: x {x.shape}, h0 {h0.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}"
        )
    xd, wih, whh, bhh = x.data, w_ih.data, w_hh.data, b_hh.data
    gx = xd @ wih + b_ih.data  # (B, T, 3H)
    hs = np.empty((B, T + 1, H), dtype=xd.dtype)
    hs[:, 0] = h0.data
    r_all = np.empty((B, T, H), dtype=xd.dtype)
    u_all = np.empty_like(r_all)
    n_all = np.empty_like(r_all)
    ghn_all = np.empty_like(r_all)
    for t in range(T):
        h = hs[:, t]
        gh = h @ whh + bhh
        r = expit(gx[:, t, :H] + gh[:, :H])
        u = expit(gx[:, t, H : 2 * H] + gh[:, H : 2 * H])
        ghn = gh[:, 2 * H :]
        n = np.tanh(gx[:, t, 2 * H :] + r * ghn)
        hs[:, t + 1] = (1 - u) * n + u * h
        r_all[:, t], u_all[:, t], n_all[:, t], ghn_all[:, t] = r, u, n, ghn
    out = hs[:, 1:].copy()

    def back(g):
        dgx = np.empty((B, T, 3 * H), dtype=xd.dtype)
        dgh = np.empty((B, T, 3 * H), dtype=xd.dtype)
        dh_next = np.zeros((B, H), dtype=xd.dtype)
        for t in range(T - 1, -1, -1):
            dh = g[:, t] + dh_next
            r, u, n, ghn, h = r_all[:, t], u_all[:, t], n_all[:, t], ghn_all[:, t], hs[:, t]
            dn = dh * (1 - u) * (1 - n * n)
            du = dh * (h - n) * u * (1 - u)
            dr = dn * ghn * r * (1 - r)
            dgx[:, t, :H], dgx[:, t, H : 2 * H], dgx[:, t, 2 * H :] = dr, du, dn
            dgh[:, t, :H], dgh[:, t, H : 2 * H], dgh[:, t, 2 * H :] = dr, du, dn * r
            dh_next = dh * u + dgh[:, t] @ whh.T
        dx = dgx @ wih.T
        dwih = xd.reshape(-1, D).T @ dgx.reshape(-1, 3 * H)
        dwhh = hs[:, :-1].reshape(-1, H).T @ dgh.reshape(-1, 3 * H)
        return dx, dh_next, dwih, dwhh, dgx.sum(axis=(0, 1)), dgh.sum(axis=(0, 1))

    return _make(out, (x, h0, w_ih, w_hh, b_ih, b_hh), back)


# ---------------------------------------------------------------- gradient checking


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    kink_nudge: float | None = 1e-3,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps tensors to a scalar tensor and must be deterministic.  Inputs
    are promoted to float64; entries with magnitude below ``kink_nudge`` are
    moved to ``+-kink_nudge`` first so ReLU-style kinks at zero are not
    straddled by the finite difference.  The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    if kink_nudge is not None:
        for a in arrays:
            small = np.abs(a) < kink_nudge
            a[small] = np.where(a[small] < 0, -kink_nudge, kink_nudge)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*tensors)
    tape.backward(out)
    worst = 0.0
    for t, a in zip(tensors, arrays):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*[Tensor(x) for x in arrays]).data)
            flat[i] = orig - h
            fm = float(f(*[Tensor(x) for x in arrays]).data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
