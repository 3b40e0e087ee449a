"""Minimal reverse-mode autodiff on float64 numpy arrays.

Forward ops run eagerly. When a :class:`Tape` is active (``with Tape() as
tape:``) every op whose inputs require gradients is appended to the tape, and
:func:`backward` replays the tape in reverse. Outside a tape the same ops are
plain numpy computations, which is what inference paths use.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from contextvars import ContextVar
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("msdet_active_tape", default=None)

CHECKPOINT_FORMAT = "msdet-ckpt-v1"


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or gradient becomes non-finite."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("elementwise tensor products are not supported; use scale()")
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))


class Tape:
    """Ordered record of differentiable operations.

    Each record is ``(output, inputs, backward_fn)`` where ``backward_fn`` maps
    the upstream gradient of ``output`` to a tuple of gradients, one per input
    (``None`` for inputs that do not need one).
    """

    def __init__(self):
        self.records = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs, backward_fn):
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((out, inputs, backward_fn))
    return out


def backward(tape, loss):
    """Populate ``.grad`` on every grad-requiring leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so callers zero them
    first (see :meth:`ParamStore.zero_grad`). Returns the loss value.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for out, inputs, _ in tape.records:
        produced.add(id(out))
    for out, inputs, backward_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = backward_fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    if id(loss) in grads and not tape.records and loss.requires_grad:
        loss.grad = grads[id(loss)]
    return loss.item()


# ---------------------------------------------------------------- ops


def linear(x, W, b):
    """``y = x @ W + b`` for ``x[n, d_in]``, ``W[d_in, d_out]``, ``b[d_out]``."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError(
            f"linear expects x[n,d_in], W[d_in,d_out], b[d_out]; got {x.shape}, {W.shape}, {b.shape}"
        )
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(
            f"linear shape mismatch: x{x.shape} @ W{W.shape} + b{b.shape}"
        )
    xd, Wd = x.data, W.data

    def bw(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return _record(xd @ Wd + b.data, (x, W, b), bw)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), bw)


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus_np(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(x):
    x = _as_tensor(x)
    p = _sigmoid_np(x.data)

    def bw(g):
        return (g * p * (1.0 - p),)

    return _record(p, (x,), bw)


def softplus(x):
    """``log(1 + exp(x))`` without overflow; equals ``-log(sigmoid(-x))``."""
    x = _as_tensor(x)
    xd = x.data

    def bw(g):
        return (g * _sigmoid_np(xd),)

    return _record(_softplus_np(xd), (x,), bw)


def _check_nonempty(scores, op):
    if scores.data.ndim == 0 or scores.shape[0] == 0:
        raise ValueError(f"{op} needs at least one score")


def exp_sum_log(scores):
    """Smooth max ``log(sum(exp(s)))`` over axis 0.

    A vector ``[m]`` reduces to a scalar, a matrix ``[m, C]`` to ``[C]``.
    """
    scores = _as_tensor(scores)
    _check_nonempty(scores, "exp_sum_log")
    s = scores.data
    top = s.max(axis=0)
    e = np.exp(s - top)
    total = e.sum(axis=0)
    out = top + np.log(total)
    weights = e / total

    def bw(g):
        return (weights * g,)

    return _record(out, (scores,), bw)


def max_agg(scores):
    """Max over axis 0; the subgradient goes to the first maximal index."""
    scores = _as_tensor(scores)
    _check_nonempty(scores, "max_agg")
    s = scores.data
    idx = np.argmax(s, axis=0)
    if s.ndim == 1:
        out = s[idx]
    else:
        out = s[idx, np.arange(s.shape[1])]

    def bw(g):
        full = np.zeros_like(s)
        if s.ndim == 1:
            full[idx] = g
        else:
            full[idx, np.arange(s.shape[1])] = g
        return (full,)

    return _record(out, (scores,), bw)


def binary_logistic_loss(logits, labels):
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    logits = _as_tensor(logits)
    z = logits.data.reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if z.size == 0:
        raise ValueError("binary_logistic_loss needs at least one sample")
    if y.shape != z.shape:
        raise ValueError(f"labels shape {y.shape} does not match logits {z.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    n = z.size
    value = np.mean(_softplus_np(z) - y * z)
    shape = logits.shape

    def bw(g):
        return (((_sigmoid_np(z) - y) * (g / n)).reshape(shape),)

    return _record(np.array(value), (logits,), bw)


def softmax_cross_entropy(logits, targets):
    """Mean multinomial cross-entropy; ``targets`` are integer class ids."""
    logits = _as_tensor(logits)
    z = logits.data
    t = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise ValueError(f"softmax_cross_entropy: logits {z.shape} vs targets {t.shape}")
    if z.shape[0] == 0:
        raise ValueError("softmax_cross_entropy needs at least one sample")
    n = z.shape[0]
    top = z.max(axis=1, keepdims=True)
    e = np.exp(z - top)
    denom = e.sum(axis=1, keepdims=True)
    logp = z - top - np.log(denom)
    rows = np.arange(n)
    value = -np.mean(logp[rows, t])
    prob = e / denom

    def bw(g):
        d = prob.copy()
        d[rows, t] -= 1.0
        return (d * (g / n),)

    return _record(np.array(value), (logits,), bw)


def grad_reverse(x, lam):
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ValueError(f"gradient reversal weight must be >= 0, got {lam}")
    x = _as_tensor(x)
    factor = -float(lam)

    def bw(g):
        return (g * factor,)

    return _record(x.data.copy(), (x,), bw)


def take_rows(x, index):
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(x.data[index], (x,), bw)


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def bw(g):
        return g, g

    return _record(a.data + b.data, (a, b), bw)


def scale(x, c):
    x = _as_tensor(x)

    def bw(g):
        return (g * c,)

    return _record(x.data * c, (x,), bw)


def tsum(x):
    x = _as_tensor(x)
    shape = x.shape

    def bw(g):
        return (np.full(shape, float(np.asarray(g).reshape(-1)[0])),)

    return _record(np.array(x.data.sum()), (x,), bw)


def mean(x):
    return scale(tsum(x), 1.0 / max(_as_tensor(x).size, 1))


def weighted_sum(x, weights):
    """``sum(weights * x)`` with constant ``weights`` of the same shape."""
    x = _as_tensor(x)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ValueError(f"weights shape {w.shape} does not match {x.shape}")

    def bw(g):
        return (w * float(np.asarray(g).reshape(-1)[0]),)

    return _record(np.array(np.sum(w * x.data)), (x,), bw)


def sum_squares(x):
    x = _as_tensor(x)
    xd = x.data

    def bw(g):
        return (2.0 * xd * float(np.asarray(g).reshape(-1)[0]),)

    return _record(np.array(np.sum(xd * xd)), (x,), bw)


# ---------------------------------------------------------------- params


class ParamStore:
    """Ordered named parameters plus their SGD momentum buffers."""

    def __init__(self, params=None):
        self._params = OrderedDict()
        self._momentum = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        self._momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def momentum(self, name):
        return self._momentum[name]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def grads(self):
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self._params.items()}

    def sq_norm(self):
        return float(sum(np.sum(t.data * t.data) for t in self._params.values()))

    def copy(self):
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
            out._momentum[name] = self._momentum[name].copy()
        return out

    def subset(self, prefix):
        """Live view of the parameters whose names start with ``prefix``."""
        out = ParamStore()
        for name, t in self._params.items():
            if name.startswith(prefix):
                out._params[name] = t
                out._momentum[name] = self._momentum[name]
        return out

    def update_from(self, other, names=None):
        for name in names if names is not None else other.names():
            self._params[name].data = other[name].data.copy()

    def equal(self, other):
        if self.names() != other.names():
            return False
        return all(
            self[n].data.shape == other[n].data.shape
            and self[n].data.tobytes() == other[n].data.tobytes()
            for n in self.names()
        )


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(params, grads, cfg, lr=None):
    """One SGD update with momentum; weight decay is added to the gradient.

    ``v <- momentum * v + g + weight_decay * w``; ``w <- w - lr * v``.
    ``grads`` maps names to arrays; ``None`` reads each parameter's ``.grad``.
    """
    lr = cfg.learning_rate if lr is None else lr
    if grads is None:
        grads = params.grads()
    for name in params.names():
        if not np.all(np.isfinite(grads[name])):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    for name, t in params.items():
        v = params.momentum(name)
        v *= cfg.momentum
        v += grads[name]
        if cfg.weight_decay:
            v += cfg.weight_decay * t.data
        t.data -= lr * v
    return params


def uniform_init(rng, fan_in, fan_out):
    """Symmetric uniform init scaled by fan-in (He-uniform bound)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params, **meta):
    """Write a one-line JSON header followed by a little-endian float64 blob."""
    header = dict(meta)
    header["format"] = CHECKPOINT_FORMAT
    header["dtype"] = "<f8"
    header["params"] = [{"name": n, "shape": list(t.shape)} for n, t in params.items()]
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    blob = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in params.items())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8") + b"\n")
        fh.write(blob)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(ParamStore, header)``."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    blob = raw[nl + 1:]
    store = ParamStore()
    offset = 0
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise ValueError(f"{path}: blob truncated at parameter {spec['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        store.add(spec["name"], arr.astype(np.float64))
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after parameters")
    return store, header
