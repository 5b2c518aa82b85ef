"""Small numpy neural-network engine with hand-written reverse-mode gradients.

Layers are stateful modules: ``forward`` records what ``backward`` needs and
``backward`` accumulates parameter gradients into ``Tensor.grad`` and returns
the gradient with respect to the layer input.  A backward pass consumes the
recorded forward state, so every backward must follow its own forward.

Any layer may be *grouped*: it then holds ``groups`` independent copies of its
parameters (leading axis) and maps inputs ``[groups, ..., in]``.  This runs
e.g. eight per-subcarrier-group detectors in a single set of array ops.

LSTM gate order is (input, forget, cell candidate, output) everywhere.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
from scipy.special import expit

DTYPE = np.float64
ACTIVATIONS = ("none", "relu", "sigmoid", "tanh")


class DimensionError(ValueError):
    """Shape mismatch between an input and a layer or between two operands."""


class StateError(RuntimeError):
    """Operation called out of order, e.g. backward without a forward."""


@dataclass(eq=False)
class Tensor:
    """Real array plus an optional same-shape gradient buffer."""

    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=DTYPE)
        if self.grad is not None and np.shape(self.grad) != self.data.shape:
            raise DimensionError(f"grad shape {np.shape(self.grad)} != data shape {self.data.shape}")

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        return cls(np.zeros(shape, dtype=DTYPE))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g


# ---------------------------------------------------------------- activations

def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def sigmoid(x) -> np.ndarray:
    return expit(np.asarray(x, dtype=DTYPE))


def tanh(x) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=DTYPE))


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "none":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return expit(z)
    if activation == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {activation!r}")


def activation_grad(y: np.ndarray, activation: str) -> np.ndarray | float:
    """Derivative of the activation expressed through its output ``y``."""
    if activation == "none":
        return 1.0
    if activation == "relu":
        return (y > 0).astype(DTYPE)
    if activation == "sigmoid":
        return y * (1.0 - y)
    if activation == "tanh":
        return 1.0 - y * y
    raise ValueError(f"unknown activation {activation!r}")


# ----------------------------------------------------------------------- loss

def mse_loss(prediction, target) -> float:
    p, t = np.asarray(prediction, dtype=DTYPE), np.asarray(target, dtype=DTYPE)
    if p.shape != t.shape:
        raise DimensionError(f"prediction shape {p.shape} != target shape {t.shape}")
    return float(np.mean((p - t) ** 2))


def mse_loss_grad(prediction, target) -> np.ndarray:
    p, t = np.asarray(prediction, dtype=DTYPE), np.asarray(target, dtype=DTYPE)
    if p.shape != t.shape:
        raise DimensionError(f"prediction shape {p.shape} != target shape {t.shape}")
    return 2.0 * (p - t) / p.size


# --------------------------------------------------------------------- layers

class Module:
    """Base class: named parameters, gradient reset, recorded-state bookkeeping."""

    def parameters(self) -> "OrderedDict[str, Tensor]":
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a recorded forward pass")
        self._cache = None
        return cache


class DenseLayer(Module):
    """``activation(x W^T + b)`` with ``W`` of shape ``[out, in]``."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "none", bias: bool = True,
                 groups: Optional[int] = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        self.groups = groups
        lead = () if groups is None else (groups,)
        self.weights = Tensor(np.zeros(lead + (out_dim, in_dim)))
        self.bias = Tensor(np.zeros(lead + (out_dim,))) if bias else None
        self._cache = None

    def parameters(self):
        out = OrderedDict(weights=self.weights)
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def _check(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"input axis -1 has size {x.shape[-1]}, layer expects in_dim={self.in_dim}")
        if self.groups is not None and (x.ndim < 2 or x.shape[0] != self.groups):
            raise DimensionError(f"input axis 0 has size {x.shape[0] if x.ndim else None}, "
                                 f"layer expects groups={self.groups}")

    def _flat(self, x: np.ndarray) -> np.ndarray:
        if self.groups is None:
            return x.reshape(-1, self.in_dim)
        return x.reshape(self.groups, -1, self.in_dim)

    def forward(self, x, record: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        self._check(x)
        xf = self._flat(x)
        z = xf @ np.swapaxes(self.weights.data, -1, -2)
        if self.bias is not None:
            z += self.bias.data[..., None, :] if self.groups is not None else self.bias.data
        y = activate(z, self.activation)
        self._cache = (x.shape, xf, y) if record else None
        return y.reshape(x.shape[:-1] + (self.out_dim,))

    def backward(self, grad_out) -> np.ndarray:
        in_shape, xf, y = self._take_cache()
        dz = np.asarray(grad_out, dtype=DTYPE).reshape(y.shape) * activation_grad(y, self.activation)
        self.weights.accumulate(np.swapaxes(dz, -1, -2) @ xf)
        if self.bias is not None:
            self.bias.accumulate(dz.sum(axis=-2))
        return (dz @ self.weights.data).reshape(in_shape)


@dataclass(eq=False)
class LstmCell:
    """Parameters of one LSTM cell; a leading ``groups`` axis is allowed."""

    input_weights: Tensor
    recurrent_weights: Tensor
    bias: Tensor

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int, groups: Optional[int] = None) -> "LstmCell":
        lead = () if groups is None else (groups,)
        return cls(Tensor(np.zeros(lead + (4 * hidden_size, input_size))),
                   Tensor(np.zeros(lead + (4 * hidden_size, hidden_size))),
                   Tensor(np.zeros(lead + (4 * hidden_size,))))

    @property
    def hidden_size(self) -> int:
        return self.recurrent_weights.shape[-1]

    @property
    def input_size(self) -> int:
        return self.input_weights.shape[-1]

    def parameters(self):
        return OrderedDict(input_weights=self.input_weights,
                           recurrent_weights=self.recurrent_weights, bias=self.bias)


def _gate_activations(z: np.ndarray, hidden: int) -> np.ndarray:
    a = expit(z)
    a[..., 2 * hidden:3 * hidden] = np.tanh(z[..., 2 * hidden:3 * hidden])
    return a


def lstm_step(cell: LstmCell, x_t, h_prev, c_prev) -> tuple[np.ndarray, np.ndarray]:
    """One ungrouped recurrence step for inputs ``[..., in]``."""
    x_t, h_prev, c_prev = (np.asarray(v, dtype=DTYPE) for v in (x_t, h_prev, c_prev))
    hidden = cell.hidden_size
    if x_t.shape[-1] != cell.input_size:
        raise DimensionError(f"x_t axis -1 has size {x_t.shape[-1]}, cell expects {cell.input_size}")
    if h_prev.shape[-1] != hidden or c_prev.shape[-1] != hidden:
        raise DimensionError(f"state axis -1 must have size {hidden}")
    z = x_t @ cell.input_weights.data.T + h_prev @ cell.recurrent_weights.data.T + cell.bias.data
    a = _gate_activations(z, hidden)
    i, f, g, o = (a[..., k * hidden:(k + 1) * hidden] for k in range(4))
    c_t = f * c_prev + i * g
    return o * np.tanh(c_t), c_t


def _gate_scale(hidden: int) -> np.ndarray:
    # sigmoid(z) = (1 + tanh(z / 2)) / 2, so one tanh evaluates all four gates
    scale = np.full(4 * hidden, 0.5)
    scale[2 * hidden:3 * hidden] = 1.0
    return scale


def _lstm_sequence_forward(wx, wh, b, x):
    """Run ``P`` independent cells over time-major inputs ``x[T, P, B, in]``."""
    steps, p, batch, n_in = x.shape
    hidden = wh.shape[-1]
    scale = _gate_scale(hidden)
    offset = 1.0 - scale  # 0.5 on sigmoid gates, 0 on the candidate
    # [P, T*B, in] @ [P, in, 4H] -> time-major [T, P, B, 4H]; per-step slices stay contiguous
    xp = x.transpose(1, 0, 2, 3).reshape(p, steps * batch, n_in)
    xw = np.matmul(xp, np.swapaxes(wx, 1, 2) * scale) + (b * scale)[:, None, :]
    gates = np.ascontiguousarray(xw.reshape(p, steps, batch, 4 * hidden).transpose(1, 0, 2, 3))
    whT = np.ascontiguousarray(np.swapaxes(wh, 1, 2) * scale)
    hs = np.empty((steps, p, batch, hidden))
    cs = np.empty((steps, p, batch, hidden))
    tcs = np.empty((steps, p, batch, hidden))
    h = np.zeros((p, batch, hidden))
    c = np.zeros((p, batch, hidden))
    for t in range(steps):
        a = gates[t]
        if t:
            a += np.matmul(h, whT)
        np.tanh(a, out=a)
        a *= scale
        a += offset
        c = np.multiply(a[..., hidden:2 * hidden], c, out=cs[t])
        c += a[..., :hidden] * a[..., 2 * hidden:3 * hidden]
        tc = np.tanh(c, out=tcs[t])
        h = np.multiply(a[..., 3 * hidden:], tc, out=hs[t])
    return hs, (x, wx, wh, gates, cs, tcs, hs)


def _lstm_sequence_backward(cache, dhs):
    x, wx, wh, gates, cs, tcs, hs = cache
    steps, p, batch, hidden = hs.shape
    g4 = gates.reshape(steps, p, batch, 4, hidden)
    i, f, g, o = g4[..., 0, :], g4[..., 1, :], g4[..., 2, :], g4[..., 3, :]
    c_prev = np.concatenate([np.zeros((1, p, batch, hidden)), cs[:-1]], axis=0)
    # whole-sequence factors: dz_{i,f,g} = dc * coef_{i,f,g}, dz_o = dh * coef_o
    coef = np.empty((steps, p, batch, 3, hidden))
    coef[..., 0, :] = g * i * (1.0 - i)
    coef[..., 1, :] = c_prev * f * (1.0 - f)
    coef[..., 2, :] = i * (1.0 - g * g)
    coef_o = tcs * o * (1.0 - o)
    dc_dh = o * (1.0 - tcs * tcs)
    f_next = np.ascontiguousarray(f)
    dz_all = np.empty((steps, p, batch, 4, hidden))
    dh = np.empty((p, batch, hidden))
    dc = np.zeros((p, batch, hidden))
    for t in range(steps - 1, -1, -1):
        if t < steps - 1:
            np.add(dhs[t], np.matmul(dz_all[t + 1].reshape(p, batch, 4 * hidden), wh), out=dh)
            dc *= f_next[t + 1]
            dc += dh * dc_dh[t]
        else:
            dh[...] = dhs[t]
            np.multiply(dh, dc_dh[t], out=dc)
        dz = dz_all[t]
        np.multiply(dc[:, :, None, :], coef[t], out=dz[:, :, :3])
        np.multiply(dh, coef_o[t], out=dz[:, :, 3])
    # back to [P, T*B, ...] for the weight gradients
    dzf = dz_all.reshape(steps, p, batch, 4 * hidden).transpose(1, 0, 2, 3).reshape(p, steps * batch, 4 * hidden)
    dzT = np.swapaxes(dzf, 1, 2)
    xp = x.transpose(1, 0, 2, 3).reshape(p, steps * batch, -1)
    dwx = np.matmul(dzT, xp)
    h_prev = np.concatenate([np.zeros((1, p, batch, hidden)), hs[:-1]], axis=0)
    dwh = np.matmul(dzT, h_prev.transpose(1, 0, 2, 3).reshape(p, steps * batch, hidden))
    db = dzf.sum(axis=1)
    dx = np.matmul(dzf, wx).reshape(p, steps, batch, -1).transpose(1, 0, 2, 3)
    return dx, dwx, dwh, db


class BiLstmStack(Module):
    """Stacked bidirectional LSTM.

    Inputs are batch-major ``[B, T, in]`` (``[T, in]`` is accepted as a batch of
    one), or ``[groups, B, T, in]`` for a grouped stack.  Output step ``t``
    concatenates the forward and backward hidden states,
    ``[..., T, 2 * hidden_sizes[-1]]``.
    """

    def __init__(self, input_size: int, hidden_sizes: Iterable[int], groups: Optional[int] = None):
        self.input_size = input_size
        self.hidden_sizes = list(hidden_sizes)
        self.groups = groups
        self.layers: list[tuple[LstmCell, LstmCell]] = []
        in_size = input_size
        for hidden in self.hidden_sizes:
            self.layers.append((LstmCell.zeros(in_size, hidden, groups), LstmCell.zeros(in_size, hidden, groups)))
            in_size = 2 * hidden
        self._cache = None

    @property
    def output_size(self) -> int:
        return 2 * self.hidden_sizes[-1]

    def parameters(self):
        out = OrderedDict()
        for l, (fw, bw) in enumerate(self.layers):
            for direction, cell in (("forward", fw), ("backward", bw)):
                for name, t in cell.parameters().items():
                    out[f"layer{l}.{direction}.{name}"] = t
        return out

    def _stacked(self, fw: LstmCell, bw: LstmCell):
        # [2, (G,) ...] -> [P, ...] with direction-major ordering
        def cat(a, b, trailing):
            s = np.stack([a.data, b.data])
            return s.reshape((-1,) + s.shape[s.ndim - trailing:])
        return (cat(fw.input_weights, bw.input_weights, 2),
                cat(fw.recurrent_weights, bw.recurrent_weights, 2),
                cat(fw.bias, bw.bias, 1))

    def forward(self, sequence, record: bool = True) -> np.ndarray:
        seq = np.asarray(sequence, dtype=DTYPE)
        squeeze = False
        if self.groups is None and seq.ndim == 2:
            seq, squeeze = seq[None], True
        want = 3 if self.groups is None else 4
        if seq.ndim != want:
            raise DimensionError(f"expected a {want}-d input, got shape {seq.shape}")
        if self.groups is not None and seq.shape[0] != self.groups:
            raise DimensionError(f"input axis 0 has size {seq.shape[0]}, stack expects groups={self.groups}")
        if seq.shape[-2] < 1:
            raise DimensionError("empty sequence: axis -2 (time) has size 0")
        if seq.shape[-1] != self.input_size:
            raise DimensionError(f"input axis -1 has size {seq.shape[-1]}, stack expects {self.input_size}")
        g = 1 if self.groups is None else self.groups
        # time-major [T, G, B, F]
        x = seq.reshape(g, *seq.shape[-3:]).transpose(2, 0, 1, 3)
        caches = []
        for fw, bw in self.layers:
            wx, wh, b = self._stacked(fw, bw)
            both = np.concatenate([x, x[::-1]], axis=1)
            hs, cache = _lstm_sequence_forward(wx, wh, b, both)
            caches.append(cache)
            x = np.concatenate([hs[:, :g], hs[::-1, g:]], axis=-1)
        self._cache = (seq.shape, squeeze, caches) if record else None
        out = x.transpose(1, 2, 0, 3)
        if self.groups is None:
            out = out[0]
        return out[0] if squeeze else out

    def backward(self, grad_out) -> np.ndarray:
        in_shape, squeeze, caches = self._take_cache()
        g = 1 if self.groups is None else self.groups
        d = np.asarray(grad_out, dtype=DTYPE)
        if squeeze:
            d = d[None]
        d = d.reshape(g, *d.shape[-3:]).transpose(2, 0, 1, 3)
        for (fw, bw), cache in zip(reversed(self.layers), reversed(caches)):
            hidden = fw.hidden_size
            dhs = np.concatenate([d[..., :hidden], d[::-1, :, :, hidden:]], axis=1)
            dx, dwx, dwh, db = _lstm_sequence_backward(cache, dhs)
            for k, cell in enumerate((fw, bw)):
                sl = slice(k * g, (k + 1) * g)
                cell.input_weights.accumulate(dwx[sl].reshape(cell.input_weights.shape))
                cell.recurrent_weights.accumulate(dwh[sl].reshape(cell.recurrent_weights.shape))
                cell.bias.accumulate(db[sl].reshape(cell.bias.shape))
            d = dx[:, :g] + dx[::-1, g:]
        out = d.transpose(1, 2, 0, 3).reshape(in_shape)
        return out[0] if squeeze else out


def bilstm_forward(stack: BiLstmStack, sequence) -> np.ndarray:
    return stack.forward(sequence)


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              learning_rate: float) -> AdamState:
    """In-place bias-corrected Adam update of ``params``; returns ``state``."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {p.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(p.data))
        v = state.second_moment.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        if learning_rate:
            p.data -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


class Adam:
    """Adam over a named parameter set, reading gradients from ``Tensor.grad``."""

    def __init__(self, params: Mapping[str, Tensor], beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = OrderedDict(params)
        self.state = AdamState(beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self, learning_rate: float) -> None:
        grads = {}
        for name, p in self.params.items():
            if p.grad is None:
                raise StateError(f"parameter {name!r} has no gradient; run backward first")
            grads[name] = p.grad
        adam_step(self.params, grads, self.state, learning_rate)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ----------------------------------------------------------------- checkpoint

def params_to_json(params: Mapping[str, Tensor]) -> dict:
    return {name: {"shape": list(t.shape), "data": t.data.ravel().tolist()} for name, t in params.items()}


def save_checkpoint(params: Mapping[str, Tensor], path) -> None:
    Path(path).write_text(json.dumps(params_to_json(params)))


def load_into(params: Mapping[str, Tensor], blob: Mapping) -> None:
    """Copy checkpoint values into ``params``, validating names and shapes."""
    missing = set(params) - set(blob)
    if missing:
        raise DimensionError(f"checkpoint lacks parameters {sorted(missing)}")
    extra = set(blob) - set(params)
    if extra:
        raise DimensionError(f"checkpoint has unexpected parameters {sorted(extra)}")
    for name, t in params.items():
        shape = tuple(blob[name]["shape"])
        data = np.asarray(blob[name]["data"], dtype=DTYPE)
        if shape != t.shape or data.size != int(np.prod(shape)):
            raise DimensionError(f"parameter {name!r}: checkpoint shape {shape}, architecture {t.shape}")
        t.data[...] = data.reshape(shape)


def load_checkpoint(params: Mapping[str, Tensor], path) -> None:
    load_into(params, json.loads(Path(path).read_text()))
