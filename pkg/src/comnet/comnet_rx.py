"""ComNet receiver: LS channel estimate refined by a linear layer, ZF
detection refined by per-group detectors, plus the FC-DNN baseline and the
complexity accounting used to compare them.

Bit order of every detector output: head ``g`` emits 48 values, value ``j``
is bit ``j % 6`` (MSB first, LTE label order) of subcarrier ``8g + j // 6``.
Concatenating heads 0..7 therefore reproduces the transmitted bit order.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .baseline_rx import complexify, ls_estimate, realify, zf_detect
from .ofdm_phy import InputError, NUM_SUBCARRIERS, BITS_PER_SYMBOL, qam_demap_hard
from .tensor_nn import BiLstmStack, DenseLayer, Module, Tensor

NUM_GROUPS = 8
GROUP_SIZE = NUM_SUBCARRIERS // NUM_GROUPS
BITS_PER_GROUP = GROUP_SIZE * BITS_PER_SYMBOL
BILSTM_HIDDEN = (20, 10, 6)
BILSTM_FEATURES = 6
FCDNN_HIDDEN = (500, 250, 120)


def _check_len(name: str, v: np.ndarray, n: int = NUM_SUBCARRIERS) -> None:
    if v.shape[-1] != n:
        raise InputError(f"{name} has length {v.shape[-1]} on its last axis, expected {n}")


def _prefixed(prefix: str, params) -> "OrderedDict[str, Tensor]":
    return OrderedDict((f"{prefix}.{k}", v) for k, v in params.items())


def _grouped(v: np.ndarray) -> np.ndarray:
    """``[B, 64]`` complex -> ``[8, B, 16]`` real, per group ``[Re(8), Im(8)]``."""
    g = v.reshape(v.shape[0], NUM_GROUPS, GROUP_SIZE)
    return realify(g).transpose(1, 0, 2)


def _ungroup_bits(out: np.ndarray) -> np.ndarray:
    """``[8, B, 48]`` -> ``[B, 384]``."""
    return out.transpose(1, 0, 2).reshape(out.shape[1], -1)


def _as_batch(v) -> tuple[np.ndarray, bool]:
    v = np.asarray(v)
    if v.ndim == 1:
        return v[None], True
    return v, False


class CeSubnet(Module):
    """Linear 128 -> 128 refinement of the realified LS estimate."""

    def __init__(self, weights: Optional[np.ndarray] = None):
        self.refine_layer = DenseLayer(2 * NUM_SUBCARRIERS, 2 * NUM_SUBCARRIERS, activation="none", bias=False)
        if weights is not None:
            self.refine_layer.weights.data[...] = weights

    def parameters(self):
        return _prefixed("refine_layer", self.refine_layer.parameters())

    def forward(self, h_ls: np.ndarray, record: bool = True) -> np.ndarray:
        h_ls = np.asarray(h_ls)
        _check_len("h_ls", h_ls)
        return complexify(self.refine_layer.forward(realify(h_ls), record=record))

    def backward(self, grad_real: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the realified output ``[B, 128]``."""
        return self.refine_layer.backward(grad_real)


def ce_forward(ce: CeSubnet, h_ls: np.ndarray) -> np.ndarray:
    return ce.forward(h_ls)


class FcSdSubnet(Module):
    """Eight independent two-layer detectors (``in -> 120 relu -> 48 sigmoid``)."""

    kind = "fc"

    def __init__(self, extended_features: bool = False, hidden: int = 120):
        self.extended_features = extended_features
        self.in_dim = (6 if extended_features else 2) * GROUP_SIZE
        self.hidden = DenseLayer(self.in_dim, hidden, activation="relu", groups=NUM_GROUPS)
        self.output = DenseLayer(hidden, BITS_PER_GROUP, activation="sigmoid", groups=NUM_GROUPS)

    def parameters(self):
        out = _prefixed("hidden", self.hidden.parameters())
        out.update(_prefixed("output", self.output.parameters()))
        return out

    def features(self, x_zf, h_hat, y_data) -> np.ndarray:
        parts = [_grouped(x_zf)]
        if self.extended_features:
            parts += [_grouped(y_data), _grouped(h_hat)]
        return np.concatenate(parts, axis=-1)

    def forward(self, x_zf, h_hat, y_data, record: bool = True) -> np.ndarray:
        for name, v in (("x_zf", x_zf), ("h_hat", h_hat), ("y_data", y_data)):
            _check_len(name, v)
        z = self.hidden.forward(self.features(x_zf, h_hat, y_data), record=record)
        return _ungroup_bits(self.output.forward(z, record=record))

    def backward(self, grad_soft: np.ndarray) -> None:
        g = grad_soft.reshape(grad_soft.shape[0], NUM_GROUPS, BITS_PER_GROUP).transpose(1, 0, 2)
        self.hidden.backward(self.output.backward(g))


class BiLstmSdSubnet(Module):
    """BiLSTM (20/10/6 hidden, 64 steps) detector with eight 96 -> 48 sigmoid heads.

    With ``shared=False`` (default) each head has its own BiLSTM over all 64
    subcarriers, giving eight fully independent detection subnets; with
    ``shared=True`` one BiLSTM feeds all heads.  Head ``g`` always reads the
    outputs at steps ``8g .. 8g+7``.
    """

    kind = "bilstm"

    def __init__(self, shared: bool = False, hidden_sizes=BILSTM_HIDDEN):
        self.shared = shared
        self.lstm = BiLstmStack(BILSTM_FEATURES, hidden_sizes, groups=None if shared else NUM_GROUPS)
        self.step_width = self.lstm.output_size
        self.heads = DenseLayer(GROUP_SIZE * self.step_width, BITS_PER_GROUP, activation="sigmoid",
                                groups=NUM_GROUPS)
        self._batch = None

    def parameters(self):
        out = _prefixed("lstm", self.lstm.parameters())
        out.update(_prefixed("heads", self.heads.parameters()))
        return out

    @staticmethod
    def features(x_zf, h_hat, y_data) -> np.ndarray:
        """Per-subcarrier step features ``[B, 64, 6]``."""
        return np.stack([x_zf.real, x_zf.imag, y_data.real, y_data.imag, h_hat.real, h_hat.imag], axis=-1)

    def _head_inputs(self, seq_out: np.ndarray) -> np.ndarray:
        b = seq_out.shape[-3]
        if self.shared:
            # [B, 64, W] -> [8, B, 8 * W]
            return seq_out.reshape(b, NUM_GROUPS, -1).transpose(1, 0, 2)
        # group g keeps its own steps 8g .. 8g+7
        r = seq_out.reshape(NUM_GROUPS, b, NUM_GROUPS, GROUP_SIZE * self.step_width)
        return r[np.arange(NUM_GROUPS), :, np.arange(NUM_GROUPS)]

    def forward(self, x_zf, h_hat, y_data, record: bool = True) -> np.ndarray:
        for name, v in (("x_zf", x_zf), ("h_hat", h_hat), ("y_data", y_data)):
            _check_len(name, v)
        feats = self.features(x_zf, h_hat, y_data)
        if not self.shared:
            feats = np.broadcast_to(feats, (NUM_GROUPS,) + feats.shape)
        seq_out = self.lstm.forward(feats, record=record)
        self._batch = feats.shape[-3]
        return _ungroup_bits(self.heads.forward(self._head_inputs(seq_out), record=record))

    def backward(self, grad_soft: np.ndarray) -> None:
        b = self._batch
        g = grad_soft.reshape(b, NUM_GROUPS, BITS_PER_GROUP).transpose(1, 0, 2)
        d_heads = self.heads.backward(g)  # [8, B, 8 * W]
        if self.shared:
            d_seq = d_heads.transpose(1, 0, 2).reshape(b, NUM_SUBCARRIERS, self.step_width)
        else:
            d = np.zeros((NUM_GROUPS, b, NUM_GROUPS, GROUP_SIZE * self.step_width))
            d[np.arange(NUM_GROUPS), :, np.arange(NUM_GROUPS)] = d_heads
            d_seq = d.reshape(NUM_GROUPS, b, NUM_SUBCARRIERS, self.step_width)
        self.lstm.backward(d_seq)


def sd_forward_fc(sd: FcSdSubnet, x_zf, h_hat, y_data) -> np.ndarray:
    return _single_or_batch(sd, x_zf, h_hat, y_data)


def sd_forward_bilstm(sd: BiLstmSdSubnet, x_zf, h_hat, y_data) -> np.ndarray:
    return _single_or_batch(sd, x_zf, h_hat, y_data)


def _single_or_batch(sd, x_zf, h_hat, y_data):
    (x_zf, single), (h_hat, _), (y_data, _) = _as_batch(x_zf), _as_batch(h_hat), _as_batch(y_data)
    out = sd.forward(x_zf, h_hat, y_data)
    return out[0] if single else out


def decide_bits(soft_bits) -> np.ndarray:
    """1 where the soft value is strictly above 0.5."""
    return (np.asarray(soft_bits) > 0.5).astype(np.int8)


@dataclass
class ComnetReceiver:
    ce: CeSubnet
    sd: FcSdSubnet | BiLstmSdSubnet
    mode: str = field(init=False)

    def __post_init__(self):
        self.mode = self.sd.kind

    def parameters(self):
        out = _prefixed("ce", self.ce.parameters())
        out.update(_prefixed("sd", self.sd.parameters()))
        return out


def comnet_receive(rx: ComnetReceiver, y_pilot, y_data, x_pilot):
    """Full ComNet pipeline for one frame ``[64]`` or a batch ``[B, 64]``.

    Returns ``(bits, h_hat, diagnostics)``; diagnostics hold ``x_zf``,
    ``zf_flags``, ``soft_bits`` and ``short_path_bits`` (hard-demapped ZF).
    """
    (y_pilot, single), (y_data, _) = _as_batch(y_pilot), _as_batch(y_data)
    _check_len("y_pilot", y_pilot)
    _check_len("y_data", y_data)
    h_hat = rx.ce.forward(ls_estimate(y_pilot, x_pilot), record=False)
    x_zf, flags = zf_detect(y_data, h_hat, return_flags=True)
    soft = rx.sd.forward(x_zf, h_hat, y_data, record=False)
    bits = decide_bits(soft)
    diag = {"x_zf": x_zf, "zf_flags": flags, "soft_bits": soft, "short_path_bits": qam_demap_hard(x_zf)}
    if single:
        bits, h_hat = bits[0], h_hat[0]
        diag = {k: v[0] for k, v in diag.items()}
    return bits, h_hat, diag


class FcDnnReceiver(Module):
    """Data-driven baseline: eight ``256 -> 500 -> 250 -> 120 -> 48`` networks
    reading the realified received pilot and data symbols."""

    mode = "fcdnn"

    def __init__(self, hidden=FCDNN_HIDDEN):
        dims = [4 * NUM_SUBCARRIERS, *hidden]
        self.layers = [DenseLayer(a, b, activation="relu", groups=NUM_GROUPS) for a, b in zip(dims, dims[1:])]
        self.layers.append(DenseLayer(dims[-1], BITS_PER_GROUP, activation="sigmoid", groups=NUM_GROUPS))

    def parameters(self):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            out.update(_prefixed(f"layer{i}", layer.parameters()))
        return out

    def forward(self, y_pilot, y_data, record: bool = True) -> np.ndarray:
        _check_len("y_pilot", y_pilot)
        _check_len("y_data", y_data)
        z = realify(np.concatenate([y_pilot, y_data], axis=-1))
        z = np.broadcast_to(z, (NUM_GROUPS,) + z.shape)
        for layer in self.layers:
            z = layer.forward(z, record=record)
        return _ungroup_bits(z)

    def backward(self, grad_soft: np.ndarray) -> None:
        g = grad_soft.reshape(grad_soft.shape[0], NUM_GROUPS, BITS_PER_GROUP).transpose(1, 0, 2)
        for layer in reversed(self.layers):
            g = layer.backward(g)

    def receive(self, y_pilot, y_data):
        (y_pilot, single), (y_data, _) = _as_batch(y_pilot), _as_batch(y_data)
        soft = self.forward(y_pilot, y_data, record=False)
        bits = decide_bits(soft)
        return (bits[0], soft[0]) if single else (bits, soft)


def build_fcdnn_baseline() -> FcDnnReceiver:
    return FcDnnReceiver()


# ---------------------------------------------------------------- complexity
#
# FLOP convention (one OFDM data symbol, single forward pass):
#   * a multiply-add in a matrix product counts 2 FLOPs
#   * each bias add, activation evaluation and LSTM cell-update multiply/add
#     counts 1 FLOP
#   * a complex division (LS estimate, ZF detection) counts 11 FLOPs
# Memory is 4 bytes per parameter (32-bit storage).

COMPLEX_DIV_FLOPS = 11
BYTES_PER_PARAM = 4


def _dense_flops(layer: DenseLayer) -> dict:
    g = layer.groups or 1
    mm = 2 * layer.in_dim * layer.out_dim * g
    ew = g * layer.out_dim * ((layer.bias is not None) + (layer.activation != "none"))
    return {"matmul": mm, "elementwise": ew}


def _bilstm_flops(stack: BiLstmStack, steps: int) -> dict:
    g = stack.groups or 1
    mm = ew = 0
    for fw, _ in stack.layers:
        h, n_in = fw.hidden_size, fw.input_size
        mm += 2 * 4 * h * (n_in + h)
        # bias 4h, gate activations 4h, c update 3h, tanh(c) h, output h
        ew += 4 * h + 4 * h + 3 * h + h + h
    per = 2 * steps * g  # two directions
    return {"matmul": mm * per, "elementwise": ew * per}


def _sum(*parts: dict) -> dict:
    out = {"matmul": 0, "elementwise": 0}
    for p in parts:
        for k in out:
            out[k] += p.get(k, 0)
    return out


def flops_breakdown(receiver) -> dict:
    if isinstance(receiver, FcDnnReceiver):
        parts = [_dense_flops(layer) for layer in receiver.layers]
    elif isinstance(receiver, ComnetReceiver):
        front = {"elementwise": 2 * NUM_SUBCARRIERS * COMPLEX_DIV_FLOPS}
        parts = [front, _dense_flops(receiver.ce.refine_layer)]
        sd = receiver.sd
        if isinstance(sd, FcSdSubnet):
            parts += [_dense_flops(sd.hidden), _dense_flops(sd.output)]
        else:
            parts += [_bilstm_flops(sd.lstm, NUM_SUBCARRIERS), _dense_flops(sd.heads)]
    elif isinstance(receiver, CeSubnet):
        parts = [_dense_flops(receiver.refine_layer)]
    else:
        raise TypeError(f"no FLOP model for {type(receiver).__name__}")
    out = _sum(*parts)
    out["total"] = out["matmul"] + out["elementwise"]
    return out


def lmmse_mmse_flops(n: int = NUM_SUBCARRIERS) -> int:
    """Per-frame cost when the LMMSE matrix is recomputed for the current
    channel statistics: LU factorisation (n^3/3 complex MACs), n right-hand-side
    solves (n^3), applying W (n^2), LS + MMSE per subcarrier.  One complex MAC
    counts 8 FLOPs."""
    complex_macs = n ** 3 // 3 + n ** 3 + n ** 2
    per_subcarrier = COMPLEX_DIV_FLOPS + 3 * 2 + 11  # LS, |h|^2 + sigma^2, conj(h) y / (.)
    return 8 * complex_macs + n * per_subcarrier


def count_params(receiver) -> int:
    if isinstance(receiver, ComnetReceiver):
        return sum(p.data.size for p in receiver.parameters().values())
    return receiver.num_params()


def count_flops(receiver) -> int:
    return flops_breakdown(receiver)["total"]


def memory_bytes(receiver) -> int:
    return BYTES_PER_PARAM * count_params(receiver)
