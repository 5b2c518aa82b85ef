"""Training data generation and the two-stage (CE first, then SD) training
pipeline with staircase learning-rate schedules."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .baseline_rx import build_lmmse_weights, ls_estimate, realify, zf_detect
from .channel import (
    ChannelModel,
    apply_channel,
    channel_frequency_correlation,
    draw_taps,
    frequency_response,
)
from .comnet_rx import (
    BiLstmSdSubnet,
    CeSubnet,
    ComnetReceiver,
    FcDnnReceiver,
    FcSdSubnet,
)
from .ofdm_phy import BITS_PER_FRAME, ClippingConfig, InputError, OfdmConfig, modulate_frames
from .tensor_nn import Adam, BiLstmStack, DenseLayer, Module, load_checkpoint, mse_loss, mse_loss_grad, save_checkpoint

log = logging.getLogger(__name__)

SCENARIOS = ("linear", "cp_removal", "clipping")


class TrainingError(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class Scenario:
    """Link scenario: ``linear`` (CP, no clipping), ``cp_removal`` or ``clipping``."""

    name: str = "linear"
    num_taps: int = 16
    decay: float = 4.0
    clipping_ratio: float = 1.6
    clip_pilot: bool = True

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise InputError(f"unknown scenario {self.name!r}; choose from {SCENARIOS}")

    @property
    def ofdm(self) -> OfdmConfig:
        clipping = ClippingConfig(self.clipping_ratio, self.clip_pilot) if self.name == "clipping" else None
        return OfdmConfig(cp_mode="no_cp" if self.name == "cp_removal" else "with_cp", clipping=clipping)

    @property
    def channel(self) -> ChannelModel:
        return ChannelModel(self.num_taps, self.decay)


@dataclass
class TrainConfig:
    scenario: Scenario = field(default_factory=Scenario)
    ce_epochs: int = 2000
    sd_epochs: int = 5000
    minibatches_per_epoch: int = 50
    minibatch_size: int = 20
    lr_init: float = 1e-3
    ce_lr_decay: tuple = (0.1, 1000)
    sd_lr_decay: tuple = (0.2, 2000)
    train_snr_db: float = 40.0
    seed: int = 0
    scale_factor: int = 10
    sd_kind: str = "fc"
    fc_sd_extended_features: bool = False
    bilstm_shared: bool = False
    lmmse_correlation: str = "analytic"
    train_fcdnn: bool = False

    def __post_init__(self):
        if isinstance(self.scenario, dict):
            self.scenario = Scenario(**self.scenario)
        self.ce_lr_decay = tuple(self.ce_lr_decay)
        self.sd_lr_decay = tuple(self.sd_lr_decay)
        for name in ("ce_epochs", "sd_epochs", "minibatches_per_epoch", "minibatch_size", "scale_factor"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be positive")
        if self.sd_kind not in ("fc", "bilstm"):
            raise InputError(f"sd_kind must be 'fc' or 'bilstm', got {self.sd_kind!r}")
        if self.lmmse_correlation not in ("analytic", "empirical"):
            raise InputError("lmmse_correlation must be 'analytic' or 'empirical'")

    def scaled(self, n: int) -> int:
        return max(1, int(round(n / self.scale_factor)))

    @property
    def ce_epochs_run(self) -> int:
        return self.scaled(self.ce_epochs)

    @property
    def sd_epochs_run(self) -> int:
        return self.scaled(self.sd_epochs)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ce_lr_decay"], d["sd_lr_decay"] = list(self.ce_lr_decay), list(self.sd_lr_decay)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainBatch:
    y_pilot: np.ndarray
    y_data: np.ndarray
    x_pilot: np.ndarray
    h_true: np.ndarray
    bits: np.ndarray

    def __len__(self) -> int:
        return self.bits.shape[0]


def generate_batch(scenario: Scenario, rng: np.random.Generator, n: int, snr_db: Optional[float]) -> TrainBatch:
    """Simulate ``n`` independent frames; ``snr_db=None`` means noiseless."""
    if n < 1:
        raise InputError("batch size must be >= 1")
    ofdm = scenario.ofdm
    bits = rng.integers(0, 2, size=(n, BITS_PER_FRAME), dtype=np.int8)
    _, tx = modulate_frames(bits, ofdm)
    taps = draw_taps(scenario.channel, rng, n)
    y_pilot, y_data = apply_channel(tx, taps, ofdm, snr_db, rng if snr_db is not None else None)
    return TrainBatch(y_pilot, y_data, ofdm.pilot_symbol, frequency_response(taps), bits)


def lr_schedule(epoch: int, subnet_kind: str, config: TrainConfig) -> float:
    """Staircase: ``lr_init * factor ** (epoch // period)`` with the period scaled
    by ``config.scale_factor``."""
    if epoch < 0:
        raise InputError("epoch must be >= 0")
    factor, period = config.ce_lr_decay if subnet_kind == "ce" else config.sd_lr_decay
    return config.lr_init * factor ** (epoch // config.scaled(period))


# ------------------------------------------------------------------ init

def _he_dense(layer: DenseLayer, rng: np.random.Generator) -> None:
    gain = 2.0 if layer.activation == "relu" else 1.0
    layer.weights.data[...] = rng.normal(0.0, np.sqrt(gain / layer.in_dim), layer.weights.shape)
    if layer.bias is not None:
        layer.bias.data[...] = 0.0


def _uniform_lstm(stack: BiLstmStack, rng: np.random.Generator) -> None:
    for fw, bw in stack.layers:
        bound = 1.0 / np.sqrt(fw.hidden_size)
        for cell in (fw, bw):
            for t in cell.parameters().values():
                t.data[...] = rng.uniform(-bound, bound, t.shape)


def init_weights(network: Module | ComnetReceiver, rng: np.random.Generator,
                 lmmse_matrix: Optional[np.ndarray] = None) -> Module:
    """He init for dense layers (sqrt(1/fan_in) on non-ReLU layers), zero biases,
    uniform +-1/sqrt(hidden) for LSTM cells; the CE layer takes ``lmmse_matrix``."""
    if isinstance(network, ComnetReceiver):
        init_weights(network.ce, rng, lmmse_matrix)
        init_weights(network.sd, rng)
    elif isinstance(network, CeSubnet):
        if lmmse_matrix is None:
            raise InputError("the CE subnet is initialised from the real LMMSE matrix")
        network.refine_layer.weights.data[...] = lmmse_matrix
    elif isinstance(network, FcSdSubnet):
        _he_dense(network.hidden, rng)
        _he_dense(network.output, rng)
    elif isinstance(network, BiLstmSdSubnet):
        _uniform_lstm(network.lstm, rng)
        _he_dense(network.heads, rng)
    elif isinstance(network, FcDnnReceiver):
        for layer in network.layers:
            _he_dense(layer, rng)
    elif isinstance(network, DenseLayer):
        _he_dense(network, rng)
    elif isinstance(network, BiLstmStack):
        _uniform_lstm(network, rng)
    else:
        raise TypeError(f"no init scheme for {type(network).__name__}")
    return network


def lmmse_init_matrix(config: TrainConfig, rng: Optional[np.random.Generator] = None,
                      n_frames: int = 20000) -> np.ndarray:
    """Real LMMSE matrix at the training SNR from analytic or sample R_hh."""
    sc = config.scenario
    if config.lmmse_correlation == "analytic":
        r_hh = channel_frequency_correlation(sc.channel)
    else:
        if rng is None:
            raise InputError("empirical correlation needs an rng")
        h = frequency_response(draw_taps(sc.channel, rng, n_frames))
        r_hh = h.T @ h.conj() / n_frames
    return build_lmmse_weights(r_hh, config.train_snr_db, sc.ofdm.pilot_symbol).real_matrix


def build_receiver(config: TrainConfig) -> ComnetReceiver:
    if config.sd_kind == "fc":
        sd = FcSdSubnet(extended_features=config.fc_sd_extended_features)
    else:
        sd = BiLstmSdSubnet(shared=config.bilstm_shared)
    return ComnetReceiver(ce=CeSubnet(), sd=sd)


# -------------------------------------------------------------- training

def param_checksum(params) -> str:
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def _check_divergence(history: list, initial: float, window: int = 50) -> None:
    recent = history[-window:]
    if len(recent) == window and all(r["loss"] > 10.0 * initial for r in recent):
        raise TrainingError(f"loss above 10x its initial value {initial:.3g} for {window} epochs", history)


def _run_epochs(kind: str, epochs: int, config: TrainConfig, rng: np.random.Generator,
                step_fn, params) -> list:
    """Shared loop: ``step_fn(batch) -> loss`` computes gradients into ``params``."""
    opt = Adam(params)
    history = []
    initial = None
    for epoch in range(epochs):
        lr = lr_schedule(epoch, kind, config)
        total = 0.0
        for _ in range(config.minibatches_per_epoch):
            batch = generate_batch(config.scenario, rng, config.minibatch_size, config.train_snr_db)
            opt.zero_grad()
            total += step_fn(batch)
            opt.step(lr)
        loss = total / config.minibatches_per_epoch
        history.append({"epoch": epoch, "lr": lr, "loss": loss})
        if initial is None:
            initial = loss
        _check_divergence(history, initial)
        if epoch % max(1, epochs // 10) == 0:
            log.info("%s epoch %d lr %.2e loss %.6f", kind, epoch, lr, loss)
    return history


def train_ce(ce: CeSubnet, config: TrainConfig, rng: np.random.Generator) -> tuple[CeSubnet, list]:
    """Fit the CE layer to the realified true channel under MSE with Adam."""
    def step(batch: TrainBatch) -> float:
        pred = ce.refine_layer.forward(realify(ls_estimate(batch.y_pilot, batch.x_pilot)))
        target = realify(batch.h_true)
        ce.refine_layer.backward(mse_loss_grad(pred, target))
        return mse_loss(pred, target)

    return ce, _run_epochs("ce", config.ce_epochs_run, config, rng, step, ce.parameters())


def train_sd(rx: ComnetReceiver, config: TrainConfig, rng: np.random.Generator) -> tuple[ComnetReceiver, list]:
    """Fit the SD subnet on bit MSE with the CE subnet frozen."""
    before = param_checksum(rx.ce.parameters())
    for p in rx.ce.parameters().values():
        p.grad = None

    def step(batch: TrainBatch) -> float:
        h_hat = rx.ce.forward(ls_estimate(batch.y_pilot, batch.x_pilot), record=False)
        x_zf = zf_detect(batch.y_data, h_hat)
        soft = rx.sd.forward(x_zf, h_hat, batch.y_data)
        target = batch.bits.astype(float)
        rx.sd.backward(mse_loss_grad(soft, target))
        return mse_loss(soft, target)

    history = _run_epochs("sd", config.sd_epochs_run, config, rng, step, rx.sd.parameters())
    if param_checksum(rx.ce.parameters()) != before or any(p.grad is not None for p in rx.ce.parameters().values()):
        raise TrainingError("CE subnet changed during SD training", history)
    return rx, history


def train_fcdnn(net: FcDnnReceiver, config: TrainConfig, rng: np.random.Generator) -> tuple[FcDnnReceiver, list]:
    """End-to-end bit-MSE training of the FC-DNN baseline on the SD schedule."""
    def step(batch: TrainBatch) -> float:
        soft = net.forward(batch.y_pilot, batch.y_data)
        target = batch.bits.astype(float)
        net.backward(mse_loss_grad(soft, target))
        return mse_loss(soft, target)

    return net, _run_epochs("sd", config.sd_epochs_run, config, rng, step, net.parameters())


# ----------------------------------------------------------- run directory

@dataclass
class TrainResult:
    receiver: ComnetReceiver
    ce_history: list
    sd_history: list
    fcdnn: Optional[FcDnnReceiver] = None
    fcdnn_history: Optional[list] = None


def train_pipeline(config: TrainConfig) -> TrainResult:
    """Initialise, train CE, freeze it, train SD (and optionally the FC-DNN)."""
    init_ss, ce_ss, sd_ss, dnn_ss = np.random.SeedSequence(config.seed).spawn(4)
    init_rng = np.random.default_rng(init_ss)
    rx = build_receiver(config)
    init_weights(rx, init_rng, lmmse_init_matrix(config, init_rng))
    _, ce_hist = train_ce(rx.ce, config, np.random.default_rng(ce_ss))
    _, sd_hist = train_sd(rx, config, np.random.default_rng(sd_ss))
    result = TrainResult(rx, ce_hist, sd_hist)
    if config.train_fcdnn:
        net = init_weights(FcDnnReceiver(), init_rng)
        _, result.fcdnn_history = train_fcdnn(net, config, np.random.default_rng(dnn_ss))
        result.fcdnn = net
    return result


def _write_history(path: Path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "loss"])
        for r in history:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["loss"])])


def save_run(result: TrainResult, config: TrainConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    (out / "seed.json").write_text(json.dumps({"seed": config.seed}))
    _write_history(out / "loss_ce.csv", result.ce_history)
    _write_history(out / "loss_sd.csv", result.sd_history)
    save_checkpoint(result.receiver.ce.parameters(), out / "ce.json")
    save_checkpoint(result.receiver.sd.parameters(), out / f"sd_{config.sd_kind}.json")
    if result.fcdnn is not None:
        _write_history(out / "loss_fcdnn.csv", result.fcdnn_history)
        save_checkpoint(result.fcdnn.parameters(), out / "fcdnn.json")
    return out


def load_run_config(run_dir) -> TrainConfig:
    return TrainConfig.from_dict(json.loads((Path(run_dir) / "train_config.json").read_text()))


def load_receiver(run_dir) -> ComnetReceiver:
    run_dir = Path(run_dir)
    config = load_run_config(run_dir)
    rx = build_receiver(config)
    load_checkpoint(rx.ce.parameters(), run_dir / "ce.json")
    load_checkpoint(rx.sd.parameters(), run_dir / f"sd_{config.sd_kind}.json")
    return rx


def load_fcdnn(run_dir) -> FcDnnReceiver:
    net = FcDnnReceiver()
    load_checkpoint(net.parameters(), Path(run_dir) / "fcdnn.json")
    return net
