"""Experiment harness: BER / MSE sweeps, the SNR-mismatch study and the
complexity table, plus the ``comnet`` command line.

Every sweep point draws its frames from its own ``SeedSequence`` child, so the
numbers do not depend on how many worker threads evaluate the grid.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .baseline_rx import build_lmmse_weights, lmmse_estimate, ls_estimate, mmse_detect, zf_detect
from .channel import channel_frequency_correlation
from .comnet_rx import (
    BiLstmSdSubnet,
    ComnetReceiver,
    CeSubnet,
    FcDnnReceiver,
    FcSdSubnet,
    comnet_receive,
    count_flops,
    count_params,
    lmmse_mmse_flops,
    memory_bytes,
)
from .ofdm_phy import InputError, qam_demap_hard
from .training import (
    Scenario,
    TrainBatch,
    TrainConfig,
    TrainingError,
    generate_batch,
    load_fcdnn,
    load_receiver,
    save_run,
    train_pipeline,
)

log = logging.getLogger(__name__)

BER_RECEIVERS = ("ls_zf", "lmmse_mmse", "genie", "fcdnn", "comnet_fc", "comnet_bilstm")
MSE_RECEIVERS = ("ls", "lmmse", "comnet_ce")
NEURAL = ("fcdnn", "comnet_fc", "comnet_bilstm")
RESULT_COLUMNS = ("scenario", "receiver", "snr_db", "metric", "value", "stderr",
                  "frames_used", "bit_errors", "seed", "flagged")
COMPLEXITY_COLUMNS = ("receiver", "params", "flops", "bytes", "intensity",
                      "flops_vs_fcdnn", "bytes_vs_fcdnn")


class ConfigError(InputError):
    pass


@dataclass
class ExperimentConfig:
    scenario: Scenario = field(default_factory=Scenario)
    receivers: list = field(default_factory=lambda: ["ls_zf", "lmmse_mmse", "genie"])
    snr_grid_db: list = field(default_factory=lambda: [0, 5, 10, 15, 20, 25])
    train_snr_db: float = 40.0
    min_bit_errors: int = 200
    max_frames: int = 20000
    batch_frames: int = 500
    seed: int = 0
    # receiver name -> training run directory
    checkpoints: dict = field(default_factory=dict)
    # mismatch study: run directories trained at the deployment SNR / elsewhere
    matched_run: Optional[str] = None
    mismatched_run: Optional[str] = None
    deploy_snr_db: float = 5.0
    train: Optional[dict] = None

    def __post_init__(self):
        if isinstance(self.scenario, str):
            self.scenario = Scenario(self.scenario)
        elif isinstance(self.scenario, dict):
            self.scenario = Scenario(**self.scenario)
        if not self.snr_grid_db:
            raise ConfigError("snr_grid_db must not be empty")
        if self.min_bit_errors < 1 or self.max_frames < 1 or self.batch_frames < 1:
            raise ConfigError("min_bit_errors, max_frames and batch_frames must be positive")
        if self.min_bit_errors < 100:
            log.warning("min_bit_errors=%d is below 100; points are not publishable", self.min_bit_errors)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scenario"] = dataclasses.asdict(self.scenario)
        return d


@dataclass
class ResultRow:
    scenario: str
    receiver: str
    snr_db: float
    metric: str
    value: float
    stderr: float
    frames_used: int
    bit_errors: int
    seed: int
    flagged: bool = False

    def as_csv(self) -> list:
        return [self.scenario, self.receiver, repr(float(self.snr_db)), self.metric, repr(float(self.value)),
                repr(float(self.stderr)), self.frames_used, self.bit_errors, self.seed, int(self.flagged)]


def write_rows(path, rows: Sequence, columns=RESULT_COLUMNS) -> None:
    """Create ``path`` with a header and the given rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(r.as_csv() if isinstance(r, ResultRow) else r)


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------- receivers

Detector = Callable[[TrainBatch, float], tuple[np.ndarray, Optional[np.ndarray]]]


def _lmmse_for(scenario: Scenario, snr_db: float):
    return build_lmmse_weights(channel_frequency_correlation(scenario.channel), snr_db,
                               scenario.ofdm.pilot_symbol)


def _resolve_run(config: ExperimentConfig, name: str) -> Path:
    run = config.checkpoints.get(name)
    if run is None:
        raise ConfigError(f"receiver {name!r} needs a checkpoint directory in 'checkpoints'")
    run = Path(run)
    want = {"fcdnn": "fcdnn.json", "comnet_fc": "sd_fc.json", "comnet_bilstm": "sd_bilstm.json"}[name]
    if not (run / want).exists():
        raise ConfigError(f"receiver {name!r}: checkpoint {run / want} not found")
    return run


def make_detector(name: str, config: ExperimentConfig, loaded=None) -> Detector:
    """Return ``f(batch, snr_db) -> (bits, h_hat)``."""
    sc = config.scenario
    if name == "ls_zf":
        def ls_zf(b, snr):
            h = ls_estimate(b.y_pilot, b.x_pilot)
            return qam_demap_hard(zf_detect(b.y_data, h)), h
        return ls_zf
    if name == "lmmse_mmse":
        def lmmse_mmse(b, snr):
            h = lmmse_estimate(_lmmse_for(sc, snr), ls_estimate(b.y_pilot, b.x_pilot))
            return qam_demap_hard(mmse_detect(b.y_data, h, snr)), h
        return lmmse_mmse
    if name == "genie":
        return lambda b, snr: (qam_demap_hard(zf_detect(b.y_data, b.h_true)), b.h_true)
    if name in ("comnet_fc", "comnet_bilstm"):
        rx = loaded if loaded is not None else load_receiver(_resolve_run(config, name))

        def comnet(b, snr):
            bits, h, _ = comnet_receive(rx, b.y_pilot, b.y_data, b.x_pilot)
            return bits, h
        return comnet
    if name == "fcdnn":
        net = loaded if loaded is not None else load_fcdnn(_resolve_run(config, name))
        return lambda b, snr: (net.receive(b.y_pilot, b.y_data)[0], None)
    raise ConfigError(f"unknown receiver {name!r}; choose from {BER_RECEIVERS}")


def _load_detectors(config: ExperimentConfig) -> dict:
    out = {}
    for name in config.receivers:
        if name not in BER_RECEIVERS:
            raise ConfigError(f"unknown receiver {name!r}; choose from {BER_RECEIVERS}")
        out[name] = make_detector(name, config)
    return out


def _point_rngs(config: ExperimentConfig) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(len(config.snr_grid_db))]


def _map_points(fn, config: ExperimentConfig, threads: int) -> list:
    args = list(zip(config.snr_grid_db, _point_rngs(config)))
    if threads <= 1:
        return [fn(snr, rng) for snr, rng in args]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda a: fn(*a), args))


# ---------------------------------------------------------------- sweeps

def _ber_point(config: ExperimentConfig, detectors: dict, snr: float, rng) -> list[ResultRow]:
    """All receivers see the same frames; each stops at ``min_bit_errors`` or ``max_frames``."""
    errors = dict.fromkeys(detectors, 0)
    frames = dict.fromkeys(detectors, 0)
    active = list(detectors)
    while active:
        n = min(config.batch_frames, config.max_frames - min(frames[k] for k in active))
        batch = generate_batch(config.scenario, rng, n, snr)
        for name in active:
            bits, _ = detectors[name](batch, snr)
            errors[name] += int(np.count_nonzero(bits != batch.bits))
            frames[name] += n
        active = [k for k in active if errors[k] < config.min_bit_errors and frames[k] < config.max_frames]
    rows = []
    for name in detectors:
        nbits = frames[name] * batch.bits.shape[1]
        ber = errors[name] / nbits
        rows.append(ResultRow(config.scenario.name, name, snr, "ber", ber, float(np.sqrt(ber * (1 - ber) / nbits)),
                              frames[name], errors[name], config.seed, errors[name] < config.min_bit_errors))
    return rows


def run_ber_sweep(config: ExperimentConfig, threads: int = 1) -> list[ResultRow]:
    detectors = _load_detectors(config)

    def point(snr, rng):
        dets = copy.deepcopy(detectors) if threads > 1 else detectors
        return _ber_point(config, dets, snr, rng)

    rows = [r for pt in _map_points(point, config, threads) for r in pt]
    for r in rows:
        if r.flagged:
            log.warning("%s @ %.1f dB: only %d bit errors in %d frames", r.receiver, r.snr_db, r.bit_errors,
                        r.frames_used)
    return rows


def _estimators(config: ExperimentConfig, ce: Optional[CeSubnet]) -> dict:
    names = [r for r in config.receivers if r in MSE_RECEIVERS] or list(MSE_RECEIVERS[:2])
    out = {}
    for name in names:
        if name == "ls":
            out[name] = lambda h_ls, snr: h_ls
        elif name == "lmmse":
            out[name] = lambda h_ls, snr: lmmse_estimate(_lmmse_for(config.scenario, snr), h_ls)
        else:
            if ce is None:
                raise ConfigError("receiver 'comnet_ce' needs a CE checkpoint ('checkpoints': {'comnet_ce': dir})")
            out[name] = lambda h_ls, snr, ce=ce: ce.forward(h_ls, record=False)
    return out


def _load_ce(config: ExperimentConfig) -> Optional[CeSubnet]:
    if "comnet_ce" not in config.receivers:
        return None
    run = config.checkpoints.get("comnet_ce")
    if run is None or not (Path(run) / "ce.json").exists():
        raise ConfigError(f"receiver 'comnet_ce': CE checkpoint {run}/ce.json not found")
    return load_receiver(run).ce


def _mse_point(config: ExperimentConfig, estimators: dict, snr: float, rng) -> list[ResultRow]:
    """``max_frames`` frames per point; MSE per frame is the mean over subcarriers."""
    per_frame = {k: [] for k in estimators}
    done = 0
    while done < config.max_frames:
        n = min(config.batch_frames, config.max_frames - done)
        b = generate_batch(config.scenario, rng, n, snr)
        h_ls = ls_estimate(b.y_pilot, b.x_pilot)
        for name, est in estimators.items():
            per_frame[name].append(np.mean(np.abs(est(h_ls, snr) - b.h_true) ** 2, axis=-1))
        done += n
    rows = []
    for name, parts in per_frame.items():
        e = np.concatenate(parts)
        m = float(e.mean())
        se_db = 10.0 / np.log(10.0) * float(e.std(ddof=1)) / np.sqrt(e.size) / m if e.size > 1 else 0.0
        rows.append(ResultRow(config.scenario.name, name, snr, "mse_db", 10 * np.log10(m), se_db, e.size, 0,
                              config.seed))
    return rows


def run_mse_sweep(config: ExperimentConfig, threads: int = 1) -> list[ResultRow]:
    estimators = _estimators(config, _load_ce(config))
    return [r for pt in _map_points(lambda s, g: _mse_point(config, estimators, s, g), config, threads) for r in pt]


def run_mismatch_study(config: ExperimentConfig, threads: int = 1) -> list[ResultRow]:
    """Evaluate two ComNet runs at ``deploy_snr_db``: one trained there (matched)
    and one trained elsewhere (mismatched); adds gap / ratio rows."""
    if not config.matched_run or not config.mismatched_run:
        raise ConfigError("the mismatch study needs 'matched_run' and 'mismatched_run'")
    runs = {}
    for tag, run in (("matched", config.matched_run), ("mismatched", config.mismatched_run)):
        if not (Path(run) / "ce.json").exists():
            raise ConfigError(f"{tag} run directory {run} has no checkpoint")
        runs[tag] = load_receiver(run)
    snr = config.deploy_snr_db
    point_cfg = dataclasses.replace(config, snr_grid_db=[snr])
    rows = []
    for metric_rows in (_mismatch_mse(point_cfg, runs), _mismatch_ber(point_cfg, runs)):
        rows += metric_rows
    by = {(r.receiver, r.metric): r for r in rows}
    mse_gap = by[("mismatched", "mse_db")].value - by[("matched", "mse_db")].value
    se = float(np.hypot(by[("mismatched", "mse_db")].stderr, by[("matched", "mse_db")].stderr))
    rows.append(ResultRow(config.scenario.name, "mismatch", snr, "mse_gap_db", mse_gap, se, 0, 0, config.seed))
    b_m, b_x = by[("matched", "ber")], by[("mismatched", "ber")]
    ratio = b_x.value / b_m.value if b_m.value > 0 else float("inf")
    rows.append(ResultRow(config.scenario.name, "mismatch", snr, "ber_ratio", ratio, 0.0, 0, 0, config.seed,
                          b_m.flagged or b_x.flagged))
    return rows


def _mismatch_mse(config, runs) -> list[ResultRow]:
    ests = {tag: (lambda h_ls, snr, ce=rx.ce: ce.forward(h_ls, record=False)) for tag, rx in runs.items()}
    return _mse_point(config, ests, config.snr_grid_db[0], _point_rngs(config)[0])


def _mismatch_ber(config, runs) -> list[ResultRow]:
    dets = {tag: make_detector(f"comnet_{rx.mode}", config, loaded=rx) for tag, rx in runs.items()}
    rows = _ber_point(config, dets, config.snr_grid_db[0], _point_rngs(config)[0])
    return rows


def run_complexity_report(config: Optional[ExperimentConfig] = None) -> list[list]:
    """Rows of :data:`COMPLEXITY_COLUMNS` for FC-DNN, ComNet-FC and ComNet-BiLSTM
    (standard architectures, so no checkpoints are needed)."""
    nets = {
        "fcdnn": FcDnnReceiver(),
        "comnet_fc": ComnetReceiver(CeSubnet(), FcSdSubnet()),
        "comnet_bilstm": ComnetReceiver(CeSubnet(), BiLstmSdSubnet()),
    }
    ref_flops, ref_bytes = count_flops(nets["fcdnn"]), memory_bytes(nets["fcdnn"])
    rows = []
    for name, net in nets.items():
        params, flops, nbytes = count_params(net), count_flops(net), memory_bytes(net)
        rows.append([name, params, flops, nbytes, repr(flops / nbytes), repr(flops / ref_flops),
                     repr(nbytes / ref_bytes)])
    # informational: LMMSE matrix recomputed per frame, no stored parameters
    flops = lmmse_mmse_flops()
    rows.append(["lmmse_mmse", 0, flops, 0, "nan", repr(flops / ref_flops), "0.0"])
    return rows


# ------------------------------------------------------------------- CLI

def blob_hash(path) -> str:
    """git-style content hash: sha1 of ``b"blob <size>\\0" + content``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _checkpoint_hashes(dirs) -> dict:
    out = {}
    for d in dirs:
        if d is None:
            continue
        for f in sorted(Path(d).glob("*.json")):
            if f.name not in ("train_config.json", "seed.json", "run_meta.json"):
                out[str(f)] = blob_hash(f)
    return out


def _write_meta(out: Path, command: str, config: dict, seed: int, ckpt_dirs, started: float) -> None:
    meta = {
        "command": command,
        "config": config,
        "seed": seed,
        "checkpoints": _checkpoint_hashes(ckpt_dirs),
        "wall_clock_s": round(time.time() - started, 3),  # informational
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return d


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="comnet", description="ComNet receiver experiments")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in ("train", "sweep-ber", "sweep-mse", "mismatch", "complexity"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=name != "complexity")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", default=".")
        s.add_argument("--threads", type=int, default=1)
    sub.add_parser("selftest")
    return p


def _cmd_train(cfg: dict, seed: Optional[int], out: Path) -> list:
    train = cfg.get("train", cfg)
    tc = TrainConfig.from_dict({**train, **({"seed": seed} if seed is not None else {})})
    result = train_pipeline(tc)
    save_run(result, tc, out)
    return [out]


def _experiment(cfg: dict, seed: Optional[int]) -> ExperimentConfig:
    exp = ExperimentConfig.from_dict({k: v for k, v in cfg.items()})
    if seed is not None:
        exp.seed = seed
    return exp


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; exit 0 on success, 1 on a configuration error, 2 on a runtime error."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        args = _parser().parse_args(argv)
        if args.command is None:
            _parser().print_usage(sys.stderr)
            raise ConfigError("missing subcommand")
        if args.command == "selftest":
            return selftest()
        cfg = _load_json(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "train":
            dirs = _cmd_train(cfg, args.seed, out)
            seed = json.loads((out / "seed.json").read_text())["seed"]
            _write_meta(out, "train", cfg, seed, dirs, started)
            return 0
        exp = _experiment(cfg, args.seed)
        if args.command == "complexity":
            write_rows(out / "complexity.csv", run_complexity_report(exp), COMPLEXITY_COLUMNS)
            dirs = []
        else:
            run = {"sweep-ber": run_ber_sweep, "sweep-mse": run_mse_sweep, "mismatch": run_mismatch_study}
            rows = run[args.command](exp, threads=args.threads)
            write_rows(out / "results.csv", rows)
            dirs = list(exp.checkpoints.values()) + [exp.matched_run, exp.mismatched_run]
        _write_meta(out, args.command, exp.to_dict(), exp.seed, dirs, started)
        return 0
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 2
        log.exception("runtime error")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


# -------------------------------------------------------------- selftest

def _fd_check(module, x, rng, eps=1e-5) -> float:
    for t in module.parameters().values():
        t.data[...] = rng.normal(0.0, 0.5, t.shape)
    y = module.forward(x)
    w = rng.normal(size=y.shape)
    module.zero_grad()
    module.backward(w)
    worst = 0.0
    for t in module.parameters().values():
        for idx in np.ndindex(t.shape):
            old = t.data[idx]
            t.data[idx] = old + eps
            lp = float(np.sum(module.forward(x, record=False) * w))
            t.data[idx] = old - eps
            lm = float(np.sum(module.forward(x, record=False) * w))
            t.data[idx] = old
            fd, ga = (lp - lm) / (2 * eps), t.grad[idx]
            worst = max(worst, abs(ga - fd) / max(abs(ga), abs(fd), 1e-8))
    return worst


def selftest() -> int:
    """Fast invariant checks; prints one line per check, returns 0 if all pass."""
    from .baseline_rx import complexify, realify
    from .ofdm_phy import LTE_64QAM, qam_map
    from .tensor_nn import BiLstmStack, DenseLayer

    rng = np.random.default_rng(0)
    checks = []
    labels = LTE_64QAM.bit_labels.reshape(-1)
    checks.append(("qam round trip", np.array_equal(qam_demap_hard(qam_map(labels)), labels)))
    checks.append(("dense gradient", _fd_check(DenseLayer(3, 4, "sigmoid"), rng.normal(size=(5, 3)), rng) < 1e-4))
    checks.append(("bilstm gradient", _fd_check(BiLstmStack(3, [3, 2]), rng.normal(size=(2, 4, 3)), rng) < 1e-4))
    sc = Scenario()
    w = _lmmse_for(sc, 10.0)
    h = rng.normal(size=(50, 64)) + 1j * rng.normal(size=(50, 64))
    checks.append(("lmmse real == complex", np.allclose(lmmse_estimate(w, h), h @ w.complex_matrix.T, atol=1e-10)))
    ce = CeSubnet(w.real_matrix)
    checks.append(("ce init == lmmse", np.allclose(ce.forward(h), lmmse_estimate(w, h), atol=1e-6)))
    b = generate_batch(sc, rng, 200, None)
    checks.append(("noiseless channel y = h x", np.allclose(b.y_pilot, b.h_true * b.x_pilot, atol=1e-9)))
    checks.append(("realify inverse", np.allclose(complexify(realify(h)), h)))
    ok = True
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'} {name}")
        ok &= bool(passed)
    return 0 if ok else 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
