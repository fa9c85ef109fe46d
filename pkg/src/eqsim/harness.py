"""Experiment orchestration: stream partitioning across inference and training
instances, training rounds, BER / convergence measurement and the analytic
throughput, GOPS and resource models."""
from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .channel import ChannelConfig, RxFrame, make_rng, pam_alphabet, simulate
from .cnn import (CnnModel, batch_parallel_forward, decide, equalize, init_model,
                  paper_layers)
from .fxp import FxpFormat, FxpTensor
from .train import TrainConfig, compute_gradients, parallel_round_update

log = logging.getLogger(__name__)

# RNG stream tags
_INIT, _TRAIN, _EVAL = 1, 2, 3

LINE_RATE_INSTANCES = 34


@dataclass(frozen=True)
class QuantConfig:
    input_bits: int = 10
    input_frac: int = 8
    act_bits: int = 10
    act_frac: int = 8
    weight_bits: int = 6
    weight_frac: int | tuple = (5, 4)   # one value or (layer 1, layer 2)
    bias_bits: int = 16
    bias_frac: int = 8
    grad_bits: int = 24
    grad_frac: int = 16
    lr_frac: int = 20
    packed_layer2: bool = True

    @property
    def input_fmt(self) -> FxpFormat:
        return FxpFormat(self.input_bits, self.input_frac, True)

    @property
    def grad_fmt(self) -> FxpFormat:
        return FxpFormat(self.grad_bits, self.grad_frac, True)

    def layers(self):
        return paper_layers(self.input_fmt, self.act_bits, self.act_frac, self.weight_bits,
                            self.weight_frac, self.bias_bits, self.bias_frac)


@dataclass(frozen=True)
class SystemConfig:
    p_i: int = 33
    p_t: int = 1
    f_clk: float = 150e6
    train: TrainConfig = field(default_factory=TrainConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    n_runs: int = 10
    max_updates: int = 750
    eval_symbols: int = 10_000
    eval_every: int = 10
    fec_threshold: float = 2.7e-2
    v_p: int = 8
    line_rate_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.p_i < 0 or self.p_t < 0:
            raise ValueError("p_i and p_t must be non-negative")
        if not 0 < self.fec_threshold < 1:
            raise ValueError("fec_threshold must lie in (0, 1)")
        if self.line_rate_mode and self.p_i + self.p_t < LINE_RATE_INSTANCES:
            raise ValueError(f"line-rate mode needs p_i + p_t >= {LINE_RATE_INSTANCES}")
        if self.n_runs < 1 or self.max_updates < 0 or self.eval_every < 1:
            raise ValueError("n_runs >= 1, max_updates >= 0 and eval_every >= 1 required")
        if self.eval_symbols % 8:
            raise ValueError("eval_symbols must be a multiple of 8")

    @property
    def symbols_per_cycle(self) -> float:
        return self.v_p / self.channel.n_os


# --- partitioning -------------------------------------------------------------

@dataclass
class Partition:
    """Symbol index ranges ``[start, stop)`` per instance."""
    train: list                 # one range per training instance
    infer: list                 # list of ranges per inference instance

    def eval_ranges(self):
        return [r for inst in self.infer for r in inst]


def partition_stream(rx: RxFrame, cfg: SystemConfig) -> Partition:
    """Cut the frame into SL-symbol blocks; block ``t`` feeds training instance
    ``t`` and the remaining stream is dealt round-robin, block by block, to the
    inference instances."""
    sl = cfg.train.seq_len
    n = len(rx.truth)
    need = cfg.p_t * sl
    if n < need or (cfg.p_i == 0 and n > need):
        raise ValueError(f"frame of {n} symbols cannot hold {cfg.p_t} x {sl} training "
                         f"symbols plus an evaluation share for {cfg.p_i} instances")
    train = [(t * sl, (t + 1) * sl) for t in range(cfg.p_t)]
    infer = [[] for _ in range(cfg.p_i)]
    start, k = need, 0
    while start < n:
        stop = min(start + sl, n)
        infer[k % cfg.p_i].append((start, stop))
        start, k = stop, k + 1
    return Partition(train, infer)


# --- metrics ------------------------------------------------------------------

def _gray_bits(index: np.ndarray, bits: int) -> np.ndarray:
    gray = index ^ (index >> 1)
    return (gray[..., None] >> np.arange(bits)) & 1


def symbol_indices(symbols, pam_order: int) -> np.ndarray:
    levels = pam_alphabet(pam_order)
    symbols = np.asarray(symbols, dtype=np.float64)
    return np.argmin(np.abs(symbols[..., None] - levels), axis=-1)


def ber(decisions, truth, pam_order: int = 2) -> float:
    decisions = np.asarray(decisions)
    truth = np.asarray(truth)
    if decisions.shape != truth.shape:
        raise ValueError(f"length mismatch: {decisions.shape} vs {truth.shape}")
    if decisions.size == 0:
        raise ValueError("ber needs at least one symbol")
    bits = int(math.log2(pam_order))
    a = _gray_bits(symbol_indices(decisions, pam_order), bits)
    b = _gray_bits(symbol_indices(truth, pam_order), bits)
    return float(np.mean(a != b))


def model_time(updates: int, cfg: SystemConfig) -> float:
    """Model training time in ms after ``updates`` rounds: every training
    instance consumes SL symbols at ``(v_p / n_os) * f_clk`` symbols/s."""
    rate = cfg.symbols_per_cycle * cfg.f_clk
    return updates * cfg.train.seq_len / rate * 1e3


def estimate_throughput(cfg: SystemConfig) -> float:
    """Line throughput in Bd."""
    return (cfg.p_i + cfg.p_t) * cfg.symbols_per_cycle * cfg.f_clk


OPS_FORWARD = 45


def estimate_gops(cfg: SystemConfig) -> float:
    """Operation rate with 45 ops per forward instance-cycle and twice that
    for a training instance."""
    return (OPS_FORWARD * cfg.p_i + 2 * OPS_FORWARD * cfg.p_t) * cfg.f_clk / 1e9


# --- resources ----------------------------------------------------------------

ARCHS = ("conv_def", "conv_inst", "conv_map")
DEVICE_DSP = 12288
DEVICE_LUT = 1_728_000
LUT_BASE = 10_000
LUT_PER_INSTANCE = {"conv_def": 5_600, "conv_inst": 5_400, "conv_map": 5_200}
LUT_PER_TRAINING = 264_000
LUT_PER_SPILLED_MULT = 40


@dataclass(frozen=True)
class ResourceEstimate:
    arch: str
    p_i: int
    p_t: int
    dsp_count: int            # multiplier demand in DSP slices
    dsp_mapped: int           # min(demand, device budget)
    lut_estimate: int
    m1: int
    m2: int


def layer_multipliers(layers=None) -> list[int]:
    """Multipliers of one fully unrolled instance per layer, counted on the
    weight-reuse schedule of a single sample."""
    layers = layers or paper_layers()
    counts = []
    s = 16 * math.prod(spec.stride for spec in layers)
    x = FxpTensor(np.zeros((1, layers[0].in_ch, s), dtype=np.int64), layers[0].in_fmt)
    for spec in layers:
        c = Counter()
        w = FxpTensor(np.zeros((spec.in_ch, spec.out_ch, spec.kernel), dtype=np.int64),
                      spec.weight_fmt)
        b = FxpTensor(np.zeros((1, spec.out_ch, 1), dtype=np.int64), spec.bias_fmt)
        x = batch_parallel_forward(x, spec, w, b, counter=c)
        counts.append(c["mul"] // x.shape[-1])
    return counts


def estimate_resources(arch: str, p_i: int, p_t: int = 0, device_dsp: int = DEVICE_DSP,
                       layers=None) -> ResourceEstimate:
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    m = layer_multipliers(layers)
    m1, m2 = m[0], m[1]
    if arch == "conv_map":
        per_instance = m1 + math.ceil(m2 / 2)
    else:
        per_instance = m1 + m2
    # training: unpacked forward, weight gradients of both layers, input
    # gradient of layer 2 only
    per_training = 2 * (m1 + m2) + m2
    dsp = p_i * per_instance + p_t * per_training
    spill = max(0, dsp - device_dsp)
    lut = 0
    if p_i or p_t:
        lut = (LUT_BASE + LUT_PER_INSTANCE[arch] * p_i + LUT_PER_TRAINING * p_t
               + LUT_PER_SPILLED_MULT * spill)
    return ResourceEstimate(arch, p_i, p_t, dsp, min(dsp, device_dsp), lut, m1, m2)


# --- experiments --------------------------------------------------------------

@dataclass
class RunResult:
    run_id: int
    updates: list
    times_ms: list
    bers: list
    t_conv: float | None


@dataclass
class ConvergenceReport:
    runs: list
    mean_times_ms: list
    mean_ber: list
    config: dict

    @property
    def converged_fraction(self) -> float:
        return sum(r.t_conv is not None for r in self.runs) / len(self.runs)

    def t_conv_values(self) -> list:
        return [r.t_conv for r in self.runs if r.t_conv is not None]

    @property
    def mean_t_conv(self) -> float | None:
        v = self.t_conv_values()
        return float(np.mean(v)) if v else None

    def summary(self) -> dict:
        v = self.t_conv_values()
        pct = {f"p{q}": (float(np.percentile(v, q)) if v else None) for q in (25, 50, 75)}
        return {
            "n_runs": len(self.runs),
            "converged_runs": len(v),
            "converged_fraction": self.converged_fraction,
            "mean_t_conv_ms": self.mean_t_conv,
            "t_conv_percentiles_ms": pct,
            "per_run_t_conv_ms": [r.t_conv for r in self.runs],
            "final_mean_ber": self.mean_ber[-1] if self.mean_ber else None,
            "config": self.config,
        }


def convergence_time(times, bers, threshold: float):
    """Earliest time from which every later BER stays at or below ``threshold``."""
    t_conv = None
    for t, b in zip(reversed(times), reversed(bers)):
        if b > threshold:
            break
        t_conv = t
    return t_conv


def config_echo(cfg: SystemConfig) -> dict:
    d = asdict(cfg)
    d["channel"]["snr_db"] = repr(cfg.channel.snr_db) if math.isinf(cfg.channel.snr_db) \
        else cfg.channel.snr_db
    return d


def evaluate_ber(model: CnnModel, cfg: SystemConfig, rng) -> float:
    """BER over a fresh frame of ``eval_symbols`` held-out symbols, equalized
    as one continuous stream by the inference instances."""
    fmt = cfg.quant.input_fmt
    _, rx = simulate(cfg.eval_symbols, cfg.channel, rng, fmt)
    part = partition_stream(rx, replace(cfg, p_t=0, p_i=max(cfg.p_i, 1)))
    z = equalize(model, rx.y, fmt)
    idx = np.concatenate([np.arange(a, b) for a, b in part.eval_ranges()])
    return ber(decide(z[idx], cfg.channel.pam_order), rx.truth[idx], cfg.channel.pam_order)


def new_model(cfg: SystemConfig, run_id: int) -> CnnModel:
    q = cfg.quant
    return init_model(make_rng(cfg.seed, run_id, _INIT), q.layers(), q.grad_fmt,
                      q.lr_frac, q.packed_layer2)


def train_round(model: CnnModel, cfg: SystemConfig, rng) -> float:
    """One round: every training instance computes gradients on its slice of
    a fresh frame against the same snapshot, then all updates are applied."""
    sl = cfg.train.seq_len
    fmt = cfg.quant.input_fmt
    _, rx = simulate(cfg.p_t * sl, cfg.channel, rng, fmt)
    part = partition_stream(rx, replace(cfg, p_i=0))
    n_os = cfg.channel.n_os
    grads, losses = [], []
    for a, b in part.train:
        y = FxpTensor(rx.y[None, None, a * n_os:b * n_os], fmt, check=False)
        loss, g = compute_gradients(model, y, rx.truth[a:b], cfg.train.reduction)
        grads.append(g)
        losses.append(loss)
    parallel_round_update(model, grads, cfg.train.lr)
    return float(np.mean(losses))


def run_single(cfg: SystemConfig, run_id: int) -> RunResult:
    model = new_model(cfg, run_id)
    updates, times, bers = [], [], []

    def record(u):
        b = evaluate_ber(model, cfg, make_rng(cfg.seed, run_id, _EVAL, u))
        updates.append(u)
        times.append(model_time(u, cfg))
        bers.append(b)

    record(0)
    for u in range(1, cfg.max_updates + 1):
        if cfg.p_t:
            train_round(model, cfg, make_rng(cfg.seed, run_id, _TRAIN, u))
        if u % cfg.eval_every == 0 or u == cfg.max_updates:
            record(u)
    t_conv = convergence_time(times, bers, cfg.fec_threshold)
    log.info("run %d: final BER %.4g, t_conv %s", run_id, bers[-1], t_conv)
    return RunResult(run_id, updates, times, bers, t_conv)


def run_experiment(cfg: SystemConfig, threads: int = 1) -> ConvergenceReport:
    run_ids = range(cfg.n_runs)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            runs = list(pool.map(lambda r: run_single(cfg, r), run_ids))
    else:
        runs = [run_single(cfg, r) for r in run_ids]
    runs.sort(key=lambda r: r.run_id)
    times = runs[0].times_ms
    mean_ber = np.mean([r.bers for r in runs], axis=0).tolist()
    return ConvergenceReport(runs, list(times), mean_ber, config_echo(cfg))
