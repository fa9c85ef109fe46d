"""Quantized two-layer Conv1D equalizer.

Weights are stored as ``W[i, o, k]`` (input channel, output channel, tap).
Layer outputs are computed by exact integer accumulation followed by one
rounding step into the activation format. The packed datapath for layer 2
routes the products of batch pairs ``(2m, 2m + 1)`` through
:func:`eqsim.dsppack.packed_mul_array`.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import dsppack
from .fxp import FxpFormat, FxpTensor, convert, requantize

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    padding: int
    activation: str           # "relu" or "none"
    in_fmt: FxpFormat
    weight_fmt: FxpFormat
    bias_fmt: FxpFormat
    act_fmt: FxpFormat        # output format

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "relu" and self.act_fmt.signed:
            raise ValueError("ReLU outputs use an unsigned format")

    def out_len(self, s: int) -> int:
        n = (s + 2 * self.padding - self.kernel) // self.stride + 1
        if n < 1:
            raise ShapeError(f"input length {s} too short for {self}")
        return n

    @property
    def acc_frac(self) -> int:
        return max(self.in_fmt.frac_bits + self.weight_fmt.frac_bits, self.bias_fmt.frac_bits)

    @property
    def accum_fmt(self) -> FxpFormat:
        bits = (self.in_fmt.total_bits + self.weight_fmt.total_bits
                + math.ceil(math.log2(self.kernel * self.in_ch)) + 1)
        bits = max(bits, self.bias_fmt.total_bits + self.acc_frac - self.bias_fmt.frac_bits + 1)
        return FxpFormat(bits, self.acc_frac, signed=True)


def paper_layers(input_fmt=FxpFormat(10, 8, True), act_bits=10, act_frac=8,
                 weight_bits=6, weight_frac=(5, 4), bias_bits=16, bias_frac=8):
    """The two-layer equalizer. ``weight_frac`` is one value for both layers
    or a pair (layer 1, layer 2)."""
    hidden = FxpFormat(act_bits, act_frac, signed=False)
    out = FxpFormat(act_bits, act_frac, signed=True)
    wf1, wf2 = (weight_frac, weight_frac) if isinstance(weight_frac, int) else weight_frac
    bfmt = FxpFormat(bias_bits, bias_frac, True)
    return (
        ConvSpec(1, 4, 9, 8, 4, "relu", input_fmt, FxpFormat(weight_bits, wf1, True), bfmt, hidden),
        ConvSpec(4, 8, 9, 2, 4, "none", hidden, FxpFormat(weight_bits, wf2, True), bfmt, out),
    )


def tap_index(s_in: int, spec: ConvSpec):
    """Input position read by each (output position, tap) and its validity."""
    s_out = spec.out_len(s_in)
    idx = (np.arange(s_out)[:, None] * spec.stride
           + np.arange(spec.kernel)[None, :] - spec.padding)
    valid = (idx >= 0) & (idx < s_in)
    return np.where(valid, idx, 0), valid


def gather_taps(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """(B, C, S) -> (B, C, S_out, K) with zeros for padded taps."""
    idx, valid = tap_index(x.shape[-1], spec)
    return np.where(valid, x[..., idx], 0)


def _check_input(x: FxpTensor, spec: ConvSpec, weights: FxpTensor, bias: FxpTensor):
    if x.shape[1] != spec.in_ch:
        raise ShapeError(f"expected {spec.in_ch} input channels, got {x.shape[1]}")
    if weights.shape != (spec.in_ch, spec.out_ch, spec.kernel):
        raise ShapeError(f"weight shape {weights.shape} does not match {spec}")
    if bias.shape != (1, spec.out_ch, 1):
        raise ShapeError(f"bias shape {bias.shape} does not match {spec}")


def _bias_term(bias: FxpTensor, spec: ConvSpec) -> np.ndarray:
    return bias.data << (spec.acc_frac - bias.fmt.frac_bits)


def _weight_shift(spec: ConvSpec) -> int:
    return spec.acc_frac - spec.in_fmt.frac_bits - spec.weight_fmt.frac_bits


def finish(acc: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Accumulator (acc_frac) -> activation raw integers."""
    if spec.activation == "relu":
        acc = np.maximum(acc, 0)
    return convert(acc, spec.acc_frac, spec.act_fmt)


def conv1d_accumulate(x: FxpTensor, spec: ConvSpec, weights: FxpTensor,
                      bias: FxpTensor) -> np.ndarray:
    """Exact pre-activation accumulator of one layer (acc_frac fraction bits)."""
    _check_input(x, spec, weights, bias)
    xt = gather_taps(x.data, spec)
    acc = np.einsum("bisk,iok->bos", xt, weights.data)
    return (acc << _weight_shift(spec)) + _bias_term(bias, spec)


def conv1d_forward(x: FxpTensor, spec: ConvSpec, weights: FxpTensor,
                   bias: FxpTensor) -> FxpTensor:
    acc = conv1d_accumulate(x, spec, weights, bias)
    return FxpTensor(finish(acc, spec), spec.act_fmt, check=False)


def batch_parallel_forward(x: FxpTensor, spec: ConvSpec, weights: FxpTensor,
                           bias: FxpTensor, packed: bool = False,
                           counter: Counter | None = None) -> FxpTensor:
    """Weight-reuse schedule: per output position, each weight is fetched once
    and applied to every batch element.

    With ``packed`` the batch is consumed in pairs, one packed multiply per
    (pair, i, o, k, position). ``counter`` tallies ``"mul"``/``"packed_mul"``
    operations and ``"weight_fetch"`` events.
    """
    _check_input(x, spec, weights, bias)
    b, _, s_in = x.shape
    if packed:
        if b % 2:
            raise ShapeError("packed datapath needs an even batch")
        pspec = dsppack.PackedMulSpec(spec.in_fmt.total_bits, spec.weight_fmt.total_bits)
        problems = dsppack.check_mapping_constraints(
            pspec, w_signed=spec.weight_fmt.signed, d_signed=spec.in_fmt.signed)
        if problems:
            raise dsppack.PackingError("; ".join(problems))
    idx, valid = tap_index(s_in, spec)
    s_out = idx.shape[0]
    w = weights.data                                   # (I, O, K)
    acc = np.empty((b, spec.out_ch, s_out), dtype=np.int64)
    n_w = w.size
    for s in range(s_out):
        window = np.where(valid[s], x.data[:, :, idx[s]], 0)     # (B, I, K)
        if counter is not None:
            counter["weight_fetch"] += n_w
        if packed:
            d1 = window[0::2, :, None, :]
            d2 = window[1::2, :, None, :]
            r1, r2 = dsppack.packed_mul_array(d1, d2, w[None], pspec)   # (B/2, I, O, K)
            prod = np.empty((b,) + r1.shape[1:], dtype=np.int64)
            prod[0::2] = r1
            prod[1::2] = r2
            if counter is not None:
                counter["packed_mul"] += r1.size
        else:
            prod = window[:, :, None, :] * w[None]              # (B, I, O, K)
            if counter is not None:
                counter["mul"] += prod.size
        acc[:, :, s] = prod.sum(axis=(1, 3))
    acc = (acc << _weight_shift(spec)) + _bias_term(bias, spec)
    return FxpTensor(finish(acc, spec), spec.act_fmt, check=False)


def flatten_symbols(feat: np.ndarray) -> np.ndarray:
    """(B, O, S') -> (B, 1, S'*O) with symbol index s*O + o."""
    b, o, s = feat.shape
    return feat.transpose(0, 2, 1).reshape(b, 1, s * o)


def unflatten_symbols(z: np.ndarray, out_ch: int) -> np.ndarray:
    b, _, n = z.shape
    return z.reshape(b, n // out_ch, out_ch).transpose(0, 2, 1)


@dataclass
class CnnModel:
    layers: tuple
    master_w: list          # FxpTensor per layer in master_fmt
    master_b: list
    grad_fmt: FxpFormat
    master_fmt: FxpFormat
    packed_layer2: bool = False
    w: list = field(default_factory=list)
    b: list = field(default_factory=list)

    def __post_init__(self):
        if not self.w:
            self.sync()

    def sync(self):
        """Re-derive the inference copies from the master weights."""
        self.w = [requantize(m, spec.weight_fmt) for m, spec in zip(self.master_w, self.layers)]
        self.b = [requantize(m, spec.bias_fmt) for m, spec in zip(self.master_b, self.layers)]

    def copy(self) -> "CnnModel":
        return replace(self, master_w=[t.copy() for t in self.master_w],
                       master_b=[t.copy() for t in self.master_b],
                       w=[t.copy() for t in self.w], b=[t.copy() for t in self.b])

    @property
    def samples_per_pass(self) -> int:
        return math.prod(spec.stride for spec in self.layers)

    def float_params(self, master: bool = False):
        ws = self.master_w if master else self.w
        bs = self.master_b if master else self.b
        return [t.values() for t in ws], [t.values() for t in bs]


GRAD_FMT = FxpFormat(24, 16, True)
LR_FRAC = 20


def master_format(grad_fmt: FxpFormat = GRAD_FMT, lr_frac: int = LR_FRAC) -> FxpFormat:
    """Gradient format widened by the learning-rate fraction bits, so that
    ``lr * grad`` is exact and every SGD step is lossless."""
    return FxpFormat(grad_fmt.total_bits + lr_frac, grad_fmt.frac_bits + lr_frac, True)


def init_model(rng: np.random.Generator, layers=None, grad_fmt=GRAD_FMT,
               lr_frac: int = LR_FRAC, packed_layer2: bool = False,
               bias_init: str = "zero") -> CnnModel:
    """Uniform init in +-1/sqrt(K * I_c) on the master copy.

    Biases start at zero by default; a random negative layer-1 bias tends to
    leave a ReLU channel dead for the whole run. ``bias_init="uniform"``
    draws them like the weights.
    """
    if bias_init not in ("zero", "uniform"):
        raise ValueError(f"unknown bias_init {bias_init!r}")
    layers = layers or paper_layers()
    master_fmt = master_format(grad_fmt, lr_frac)
    master_w, master_b = [], []
    for spec in layers:
        bound = 1.0 / math.sqrt(spec.kernel * spec.in_ch)
        w = rng.uniform(-bound, bound, (spec.in_ch, spec.out_ch, spec.kernel))
        bb = rng.uniform(-bound, bound, (1, spec.out_ch, 1))
        if bias_init == "zero":
            bb = np.zeros_like(bb)
        master_w.append(FxpTensor.from_real(w, master_fmt))
        master_b.append(FxpTensor.from_real(bb, master_fmt))
    return CnnModel(tuple(layers), master_w, master_b, grad_fmt, master_fmt, packed_layer2)


@dataclass
class ForwardTrace:
    """Layer inputs and accumulators kept for the backward pass."""
    inputs: list
    accs: list
    output: FxpTensor


def forward(model: CnnModel, y: FxpTensor, trace: bool = False,
            counter: Counter | None = None):
    b, c, s = y.shape
    step = model.samples_per_pass
    if c != 1 or s % step:
        raise ShapeError(f"input must be B x 1 x S with S a multiple of {step}, got {y.shape}")
    x = y
    inputs, accs = [], []
    last = len(model.layers) - 1
    for li, spec in enumerate(model.layers):
        inputs.append(x)
        if trace:
            acc = conv1d_accumulate(x, spec, model.w[li], model.b[li])
            accs.append(acc)
            x = FxpTensor(finish(acc, spec), spec.act_fmt, check=False)
        else:
            packed = model.packed_layer2 and li == last and b % 2 == 0
            x = batch_parallel_forward(x, spec, model.w[li], model.b[li],
                                       packed=packed, counter=counter)
    out = FxpTensor(flatten_symbols(x.data), x.fmt, check=False)
    if trace:
        return ForwardTrace(inputs, accs, out)
    return out


def equalize(model: CnnModel, y_raw: np.ndarray, fmt: FxpFormat, chunk: int = 1024,
             halo: int = 64) -> np.ndarray:
    """Equalize a 1-D sample stream as a batch of overlapping chunks.

    Each chunk carries ``halo`` samples of context on both sides, so the
    result equals running the whole stream as one sequence, except for the
    first and last few symbols where the zero halo feeds layer 2 with
    ReLU(bias) instead of its zero padding. Returns real equalizer outputs,
    one per symbol.
    """
    step = model.samples_per_pass
    if chunk % step or halo % step:
        raise ShapeError(f"chunk and halo must be multiples of {step}")
    n = len(y_raw)
    if n % step:
        raise ShapeError(f"stream length must be a multiple of {step}")
    n_chunks = -(-n // chunk)
    padded = np.zeros(n_chunks * chunk + 2 * halo, dtype=np.int64)
    padded[halo:halo + n] = y_raw
    starts = np.arange(n_chunks) * chunk
    frames = padded[starts[:, None] + np.arange(chunk + 2 * halo)[None, :]]
    z = forward(model, FxpTensor(frames[:, None, :], fmt, check=False)).values()[:, 0]
    sym_per_sample = z.shape[-1] / (chunk + 2 * halo)
    h_sym = int(halo * sym_per_sample)
    c_sym = int(chunk * sym_per_sample)
    return z[:, h_sym:h_sym + c_sym].reshape(-1)[: int(n * sym_per_sample)]


def decide(z, pam_order: int = 2) -> np.ndarray:
    """Nearest PAM level, ties to the lower level."""
    from .channel import pam_alphabet
    levels = pam_alphabet(pam_order)
    z = np.asarray(z, dtype=np.float64)
    return levels[np.argmin(np.abs(z[..., None] - levels), axis=-1)]


# --- float shadow -----------------------------------------------------------

def conv1d_forward_float(x: np.ndarray, spec: ConvSpec, w: np.ndarray, bias: np.ndarray):
    """Float64 layer forward; returns (pre-activation, output)."""
    pre = np.einsum("bisk,iok->bos", gather_taps(x, spec), w) + bias
    return pre, (np.maximum(pre, 0.0) if spec.activation == "relu" else pre)


def forward_float(layers, ws, bs, y: np.ndarray, trace: bool = False):
    x = y
    inputs, pres = [], []
    for spec, w, bias in zip(layers, ws, bs):
        inputs.append(x)
        pre, x = conv1d_forward_float(x, spec, w, bias)
        pres.append(pre)
    out = flatten_symbols(x)
    if trace:
        return out, inputs, pres
    return out


# --- checkpoints --------------------------------------------------------------

def _fmt_dict(fmt: FxpFormat):
    return {"total_bits": fmt.total_bits, "frac_bits": fmt.frac_bits, "signed": fmt.signed}


def _fmt_from(d) -> FxpFormat:
    return FxpFormat(int(d["total_bits"]), int(d["frac_bits"]), bool(d["signed"]))


def checkpoint_dict(model: CnnModel) -> dict:
    layers = []
    for li, spec in enumerate(model.layers):
        layers.append({
            "in_ch": spec.in_ch, "out_ch": spec.out_ch, "kernel": spec.kernel,
            "stride": spec.stride, "padding": spec.padding, "activation": spec.activation,
            "in_fmt": _fmt_dict(spec.in_fmt), "weight_fmt": _fmt_dict(spec.weight_fmt),
            "bias_fmt": _fmt_dict(spec.bias_fmt), "act_fmt": _fmt_dict(spec.act_fmt),
            "master_w": model.master_w[li].data.reshape(-1).tolist(),
            "master_b": model.master_b[li].data.reshape(-1).tolist(),
            "w": model.w[li].data.reshape(-1).tolist(),
            "b": model.b[li].data.reshape(-1).tolist(),
        })
    return {"format": "eqsim-cnn", "version": CHECKPOINT_VERSION,
            "grad_fmt": _fmt_dict(model.grad_fmt),
            "master_fmt": _fmt_dict(model.master_fmt),
            "packed_layer2": model.packed_layer2, "layers": layers}


def model_from_checkpoint(d: dict) -> CnnModel:
    if d.get("format") != "eqsim-cnn" or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not an eqsim-cnn checkpoint of a supported version")
    grad_fmt = _fmt_from(d["grad_fmt"])
    master_fmt = _fmt_from(d["master_fmt"])
    layers, mw, mb, w, b = [], [], [], [], []
    for L in d["layers"]:
        spec = ConvSpec(L["in_ch"], L["out_ch"], L["kernel"], L["stride"], L["padding"],
                        L["activation"], _fmt_from(L["in_fmt"]), _fmt_from(L["weight_fmt"]),
                        _fmt_from(L["bias_fmt"]), _fmt_from(L["act_fmt"]))
        wshape = (spec.in_ch, spec.out_ch, spec.kernel)
        bshape = (1, spec.out_ch, 1)
        layers.append(spec)
        mw.append(FxpTensor(np.reshape(L["master_w"], wshape), master_fmt))
        mb.append(FxpTensor(np.reshape(L["master_b"], bshape), master_fmt))
        w.append(FxpTensor(np.reshape(L["w"], wshape), spec.weight_fmt))
        b.append(FxpTensor(np.reshape(L["b"], bshape), spec.bias_fmt))
    return CnnModel(tuple(layers), mw, mb, grad_fmt, master_fmt,
                    bool(d["packed_layer2"]), w, b)


def save_checkpoint(model: CnnModel, path):
    with open(path, "w", newline="\n") as fh:
        json.dump(checkpoint_dict(model), fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> CnnModel:
    with open(path) as fh:
        return model_from_checkpoint(json.load(fh))
