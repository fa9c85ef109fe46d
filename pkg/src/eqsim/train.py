"""Fixed-point supervised training: MSE loss, backward pass through both
convolution layers, ReLU gating and plain SGD on the master weights.

The float64 shadow functions at the bottom compute the same gradients
without quantization and serve as the verification reference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cnn import (CnnModel, ConvSpec, ForwardTrace, ShapeError, forward, forward_float,
                  gather_taps, tap_index, unflatten_symbols)
from .fxp import FxpFormat, FxpTensor, convert, quantize_array, saturate


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    seq_len: int = 512
    loss: str = "mse"
    reduction: str = "sum"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.seq_len <= 0 or self.seq_len % 8:
            raise ValueError("seq_len must be a positive multiple of 8")
        if self.loss != "mse":
            raise ValueError("only the mse loss is implemented")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")


@dataclass
class GradSet:
    dW: list
    dB: list
    dX: list

    def copy(self) -> "GradSet":
        return GradSet([t.copy() for t in self.dW], [t.copy() for t in self.dB],
                       [t.copy() for t in self.dX])


def mse_loss(z: FxpTensor, x_ref, grad_fmt: FxpFormat, reduction: str = "sum"):
    """Mean squared error and its gradient in ``grad_fmt``.

    The reported loss is always the mean. The gradient is ``2 (z - x)`` for
    ``reduction="sum"`` (what a streaming accumulator produces) and
    ``2 (z - x) / N`` for ``"mean"``.
    """
    zv = z.values()
    x_ref = np.asarray(x_ref, dtype=np.float64).reshape(zv.shape)
    if zv.size == 0:
        raise ShapeError("empty loss input")
    err = zv - x_ref
    loss = float(np.mean(err ** 2))
    scale = 2.0 / err.size if reduction == "mean" else 2.0
    dz = FxpTensor(quantize_array(scale * err, grad_fmt), grad_fmt, check=False)
    return loss, dz


def relu_backward(pre_act, dy: FxpTensor) -> FxpTensor:
    pre_act = np.asarray(pre_act)
    if pre_act.shape != dy.shape:
        raise ShapeError(f"shape mismatch {pre_act.shape} vs {dy.shape}")
    return FxpTensor(np.where(pre_act > 0, dy.data, 0), dy.fmt, check=False)


def _transposed_taps(dy: np.ndarray, spec: ConvSpec, s_in: int) -> np.ndarray:
    """Windows of the stride-dilated, padded output gradient.

    Returns (B, O, s_in, K) with window ``t`` aligned to the flipped kernel,
    so ``dx[t] = sum_{o,j} win[o, t, j] * W[i, o, K-1-j]``.
    """
    b, o, s_out = dy.shape
    dilated_len = (s_out - 1) * spec.stride + 1
    left = spec.kernel - 1 - spec.padding
    right = s_in - 1 + spec.padding - (s_out - 1) * spec.stride
    if left < 0 or right < 0:
        raise ShapeError("transposed convolution needs non-negative padding")
    buf = np.zeros((b, o, left + dilated_len + right), dtype=dy.dtype)
    buf[:, :, left:left + dilated_len:spec.stride] = dy
    return sliding_window_view(buf, spec.kernel, axis=-1)[:, :, :s_in]


def boundary_format(grad_fmt: FxpFormat, spec: ConvSpec) -> FxpFormat:
    """Format of the input gradient passed to the previous layer.

    It keeps the fraction bits of ``dY * W`` so the hand-over is lossless
    (short of saturation); rounding it to the gradient format would let the
    rounding errors pile up in the layer-1 sums.
    """
    extra = spec.weight_fmt.frac_bits
    return FxpFormat(grad_fmt.total_bits + extra, grad_fmt.frac_bits + extra, True)


def conv1d_backward(x_saved: FxpTensor, dy: FxpTensor, spec: ConvSpec,
                    weights: FxpTensor, grad_fmt: FxpFormat | None = None,
                    dx_fmt: FxpFormat | None = None):
    """Gradients of one layer with respect to weights, bias and input.

    ``dx`` is the transposed convolution: the output gradient is dilated by
    the stride, padded with ``K - 1 - P`` zeros in front and correlated with
    the flipped kernel. ``dW`` and ``dB`` are rounded once into ``grad_fmt``,
    ``dx`` into ``dx_fmt`` (default: ``grad_fmt``).
    """
    grad_fmt = grad_fmt or dy.fmt
    dx_fmt = dx_fmt or grad_fmt
    b, i_c, s_in = x_saved.shape
    if i_c != spec.in_ch or dy.shape != (b, spec.out_ch, spec.out_len(s_in)):
        raise ShapeError(f"gradient shape {dy.shape} does not match input {x_saved.shape}")
    xt = gather_taps(x_saved.data, spec)
    dw_acc = np.einsum("bisk,bos->iok", xt, dy.data)
    dW = convert(dw_acc, x_saved.fmt.frac_bits + dy.fmt.frac_bits, grad_fmt)
    dB = convert(dy.data.sum(axis=(0, 2)).reshape(1, -1, 1), dy.fmt.frac_bits, grad_fmt)
    win = _transposed_taps(dy.data, spec, s_in)
    dx_acc = np.einsum("botj,ioj->bit", win, weights.data[:, :, ::-1])
    dx = convert(dx_acc, dy.fmt.frac_bits + weights.fmt.frac_bits, dx_fmt)
    return (FxpTensor(dW, grad_fmt, check=False), FxpTensor(dB, grad_fmt, check=False),
            FxpTensor(dx, dx_fmt, check=False))


def backward(model: CnnModel, trace: ForwardTrace, dz: FxpTensor) -> GradSet:
    n_layers = len(model.layers)
    dy = FxpTensor(unflatten_symbols(dz.data, model.layers[-1].out_ch), dz.fmt, check=False)
    dW, dB, dX = [None] * n_layers, [None] * n_layers, [None] * n_layers
    for li in reversed(range(n_layers)):
        spec = model.layers[li]
        if spec.activation == "relu":
            dy = relu_backward(trace.accs[li], dy)
        dW[li], dB[li], dX[li] = conv1d_backward(
            trace.inputs[li], dy, spec, model.w[li], model.grad_fmt,
            boundary_format(model.grad_fmt, spec))
        dy = dX[li]
    return GradSet(dW, dB, dX)


def compute_gradients(model: CnnModel, y: FxpTensor, x_ref, reduction: str = "sum"):
    """Forward, loss and backward on one training slice. Returns (loss, GradSet)."""
    trace = forward(model, y, trace=True)
    loss, dz = mse_loss(trace.output, x_ref, model.grad_fmt, reduction)
    return loss, backward(model, trace, dz)


def lr_raw(lr: float, model: CnnModel) -> int:
    """Learning rate as an unsigned constant with the master's extra fraction bits."""
    lr_frac = model.master_fmt.frac_bits - model.grad_fmt.frac_bits
    raw = round(lr * (1 << lr_frac))
    if lr > 0 and raw == 0:
        raise ValueError(f"learning rate {lr} underflows {lr_frac} fraction bits")
    return raw


def sgd_update(model: CnnModel, grads: GradSet, lr: float) -> CnnModel:
    """master <- master - lr * grad, saturating; in place, returns the model."""
    rate = lr_raw(lr, model)
    fmt = model.master_fmt
    for li in range(len(model.layers)):
        for master, g in ((model.master_w[li], grads.dW[li]), (model.master_b[li], grads.dB[li])):
            if g.shape != master.shape:
                raise ShapeError(f"gradient shape {g.shape} != weight shape {master.shape}")
            # lr_raw * g_raw carries exactly fmt.frac_bits fraction bits
            master.data = saturate(master.data - rate * g.data, fmt)
    model.sync()
    return model


def parallel_round_update(model: CnnModel, grad_sets, lr: float) -> CnnModel:
    """Apply every instance's gradient, all computed on the same snapshot,
    in instance order."""
    for g in grad_sets:
        sgd_update(model, g, lr)
    return model


# --- float shadow -------------------------------------------------------------

def conv1d_backward_float(x: np.ndarray, dy: np.ndarray, spec: ConvSpec, w: np.ndarray):
    """Float64 gradients of one layer; ``dx`` by scatter over the forward taps."""
    xt = gather_taps(x, spec)
    dW = np.einsum("bisk,bos->iok", xt, dy)
    dB = dy.sum(axis=(0, 2)).reshape(1, -1, 1)
    contrib = np.einsum("bos,iok->bisk", dy, w)
    idx, valid = tap_index(x.shape[-1], spec)
    dx = np.zeros_like(x, dtype=np.float64)
    for k in range(spec.kernel):
        m = valid[:, k]
        dx[:, :, idx[m, k]] += contrib[:, :, m, k]
    return dW, dB, dx


def backward_float(layers, ws, inputs, pres, dz: np.ndarray):
    dy = unflatten_symbols(dz, layers[-1].out_ch)
    n = len(layers)
    dW, dB, dX = [None] * n, [None] * n, [None] * n
    for li in reversed(range(n)):
        if layers[li].activation == "relu":
            dy = np.where(pres[li] > 0, dy, 0.0)
        dW[li], dB[li], dX[li] = conv1d_backward_float(inputs[li], dy, layers[li], ws[li])
        dy = dX[li]
    return dW, dB, dX


def loss_float(layers, ws, bs, y: np.ndarray, x_ref) -> float:
    z = forward_float(layers, ws, bs, y)
    return float(np.mean((z - np.reshape(x_ref, z.shape)) ** 2))


def gradients_float(layers, ws, bs, y: np.ndarray, x_ref, reduction: str = "mean"):
    z, inputs, pres = forward_float(layers, ws, bs, y, trace=True)
    err = z - np.reshape(x_ref, z.shape)
    scale = 2.0 / err.size if reduction == "mean" else 2.0
    return backward_float(layers, ws, inputs, pres, scale * err)


def shadow_gradients(model: CnnModel, trace: ForwardTrace, dz: FxpTensor):
    """Float gradients fed with exactly the fixed-point forward state."""
    ws = [t.values() for t in model.w]
    inputs = [t.values() for t in trace.inputs]
    pres = [a.astype(np.float64) for a in trace.accs]
    return backward_float(model.layers, ws, inputs, pres, dz.values())
