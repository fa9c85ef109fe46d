"""IM/DD optical link: PAM source, RC pulse shaping, chromatic dispersion,
square-law detection and additive Gaussian receiver noise."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fxp import FxpFormat, quantize_array

SPEED_OF_LIGHT = 299_792_458.0  # m/s
RC_SPAN_SYMBOLS = 16

# network input: signed 10 bit, 8 fraction bits
DEFAULT_INPUT_FMT = FxpFormat(10, 8, signed=True)


@dataclass(frozen=True)
class ChannelConfig:
    lam: float = 1550e-9            # wavelength, m
    fiber_km: float = 35.0
    dcd: float = 17.0               # ps / (nm km)
    alpha_db_km: float = 0.2
    baud: float = 20e9
    n_os: int = 2
    snr_db: float = 15.0
    pam_order: int = 2
    rolloff: float = 0.2
    rx_gain: float | None = None    # None: normalize mean intensity to rx_mean
    rx_mean: float = 0.5
    ac_couple: bool = True          # remove the mean intensity before the ADC
    seed: int = 0

    def __post_init__(self):
        if self.fiber_km < 0:
            raise ValueError("fiber_km must be >= 0")
        if self.baud <= 0:
            raise ValueError("baud must be > 0")
        if self.n_os < 1:
            raise ValueError("n_os must be >= 1")
        if self.pam_order not in (2, 4):
            raise ValueError("pam_order must be 2 or 4")
        if not 0 <= self.rolloff <= 1:
            raise ValueError("rolloff must be in [0, 1]")

    @property
    def sample_rate(self) -> float:
        return self.baud * self.n_os


@dataclass
class TxFrame:
    symbols: np.ndarray
    samples: np.ndarray


@dataclass
class RxFrame:
    y: np.ndarray           # raw integers in `fmt`, sample 2k belongs to symbol k
    truth: np.ndarray
    fmt: FxpFormat = DEFAULT_INPUT_FMT

    def __post_init__(self):
        if len(self.truth) == 0 or len(self.y) % len(self.truth):
            raise ValueError("y length must be a positive multiple of the symbol count")

    @property
    def n_os(self) -> int:
        return len(self.y) // len(self.truth)

    def values(self) -> np.ndarray:
        return self.y.astype(np.float64) * self.fmt.ulp


def make_rng(seed, *path):
    """Counter-based generator for ``seed`` and an optional stream path."""
    ss = np.random.SeedSequence([int(seed), *map(int, path)])
    return np.random.Generator(np.random.Philox(ss))


def pam_alphabet(order: int) -> np.ndarray:
    levels = np.arange(order, dtype=np.float64)
    return levels / math.sqrt(np.mean(levels ** 2))


def gen_symbols(n: int, cfg: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    if n <= 0:
        raise ValueError("n must be positive")
    alphabet = pam_alphabet(cfg.pam_order)
    return alphabet[rng.integers(0, cfg.pam_order, n)]


def rc_pulse(t, rolloff: float) -> np.ndarray:
    """Raised-cosine pulse at times ``t`` in symbol periods (peak 1)."""
    t = np.asarray(t, dtype=np.float64)
    out = np.sinc(t)
    if rolloff > 0:
        denom = 1.0 - (2.0 * rolloff * t) ** 2
        sing = np.isclose(denom, 0.0, atol=1e-12)
        safe = np.where(sing, 1.0, denom)
        out = np.where(sing, np.pi / 4 * np.sinc(1.0 / (2.0 * rolloff)),
                       out * np.cos(np.pi * rolloff * t) / safe)
    return out


def rc_taps(cfg: ChannelConfig, span: int = RC_SPAN_SYMBOLS) -> np.ndarray:
    """Unit-energy RC taps at ``n_os`` samples/symbol over +-``span`` symbols."""
    t = np.arange(-span * cfg.n_os, span * cfg.n_os + 1) / cfg.n_os
    h = rc_pulse(t, cfg.rolloff)
    return h / np.sqrt(np.sum(h ** 2))


def pulse_shape(symbols, cfg: ChannelConfig) -> np.ndarray:
    symbols = np.asarray(symbols, dtype=np.float64)
    up = np.zeros(len(symbols) * cfg.n_os)
    up[::cfg.n_os] = symbols
    h = rc_taps(cfg)
    delay = (len(h) - 1) // 2
    return np.convolve(up, h)[delay:delay + len(up)]


def beta2(cfg: ChannelConfig) -> float:
    """Group-velocity dispersion in s^2/m."""
    d_si = cfg.dcd * 1e-12 / (1e-9 * 1e3)   # ps/(nm km) -> s/m^2
    return -cfg.lam ** 2 * d_si / (2 * math.pi * SPEED_OF_LIGHT)


def cd_response(f, cfg: ChannelConfig):
    """Fiber frequency response at frequency ``f`` (Hz, scalar or array)."""
    length = cfg.fiber_km * 1e3
    alpha_np = cfg.alpha_db_km * math.log(10) / 10 / 1e3   # 1/m
    f = np.asarray(f, dtype=np.float64)
    if length == 0:
        return np.ones_like(f, dtype=np.complex128)
    return np.exp(-0.5 * alpha_np * length
                  + 1j * 2 * math.pi ** 2 * beta2(cfg) * f ** 2 * length)


def apply_cd(samples, cfg: ChannelConfig) -> np.ndarray:
    samples = np.asarray(samples)
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    if cfg.fiber_km == 0:
        return samples.astype(np.complex128)
    f = np.fft.fftfreq(len(samples), d=1.0 / cfg.sample_rate)
    return np.fft.ifft(np.fft.fft(samples) * cd_response(f, cfg))


def square_law(x) -> np.ndarray:
    x = np.asarray(x)
    return x.real ** 2 + x.imag ** 2


def noise_variance(signal, snr_db: float) -> float:
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    p_sig = float(np.mean(np.asarray(signal, dtype=np.float64) ** 2))
    return p_sig / 10 ** (snr_db / 10)


def add_awgn(samples, cfg: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty signal")
    var = noise_variance(samples, cfg.snr_db)
    if var == 0.0:
        return samples.copy()
    return samples + rng.normal(0.0, math.sqrt(var), samples.shape)


def receiver_gain(cfg: ChannelConfig) -> float:
    """Fixed receiver gain mapping the mean detected intensity to ``rx_mean``.

    The mean intensity is deterministic: CD and attenuation act linearly on
    the field, so E|x~|^2 = |H|^2 * E[x^2] * (sum of squared taps at symbol
    spacing) averaged over the ``n_os`` sample phases.
    """
    if cfg.rx_gain is not None:
        return cfg.rx_gain
    h = rc_taps(cfg)
    alphabet = pam_alphabet(cfg.pam_order)
    mean_sym = alphabet.mean()
    var_sym = alphabet.var()
    centre = (len(h) - 1) // 2
    mean_sq = 0.0
    for phase in range(cfg.n_os):
        taps = h[(centre + phase) % cfg.n_os::cfg.n_os]
        mean_sq += var_sym * np.sum(taps ** 2) + (mean_sym * np.sum(taps)) ** 2
    mean_sq /= cfg.n_os
    atten = abs(complex(cd_response(0.0, cfg))) ** 2
    return cfg.rx_mean / (mean_sq * atten)


def simulate(n_symbols: int, cfg: ChannelConfig, rng: np.random.Generator,
             fmt: FxpFormat = DEFAULT_INPUT_FMT) -> tuple[TxFrame, RxFrame]:
    if n_symbols < 64:
        raise ValueError("simulate needs at least 64 symbols")
    x = gen_symbols(n_symbols, cfg, rng)
    shaped = pulse_shape(x, cfg)
    detected = square_law(apply_cd(shaped, cfg))
    noisy = add_awgn(detected, cfg, rng)
    scaled = noisy * receiver_gain(cfg)
    if cfg.ac_couple:
        scaled = scaled - (cfg.rx_mean if cfg.rx_gain is None else float(np.mean(scaled)))
    y = quantize_array(scaled, fmt)
    return TxFrame(x, shaped), RxFrame(y, x.copy(), fmt)
