"""Uplink impairments applied to 1-bit gradient reports."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("perfect", "rayleigh", "bitflip")


@dataclass(frozen=True)
class ChannelConfig:
    """Uplink model.

    ``snr_linear`` is P / (B sigma^2); ``bandwidth`` is the number of channel
    uses per report; ``payload_bits`` defaults to the report length.
    """

    mode: str = "perfect"
    snr_linear: float = 1.0
    bandwidth: float = 1.0
    payload_bits: int | None = None
    flip_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown channel mode {self.mode!r}")
        if self.mode == "rayleigh" and not self.snr_linear > 0:
            raise ValueError("snr_linear must be positive")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.payload_bits is not None and self.payload_bits < 0:
            raise ValueError("payload_bits must be non-negative")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ValueError("flip_p must lie in [0, 1]")

    @classmethod
    def from_db(cls, snr_db: float, **kw) -> "ChannelConfig":
        return cls(mode="rayleigh", snr_linear=db_to_linear(snr_db), **kw)


def db_to_linear(db: float) -> float:
    return float(10.0 ** (db / 10.0))


@dataclass(frozen=True)
class ChannelOutcome:
    delivered: bool
    signs: np.ndarray


def device_streams(cfg: ChannelConfig, n: int):
    """Independent generators, one per device, derived from ``cfg.seed``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(n)]


def outage_prob(cfg: ChannelConfig, payload_bits: int | None = None) -> float:
    """P[d > B log2(1 + |h|^2 SNR)] for |h|^2 ~ Exp(1)."""
    if cfg.mode != "rayleigh":
        raise ValueError(f"outage probability is defined for rayleigh mode, not {cfg.mode!r}")
    d = cfg.payload_bits if payload_bits is None else payload_bits
    if d is None:
        raise ValueError("payload size is unknown")
    return float(-np.expm1(-np.expm1(d / cfg.bandwidth * np.log(2.0)) / cfg.snr_linear))


def delivered_draws(cfg: ChannelConfig, payload_bits: int, rng, size=None):
    """Fading draws: True where the payload fits the instantaneous capacity."""
    gain = rng.exponential(1.0, size=size)
    return payload_bits <= cfg.bandwidth * np.log2(1.0 + gain * cfg.snr_linear)


def transmit(signs, cfg: ChannelConfig, rng) -> ChannelOutcome:
    signs = np.asarray(signs, dtype=np.int8)
    if cfg.mode == "perfect":
        return ChannelOutcome(True, signs)
    if cfg.mode == "rayleigh":
        d = signs.size if cfg.payload_bits is None else cfg.payload_bits
        ok = bool(delivered_draws(cfg, d, rng))
        return ChannelOutcome(ok, signs if ok else np.zeros_like(signs))
    flips = rng.random(signs.shape) < cfg.flip_p
    return ChannelOutcome(True, np.where(flips, -signs, signs).astype(np.int8))
