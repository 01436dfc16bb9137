"""Audio I/O, band-limiting, and sample-rate conversion.

All filtering is linear-phase FIR (Kaiser windowed sinc) with the group
delay compensated, so every operation here keeps input and output aligned
in time. Rates are restricted to the two the rest of the pipeline uses,
8 kHz and 16 kHz.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve, upfirdn

from .errors import (
    AudioFormatError,
    ConfigError,
    UnsupportedChannelError,
    UnsupportedCodecError,
)

SUPPORTED_RATES = (8000, 16000)

# Kaiser windowed-sinc design shared by the resampler and band_limit.
KAISER_BETA = 8.6
ZERO_CROSSINGS = 64


@dataclass
class Waveform:
    """Mono PCM audio: float samples in [-1, 1] plus a sampling rate in Hz."""

    samples: np.ndarray
    rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise UnsupportedChannelError(
                f"expected mono samples, got shape {self.samples.shape}"
            )
        if self.rate <= 0:
            raise ConfigError(f"sampling rate must be positive, got {self.rate}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ConfigError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class FilterKernel:
    """Linear-phase FIR lowpass: odd-length symmetric taps, unit DC gain."""

    taps: np.ndarray
    cutoff_hz: float
    design_rate: int

    def __post_init__(self) -> None:
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.size % 2 != 1:
            raise ConfigError("filter kernel must have an odd tap count")

    @property
    def half_len(self) -> int:
        return (self.taps.size - 1) // 2


def _kaiser_attenuation_db(beta: float) -> float:
    # Inverse of the Kaiser beta formula for beta > 0.71 (A > 50 dB regime).
    return beta / 0.1102 + 8.7


def design_lowpass(
    cutoff_hz: float,
    rate: int,
    zero_crossings: int = ZERO_CROSSINGS,
    beta: float = KAISER_BETA,
    half_len_multiple: int = 1,
) -> FilterKernel:
    """Design a Kaiser windowed-sinc lowpass whose stopband starts at cutoff_hz.

    The -6 dB point sits half a transition band below cutoff_hz, so energy
    at and above the nominal cutoff is attenuated by the full stopband depth
    (~87 dB for beta 8.6). half_len_multiple rounds the half-length up so the
    group delay divides a downstream decimation factor.
    """
    if not 0 < cutoff_hz < rate / 2:
        raise ConfigError(f"cutoff {cutoff_hz} Hz outside (0, {rate / 2}) for rate {rate}")
    half_len = int(np.ceil(zero_crossings * rate / (2.0 * cutoff_hz)))
    if half_len % half_len_multiple:
        half_len += half_len_multiple - half_len % half_len_multiple
    n_taps = 2 * half_len + 1
    atten = _kaiser_attenuation_db(beta)
    transition_hz = (atten - 7.95) * rate / (2.285 * 2.0 * np.pi * (n_taps - 1))
    fc = cutoff_hz - transition_hz / 2.0
    if fc <= 0:
        raise ConfigError(f"cutoff {cutoff_hz} Hz too low for a {n_taps}-tap kernel")
    t = np.arange(-half_len, half_len + 1, dtype=np.float64)
    taps = (2.0 * fc / rate) * np.sinc(2.0 * fc / rate * t)
    taps *= np.kaiser(n_taps, beta)
    taps /= taps.sum()
    return FilterKernel(taps=taps, cutoff_hz=float(cutoff_hz), design_rate=int(rate))


def read_wav(path) -> Waveform:
    """Read a mono RIFF/WAVE file (PCM16 or IEEE float32) into [-1, 1] floats."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise AudioFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise AudioFormatError(f"{path}: data chunk larger than file")
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or data is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    audio_format, n_channels, rate, _byte_rate, _block_align, bits = fmt
    if n_channels != 1:
        raise UnsupportedChannelError(f"{path}: {n_channels} channels, expected mono")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedCodecError(
            f"{path}: unsupported codec (format={audio_format}, bits={bits})"
        )
    return Waveform(samples=samples, rate=int(rate))


def write_wav(w: Waveform, path) -> None:
    """Write PCM16 little-endian mono; out-of-range samples saturate at full scale."""
    scaled = np.round(w.samples * 32768.0)
    pcm = np.clip(scaled, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.rate)
        fh.writeframes(pcm.tobytes())


def _check_rate(rate: int, name: str) -> None:
    if rate not in SUPPORTED_RATES:
        raise ConfigError(f"{name} {rate} Hz unsupported; expected one of {SUPPORTED_RATES}")


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase windowed-sinc rate conversion between 8 kHz and 16 kHz.

    The anti-alias/anti-image lowpass sits at 0.45x the lower of the two
    rates, leaving a guard band below the lower Nyquist. Output length is
    round(n * target / source); edges see zero-padding.
    """
    _check_rate(w.rate, "source rate")
    _check_rate(target_rate, "target rate")
    if target_rate == w.rate:
        return Waveform(samples=w.samples.copy(), rate=w.rate)

    up = target_rate // np.gcd(target_rate, w.rate)
    down = w.rate // np.gcd(target_rate, w.rate)
    rate_up = w.rate * up
    cutoff = 0.45 * min(w.rate, target_rate)
    kernel = design_lowpass(cutoff, rate_up, half_len_multiple=down)

    n_out = int(np.floor(len(w) * target_rate / w.rate + 0.5))
    if len(w) == 0:
        return Waveform(samples=np.zeros(0), rate=target_rate)

    # Zero-pad the tail so the delay-compensated slice always exists.
    pad = kernel.half_len // up + 2
    x = np.concatenate([w.samples, np.zeros(pad)])
    y = upfirdn(up * kernel.taps, x, up=up, down=down)
    offset = kernel.half_len // down
    out = y[offset : offset + n_out]
    if len(out) < n_out:
        out = np.concatenate([out, np.zeros(n_out - len(out))])
    return Waveform(samples=out, rate=target_rate)


def band_limit(w: Waveform, cutoff_hz: float) -> Waveform:
    """Lowpass in place: same rate and length, >= 40 dB down above cutoff_hz."""
    if not 0 < cutoff_hz < w.rate / 2:
        raise ConfigError(
            f"band_limit cutoff {cutoff_hz} Hz must lie in (0, Nyquist={w.rate / 2})"
        )
    if len(w) == 0:
        return Waveform(samples=w.samples.copy(), rate=w.rate)
    kernel = design_lowpass(cutoff_hz, w.rate)
    out = fftconvolve(w.samples, kernel.taps, mode="full")
    out = out[kernel.half_len : kernel.half_len + len(w)]
    return Waveform(samples=out, rate=w.rate)
