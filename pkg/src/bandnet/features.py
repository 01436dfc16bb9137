"""Log-mel filterbank front end with context stacking.

Both bandwidths produce the same feature geometry (T x 40 by default), which
is what lets a single network consume mixed-rate corpora. Narrowband files
processed at their native rate get a 0-4 kHz bank; wideband files get a
0-8 kHz bank; the upsample-to-16k scenario converts narrowband audio first
and reuses the wideband bank.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigError, DataError

FRAME_MS = 25.0
HOP_MS = 10.0
PREEMPHASIS = 0.97
LOG_FLOOR = 1e-10
N_MELS = 40
CONTEXT_FRAMES = 10

# FFT sizes per sampling rate; the 25 ms frame fits in both.
N_FFT = {8000: 256, 16000: 512}

WIDEBAND = 0
NARROWBAND = 1

SCENARIO_NATIVE = "native"
SCENARIO_UPSAMPLE = "upsample16k"
SCENARIOS = (SCENARIO_NATIVE, SCENARIO_UPSAMPLE)

_FEATURE_MAGIC = b"BNFT"
_FEATURE_VERSION = 1
_SCENARIO_CODES = {None: 0, SCENARIO_NATIVE: 1, SCENARIO_UPSAMPLE: 2}
_SCENARIO_NAMES = {v: k for k, v in _SCENARIO_CODES.items()}


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class MelBank:
    """Triangular filters spaced uniformly on the mel scale."""

    weights: np.ndarray  # (n_filters, n_fft // 2 + 1)
    rate: int
    fmin: float
    fmax: float
    n_filters: int
    center_hz: np.ndarray = field(repr=False, default=None)

    @property
    def n_fft(self) -> int:
        return (self.weights.shape[1] - 1) * 2


@dataclass
class FeatureTensor:
    """Per-utterance feature matrix plus its bandwidth flag.

    labels is the optional per-frame class-index vector carried alongside the
    frames through feature files.
    """

    frames: np.ndarray  # (T, D)
    bandwidth: int
    utterance_id: str = ""
    labels: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class ContextWindow:
    """A (2k+1) x D patch centered on one frame."""

    patch: np.ndarray
    label: int | None = None


def frame_signal(w: dsp.Waveform, frame_ms: float = FRAME_MS, hop_ms: float = HOP_MS) -> np.ndarray:
    """Slice into overlapping frames, pre-emphasize within each, apply Hamming.

    Pre-emphasis keeps each frame's first sample unmodified and filters the
    rest (x[t] - 0.97 x[t-1]).
    """
    frame_len = int(round(w.rate * frame_ms / 1000.0))
    hop = int(round(w.rate * hop_ms / 1000.0))
    n = len(w)
    if n < frame_len:
        raise DataError(
            f"signal of {n} samples shorter than one {frame_len}-sample frame"
        )
    n_frames = 1 + (n - frame_len) // hop
    idx = hop * np.arange(n_frames)[:, None] + np.arange(frame_len)[None, :]
    frames = w.samples[idx]
    emphasized = np.empty_like(frames)
    emphasized[:, 0] = frames[:, 0]
    emphasized[:, 1:] = frames[:, 1:] - PREEMPHASIS * frames[:, :-1]
    return emphasized * np.hamming(frame_len)


def mel_filterbank(
    n_fft: int, rate: int, n_filters: int = N_MELS, fmin: float = 0.0, fmax: float | None = None
) -> MelBank:
    """Build triangular mel filters over the rfft bins of an n_fft transform."""
    if fmax is None:
        fmax = rate / 2.0
    if fmax > rate / 2.0:
        raise ConfigError(f"fmax {fmax} Hz above Nyquist {rate / 2} Hz")
    if not 0 <= fmin < fmax:
        raise ConfigError(f"need 0 <= fmin < fmax, got fmin={fmin} fmax={fmax}")
    if n_filters < 1:
        raise ConfigError("n_filters must be >= 1")
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_hz = np.arange(n_fft // 2 + 1) * rate / n_fft
    lower = hz_pts[:-2][:, None]
    center = hz_pts[1:-1][:, None]
    upper = hz_pts[2:][:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return MelBank(
        weights=weights,
        rate=int(rate),
        fmin=float(fmin),
        fmax=float(fmax),
        n_filters=int(n_filters),
        center_hz=hz_pts[1:-1].copy(),
    )


@lru_cache(maxsize=None)
def bank_for_rate(rate: int, n_filters: int = N_MELS) -> MelBank:
    """The native-rate bank: 0-4 kHz at 8 kHz input, 0-8 kHz at 16 kHz."""
    if rate not in N_FFT:
        raise ConfigError(f"no default filterbank for rate {rate}")
    return mel_filterbank(N_FFT[rate], rate, n_filters, fmin=0.0, fmax=rate / 2.0)


def log_mel(
    w: dsp.Waveform,
    bank: MelBank,
    utterance_id: str = "",
    bandwidth: int | None = None,
    normalize: bool = True,
) -> FeatureTensor:
    """Log mel filterbank energies, mean/variance normalized per utterance."""
    if bank.rate != w.rate:
        raise ConfigError(f"bank rate {bank.rate} != waveform rate {w.rate}")
    frames = frame_signal(w)
    spectrum = np.abs(np.fft.rfft(frames, n=bank.n_fft, axis=1)) ** 2
    mel = spectrum @ bank.weights.T
    feats = np.log(np.maximum(mel, LOG_FLOOR))
    if normalize:
        mean = feats.mean(axis=0)
        var = feats.var(axis=0)
        feats = (feats - mean) / np.sqrt(np.maximum(var, 1e-12))
    if bandwidth is None:
        bandwidth = NARROWBAND if w.rate == 8000 else WIDEBAND
    return FeatureTensor(frames=feats, bandwidth=bandwidth, utterance_id=utterance_id)


def stack_context(f: FeatureTensor | np.ndarray, k: int = CONTEXT_FRAMES) -> np.ndarray:
    """One (2k+1) x D window per frame; edges replicate the first/last frame.

    Returns an array of shape (T, 2k+1, D).
    """
    frames = f.frames if isinstance(f, FeatureTensor) else np.asarray(f)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DataError(f"expected a non-empty (T, D) matrix, got shape {frames.shape}")
    padded = pad_for_context(frames, k)
    view = np.lib.stride_tricks.sliding_window_view(padded, 2 * k + 1, axis=0)
    return np.ascontiguousarray(view.transpose(0, 2, 1))


def pad_for_context(frames: np.ndarray, k: int = CONTEXT_FRAMES) -> np.ndarray:
    """Replicate-pad k frames on each side; window t is padded[t:t+2k+1]."""
    return np.concatenate(
        [np.repeat(frames[:1], k, axis=0), frames, np.repeat(frames[-1:], k, axis=0)]
    )


def context_windows(f: FeatureTensor, k: int = CONTEXT_FRAMES) -> list[ContextWindow]:
    """stack_context paired with the utterance's labels, one window per frame."""
    stacked = stack_context(f, k)
    labels = f.labels if f.labels is not None else [None] * len(stacked)
    return [ContextWindow(patch=p, label=l) for p, l in zip(stacked, labels)]


def featurize_utterance(
    w: dsp.Waveform,
    scenario: str = SCENARIO_NATIVE,
    utterance_id: str = "",
    bandwidth: int | None = None,
    n_filters: int = N_MELS,
) -> FeatureTensor:
    """Featurize per scenario, preserving the manifest's bandwidth flag.

    native: each rate uses its own full-span bank. upsample16k: 8 kHz audio is
    converted to 16 kHz first and shares the wideband bank.
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown feature scenario {scenario!r}; expected {SCENARIOS}")
    inferred = NARROWBAND if w.rate == 8000 else WIDEBAND
    if bandwidth is None:
        bandwidth = inferred
    elif bandwidth != inferred:
        raise DataError(
            f"{utterance_id or 'utterance'}: manifest bandwidth {bandwidth} "
            f"inconsistent with {w.rate} Hz audio"
        )
    if scenario == SCENARIO_UPSAMPLE and w.rate == 8000:
        w = dsp.resample(w, 16000)
    return log_mel(w, bank_for_rate(w.rate, n_filters), utterance_id, bandwidth)


# ---------------------------------------------------------------------------
# Feature file format ("BNFT") and corpus manifest
# ---------------------------------------------------------------------------


def write_features(path, tensors: list[FeatureTensor], scenario: str | None = None) -> None:
    """Serialize utterance features (and labels when present) to one file."""
    has_labels = all(t.labels is not None for t in tensors) and bool(tensors)
    flags = (1 if has_labels else 0) | (_SCENARIO_CODES[scenario] << 1)
    buf = io.BytesIO()
    buf.write(_FEATURE_MAGIC)
    buf.write(struct.pack("<IBI", _FEATURE_VERSION, flags, len(tensors)))
    for t in tensors:
        ident = t.utterance_id.encode("utf-8")
        frames = np.ascontiguousarray(t.frames, dtype="<f4")
        buf.write(struct.pack("<I", len(ident)))
        buf.write(ident)
        buf.write(struct.pack("<BII", t.bandwidth, frames.shape[0], frames.shape[1]))
        buf.write(frames.tobytes())
        if has_labels:
            labels = np.ascontiguousarray(t.labels, dtype="<u4")
            if labels.shape[0] != frames.shape[0]:
                raise DataError(
                    f"{t.utterance_id}: {labels.shape[0]} labels for {frames.shape[0]} frames"
                )
            buf.write(labels.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_features(path) -> tuple[list[FeatureTensor], str | None]:
    """Read a feature file; returns (tensors, scenario tag or None)."""
    raw = Path(path).read_bytes()
    if len(raw) < 13 or raw[:4] != _FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file")
    version, flags, n_records = struct.unpack_from("<IBI", raw, 4)
    if version != _FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    has_labels = bool(flags & 1)
    scenario = _SCENARIO_NAMES.get(flags >> 1)
    pos = 13
    out = []
    try:
        for _ in range(n_records):
            (id_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            ident = raw[pos : pos + id_len].decode("utf-8")
            pos += id_len
            bandwidth, n_frames, dim = struct.unpack_from("<BII", raw, pos)
            pos += 9
            n_bytes = n_frames * dim * 4
            frames = np.frombuffer(raw, dtype="<f4", count=n_frames * dim, offset=pos)
            frames = frames.reshape(n_frames, dim).astype(np.float64)
            pos += n_bytes
            labels = None
            if has_labels:
                labels = np.frombuffer(raw, dtype="<u4", count=n_frames, offset=pos)
                labels = labels.astype(np.int64)
                pos += n_frames * 4
            out.append(FeatureTensor(frames, int(bandwidth), ident, labels))
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated feature file") from exc
    return out, scenario


@dataclass
class ManifestEntry:
    wav_path: Path
    bandwidth: int
    label_path: Path

    @property
    def utterance_id(self) -> str:
        return self.wav_path.stem


def read_manifest(path) -> list[ManifestEntry]:
    """Parse tab-separated manifest lines; paths resolve relative to the file."""
    base = Path(path).parent
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        wav, bw, labels = parts
        if bw not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: bandwidth flag must be 0 or 1, got {bw!r}")
        entries.append(ManifestEntry(base / wav, int(bw), base / labels))
    return entries


def write_manifest(path, entries: list[tuple[str, int, str]]) -> None:
    """Write (wav_path, bandwidth, label_path) rows relative to the manifest."""
    lines = [f"{wav}\t{bw}\t{lab}" for wav, bw, lab in entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_labels(path) -> np.ndarray:
    """Label file: one class index per line, one line per 10 ms frame."""
    text = Path(path).read_text().split()
    return np.array([int(tok) for tok in text], dtype=np.int64)


def _featurize_entry(args) -> FeatureTensor:
    entry, scenario = args
    from .errors import BandnetError

    try:
        w = dsp.read_wav(entry.wav_path)
        t = featurize_utterance(w, scenario, entry.utterance_id, entry.bandwidth)
        t.labels = read_labels(entry.label_path)
    except (BandnetError, OSError, ValueError) as exc:
        raise DataError(f"{entry.utterance_id}: {exc}") from exc
    if len(t.labels) != t.n_frames:
        raise DataError(
            f"{entry.utterance_id}: {len(t.labels)} labels for {t.n_frames} frames"
        )
    return t


def featurize_manifest(manifest_path, scenario: str, jobs: int = 1) -> list[FeatureTensor]:
    """Featurize every manifest entry (with labels), optionally in parallel.

    Output order follows the manifest regardless of job count, and any failure
    is reported with the offending utterance id.
    """
    entries = read_manifest(manifest_path)
    args = [(e, scenario) for e in entries]
    if jobs > 1 and len(entries) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_featurize_entry, args, chunksize=16))
    return [_featurize_entry(a) for a in args]
