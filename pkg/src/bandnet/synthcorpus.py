"""Deterministic two-bandwidth synthetic corpus.

Each class is a spectral envelope; segments are envelope-shaped noise. Two
class pairs share their sub-4 kHz envelope and differ only above 4 kHz, so
they are separable in wideband audio but collapse to coin flips once a
recording is band-limited to telephone bandwidth. Narrowband utterances are
rendered at 16 kHz, band-limited to 3.4 kHz, and decimated to 8 kHz.

Waveforms are a pure function of (class sequence, segment durations, seed),
so regeneration is bit-identical and generation parallelizes per utterance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp, features
from .errors import ConfigError

SYNTH_RATE = 16000
NB_CUTOFF_HZ = 3400.0
ENVELOPE_FLOOR = 1e-4  # -40 dB broadband floor under every class envelope


@dataclass
class PhoneClass:
    """A class-conditional spectral envelope: (center_hz, fwhm_hz, gain) peaks.

    table, when set, overrides the peak list with a tabulated PSD (freqs_hz,
    psd); it is used for classes whose envelope is constructed numerically.
    """

    id: int
    envelope: list[tuple[float, float, float]]
    needs_highband: bool = False
    table: tuple[np.ndarray, np.ndarray] | None = None


@dataclass
class CorpusSpec:
    n_classes: int = 8
    n_confusable_pairs: int = 2
    n_train_utts: int = 600
    train_wb_fraction: float = 0.85
    n_test_wb: int = 60
    n_test_nb: int = 40
    utt_seconds: tuple[float, float] = (1.0, 3.0)
    segment_seconds: tuple[float, float] = (0.08, 0.3)
    noise_snr_db: float = 20.0
    seed: int = 0
    classes: list[PhoneClass] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.train_wb_fraction < 1.0:
            raise ConfigError("train_wb_fraction must be in (0, 1)")
        if not self.classes:
            self.classes = default_classes(self.n_classes, self.n_confusable_pairs)
        if len(self.classes) != self.n_classes:
            raise ConfigError(
                f"{len(self.classes)} classes given for n_classes={self.n_classes}"
            )

    @property
    def n_train_wb(self) -> int:
        return round(self.n_train_utts * self.train_wb_fraction)

    @property
    def n_train_nb(self) -> int:
        return self.n_train_utts - self.n_train_wb


def _coord_to_hz(q: float) -> float:
    """Map a wideband mel-bank coordinate (fraction of the 0-8 kHz mel span)
    back to Hz."""
    from .features import hz_to_mel, mel_to_hz

    return float(mel_to_hz(q * hz_to_mel(8000.0)))


def default_classes(n_classes: int = 8, n_pairs: int = 2) -> list[PhoneClass]:
    """The standard class inventory: colliding low-band pairs plus high-band pairs.

    Low-band classes come in swapped couples engineered so that the narrowband
    rendering of one lands on the same mel dimensions (position and width) as
    the wideband rendering of the other: without the bandwidth flag those
    feature vectors are ambiguous. The last 2*n_pairs classes share their
    sub-4 kHz envelope pairwise and differ only above 4 kHz, so narrowband
    capture reduces each pair to a coin flip.
    """
    if n_classes < 1 or n_classes < 2 * n_pairs:
        raise ConfigError(f"cannot build {n_classes} classes with {n_pairs} pairs")
    from .features import hz_to_mel

    ratio = float(hz_to_mel(8000.0) / hz_to_mel(4000.0))
    n_plain = n_classes - 2 * n_pairs
    classes: list[PhoneClass] = []

    # Plain classes form a collision chain: class i+1's envelope is the
    # pullback of class i's narrowband observation, so a bandwidth-blind model
    # reads every chain class's narrowband frames as its successor.
    base_coord = 0.28
    spare_coords = [0.205, 0.66, 0.24, 0.575, 0.31, 0.70]
    if n_plain:
        classes.append(PhoneClass(0, [(_coord_to_hz(base_coord), 250.0, 1.0)]))
    for i in range(1, n_plain):
        if base_coord * ratio**i < 0.66:  # keep the chain inside the telephone band
            classes.append(PhoneClass(i, [], table=_capture_pullback(classes[i - 1])))
        else:  # chain left the band: give the class its own in-band position
            coord = spare_coords[(i - 4) % len(spare_coords)]
            classes.append(PhoneClass(i, [(_coord_to_hz(coord), 340.0, 1.0)]))

    # High peaks stay below ~6.6 kHz so their flanks never reach the top mel
    # dimensions; those dimensions are then near-floor for BOTH bandwidths and
    # cannot serve as a trivial bandwidth discriminator.
    anchors = [(0.17, 180.0), (0.60, 400.0), (0.52, 300.0)]
    high_pairs = [(4700.0, 5900.0), (5100.0, 6300.0), (4500.0, 5600.0)]
    for p in range(n_pairs):
        q, width = anchors[p % len(anchors)]
        ha, hb = high_pairs[p % len(high_pairs)]
        anchor = (_coord_to_hz(q), width, 0.9)
        base = n_plain + 2 * p
        classes.append(PhoneClass(base, [anchor, (ha, 600.0, 1.2)], needs_highband=True))
        classes.append(PhoneClass(base + 1, [anchor, (hb, 600.0, 1.2)], needs_highband=True))
    return classes


def class_psd(phone: PhoneClass, freqs_hz: np.ndarray) -> np.ndarray:
    """Power spectral density of a class envelope at the given frequencies."""
    freqs_hz = np.asarray(freqs_hz, dtype=np.float64)
    if phone.table is not None:
        grid, values = phone.table
        return np.interp(freqs_hz, grid, values, left=values[0], right=values[-1])
    psd = np.full_like(freqs_hz, ENVELOPE_FLOOR)
    for center, fwhm, gain in phone.envelope:
        sigma = fwhm / 2.355
        psd = psd + gain**2 * np.exp(-((freqs_hz - center) ** 2) / (2.0 * sigma**2))
    return psd


def _preemph_power(freqs_hz: np.ndarray, rate: int) -> np.ndarray:
    w = 2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / rate
    return 1.0 - 2.0 * 0.97 * np.cos(w) + 0.97**2


def _capture_pullback(source: PhoneClass) -> tuple[np.ndarray, np.ndarray]:
    """The wideband PSD whose 16 kHz mel rendering matches the source class's
    8 kHz (telephone-captured) mel rendering.

    Both banks place filter d at the same fraction of their mel span, so the
    narrowband content observed at coordinate q must be reproduced in wideband
    at the frequency with that same coordinate, corrected for the mel-axis
    Jacobian and the pre-emphasis tilt difference between the two rates.
    """
    from .features import hz_to_mel, mel_to_hz

    ratio = float(hz_to_mel(8000.0) / hz_to_mel(4000.0))
    f = np.linspace(1.0, 7999.0, 4096)  # wideband physical frequency grid
    m = mel_to_hz(hz_to_mel(f) / ratio)  # narrowband frequency at the same coordinate
    dm = np.gradient(m, f)
    # Telephone band-limit response: unity in the passband, steep rolloff.
    rolloff = np.ones_like(m)
    edge = (m > 3250.0) & (m < NB_CUTOFF_HZ)
    rolloff[edge] = 10.0 ** (-(m[edge] - 3250.0) / (NB_CUTOFF_HZ - 3250.0) * 8.0)
    rolloff[m >= NB_CUTOFF_HZ] = 1e-8
    psd = (
        class_psd(source, m)
        * rolloff
        * _preemph_power(m, 8000)
        * dm
        / np.maximum(_preemph_power(f, 16000), 1e-8)
    )
    return f, psd


def synth_utterance(
    class_seq: list[int],
    rate: int,
    spec: CorpusSpec,
    rng: np.random.Generator,
    durations: list[float] | None = None,
) -> tuple[dsp.Waveform, np.ndarray]:
    """One utterance of envelope-shaped noise segments plus per-frame labels.

    Labels use the front end's 25 ms / 10 ms framing at the delivered rate,
    each frame labeled by the segment containing its center sample.
    """
    if rate not in (8000, 16000):
        raise ConfigError(f"unsupported rate {rate}")
    for cid in class_seq:
        if not 0 <= cid < len(spec.classes):
            raise ConfigError(f"class id {cid} outside [0, {len(spec.classes)})")
    if not class_seq:
        raise ConfigError("class_seq must be non-empty")
    if durations is None:
        durations = rng.uniform(*spec.segment_seconds, size=len(class_seq)).tolist()
    elif len(durations) != len(class_seq):
        raise ConfigError("durations and class_seq lengths differ")

    pieces = []
    boundaries = [0]
    for cid, dur in zip(class_seq, durations):
        n = int(round(dur * SYNTH_RATE))
        white = rng.standard_normal(n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / SYNTH_RATE)
        spectrum *= np.sqrt(class_psd(spec.classes[cid], freqs))
        pieces.append(np.fft.irfft(spectrum, n))
        boundaries.append(boundaries[-1] + n)
    signal = np.concatenate(pieces)
    rms = np.sqrt(np.mean(signal**2))
    noise_rms = rms * 10.0 ** (-spec.noise_snr_db / 20.0)
    signal = signal + noise_rms * rng.standard_normal(len(signal))
    signal *= 0.9 / np.max(np.abs(signal))
    w = dsp.Waveform(samples=signal, rate=SYNTH_RATE)

    if rate == 8000:
        w = dsp.resample(dsp.band_limit(w, NB_CUTOFF_HZ), 8000)
    scale = rate / SYNTH_RATE
    bounds = np.array([int(round(b * scale)) for b in boundaries])

    frame_len = int(round(rate * features.FRAME_MS / 1000.0))
    hop = int(round(rate * features.HOP_MS / 1000.0))
    n_frames = 1 + (len(w) - frame_len) // hop
    centers = hop * np.arange(n_frames) + frame_len // 2
    seg_idx = np.clip(np.searchsorted(bounds, centers, side="right") - 1, 0, len(class_seq) - 1)
    labels = np.asarray(class_seq, dtype=np.int64)[seg_idx]
    return w, labels


def _utterance_plan(spec: CorpusSpec, rng: np.random.Generator) -> list[int]:
    mean_seg = 0.5 * (spec.segment_seconds[0] + spec.segment_seconds[1])
    target = rng.uniform(*spec.utt_seconds)
    n_segs = max(1, int(round(target / mean_seg)))
    return rng.integers(0, spec.n_classes, size=n_segs).tolist()


# Train/test partitions draw from disjoint seed streams.
_PARTITION_TAGS = {"train_wb": 0, "train_nb": 1, "test_wb": 2, "test_nb": 3}


def render_utterance(
    spec: CorpusSpec, partition: str, index: int, rate: int
) -> tuple[dsp.Waveform, np.ndarray]:
    """Generate utterance #index of a partition from its own derived seed."""
    seq = np.random.SeedSequence([spec.seed, _PARTITION_TAGS[partition], index])
    rng = np.random.default_rng(seq)
    class_seq = _utterance_plan(spec, rng)
    return synth_utterance(class_seq, rate, spec, rng)


def synth_corpus(spec: CorpusSpec, out_dir, jobs: int = 1) -> dict[str, Path]:
    """Write WAVs, per-frame label files, and train/test manifests.

    Returns {"train": train_manifest_path, "test": test_manifest_path}.
    """
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    partitions = {
        "train_wb": (spec.n_train_wb, 16000, 0),
        "train_nb": (spec.n_train_nb, 8000, 1),
        "test_wb": (spec.n_test_wb, 16000, 0),
        "test_nb": (spec.n_test_nb, 8000, 1),
    }
    manifests: dict[str, list[tuple[str, int, str]]] = {"train": [], "test": []}

    def emit(part: str, index: int, w: dsp.Waveform, labels: np.ndarray) -> None:
        _, _, bandwidth = partitions[part]
        utt_id = f"{part}_{index:04d}"
        wav_rel = f"wav/{utt_id}.wav"
        lab_rel = f"labels/{utt_id}.txt"
        dsp.write_wav(w, out_dir / wav_rel)
        (out_dir / lab_rel).write_text("\n".join(str(int(l)) for l in labels) + "\n")
        manifests[part.split("_")[0]].append((wav_rel, bandwidth, lab_rel))

    for part, (count, rate, _) in partitions.items():
        if jobs > 1 and count > 1:
            from concurrent.futures import ProcessPoolExecutor

            args = [(spec, part, i, rate) for i in range(count)]
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for i, (w, labels) in enumerate(pool.map(_render_star, args, chunksize=8)):
                    emit(part, i, w, labels)
        else:
            for i in range(count):
                w, labels = render_utterance(spec, part, i, rate)
                emit(part, i, w, labels)

    paths = {}
    for split, rows in manifests.items():
        path = out_dir / f"{split}.tsv"
        features.write_manifest(path, rows)
        paths[split] = path
    return paths


def _render_star(args):
    return render_utterance(*args)


def bayes_frame_accuracy(
    spec: CorpusSpec, bandwidth: int, n_frames: int = 10000, seed: int = 12345
) -> float:
    """Monte-Carlo ceiling on frame accuracy for an oracle that knows the
    true envelopes and classifies single-frame periodograms.

    Narrowband restricts the oracle to bins below the telephone cutoff;
    wideband sees the full 0-8 kHz span.
    """
    rate = 8000 if bandwidth == 1 else 16000
    n_fft = features.N_FFT[rate]
    freqs = np.arange(n_fft // 2 + 1) * rate / n_fft
    if bandwidth == 1:
        freqs = freqs[freqs <= NB_CUTOFF_HZ - 100.0]
    psd = np.stack([class_psd(c, freqs) for c in spec.classes])
    mean_power = float(np.mean(psd))
    noise = mean_power * 10.0 ** (-spec.noise_snr_db / 10.0)
    models = psd + noise

    rng = np.random.default_rng(seed)
    truth = rng.integers(0, spec.n_classes, size=n_frames)
    # Periodogram bins of Gaussian noise are exponential around the true PSD.
    observed = models[truth] * rng.exponential(1.0, size=(n_frames, freqs.size))
    log_models = np.log(models)
    correct = 0
    for i in range(n_frames):
        ll = -(log_models + observed[i] / models).sum(axis=1)
        correct += int(np.argmax(ll) == truth[i])
    return correct / n_frames
