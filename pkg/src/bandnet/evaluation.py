"""Scoring: per-bandwidth frame error rate and a token error rate computed
from greedy-decoded, run-length-collapsed frame labels (the decoder-free
analog of a word error rate)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .features import WIDEBAND, FeatureTensor, stack_context
from .model import Model


@dataclass
class TokenSequence:
    utterance_id: str
    tokens: list[int]


@dataclass
class BandwidthMetrics:
    frame_error_rate: float
    token_error_rate: float
    n_frames: int
    n_utts: int


@dataclass
class EvalReport:
    scenario: str
    wb: BandwidthMetrics | None
    nb: BandwidthMetrics | None

    def metrics(self, bandwidth: int) -> BandwidthMetrics | None:
        return self.wb if bandwidth == WIDEBAND else self.nb


def collapse_runs(ids: np.ndarray) -> list[int]:
    ids = np.asarray(ids)
    if ids.size == 0:
        return []
    keep = np.concatenate([[True], ids[1:] != ids[:-1]])
    return [int(t) for t in ids[keep]]


def greedy_decode(posteriors: np.ndarray, utterance_id: str = "") -> TokenSequence:
    """Per-frame argmax followed by run-length collapse of repeats."""
    posteriors = np.asarray(posteriors)
    if posteriors.ndim == 1:  # already an argmax path
        path = posteriors
    else:
        path = posteriors.argmax(axis=1)
    if path.shape[0] < 1:
        raise DataError("cannot decode an empty posterior sequence")
    return TokenSequence(utterance_id, collapse_runs(path))


def levenshtein(a: list[int], b: list[int]) -> int:
    """Edit distance with unit substitution/insertion/deletion costs."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ai in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, bj in enumerate(b, start=1):
            cur[j] = min(
                prev[j] + 1,  # deletion of ai
                cur[j - 1] + 1,  # insertion of bj
                prev[j - 1] + (ai != bj),  # substitution
            )
        prev = cur
    return prev[-1]


def token_error_rate(hyp: TokenSequence | list[int], ref: TokenSequence | list[int]) -> float:
    """Levenshtein(hyp, ref) / len(ref). May exceed 1 for long hypotheses."""
    hyp_tokens = hyp.tokens if isinstance(hyp, TokenSequence) else list(hyp)
    ref_tokens = ref.tokens if isinstance(ref, TokenSequence) else list(ref)
    if not ref_tokens:
        raise DataError("token error rate undefined for an empty reference")
    return levenshtein(hyp_tokens, ref_tokens) / len(ref_tokens)


def frame_error_rate(
    m: Model, tensors: list[FeatureTensor], batch_size: int = 2048
) -> dict[int, float]:
    """1 - frame accuracy per bandwidth over labeled utterances."""
    report = evaluate_model(m, tensors, batch_size)
    out = {}
    for bw in (0, 1):
        metrics = report.metrics(bw)
        if metrics is not None:
            out[bw] = metrics.frame_error_rate
    return out


def evaluate_model(
    m: Model, tensors: list[FeatureTensor], batch_size: int = 2048, scenario: str = ""
) -> EvalReport:
    """Score a model on labeled feature tensors, split by bandwidth flag."""
    k = m.config.context_frames
    stats = {0: [0, 0, 0, 0, 0], 1: [0, 0, 0, 0, 0]}  # frames, errs, edits, ref_len, utts
    for t in tensors:
        if t.labels is None:
            raise DataError(f"{t.utterance_id}: evaluation requires labels")
        if len(t.labels) != t.n_frames:
            raise DataError(
                f"{t.utterance_id}: {len(t.labels)} labels for {t.n_frames} frames"
            )
        windows = stack_context(t, k).astype(m.dtype)
        preds = np.empty(t.n_frames, dtype=np.int64)
        flags = np.full(min(batch_size, t.n_frames), t.bandwidth, dtype=np.int64)
        for start in range(0, t.n_frames, batch_size):
            chunk = windows[start : start + batch_size]
            logits = m.forward(chunk, flags[: chunk.shape[0]])
            preds[start : start + chunk.shape[0]] = logits.argmax(axis=1)
        hyp = greedy_decode(preds, t.utterance_id)
        ref = TokenSequence(t.utterance_id, collapse_runs(t.labels))
        s = stats[t.bandwidth]
        s[0] += t.n_frames
        s[1] += int(np.count_nonzero(preds != t.labels))
        s[2] += levenshtein(hyp.tokens, ref.tokens)
        s[3] += len(ref.tokens)
        s[4] += 1

    def metrics(bw: int) -> BandwidthMetrics | None:
        frames, errs, edits, ref_len, utts = stats[bw]
        if utts == 0:
            return None
        return BandwidthMetrics(
            frame_error_rate=errs / frames,
            token_error_rate=edits / ref_len,
            n_frames=frames,
            n_utts=utts,
        )

    return EvalReport(scenario=scenario, wb=metrics(0), nb=metrics(1))


def compare_scenarios(reports: list[tuple[str, EvalReport]]) -> str:
    """Aligned text table: one row per scenario, WB / NB columns in percent."""
    header = ("Model", "WB TER%", "NB TER%", "WB FER%", "NB FER%")
    rows = [header]
    for name, rep in reports:
        cells = [name]
        for metric in ("token_error_rate", "frame_error_rate"):
            for side in (rep.wb, rep.nb):
                cells.append("—" if side is None else f"{100.0 * getattr(side, metric):.1f}")
        rows.append(tuple(cells))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for r in rows:
        lines.append(
            r[0].ljust(widths[0]) + "  " + "  ".join(c.rjust(w) for c, w in zip(r[1:], widths[1:]))
        )
    return "\n".join(lines)


def reports_to_tsv(reports: list[tuple[str, EvalReport]]) -> str:
    """Machine-readable companion to compare_scenarios."""
    lines = ["scenario\twb_ter\tnb_ter\twb_fer\tnb_fer\twb_frames\tnb_frames\twb_utts\tnb_utts"]
    for name, rep in reports:
        def fmt(side, attr):
            return "nan" if side is None else repr(getattr(side, attr))

        lines.append(
            "\t".join(
                [
                    name,
                    fmt(rep.wb, "token_error_rate"),
                    fmt(rep.nb, "token_error_rate"),
                    fmt(rep.wb, "frame_error_rate"),
                    fmt(rep.nb, "frame_error_rate"),
                    "0" if rep.wb is None else str(rep.wb.n_frames),
                    "0" if rep.nb is None else str(rep.nb.n_frames),
                    "0" if rep.wb is None else str(rep.wb.n_utts),
                    "0" if rep.nb is None else str(rep.nb.n_utts),
                ]
            )
        )
    return "\n".join(lines) + "\n"
