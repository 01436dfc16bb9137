"""SGD training loop over frame-classification batches.

Scenarios AM1-AM4 differ in which bandwidths they train on and whether
narrowband audio is upsampled before featurization; the four model variants
are orthogonal to that. Batches mix bandwidths at corpus proportions: frames
are shuffled globally each epoch with a seeded generator, so a (seed, corpus,
scenario) triple reproduces a run bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nnops
from .errors import ConfigError, NumericError
from .evaluation import evaluate_model
from .features import (
    SCENARIO_NATIVE,
    SCENARIOS,
    FeatureTensor,
    pad_for_context,
    stack_context,
)
from .model import Model, ModelConfig, build_model, load_extras, load_model, save_model

DATA_FILTERS = ("wb", "nb", "both")

# Training-data regime presets; the model variant is chosen separately.
SCENARIO_PRESETS = {
    "AM1": {"data_filter": "wb", "feature_scenario": "upsample16k"},
    "AM2": {"data_filter": "nb", "feature_scenario": "native"},
    "AM3": {"data_filter": "both", "feature_scenario": "native"},
    "AM4": {"data_filter": "both", "feature_scenario": "upsample16k"},
}


@dataclass
class TrainScenario:
    name: str = "AM3"
    feature_scenario: str = SCENARIO_NATIVE
    data_filter: str = "both"
    variant: str = "baseline"
    epochs: int = 6
    batch_size: int = 256
    lr: float = 0.02
    momentum: float = 0.9
    lr_decay: float = 0.5
    lr_patience: int = 2
    seed: int = 0
    frame_stride: int = 3
    holdout_fraction: float = 0.1
    dtype: str = "float32"
    model: ModelConfig | None = None

    def __post_init__(self):
        if self.feature_scenario not in SCENARIOS:
            raise ConfigError(f"unknown feature scenario {self.feature_scenario!r}")
        if self.data_filter not in DATA_FILTERS:
            raise ConfigError(f"data_filter must be one of {DATA_FILTERS}")
        if self.model is None:
            self.model = ModelConfig(variant=self.variant)
        elif self.model.variant != self.variant:
            raise ConfigError(
                f"scenario variant {self.variant!r} != model config variant "
                f"{self.model.variant!r}"
            )


def make_scenario(name: str, variant: str = "baseline", **overrides) -> TrainScenario:
    """A preset AM1-AM4 scenario with optional field overrides."""
    if name not in SCENARIO_PRESETS:
        raise ConfigError(f"unknown scenario {name!r}; presets: {sorted(SCENARIO_PRESETS)}")
    fields = dict(SCENARIO_PRESETS[name], name=name, variant=variant)
    fields.update(overrides)
    return TrainScenario(**fields)


def filter_corpus(tensors: list[FeatureTensor], data_filter: str) -> list[FeatureTensor]:
    if data_filter == "wb":
        kept = [t for t in tensors if t.bandwidth == 0]
    elif data_filter == "nb":
        kept = [t for t in tensors if t.bandwidth == 1]
    else:
        kept = list(tensors)
    if not kept:
        raise ConfigError(f"corpus is empty after data_filter={data_filter!r}")
    return kept


class FrameDataset:
    """Context windows over a featurized corpus, indexed by (utterance, frame).

    Windows are materialized per batch from replicate-padded feature matrices,
    so memory stays proportional to the features themselves.
    """

    def __init__(self, tensors: list[FeatureTensor], k: int, stride: int = 1, dtype=np.float32):
        self.k = k
        self.dtype = np.dtype(dtype)
        self.padded = []
        index = []
        labels = []
        flags = []
        self.utt_ids = []
        for u, t in enumerate(tensors):
            if t.labels is None:
                raise ConfigError(f"{t.utterance_id}: training requires frame labels")
            self.padded.append(np.ascontiguousarray(pad_for_context(t.frames, k), dtype=dtype))
            frames = np.arange(0, t.n_frames, stride, dtype=np.int64)
            index.append(np.stack([np.full_like(frames, u), frames], axis=1))
            labels.append(np.asarray(t.labels, dtype=np.int64)[frames])
            flags.append(np.full(frames.shape, t.bandwidth, dtype=np.int64))
            self.utt_ids.append(t.utterance_id)
        self.index = np.concatenate(index)
        self.labels = np.concatenate(labels)
        self.flags = np.concatenate(flags)

    def __len__(self) -> int:
        return self.index.shape[0]

    def gather(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(windows, bandwidth flags, labels, utterance indices) for index rows."""
        width = 2 * self.k + 1
        x = np.empty((rows.size, width, self.padded[0].shape[1]), dtype=self.dtype)
        for out_i, row in enumerate(rows):
            u, f = self.index[row]
            x[out_i] = self.padded[u][f : f + width]
        return x, self.flags[rows], self.labels[rows], self.index[rows, 0]


def compose_batches(dataset: FrameDataset, scenario: TrainScenario, rng: np.random.Generator):
    """Yield one epoch of globally shuffled frame batches."""
    order = rng.permutation(len(dataset))
    for start in range(0, len(dataset), scenario.batch_size):
        yield dataset.gather(order[start : start + scenario.batch_size])


@dataclass
class TrainState:
    model: Model
    velocity: dict[str, np.ndarray]
    lr: float
    momentum: float
    rng: np.random.Generator
    epoch: int = 0
    best_holdout: float = float("inf")
    bad_epochs: int = 0
    running_loss: float = 0.0


def init_state(scenario: TrainScenario) -> TrainState:
    seqs = np.random.SeedSequence(scenario.seed).spawn(3)
    model = build_model(scenario.model, seqs[0], dtype=np.dtype(scenario.dtype))
    velocity = {name: np.zeros_like(p) for name, p in model.named_parameters().items()}
    return TrainState(
        model=model,
        velocity=velocity,
        lr=scenario.lr,
        momentum=scenario.momentum,
        rng=np.random.default_rng(seqs[2]),
    )


def _holdout_split_rng(scenario: TrainScenario) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(scenario.seed).spawn(3)[1])


def split_holdout(
    tensors: list[FeatureTensor], scenario: TrainScenario
) -> tuple[list[FeatureTensor], list[FeatureTensor]]:
    """Seeded 10% per-bandwidth utterance holdout, fixed for the whole run."""
    rng = _holdout_split_rng(scenario)
    train, held = [], []
    for bw in (0, 1):
        group = [t for t in tensors if t.bandwidth == bw]
        if not group:
            continue
        n_held = max(1, int(round(scenario.holdout_fraction * len(group))))
        if len(group) == 1:
            n_held = 0
        held_idx = set(rng.permutation(len(group))[:n_held].tolist())
        for i, t in enumerate(group):
            (held if i in held_idx else train).append(t)
    return train, held


def sgd_step(state: TrainState, batch, lr: float | None = None) -> float:
    """One SGD-with-momentum update from a (x, c, y[, utt]) batch; returns loss."""
    x, c, y = batch[0], batch[1], batch[2]
    loss, grads = state.model.loss_and_grads((x, c, y))
    if not np.isfinite(loss):
        detail = ""
        if len(batch) > 3:
            detail = f" (utterances {sorted(set(np.asarray(batch[3]).tolist()))})"
        raise NumericError(f"non-finite loss {loss}{detail}")
    step_lr = state.lr if lr is None else lr
    params = state.model.named_parameters()
    for name, p in params.items():
        v = state.velocity[name]
        v *= state.momentum
        v += grads[name]
        p -= (step_lr * v).astype(p.dtype, copy=False)
    return loss


METRICS_HEADER = "epoch\tloss\twb_frame_acc\tnb_frame_acc"


@dataclass
class TrainResult:
    final_checkpoint: Path
    metrics_path: Path
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)


def _holdout_metrics(
    model: Model, held: list[FeatureTensor], batch_size: int = 2048
) -> tuple[float, float, float]:
    """(mean holdout cross-entropy, wb acc, nb acc); accuracies nan when absent."""
    loss_sum = 0.0
    counts = {0: [0, 0], 1: [0, 0]}  # correct, total
    for t in held:
        windows = stack_context(t, model.config.context_frames).astype(model.dtype)
        flags = np.full(t.n_frames, t.bandwidth, dtype=np.int64)
        labels = np.asarray(t.labels, dtype=np.int64)
        for start in range(0, t.n_frames, batch_size):
            sl = slice(start, start + batch_size)
            logits = model.forward(windows[sl], flags[sl])
            losses, _ = nnops.softmax_xent(logits, labels[sl])
            loss_sum += float(losses.sum())
            counts[t.bandwidth][0] += int(np.count_nonzero(logits.argmax(axis=1) == labels[sl]))
        counts[t.bandwidth][1] += t.n_frames
    total = counts[0][1] + counts[1][1]
    accs = [
        counts[bw][0] / counts[bw][1] if counts[bw][1] else float("nan") for bw in (0, 1)
    ]
    return loss_sum / total, accs[0], accs[1]


def _state_meta(state: TrainState, scenario: TrainScenario) -> dict:
    return {
        "kind": "train_state",
        "scenario_name": scenario.name,
        "feature_scenario": scenario.feature_scenario,
        "data_filter": scenario.data_filter,
        "epoch": state.epoch,
        "lr": state.lr,
        "momentum": state.momentum,
        "best_holdout": state.best_holdout,
        "bad_epochs": state.bad_epochs,
        "running_loss": state.running_loss,
        "rng_state": json.dumps(state.rng.bit_generator.state),
    }


def save_train_state(state: TrainState, scenario: TrainScenario, path) -> None:
    extras = {f"velocity.{k}": v for k, v in state.velocity.items()}
    save_model(state.model, path, extra_tensors=extras, meta=_state_meta(state, scenario))


def load_train_state(path) -> tuple[TrainState, dict]:
    model = load_model(path)
    meta, extras = load_extras(path)
    if meta.get("kind") != "train_state":
        raise ConfigError(f"{path}: checkpoint has no training state; cannot resume")
    velocity = {}
    for name, p in model.named_parameters().items():
        velocity[name] = extras[f"velocity.{name}"].astype(p.dtype)
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta["rng_state"])
    state = TrainState(
        model=model,
        velocity=velocity,
        lr=float(meta["lr"]),
        momentum=float(meta["momentum"]),
        rng=rng,
        epoch=int(meta["epoch"]),
        best_holdout=float(meta["best_holdout"]),
        bad_epochs=int(meta["bad_epochs"]),
        running_loss=float(meta["running_loss"]),
    )
    return state, meta


def train(
    scenario: TrainScenario,
    corpus: list[FeatureTensor],
    out_dir,
    resume_from=None,
    log=None,
) -> TrainResult:
    """Train to scenario.epochs, writing per-epoch checkpoints and metrics.

    Checkpoints are written atomically; resuming from epoch k continues the
    shuffle stream and produces epoch k+1 bit-identically.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = filter_corpus(corpus, scenario.data_filter)
    train_utts, held_utts = split_holdout(tensors, scenario)
    if not train_utts:
        raise ConfigError("no training utterances left after holdout split")
    dataset = FrameDataset(
        train_utts, scenario.model.context_frames, scenario.frame_stride, scenario.dtype
    )

    if resume_from is not None:
        state, _ = load_train_state(resume_from)
    else:
        state = init_state(scenario)

    metrics_path = out_dir / "metrics.tsv"
    rows: list[tuple[int, float, float, float]] = []
    if resume_from is None or not metrics_path.exists():
        metrics_path.write_text(METRICS_HEADER + "\n")

    result = TrainResult(out_dir / "final.bnmd", metrics_path, rows)
    for epoch in range(state.epoch + 1, scenario.epochs + 1):
        losses = []
        for batch in compose_batches(dataset, scenario, state.rng):
            losses.append(sgd_step(state, batch))
        state.running_loss = float(np.mean(losses))
        state.epoch = epoch

        hold_err, wb_acc, nb_acc = (
            _holdout_metrics(state.model, held_utts) if held_utts else (float("nan"), float("nan"), float("nan"))
        )
        if np.isfinite(hold_err):
            if hold_err < state.best_holdout - 1e-4:
                state.best_holdout = hold_err
                state.bad_epochs = 0
            else:
                state.bad_epochs += 1
                if state.bad_epochs >= scenario.lr_patience:
                    state.lr *= scenario.lr_decay
                    state.bad_epochs = 0

        row = (epoch, state.running_loss, wb_acc, nb_acc)
        rows.append(row)
        with open(metrics_path, "a") as fh:
            fh.write(f"{epoch}\t{state.running_loss:.6f}\t{wb_acc:.6f}\t{nb_acc:.6f}\n")
        if log is not None:
            log.info(
                "epoch %d loss %.4f holdout wb_acc %.4f nb_acc %.4f lr %.4g",
                epoch, state.running_loss, wb_acc, nb_acc, state.lr,
            )
        save_train_state(state, scenario, out_dir / f"ckpt_epoch{epoch}.bnmd")

    save_train_state(state, scenario, result.final_checkpoint)
    return result


def sweep_embedding_dim(
    dims: list[int],
    scenario: TrainScenario,
    corpus: list[FeatureTensor],
    test_corpus: list[FeatureTensor],
    out_dir,
    log=None,
) -> list[tuple[int, float, float]]:
    """Train and evaluate one embeddings-variant model per embedding size.

    Returns (dim, wb token error, nb token error) rows in the given order.
    """
    if not scenario.model.has_embedding:
        raise ConfigError(f"embedding sweep requires an embedding variant, got {scenario.variant!r}")
    rows = []
    for dim in dims:
        cfg = replace(scenario.model, embedding_dim=dim)
        sc = replace(scenario, model=cfg)
        result = train(sc, corpus, Path(out_dir) / f"dim{dim}", log=log)
        model = load_model(result.final_checkpoint)
        report = evaluate_model(model, test_corpus, scenario=f"dim={dim}")
        wb = float("nan") if report.wb is None else report.wb.token_error_rate
        nb = float("nan") if report.nb is None else report.nb.token_error_rate
        rows.append((dim, wb, nb))
    return rows


def format_sweep_table(rows: list[tuple[int, float, float]]) -> str:
    lines = [f"{'Dim.':>6}  {'WB TER%':>8}  {'NB TER%':>8}"]
    for dim, wb, nb in rows:
        lines.append(f"{dim:>6}  {100 * wb:>8.1f}  {100 * nb:>8.1f}")
    return "\n".join(lines)
