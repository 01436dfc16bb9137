"""Command-line front door: one subcommand per pipeline stage.

Exit codes: 0 success, 1 numeric/data failure, 2 usage or config error.
Every run logs its resolved configuration, and all randomness derives from
the single logged seed.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, features, synthcorpus, trainer
from .errors import (
    AudioFormatError,
    BandnetError,
    CheckpointError,
    ConfigError,
    DataError,
    NumericError,
    VariantError,
)
from .evaluation import compare_scenarios, evaluate_model, reports_to_tsv
from .model import VARIANTS, ModelConfig, build_model, load_extras, load_model
from .nnops import grad_check
from .synthcorpus import CorpusSpec
from .trainer import TrainScenario, format_sweep_table, sweep_embedding_dim

log = logging.getLogger("bandnet")

# Reduced dimensions used by the gradient-check command: small enough that a
# full four-variant sweep runs in seconds, large enough to exercise every path.
GRADCHECK_DIMS = dict(
    conv1_filters=8,
    conv2_filters=8,
    dense_units=32,
    bottleneck_units=16,
    n_classes=8,
    embedding_dim=8,
)


def _coerce(value: str):
    text = value.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if "," in text:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        for cast in (int, float):
            try:
                return tuple(cast(p) for p in parts)
            except ValueError:
                pass
        return tuple(parts)
    return text


def read_config(path) -> dict[str, dict]:
    """INI-style config: [scenario], [model], [corpus] sections of key = value."""
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    return {s: {k: _coerce(v) for k, v in parser.items(s)} for s in parser.sections()}


def _dataclass_from(section: dict, cls, what: str):
    valid = {f.name for f in fields(cls)}
    unknown = set(section) - valid
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}; valid: {sorted(valid)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}") from exc


def load_scenario(config: dict[str, dict], overrides: dict) -> TrainScenario:
    section = dict(config.get("scenario", {}))
    section.update({k: v for k, v in overrides.items() if v is not None})
    model_section = dict(config.get("model", {}))
    variant = section.get("variant", "baseline")
    if variant not in VARIANTS:
        raise ConfigError(f"invalid variant {variant!r}; valid variants: {list(VARIANTS)}")
    model_section.setdefault("variant", variant)
    name = section.get("name")
    if name in trainer.SCENARIO_PRESETS:
        for key, value in trainer.SCENARIO_PRESETS[name].items():
            section.setdefault(key, value)
    section["model"] = _dataclass_from(model_section, ModelConfig, "model")
    return _dataclass_from(section, TrainScenario, "scenario")


def _log_resolved(name: str, payload: dict) -> None:
    log.info("resolved %s config: %s", name, json.dumps(payload, sort_keys=True, default=str))


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("BANDNET_JOBS", "1")))
    except ValueError:
        return 1


# -- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    section = read_config(args.spec).get("corpus", {}) if args.spec else {}
    if args.seed is not None:
        section["seed"] = args.seed
    spec = _dataclass_from(section, CorpusSpec, "corpus")
    _log_resolved("corpus", {k: v for k, v in asdict(spec).items() if k != "classes"})
    paths = synthcorpus.synth_corpus(spec, args.out, jobs=args.jobs)
    for split, path in paths.items():
        print(f"{split}\t{path}")
    return 0


def cmd_featurize(args) -> int:
    _log_resolved("featurize", {"manifest": args.manifest, "scenario": args.scenario, "jobs": args.jobs})
    tensors = features.featurize_manifest(args.manifest, args.scenario, jobs=args.jobs)
    for t in tensors:
        if t.bandwidth == 1 and args.scenario == features.SCENARIO_UPSAMPLE:
            log.debug("%s: narrowband input upsampled to 16 kHz", t.utterance_id)
    features.write_features(args.out, tensors, scenario=args.scenario)
    n_nb = sum(t.bandwidth for t in tensors)
    log.info("featurized %d utterances (%d wideband, %d narrowband) -> %s",
             len(tensors), len(tensors) - n_nb, n_nb, args.out)
    print(args.out)
    return 0


def cmd_train(args) -> int:
    config = read_config(args.config)
    scenario = load_scenario(config, {"seed": args.seed})
    payload = asdict(scenario)
    _log_resolved("scenario", payload)
    tensors, stored_scenario = features.read_features(args.features)
    if stored_scenario is not None and stored_scenario != scenario.feature_scenario:
        raise ConfigError(
            f"feature file was extracted with scenario {stored_scenario!r} but the "
            f"training scenario expects {scenario.feature_scenario!r}"
        )
    result = trainer.train(scenario, tensors, args.out, resume_from=args.resume, log=log)
    print(result.final_checkpoint)
    print(result.metrics_path)
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    meta, _ = load_extras(args.checkpoint)
    ckpt_scenario = meta.get("feature_scenario")
    scenario = args.scenario or ckpt_scenario or features.SCENARIO_NATIVE
    if ckpt_scenario is not None and scenario != ckpt_scenario:
        raise ConfigError(
            f"checkpoint was trained with feature scenario {ckpt_scenario!r}; "
            f"refusing to evaluate with {scenario!r} (pass --scenario {ckpt_scenario} "
            "or omit the flag)"
        )
    _log_resolved("eval", {"checkpoint": str(args.checkpoint), "scenario": scenario})
    tensors = features.featurize_manifest(args.manifest, scenario, jobs=args.jobs)
    name = meta.get("scenario_name", model.config.variant)
    report = evaluate_model(model, tensors, scenario=str(name))
    table = compare_scenarios([(str(name), report)])
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table + "\n")
        (out / "report.tsv").write_text(reports_to_tsv([(str(name), report)]))
        log.info("wrote %s and %s", out / "report.txt", out / "report.tsv")
    return 0


def _gradcheck_batch(config: ModelConfig, rng: np.random.Generator):
    h, w = config.input_shape
    x = rng.standard_normal((4, h, w))
    c = np.array([0, 1, 0, 1])
    y = rng.integers(0, config.n_classes, size=4)
    return x, c, y


def cmd_gradcheck(args) -> int:
    overrides = read_config(args.config).get("model", {}) if args.config else {}
    failed = []
    for variant in VARIANTS:
        cfg_kwargs = dict(GRADCHECK_DIMS)
        cfg_kwargs.update(overrides)
        cfg = ModelConfig(variant=variant, **cfg_kwargs)
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, VARIANTS.index(variant)]))
        model = build_model(cfg, seed=rng.integers(2**31), dtype=np.float64)
        report = grad_check(
            model,
            _gradcheck_batch(cfg, rng),
            eps=args.eps,
            tol=args.tol,
            _corrupt_tensor=args.corrupt,
        )
        print(f"== variant {variant}")
        print(report.format())
        if not report.passed:
            failed.extend(f"{variant}:{name}" for name in report.failures)
    if failed:
        print(f"FAIL: gradient mismatch in {', '.join(failed)}")
        return 1
    print("OK: all parameter tensors match finite differences")
    return 0


def cmd_sweep(args) -> int:
    dims = [int(d) for d in str(args.dims).split(",") if d]
    if not dims:
        raise ConfigError("--dims must list at least one embedding size")
    config = read_config(args.config) if args.config else {}
    section = dict(config.get("scenario", {}))
    section.setdefault("variant", "embeddings")
    if args.seed is not None:
        section["seed"] = args.seed
    scenario = load_scenario({"scenario": section, "model": config.get("model", {})}, {})
    if not scenario.model.has_embedding:
        raise ConfigError("sweep requires an embedding variant")
    _log_resolved("sweep", {"dims": dims, **asdict(scenario)})

    corpus_dir = Path(args.corpus)
    train_manifest = corpus_dir / "train.tsv"
    test_manifest = corpus_dir / "test.tsv"
    for p in (train_manifest, test_manifest):
        if not p.is_file():
            raise ConfigError(f"corpus manifest not found: {p}")
    train_tensors = features.featurize_manifest(train_manifest, scenario.feature_scenario, args.jobs)
    test_tensors = features.featurize_manifest(test_manifest, scenario.feature_scenario, args.jobs)
    rows = sweep_embedding_dim(dims, scenario, train_tensors, test_tensors, args.out, log=log)
    table = format_sweep_table(rows)
    print(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tsv = "dim\twb_ter\tnb_ter\n" + "".join(f"{d}\t{wb!r}\t{nb!r}\n" for d, wb, nb in rows)
    (out / "sweep.tsv").write_text(tsv)
    (out / "sweep.txt").write_text(table + "\n")
    return 0


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bandnet",
        description="Mixed-bandwidth acoustic modeling pipeline (synthetic corpus, "
        "feature extraction, training, evaluation).",
    )
    parser.add_argument("--version", action="version", version=f"bandnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False):
        p.add_argument("--seed", type=int, default=None, help="root seed (logged)")
        p.add_argument("--deterministic", action="store_true",
                       help="assert fully deterministic execution (always on; flag is logged)")
        p.add_argument("-v", "--verbose", action="store_true")
        if jobs:
            p.add_argument("--jobs", type=int, default=_default_jobs(),
                           help="per-utterance parallelism (default $BANDNET_JOBS or 1)")

    p = sub.add_parser("synth", help="generate the synthetic two-bandwidth corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--spec", default=None, help="corpus spec config file ([corpus] section)")
    common(p, jobs=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="extract log-mel features for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenario", choices=features.SCENARIOS, default=features.SCENARIO_NATIVE)
    p.add_argument("--out", required=True, help="output feature file")
    common(p, jobs=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a scenario from a feature file")
    p.add_argument("--config", required=True, help="scenario config file")
    p.add_argument("--features", required=True, help="feature file from `featurize`")
    p.add_argument("--out", required=True, help="output directory for checkpoints/metrics")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenario", choices=features.SCENARIOS, default=None,
                   help="featurization scenario (must match the checkpoint's)")
    p.add_argument("--out", default=None, help="directory for report.txt / report.tsv")
    common(p, jobs=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all four variants")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--config", default=None, help="optional [model] dimension overrides")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # test hook
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="embedding-dimension sweep (train + eval per size)")
    p.add_argument("--dims", required=True, help="comma-separated embedding sizes")
    p.add_argument("--corpus", required=True, help="corpus dir with train.tsv/test.tsv")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="scenario config file")
    common(p, jobs=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.seed is None:
        args.seed = 0
    if getattr(args, "deterministic", False):
        log.info("deterministic mode requested: single-threaded fixed-order execution")
    log.info("command=%s seed=%s", args.command, args.seed)
    try:
        return args.func(args)
    except (ConfigError, VariantError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except (DataError, NumericError, AudioFormatError, CheckpointError) as exc:
        log.error("%s", exc)
        return 1
    except BandnetError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
