"""Config-driven command-line surface.

Commands: ``synth`` (emit a synthetic corpus), ``augment`` (build the
synthetic auxiliary dataset and the intermediate-fine-tuned base model),
``selftrain`` (run a self-training loop from a saved base model),
``experiment`` (run the full harness), ``validate`` (check a config).

Exit codes: 0 success, 1 validation/usage error, 2 partial failure,
3 runtime error. Failures emit ``{code, message, context}`` JSON on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .augmentation import build_ta_examples, intermediate_finetune, select_tau, ta_examples_to_dataset, write_ta_jsonl
from .config import (
    ConfigValidationError,
    build_experiment_spec,
    build_feature_config,
    build_generator_spec,
    build_st_config,
    build_ta_config,
    build_task_spec,
    build_train_config,
    load_config,
)
from .corpus import (
    CorpusError,
    Dataset,
    LabelSpace,
    UnlabeledPool,
    load_dataset,
    sample_regime,
    save_dataset,
    strip_labels,
)
from .harness import (
    curve_aggregate_csv,
    curve_csv,
    derive_seed,
    run_experiment,
    sweep_k,
)
from .selftrain import UnsupportedModeError, mix_pools, self_train
from .synth import NLI_CLASSES, SynthSpec, synth_corpus
from .textmodel import ModelParams, evaluate, init_params, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PARTIAL = 2
EXIT_RUNTIME = 3


class CliError(Exception):
    def __init__(self, code: int, message: str, context: dict | None = None):
        super().__init__(message)
        self.code = code
        self.context = context or {}


def _emit_error(code: int, message: str, context: dict) -> None:
    print(json.dumps({"code": code, "message": message, "context": context}), file=sys.stderr)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, files: list[Path]) -> None:
    manifest = {
        "files": {f.name: _sha256(f) for f in sorted(files, key=lambda p: p.name)}
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _load_task_corpus(config: dict, seed: int) -> Dataset:
    ds = config["datasets"]
    if ds["input_path"]:
        if ds["label_classes"]:
            space = LabelSpace.categorical(ds["label_classes"])
        elif ds["label_lo"] is not None and ds["label_hi"] is not None:
            space = LabelSpace.continuous(ds["label_lo"], ds["label_hi"])
        else:
            raise ConfigValidationError(
                "datasets.input_path needs label_classes or label_lo/label_hi"
            )
        return load_dataset(ds["input_path"], ds["input_format"], space)
    return synth_corpus(build_task_spec(config), ds["train_partition_size"], seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(config: dict, args) -> int:
    seed = config["experiment"]["master_seed"]
    corpus = synth_corpus(build_task_spec(config), config["datasets"]["train_partition_size"], seed)
    out = Path(args.out or "corpus.jsonl")
    save_dataset(corpus, out)
    if not args.quiet:
        print(f"wrote {len(corpus)} examples to {out}")
    return EXIT_OK


def cmd_augment(config: dict, args) -> int:
    master_seed = config["experiment"]["master_seed"]
    fc = build_feature_config(config)
    tc = build_train_config(config)
    ta_cfg = build_ta_config(config)
    generator = build_generator_spec(config)
    aug = config["augmentation"]

    aux_seed = derive_seed(master_seed, "aux")
    aux_train = synth_corpus(SynthSpec("pair-overlap-nli", name="aux-train"), aug["aux_train_size"], aux_seed)
    aux_dev = synth_corpus(SynthSpec("pair-overlap-nli", name="aux-dev"), aug["aux_dev_size"], aux_seed + 1)
    classifier, _ = train(
        init_params(aux_train.label_space, fc), aux_train,
        build_train_config({**config, "model": {**config["model"], "stopping": "fixed_steps",
                                                "fixed_total": config["model"]["max_steps"],
                                                "checkpoint_every": config["model"]["max_steps"],
                                                "average_last": 1}}),
        feature_config=fc,
    )

    if aug["tau"] is not None:
        tau = aug["tau"]
    else:
        tau = select_tau(
            classifier, generator, aux_dev, list(aug["tau_grid"]), aug["tau_budget"],
            derive_seed(master_seed, "tau"), feature_config=fc, train_config=tc,
        )

    corpus = _load_task_corpus(config, derive_seed(master_seed, "corpus"))
    pool = strip_labels(corpus)
    if aug["ta_pool_limit"] and len(pool) > aug["ta_pool_limit"]:
        pool = UnlabeledPool(pool.source_name, pool.examples[: aug["ta_pool_limit"]])

    entries = build_ta_examples(
        pool, generator, classifier, tau, list(NLI_CLASSES),
        derive_seed(master_seed, "ta-data"), feature_config=fc,
    )
    synthetic = ta_examples_to_dataset(entries, list(NLI_CLASSES))
    f0 = intermediate_finetune(
        init_params(aux_train.label_space, fc), synthetic, aux_train,
        corpus.label_space, ta_cfg, tc, feature_config=fc,
    )
    aux_dev_score = evaluate(classifier, aux_dev, "accuracy", fc)

    out_dir = Path(args.out or "augment-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_ta_jsonl(entries, out_dir / "synthetic.jsonl")
    f0.save(out_dir / "f0.model")
    summary = {"tau": tau, "synthetic_count": len(entries), "aux_dev_accuracy": aux_dev_score}
    (out_dir / "augment.json").write_text(
        json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8"
    )
    if not args.quiet:
        print(
            f"augment: {len(entries)} synthetic examples, tau={tau}, "
            f"aux-dev accuracy={aux_dev_score:.3f}"
        )
    return EXIT_OK


def cmd_selftrain(config: dict, args) -> int:
    master_seed = config["experiment"]["master_seed"]
    fc = build_feature_config(config)
    tc = build_train_config(config)
    st_cfg = build_st_config(config)
    if args.max_iterations is not None:
        from dataclasses import replace as dc_replace

        st_cfg = dc_replace(st_cfg, max_iterations=args.max_iterations)
    if args.mode is not None:
        from dataclasses import replace as dc_replace

        st_cfg = dc_replace(
            st_cfg,
            mode={"broad": "broad", "confidence-filter": "confidence_filtering"}[args.mode],
            cf_batch=args.batch if args.batch else st_cfg.cf_batch,
        )

    f0 = ModelParams.load(args.f0)
    corpus = _load_task_corpus(config, derive_seed(master_seed, "corpus"))
    if f0.label_space != corpus.label_space:
        raise CliError(
            EXIT_VALIDATION,
            "base-model label space does not match the configured task",
            {"model": f0.label_space.to_json(), "task": corpus.label_space.to_json()},
        )
    exp = config["experiment"]
    split = sample_regime(corpus, exp["regime"], exp["k"], derive_seed(master_seed, "restart", 0))
    pool = split.pool
    pool_mode = args.pool or config["self_training"]["pool_mode"]
    if pool_mode in ("out_only", "in_plus_out"):
        if not args.ood:
            raise CliError(EXIT_VALIDATION, "--ood is required for an out-of-domain pool", {})
        ood = load_dataset(args.ood, "jsonl", corpus.label_space)
        pool = mix_pools(split.pool, strip_labels(ood), pool_mode)

    gold = corpus.labels_by_id()
    result = self_train(
        f0, split.train, pool, dev=split.dev, test=split.test or None,
        st_config=st_cfg, train_config=tc, feature_config=fc,
        metric=exp["metric"], gold=gold,
    )

    out_dir = Path(args.out or "selftrain-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = result.to_json()
    payload["pool_size"] = len(pool)
    (out_dir / "result.json").write_text(
        json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8"
    )
    result.final_model.save(out_dir / "final.model")
    if not args.quiet:
        last = result.per_iteration[-1] if result.per_iteration else {}
        print(
            f"selftrain: {len(result.per_iteration)} iterations, "
            f"converged_at={result.converged_at}, dev={last.get('dev_metric')}"
        )
    return EXIT_OK


def cmd_experiment(config: dict, args) -> int:
    spec = build_experiment_spec(config)
    out_dir = Path(args.out or "experiment-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []

    sweep_ks = None
    if args.sweep:
        sweep_ks = [int(k) for k in args.sweep.split(",")]
    elif config["experiment"]["sweep_ks"]:
        sweep_ks = list(config["experiment"]["sweep_ks"])

    report = run_experiment(spec)
    (out_dir / "report.json").write_text(report.to_json_str() + "\n", encoding="utf-8")
    (out_dir / "scores.csv").write_text(report.scores_csv(), encoding="utf-8")
    (out_dir / "aggregate.csv").write_text(report.aggregate_csv(), encoding="utf-8")
    files += [out_dir / "report.json", out_dir / "scores.csv", out_dir / "aggregate.csv"]

    if sweep_ks:
        curve = sweep_k(spec, sweep_ks)
        (out_dir / "curve.csv").write_text(curve_csv(curve), encoding="utf-8")
        (out_dir / "curve_aggregate.csv").write_text(curve_aggregate_csv(curve), encoding="utf-8")
        files += [out_dir / "curve.csv", out_dir / "curve_aggregate.csv"]

    _write_manifest(out_dir, files)
    # Wall-clock lives outside the manifest so reruns stay byte-identical.
    (out_dir / "timing.json").write_text(
        json.dumps(report.timing, sort_keys=True) + "\n", encoding="utf-8"
    )
    if not args.quiet:
        for arm, agg in report.aggregates().items():
            print(f"{arm}: mean={agg['mean']:.4f} std={agg['std']:.4f}")
    return EXIT_PARTIAL if report.partial else EXIT_OK


def cmd_validate(config: dict, args) -> int:
    build_experiment_spec(config)  # full construction = full validation
    if not args.quiet:
        print("config ok")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfaug", description=__doc__)
    parser.add_argument("--config", help="YAML/JSON config file")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="config override (repeatable)")
    parser.add_argument("--seed", type=int, help="override experiment.master_seed")
    parser.add_argument("--out", help="output file or directory")
    parser.add_argument("--quiet", action="store_true")
    parser.add_argument("--validate-only", action="store_true",
                        help="validate the config and exit without writing artifacts")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="emit a synthetic corpus")
    sub.add_parser("augment", help="build synthetic auxiliary data and the base model")

    p_st = sub.add_parser("selftrain", help="run self-training from a saved base model")
    p_st.add_argument("--f0", required=True, help="base model snapshot path")
    p_st.add_argument("--mode", choices=["broad", "confidence-filter"])
    p_st.add_argument("--batch", type=int)
    p_st.add_argument("--max-iterations", type=int)
    p_st.add_argument("--pool", choices=["in_only", "out_only", "in_plus_out"])
    p_st.add_argument("--ood", help="out-of-domain pool (JSONL)")

    p_exp = sub.add_parser("experiment", help="run the experiment harness")
    p_exp.add_argument("--sweep", help="comma-separated k values for a sample-efficiency sweep")

    sub.add_parser("validate", help="validate a config file")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "selftrain": cmd_selftrain,
    "experiment": cmd_experiment,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, overrides=args.set, seed=args.seed)
        if args.validate_only or args.command == "validate":
            return cmd_validate(config, args)
        return _COMMANDS[args.command](config, args)
    except CliError as exc:
        _emit_error(exc.code, str(exc), exc.context)
        return exc.code
    except (ConfigValidationError,) as exc:
        _emit_error(EXIT_VALIDATION, str(exc), getattr(exc, "context", {}))
        return EXIT_VALIDATION
    except (CorpusError, UnsupportedModeError) as exc:
        _emit_error(EXIT_VALIDATION, str(exc), {"type": type(exc).__name__})
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        _emit_error(EXIT_RUNTIME, str(exc), {})
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure
        _emit_error(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}", {})
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
