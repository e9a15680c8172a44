"""Command-line surface.

Subcommands: gen-data, train-teacher, prune, eval, infer, flops, report.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training
failure, 4 verification mismatch.

Run configuration is a versioned JSON document with sections ``model``,
``train``, ``prune``, ``data`` and ``output``; unknown sections or keys are
rejected before any work starts. Every file-producing run writes a manifest
(config hash, seed, package version) next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .archive import load_model_archive, save_model_archive
from .data import NeedleSpec, generate_needle, ingest_jsonl, load_dataset, save_dataset, dataset_checksum
from .distill import build_teacher_rankings, load_rankings, save_rankings
from .encoder import ModelConfig
from .errors import (
    ConfigError,
    DataError,
    InputError,
    TokenPruneError,
    TrainingDivergedError,
    VerificationError,
)
from .fileio import dumps_canonical, read_json, sha256_text, write_csv, write_json
from .flopsmodel import expected_model_flops, full_model_flops
from .masks import MaskSet
from .runtime import build_plan, count_flops_instrumented, infer, noop_plan, retained_tokens_report
from .scoring import score_distribution_report
from .training import TrainConfig, prune_train, train_teacher

CONFIG_VERSION = 1

_CONFIG_SECTIONS = {
    "model": set(ModelConfig.__dataclass_fields__),
    "train": set(TrainConfig.__dataclass_fields__),
    "data": {"kind", "path"} | set(NeedleSpec.__dataclass_fields__),
    "prune": {"target_sparsity", "lambda_distill_init"},
    "output": {"verbosity"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def load_run_config(path: str) -> dict:
    doc = read_json(path)
    if not isinstance(doc, dict) or "version" not in doc:
        raise ConfigError(f"{path}: config requires a 'version' field")
    if doc["version"] != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported config version {doc['version']!r}")
    for section, content in doc.items():
        if section == "version":
            continue
        if section not in _CONFIG_SECTIONS:
            raise ConfigError(f"{path}: unknown section {section!r}")
        unknown = set(content) - _CONFIG_SECTIONS[section]
        if unknown:
            raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
    return doc


def _write_run_manifest(out_dir: str, command: str, config_text: str, seed: int) -> None:
    write_json(
        os.path.join(out_dir, "run-manifest.json"),
        {
            "command": command,
            "config_sha256": sha256_text(config_text),
            "seed": seed,
            "version": f"tokenprune-{__version__}",
        },
    )


def _resolve_archive_paths(out: str):
    """'--out' may be an archive path (.json) or a run directory."""
    if out.endswith(".json"):
        return os.path.dirname(os.path.abspath(out)), out
    return out, os.path.join(out, "model.json")


def _resolve_model_path(path: str) -> str:
    if os.path.isdir(path):
        return os.path.join(path, "model.json")
    return path


def _model_cfg_from_config(doc: dict) -> ModelConfig:
    if "model" not in doc:
        raise ConfigError("config is missing the [model] section")
    return ModelConfig.from_dict(doc["model"])


def _train_cfg_from_config(doc: dict) -> TrainConfig:
    return TrainConfig.from_dict(doc.get("train", {}))


def cmd_gen_data(args) -> int:
    spec_doc = read_json(args.spec)
    version = spec_doc.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported data spec version {version!r}")
    kind = spec_doc.pop("kind", "needle")
    if kind != "needle":
        raise ConfigError(f"unknown dataset kind {kind!r}")
    try:
        spec = NeedleSpec.from_dict(spec_doc)
    except TypeError as exc:
        raise ConfigError(f"bad data spec: {exc}") from exc
    dataset = generate_needle(spec)
    save_dataset(dataset, args.out)
    _write_run_manifest(args.out, "gen-data", dumps_canonical(spec.to_dict()), spec.seed)
    print(json.dumps({"out": args.out, "train": len(dataset.train), "test": len(dataset.test)}))
    return 0


def cmd_train_teacher(args) -> int:
    doc = load_run_config(args.config)
    model_cfg = _model_cfg_from_config(doc)
    cfg = _train_cfg_from_config(doc)
    dataset = load_dataset(args.data)
    params, report = train_teacher(dataset.train, model_cfg, cfg)
    out_dir, archive_path = _resolve_archive_paths(args.out)
    os.makedirs(out_dir, exist_ok=True)
    checksum = save_model_archive(
        archive_path,
        params,
        metadata={"role": "teacher", "train_report": report, "seed": cfg.seed},
    )
    _write_run_manifest(out_dir, "train-teacher", dumps_canonical(doc), cfg.seed)
    print(json.dumps({"archive": archive_path, "checksum": checksum, **report}))
    return 0


def cmd_prune(args) -> int:
    doc = load_run_config(args.config)
    cfg = _train_cfg_from_config(doc)
    overrides = dict(doc.get("prune", {}))
    if args.sparsity is not None:
        overrides["target_sparsity"] = args.sparsity
    if overrides:
        merged = cfg.to_dict()
        merged.update(overrides)
        cfg = TrainConfig.from_dict(merged)
    bundle = load_model_archive(_resolve_model_path(args.teacher))
    dataset = load_dataset(args.data)
    out_dir, archive_path = _resolve_archive_paths(args.out)
    os.makedirs(out_dir, exist_ok=True)

    data_hash = dataset_checksum(args.data)
    cache_path = os.path.join(out_dir, "teacher-rankings.json")
    rankings = load_rankings(cache_path, data_hash, bundle.checksum)
    if rankings is None:
        rankings = build_teacher_rankings(bundle.params, [ex.real_tokens() for ex in dataset.train], cfg.grade_max)
        save_rankings(cache_path, rankings, data_hash, bundle.checksum)

    params, masks, report = prune_train(
        bundle.params,
        dataset.train,
        cfg,
        rankings,
        test_examples=dataset.test,
        out_dir=out_dir,
    )
    from .flopsmodel import LagrangeState

    checksum = save_model_archive(
        archive_path,
        params,
        masks=masks,
        metadata={"role": "pruned", "seed": cfg.seed, "target_sparsity": cfg.target_sparsity},
    )
    _write_run_manifest(out_dir, "prune", dumps_canonical(doc), cfg.seed)
    summary = {
        "archive": archive_path,
        "checksum": checksum,
        "expected_flops_ratio": report["expected_flops_ratio"],
    }
    if "test" in report:
        summary["test_accuracy"] = report["test"]["accuracy"]
    print(json.dumps(summary))
    return 0


def _plan_for_bundle(bundle):
    if bundle.masks is not None:
        return build_plan(bundle.masks)
    return noop_plan(bundle.cfg.num_layers, bundle.cfg.max_len)


def cmd_eval(args) -> int:
    bundle = load_model_archive(_resolve_model_path(args.model))
    dataset = load_dataset(args.data)
    examples = dataset.test or dataset.train
    if not examples:
        raise DataError("dataset has no examples to evaluate")
    plan = _plan_for_bundle(bundle)
    results = [infer(bundle.params, plan, ex.real_tokens()) for ex in examples]
    hits = sum(1 for r, ex in zip(results, examples) if r.prediction == ex.label)
    full = sum(full_model_flops(bundle.cfg, ex.n_real) for ex in examples)
    measured = sum(r.flops for r in results)
    from .training import signal_retention

    out = {
        "examples": len(examples),
        "accuracy": hits / len(examples),
        "mean_flops": measured / len(examples),
        "full_flops": full / len(examples),
        "flops_reduction": full / measured if measured else None,
        "retained_mean_per_layer": retained_tokens_report(results),
        "signal_retention": signal_retention(results, examples),
        "manifest": {"version": f"tokenprune-{__version__}", "model": args.model, "data": args.data},
    }
    text = json.dumps(out)
    if args.out:
        write_json(args.out, out)
    print(text)
    return 0


def cmd_infer(args) -> int:
    bundle = load_model_archive(_resolve_model_path(args.model))
    plan = _plan_for_bundle(bundle)
    if not os.path.exists(args.input):
        raise DataError(f"no such input file: {args.input}")
    lines_out = []
    with open(args.input, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                tokens = rec["tokens"] if isinstance(rec, dict) else rec
            except (ValueError, KeyError) as exc:
                raise DataError(f"{args.input}:{line_no}: bad record ({exc})") from exc
            res = infer(bundle.params, plan, np.asarray(tokens, dtype=np.int64))
            lines_out.append(
                json.dumps(
                    {
                        "logits": [float(v) for v in res.logits],
                        "prediction": res.prediction,
                        "retained_per_layer": res.retained_per_layer,
                        "final_positions": [int(p) for p in res.final_positions],
                        "flops": res.flops,
                    }
                )
            )
    text = "\n".join(lines_out)
    if args.out:
        from .fileio import atomic_write_text

        atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


def cmd_flops(args) -> int:
    bundle = load_model_archive(_resolve_model_path(args.model))
    cfg = bundle.cfg
    if args.plan and bundle.masks is not None:
        plan = build_plan(bundle.masks)
    else:
        plan = noop_plan(cfg.num_layers, cfg.max_len)
    saturated = MaskSet.saturated(
        cfg.num_layers, cfg.max_len, gate_open=list(plan.active), rank_keep=[list(r) for r in plan.keep_rank]
    )
    rows = []
    ok = True
    for n in sorted({4, cfg.max_len // 2, cfg.max_len}):
        if n < 2:
            continue
        tokens = np.arange(n, dtype=np.int64) % cfg.vocab_size
        tokens[0] = 0
        expected = expected_model_flops(saturated, cfg, n).item()
        counted = count_flops_instrumented(bundle.params, plan, tokens)
        match = expected == counted
        ok = ok and match
        rows.append({"tokens": n, "expected": expected, "instrumented": counted, "match": match})
    print(json.dumps({"rows": rows, "match": ok}))
    if not ok:
        raise VerificationError("expected FLOPs and instrumented count disagree")
    return 0


def cmd_report(args) -> int:
    run_dir = args.run
    if not os.path.isdir(run_dir):
        raise DataError(f"no such run directory: {run_dir}")
    report_files = sorted(
        f for f in os.listdir(run_dir) if f.startswith("report") and f.endswith(".json")
    )
    if not report_files:
        raise DataError(f"{run_dir}: no report*.json files")
    curve_rows = []
    for fname in report_files:
        rep = read_json(os.path.join(run_dir, fname))
        row = {
            "report": fname,
            "target_sparsity": rep.get("train_config", {}).get("target_sparsity"),
            "expected_flops_ratio": rep.get("expected_flops_ratio"),
            "accuracy": rep.get("test", {}).get("accuracy"),
        }
        curve_rows.append(row)
        retained = rep.get("test", {}).get("retained_mean_per_layer")
        if retained:
            write_csv(
                os.path.join(run_dir, fname.replace(".json", "-retained-tokens.csv")),
                retained,
                ["layer", "mean_retained"],
            )
    write_csv(
        os.path.join(run_dir, "sparsity-accuracy.csv"),
        curve_rows,
        ["report", "target_sparsity", "expected_flops_ratio", "accuracy"],
    )
    written = ["sparsity-accuracy.csv"]
    if args.model and args.data:
        bundle = load_model_archive(_resolve_model_path(args.model))
        dataset = load_dataset(args.data)
        examples = (dataset.test or dataset.train)[: args.limit]
        rows = score_distribution_report(bundle.params, [ex.real_tokens() for ex in examples])
        write_csv(
            os.path.join(run_dir, "score-distribution.csv"),
            rows,
            ["layer", "bucket", "count", "mean", "p25", "p50", "p75"],
        )
        written.append("score-distribution.csv")
    print(json.dumps({"run": run_dir, "written": written, "reports": report_files}))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="tokenprune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tokenprune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic needle dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="fine-tune the unpruned teacher")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("prune", help="learn pruning masks under a FLOPs budget")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sparsity", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="accuracy and FLOPs reduction of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="per-example logits and retained-token trace")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("flops", help="cross-check the FLOPs model against the counter")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("report", help="emit plot-ready CSVs from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--limit", type=int, default=200)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 3
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 4
    except TokenPruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
