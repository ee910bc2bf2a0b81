"""Command-line entry point: dataset generation, training, evaluation,
gradient checking, and the ablation table, driven by a JSON config.

Exit codes: 0 success, 1 check failure, 2 input/config error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import checks
from .data import (
    GeneratorConfig,
    NormStats,
    RawSeries,
    SplitSpec,
    WindowedDataset,
    apply_zscore,
    compute_norm_stats,
    load_csv,
    merge_datasets,
    slide_windows,
    stratified_split,
    synth_generate,
    write_csv,
)
from .model import (
    AMTFNetParams,
    ModelConfig,
    VARIANTS,
    build_params,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .train import NumericError, TrainConfig, evaluate, export_features, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_NUMERIC_ERROR = 3

MANIFEST_VERSION = 1

_RUN_KEYS = {"seed", "out_dir", "model", "train", "split", "data", "generator"}
_DATA_KEYS = {"files", "manifest", "normal_label"}

# fixed component indices for seed derivation from the root seed
_SEED_INIT, _SEED_TRAIN, _SEED_SPLIT, _SEED_GENERATOR = 0, 1, 2, 3


def _derive_seed(root: int, component: int) -> int:
    return int(np.random.SeedSequence([root, component]).generate_state(1)[0])


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """The merged JSON document driving a run; unknown keys are rejected."""

    seed: int = 0
    out_dir: str = "out"
    model: ModelConfig | None = None
    train: TrainConfig | None = None
    split: SplitSpec | None = None
    data_files: list[str] | None = None
    data_manifest: str | None = None
    normal_label: int = 0
    generator: GeneratorConfig | None = None
    generator_seed_explicit: bool = False

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        unknown = set(doc) - _RUN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(seed=int(doc.get("seed", 0)),
                      out_dir=str(doc.get("out_dir", "out")))
            if "model" in doc:
                cfg.model = ModelConfig.from_dict(doc["model"])
            if "train" in doc:
                cfg.train = TrainConfig.from_dict(doc["train"])
            if "split" in doc:
                cfg.split = SplitSpec(**doc["split"])
            if "data" in doc:
                data = doc["data"]
                unknown = set(data) - _DATA_KEYS
                if unknown:
                    raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
                cfg.data_files = list(data.get("files", [])) or None
                cfg.data_manifest = data.get("manifest")
                cfg.normal_label = int(data.get("normal_label", 0))
            if "generator" in doc:
                cfg.generator = GeneratorConfig.from_dict(doc["generator"])
                cfg.generator_seed_explicit = "seed" in doc["generator"]
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def resolved(self) -> dict:
        doc: dict = {"seed": self.seed, "out_dir": self.out_dir}
        if self.model is not None:
            doc["model"] = self.model.to_dict()
        if self.train is not None:
            doc["train"] = self.train.to_dict()
        if self.split is not None:
            doc["split"] = {"train_frac": self.split.train_frac,
                            "val_frac": self.split.val_frac,
                            "test_frac": self.split.test_frac,
                            "seed": self.split.seed}
        if self.data_files is not None or self.data_manifest is not None:
            doc["data"] = {"normal_label": self.normal_label}
            if self.data_files is not None:
                doc["data"]["files"] = self.data_files
            if self.data_manifest is not None:
                doc["data"]["manifest"] = self.data_manifest
        if self.generator is not None:
            doc["generator"] = self.generator.to_dict()
        return doc


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_snapshot(out_dir: str, cfg: RunConfig) -> None:
    _write_json(os.path.join(out_dir, "config_resolved.json"), cfg.resolved())


def _fault_label(gen: GeneratorConfig, condition: int) -> str:
    if condition == 0:
        return "normal"
    f = gen.faults[condition - 1]
    return f"{f.type}@group{f.group}"


# -- commands ----------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out_dir: str) -> int:
    if cfg.generator is None:
        raise ConfigError("generate needs a 'generator' section in the config")
    gen = cfg.generator
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for m in range(len(gen.modes)):
        for c in range(gen.n_classes):
            series = synth_generate(gen, m, c)
            name = f"run_m{m}_c{c}.csv"
            write_csv(series, os.path.join(out_dir, name))
            files.append({"path": name, "mode": m, "condition": c,
                          "rows": series.n_rows})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "generator": gen.to_dict(),
        "class_map": {str(c): _fault_label(gen, c) for c in range(gen.n_classes)},
        "files": files,
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    _write_snapshot(out_dir, cfg)
    print(f"wrote {len(files)} runs and manifest.json to {out_dir}")
    return EXIT_OK


def _resolve_data_files(cfg: RunConfig, config_dir: str) -> list[str]:
    paths: list[str] = []
    if cfg.data_manifest:
        mpath = cfg.data_manifest if os.path.isabs(cfg.data_manifest) \
            else os.path.join(config_dir, cfg.data_manifest)
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        base = os.path.dirname(mpath)
        paths.extend(os.path.join(base, entry["path"]) for entry in manifest["files"])
    if cfg.data_files:
        paths.extend(p if os.path.isabs(p) else os.path.join(config_dir, p)
                     for p in cfg.data_files)
    if not paths:
        raise ConfigError("no input data: set data.files or data.manifest")
    return paths


def _load_runs(paths: list[str], model: ModelConfig,
               normal_label: int) -> list[RawSeries]:
    runs = []
    for p in paths:
        series = load_csv(p)
        if series.n_vars != model.v:
            raise ConfigError(
                f"{p}: {series.n_vars} variables, model expects v={model.v}")
        if series.labels.max() >= model.num_classes:
            raise ConfigError(
                f"{p}: label {series.labels.max()} out of range for "
                f"num_classes={model.num_classes}")
        runs.append(series)
    return runs


def _prepare_datasets(cfg: RunConfig, paths: list[str]
                      ) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset, NormStats]:
    model = cfg.model
    runs = _load_runs(paths, model, cfg.normal_label)
    pooled = RawSeries(
        variables=np.concatenate([r.variables for r in runs]),
        labels=np.concatenate([r.labels for r in runs]),
    )
    stats = compute_norm_stats(pooled, cfg.normal_label)
    ds = merge_datasets([slide_windows(apply_zscore(r, stats), model.w, stats)
                         for r in runs])
    split = cfg.split or SplitSpec(seed=_derive_seed(cfg.seed, _SEED_SPLIT))
    train_ds, val_ds, test_ds = stratified_split(ds, split)
    return train_ds, val_ds, test_ds, stats


def cmd_train(cfg: RunConfig, out_dir: str, config_dir: str) -> int:
    if cfg.model is None:
        raise ConfigError("train needs a 'model' section in the config")
    os.makedirs(out_dir, exist_ok=True)
    paths = _resolve_data_files(cfg, config_dir)
    train_ds, val_ds, test_ds, stats = _prepare_datasets(cfg, paths)

    tcfg = cfg.train or TrainConfig()
    tcfg.seed = _derive_seed(cfg.seed, _SEED_TRAIN)
    params = build_params(cfg.model, np.random.default_rng(
        _derive_seed(cfg.seed, _SEED_INIT)))
    report = train(params, train_ds, val_ds, tcfg)

    best = AMTFNetParams(config=cfg.model, tensors=params.tensors)
    best.load_values(report.best_state)
    ckpt_path = os.path.join(out_dir, "checkpoint.amtf")
    save_checkpoint(ckpt_path, best, extras={"norm_stats": stats.to_dict()})
    doc = report.to_dict()
    doc["checkpoint"] = ckpt_path
    doc["dataset_sizes"] = {"train": len(train_ds), "val": len(val_ds),
                            "test": len(test_ds)}
    _write_json(os.path.join(out_dir, "train_report.json"), doc)
    _write_snapshot(out_dir, cfg)
    print(f"best epoch {report.best_epoch} val micro-F1 {report.best_val_score:.4f}; "
          f"checkpoint at {ckpt_path}")
    return EXIT_OK


def _eval_workers() -> int:
    try:
        return max(1, int(os.environ.get("AMTFNET_THREADS", "1")))
    except ValueError:
        return 1


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    model = params.config
    stats = None
    if params.extras.get("norm_stats"):
        stats = NormStats.from_dict(params.extras["norm_stats"])
    runs = _load_runs(list(args.data), model, args.normal_label)
    if stats is None:
        pooled = RawSeries(
            variables=np.concatenate([r.variables for r in runs]),
            labels=np.concatenate([r.labels for r in runs]),
        )
        stats = compute_norm_stats(pooled, args.normal_label)
    ds = merge_datasets([slide_windows(apply_zscore(r, stats), model.w, stats)
                         for r in runs])
    report = evaluate(params, ds, workers=_eval_workers())
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "eval_report.json"), report.to_dict())
    report.write_per_class_csv(os.path.join(out_dir, "per_class.csv"))
    _write_json(os.path.join(out_dir, "eval_resolved.json"), {
        "checkpoint": args.checkpoint,
        "data": list(args.data),
        "normal_label": args.normal_label,
        "export_features": args.export_features,
    })
    if args.export_features:
        export_features(params, ds, args.export_features)
    print(f"micro-F1 {report.micro_f1:.4f} macro-F1 {report.macro_f1:.4f} "
          f"avg FDR {report.avg_fdr:.4f} avg FPR {report.avg_fpr:.4f} "
          f"({report.n_samples} windows)")
    return EXIT_OK


def cmd_gradcheck(seed: int) -> int:
    results = checks.run_all(seed=seed)
    width = max(len(r.name) for r in results)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok = ok and r.passed
        print(f"{status} {r.name:<{width}s} max rel err {r.max_rel_error:.3e} "
              f"(tol {r.tol:g})")
    print("gradient checks:", "all passed" if ok else "FAILURES above")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_ablate(cfg: RunConfig, out_dir: str, config_dir: str) -> int:
    if cfg.model is None:
        raise ConfigError("ablate needs a 'model' section in the config")
    os.makedirs(out_dir, exist_ok=True)
    paths = _resolve_data_files(cfg, config_dir)
    train_ds, val_ds, test_ds, _ = _prepare_datasets(cfg, paths)

    rows = []
    for variant in VARIANTS:
        model = ModelConfig(**{**cfg.model.to_dict(), "variant": variant})
        tcfg = cfg.train or TrainConfig()
        tcfg = TrainConfig(**{**tcfg.to_dict(),
                              "seed": _derive_seed(cfg.seed, _SEED_TRAIN)})
        params = build_params(model, np.random.default_rng(
            _derive_seed(cfg.seed, _SEED_INIT)))
        report = train(params, train_ds, val_ds, tcfg)
        params.load_values(report.best_state)
        result = evaluate(params, test_ds, workers=_eval_workers())
        rows.append((variant, result.micro_f1, result.macro_f1,
                     count_parameters(model)))
        print(f"{variant:5s} micro-F1 {result.micro_f1:.4f} "
              f"macro-F1 {result.macro_f1:.4f} params {rows[-1][3]}")
    table = os.path.join(out_dir, "ablation.csv")
    with open(table, "w", encoding="utf-8", newline="") as fh:
        fh.write("variant,micro_f1,macro_f1,parameters\n")
        for variant, mf1, Mf1, n in rows:
            fh.write(f"{variant},{mf1!r},{Mf1!r},{n}\n")
    _write_snapshot(out_dir, cfg)
    print(f"wrote {table}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amtfnet",
        description="Multimode-process fault diagnosis: data generation, "
                    "training, evaluation, gradient checks, ablations.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_cmd(name: str, help_: str):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        return p

    add_config_cmd("generate", "simulate the synthetic multimode process to CSV")
    add_config_cmd("train", "normalize, window, split, and train; write checkpoint")
    add_config_cmd("ablate", "train all ablation variants; write the score table")

    pe = sub.add_parser("eval", help="evaluate a checkpoint on CSV runs")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", nargs="+", required=True, help="CSV run files")
    pe.add_argument("--out", default="out")
    pe.add_argument("--normal-label", type=int, default=0)
    pe.add_argument("--export-features", default=None, metavar="PATH",
                    help="also write fused features per window to PATH")

    pg = sub.add_parser("gradcheck", help="run the gradient-check suite")
    pg.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed)
        if args.command == "eval":
            return cmd_eval(args)
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            if cfg.generator is not None:
                cfg.generator.seed = _derive_seed(cfg.seed, _SEED_GENERATOR)
        elif cfg.generator is not None and not cfg.generator_seed_explicit:
            cfg.generator.seed = _derive_seed(cfg.seed, _SEED_GENERATOR)
        out_dir = args.out or cfg.out_dir
        config_dir = os.path.dirname(os.path.abspath(args.config))
        if args.command == "generate":
            return cmd_generate(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir, config_dir)
        if args.command == "ablate":
            return cmd_ablate(cfg, out_dir, config_dir)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
