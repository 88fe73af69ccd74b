"""Batch entry points for every pipeline stage.

Each command resolves one RunConfig (defaults < config file < env <
flags), then writes a run directory: manifest.json with the resolved
config and content hashes of every input, the outputs themselves, and a
plain-text summary. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import (
    DataError,
    ImageRecord,
    SyntheticConfig,
    extract_patches,
    load_dataset,
    synth_vessels,
    write_dataset,
)
from .pipeline import cohort_records, infer_into_store, run_case_inference
from .referral import (
    CaseRecord,
    ThresholdConfig,
    build_report,
    parse_tau_grid,
    report_to_dict,
    sweep_threshold,
    write_report_csv,
    write_report_json,
)
from .store import CaseStore, StoreError
from .tensor import TensorError
from .uncertainty import METRICS, sample_count_sweep, write_sweep_csv, write_sweep_json
from .unet import (
    Architecture,
    DivergenceError,
    TrainConfig,
    init_he,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .rng import RngStream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved stage parameters; written verbatim to manifests."""

    T: int = 20
    dropout_p: float = 0.25
    tau: float = 0.6
    tau_grid: str = "0.1:0.9:0.1"
    n_grid: str = "1:30"
    train_patches: int = 1000
    eval_patches: int = 100
    patch_size: int = 48
    seed: int = 42
    metric: str = "epistemic"
    reduction: str = "mean"
    normalization: str = "theoretical-max"
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 8
    optimizer: str = "adam"
    count: int = 20
    image_size: int = 96
    port: int = 8000

    def __post_init__(self):
        try:
            ThresholdConfig(metric=self.metric, reduction=self.reduction,
                            tau=self.tau, normalization=self.normalization)
            parse_tau_grid(self.tau_grid)
            parse_n_grid(self.n_grid)
            TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                        batch_size=self.batch_size, dropout_p=self.dropout_p,
                        seed=self.seed, optimizer=self.optimizer)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        for key in ("train_patches", "eval_patches", "count"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.patch_size < 4 or self.patch_size % 4:
            raise ConfigError("patch_size must be a positive multiple of 4")
        if self.image_size < 4 or self.image_size % 4:
            raise ConfigError("image_size must be a positive multiple of 4")
        if not 1 <= self.port <= 65535:
            raise ConfigError("port must be a valid TCP port")


def parse_n_grid(text: str) -> tuple[int, ...]:
    """Parse "lo:hi" (inclusive) or a comma list of sample counts."""
    text = text.strip()
    try:
        if ":" in text:
            lo_s, hi_s = text.split(":")
            lo, hi = int(lo_s), int(hi_s)
            if lo < 1 or hi < lo:
                raise ValueError("expected 1 <= lo <= hi")
            return tuple(range(lo, hi + 1))
        values = tuple(int(p) for p in text.split(","))
        if not values or any(v < 1 for v in values):
            raise ValueError("sample counts must be >= 1")
        return values
    except ValueError as exc:
        raise ValueError(f"bad sample-count grid {text!r}: {exc}") from exc


_ENV_PREFIX = "TRIAGE_"


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    """defaults < --config file < TRIAGE_* env < explicit flags."""
    environ = os.environ if environ is None else environ
    merged: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path) as fh:
                file_values = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        merged.update(file_values)
    names = {f.name: f.type for f in fields(RunConfig)}
    for name in names:
        env_key = _ENV_PREFIX + name.upper()
        if env_key in environ:
            merged[name] = environ[env_key]
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    unknown = set(merged) - set(names)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    casts = {"T": int, "train_patches": int, "eval_patches": int, "patch_size": int,
             "seed": int, "epochs": int, "batch_size": int, "count": int,
             "image_size": int, "port": int,
             "dropout_p": float, "tau": float, "learning_rate": float}
    for key, value in list(merged.items()):
        cast = casts.get(key, str)
        try:
            merged[key] = cast(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return RunConfig(**merged)


# ---------------------------------------------------------------------------
# run-directory plumbing


def _hash_update_file(h, path: str) -> None:
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(1 << 20)
            if not chunk:
                break
            h.update(chunk)


def content_digest(path: str) -> str:
    """Stable digest of a file, or of a directory tree by relative path."""
    h = hashlib.blake2b(digest_size=16)
    if os.path.isfile(path):
        _hash_update_file(h, path)
        return h.hexdigest()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            rel = os.path.relpath(full, path)
            h.update(rel.encode())
            h.update(b"\0")
            _hash_update_file(h, full)
    return h.hexdigest()


class RunDir:
    """Collects outputs and writes manifest.json + summary.txt at the end."""

    def __init__(self, path: str, command: str, config: RunConfig):
        self.path = path
        self.command = command
        self.config = config
        self.inputs: dict[str, dict] = {}
        self.outputs: dict[str, str] = {}
        self.lines: list[str] = []
        os.makedirs(path, exist_ok=True)

    def add_input(self, label: str, path: str) -> None:
        if not os.path.exists(path):
            raise DataError(f"{label} not found: {path}")
        self.inputs[label] = {"path": os.path.abspath(path),
                              "digest": content_digest(path)}

    def out_path(self, name: str) -> str:
        return os.path.join(self.path, name)

    def register_output(self, name: str) -> None:
        self.outputs[name] = content_digest(self.out_path(name))

    def note(self, line: str) -> None:
        self.lines.append(line)

    def finish(self) -> dict:
        manifest = {
            "command": self.command,
            "config": asdict(self.config),
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        with open(self.out_path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        with open(self.out_path("summary.txt"), "w") as fh:
            fh.write(f"command: {self.command}\n")
            for line in self.lines:
                fh.write(line + "\n")
        return manifest


def _load_records(run: RunDir, data_dir: str, layout: str) -> list[ImageRecord]:
    run.add_input("data", data_dir)
    return load_dataset(data_dir, layout=layout)


def _load_params(run: RunDir, checkpoint: str):
    run.add_input("checkpoint", checkpoint)
    return load_checkpoint(checkpoint)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, config: RunConfig) -> dict:
    run = RunDir(args.out, "synth", config)
    records = synth_vessels(SyntheticConfig(size=config.image_size,
                                            count=config.count, seed=config.seed))
    out_dir = run.out_path("dataset")
    write_dataset(out_dir, records)
    run.register_output("dataset")
    fg = float(np.mean([r.mask.mean() for r in records]))
    run.note(f"images: {len(records)} size {config.image_size} seed {config.seed}")
    run.note(f"mean foreground fraction: {fg:.4f}")
    manifest = run.finish()
    return {"manifest": manifest, "images": len(records), "dataset": out_dir}


def cmd_train(args, config: RunConfig) -> dict:
    run = RunDir(args.out, "train", config)
    records = _load_records(run, args.data, args.layout)
    patches = extract_patches(records, config.train_patches,
                              size=config.patch_size, seed=config.seed)
    params = init_he(Architecture(), RngStream(config.seed))
    tc = TrainConfig(learning_rate=config.learning_rate, epochs=config.epochs,
                     batch_size=config.batch_size, dropout_p=config.dropout_p,
                     seed=config.seed, optimizer=config.optimizer)
    trained, trace = train(params, patches.images, patches.masks, tc)
    ckpt = run.out_path("checkpoint")
    save_checkpoint(ckpt, trained, dropout_p=config.dropout_p,
                    seed=config.seed, epoch=config.epochs)
    with open(run.out_path("loss_trace.json"), "w") as fh:
        json.dump({"epoch_mean_loss": trace}, fh, indent=2)
    run.register_output("checkpoint")
    run.register_output("loss_trace.json")
    run.note(f"patches: {len(patches.images)} of {config.patch_size}px")
    run.note(f"epochs: {config.epochs}")
    if trace:
        run.note(f"loss: {trace[0]:.6f} -> {trace[-1]:.6f}")
    manifest = run.finish()
    return {"manifest": manifest, "checkpoint": ckpt,
            "final_loss": trace[-1] if trace else None}


def cmd_infer(args, config: RunConfig) -> dict:
    run = RunDir(args.out, "infer", config)
    params, _ = _load_params(run, args.checkpoint)
    records = _load_records(run, args.data, args.layout)
    store = CaseStore(args.store, config=ThresholdConfig(
        metric=config.metric, reduction=config.reduction,
        tau=config.tau, normalization=config.normalization))
    results = []
    for rec in records:
        case = store.ingest(rec.image, gt_mask=rec.mask, case_id=rec.id) \
            if rec.id not in store else store.get(rec.id)
        case = infer_into_store(store, params, case.case_id, T=config.T,
                                seed=config.seed, dropout_p=config.dropout_p)
        results.append({"case_id": case.case_id, "status": case.status,
                        "normalized_score": case.normalized_score,
                        "scores": case.scores})
    with open(run.out_path("cases.json"), "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
    run.register_output("cases.json")
    referred = sum(1 for r in results if r["status"] == "referred")
    run.note(f"cases: {len(results)} referred: {referred}")
    run.note(f"store: {os.path.abspath(args.store)}")
    manifest = run.finish()
    return {"manifest": manifest, "cases": len(results), "referred": referred,
            "store": os.path.abspath(args.store)}


def cmd_sweep_samples(args, config: RunConfig) -> dict:
    run = RunDir(args.out, "sweep-samples", config)
    params, _ = _load_params(run, args.checkpoint)
    records = _load_records(run, args.data, args.layout)
    images = np.stack([r.image for r in records])
    masks = np.stack([r.mask for r in records])
    sweep = sample_count_sweep(params, images, masks,
                               n_grid=parse_n_grid(config.n_grid),
                               dropout_p=config.dropout_p, seed=config.seed,
                               reduction=config.reduction)
    write_sweep_csv(sweep, run.out_path("sweep.csv"))
    write_sweep_json(sweep, run.out_path("sweep.json"))
    run.register_output("sweep.csv")
    run.register_output("sweep.json")
    run.note(f"cases: {len(records)} sample counts: {len(sweep)}")
    manifest = run.finish()
    return {"manifest": manifest, "rows": len(sweep),
            "csv": run.out_path("sweep.csv")}


def cmd_sweep_threshold(args, config: RunConfig) -> dict:
    run = RunDir(args.out, "sweep-threshold", config)
    run.add_input("store", args.store)
    store = CaseStore(args.store)
    cohort = cohort_records(store, config.metric, config.reduction)
    if not cohort:
        raise DataError(f"store {args.store} has no inferred cases")
    if not any(c.gt_mask is not None for c in cohort):
        raise DataError(f"store {args.store} has no ground-truth cases")
    cfg = ThresholdConfig(metric=config.metric, reduction=config.reduction,
                          tau=config.tau, normalization=config.normalization)
    reports = sweep_threshold(cohort, cfg, parse_tau_grid(config.tau_grid))
    write_report_csv(reports, run.out_path("report.csv"))
    write_report_json(reports, run.out_path("report.json"))
    run.register_output("report.csv")
    run.register_output("report.json")
    run.note(f"cohort: {len(cohort)} thresholds: {len(reports)}")
    manifest = run.finish()
    return {"manifest": manifest, "rows": len(reports),
            "csv": run.out_path("report.csv")}


def cmd_evaluate(args, config: RunConfig) -> dict:
    run = RunDir(args.out, "evaluate", config)
    params, _ = _load_params(run, args.checkpoint)
    records = _load_records(run, args.data, args.layout)
    cases = []
    for rec in records:
        result = run_case_inference(params, rec.image, T=config.T,
                                    seed=config.seed, dropout_p=config.dropout_p,
                                    reduction=config.reduction)
        cases.append(CaseRecord(case_id=rec.id, prob_fg=result.prob_fg,
                                pred_mask=result.pred_mask, gt_mask=rec.mask,
                                scores=result.scores))
    cfg = ThresholdConfig(metric=config.metric, reduction=config.reduction,
                          tau=config.tau, normalization=config.normalization)
    report = build_report(cases, cfg)
    payload = report_to_dict(report)
    with open(run.out_path("evaluation.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    run.register_output("evaluation.json")
    run.note(f"cases: {len(cases)} tau: {config.tau} metric: {config.metric}")
    run.note(f"retained: {report.retained} referred: {report.referred}")
    if report.accuracy is not None:
        run.note(f"accuracy: {report.accuracy:.6f}")
    manifest = run.finish()
    return {"manifest": manifest, "report": payload}


def cmd_export_report(args, config: RunConfig) -> dict:
    run = RunDir(args.out, "export-report", config)
    run.add_input("store", args.store)
    store = CaseStore(args.store)
    active = store.active_config
    cohort = cohort_records(store, active.metric, active.reduction)
    if not cohort:
        raise DataError(f"store {args.store} has no inferred cases")
    report = report_to_dict(build_report(cohort, active))
    cases = [c.summary() for c in store.cases()]
    payload = {"config": {"metric": active.metric, "reduction": active.reduction,
                          "tau": active.tau, "normalization": active.normalization},
               "report": report, "cases": cases}
    with open(run.out_path("state.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    run.register_output("state.json")
    run.note(f"cases: {len(cases)}")
    manifest = run.finish()
    return {"manifest": manifest, "cases": len(cases),
            "json": run.out_path("state.json")}


def cmd_serve(args, config: RunConfig) -> dict:
    import uvicorn

    from .service import create_app

    app = create_app(store_dir=args.store, checkpoint=args.checkpoint,
                     config=ThresholdConfig(
                         metric=config.metric, reduction=config.reduction,
                         tau=config.tau, normalization=config.normalization))
    port = int(os.environ.get("TRIAGE_PORT", config.port))
    uvicorn.run(app, host="127.0.0.1", port=port)
    return {"port": port}


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with config defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", choices=("text", "json"), default="text")


def _add_threshold_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", type=float)
    p.add_argument("--metric", choices=METRICS)
    p.add_argument("--reduction")
    p.add_argument("--normalization", choices=("theoretical-max", "cohort-max"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segtriage",
                                     description="dropout-sampling segmentation triage")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic vessel dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    _add_common(p)

    p = sub.add_parser("train", help="train a model on dataset patches")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layout", choices=("flat", "drive"), default="flat")
    p.add_argument("--epochs", type=int)
    p.add_argument("--train-patches", dest="train_patches", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--dropout-p", dest="dropout_p", type=float)
    _add_common(p)

    p = sub.add_parser("infer", help="run referral inference into a case store")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layout", choices=("flat", "drive"), default="flat")
    p.add_argument("--samples", dest="T", type=int)
    p.add_argument("--dropout-p", dest="dropout_p", type=float)
    _add_threshold_flags(p)
    _add_common(p)

    p = sub.add_parser("sweep-samples", help="uncertainty vs sample count")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layout", choices=("flat", "drive"), default="flat")
    p.add_argument("--n-grid", dest="n_grid")
    p.add_argument("--dropout-p", dest="dropout_p", type=float)
    p.add_argument("--reduction")
    _add_common(p)

    p = sub.add_parser("sweep-threshold", help="referral report per threshold")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau-grid", dest="tau_grid")
    _add_threshold_flags(p)
    _add_common(p)

    p = sub.add_parser("evaluate", help="single-threshold referral evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layout", choices=("flat", "drive"), default="flat")
    p.add_argument("--samples", dest="T", type=int)
    p.add_argument("--dropout-p", dest="dropout_p", type=float)
    _add_threshold_flags(p)
    _add_common(p)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--port", type=int)
    _add_threshold_flags(p)
    _add_common(p)

    p = sub.add_parser("export-report", help="export store state and active report")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "sweep-samples": cmd_sweep_samples,
    "sweep-threshold": cmd_sweep_threshold,
    "evaluate": cmd_evaluate,
    "export-report": cmd_export_report,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = _COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, StoreError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, TensorError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if getattr(args, "output", "text") == "json":
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        for key, value in result.items():
            if key != "manifest":
                print(f"{key}: {value}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
