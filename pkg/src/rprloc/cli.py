"""Command-line orchestration: dataset generation, two-stage training,
one-shot localization, baseline benchmarking and table generation.

Every command is driven by a JSON config (flags override fields
one-for-one), writes a resolved-config snapshot into the output
directory, and never mutates its inputs.  Exit codes: 0 ok, 2 config
error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import phantom, pipeline
from .baselines import AutoEncoderConfig, load_autoencoder, save_autoencoder
from .errors import ConfigError, DataError, TrainingDivergedError
from .evalkit import (
    render_table,
    summarize,
    write_records_csv,
    write_summary_csv,
)
from .locator import detect_organ
from .pnet import load_checkpoint, save_checkpoint
from .presets import coarse_radius_mm, desk_phantom_spec
from .volgrid import BBox3D

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

OUTPUT_ROOT_ENV = "RPRLOC_OUT_ROOT"
CONFIG_VERSION = 1

DEFAULT_CONFIG: dict = {
    "config_version": CONFIG_VERSION,
    "seed": 0,
    "output_dir": "rprloc_run",
    "deterministic": False,
    "phantom": {
        "n_train": 20,
        "n_val": 4,
        "n_test": 8,
        "grid_shape": [64, 96, 96],
        "spacing": [2.0, 2.0, 2.0],
    },
    "train": {
        "patch_shape": [16, 32, 32],
        "coarse": {
            "epochs": 30,
            "batch_size": 6,
            "learning_rate": 1e-3,
            "lr_schedule": "cosine",
            "pairs_per_epoch": 960,
            "r": None,  # null: volume diagonal in mm
        },
        "fine": {
            "epochs": 30,
            "batch_size": 6,
            "learning_rate": 1e-3,
            "lr_schedule": "cosine",
            "pairs_per_epoch": 960,
            "r": 20.0,
        },
    },
    "inference": {"K": 15, "steps_coarse": 1, "strategy": "extreme"},
    "baselines": {
        "kinds": ["gs_mse", "gs_cosine", "gs_ncc", "fm_mse", "fm_cosine"],
        "stride": 2,
        "n_cases": 1,
        "organs": None,
        "K": 1,
        "autoencoder": {"epochs": 20, "patches_per_epoch": 96},
    },
    "repro": {"table1_mre": [1, 5, 15], "table2_steps": [1, 2, 3]},
}


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"config file not found: {file_path}")
        try:
            user = json.loads(file_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {file_path}: {exc}") from exc
        _merge(cfg, user, context="config")
    if overrides:
        _merge(cfg, overrides, context="flags")
    validate_config(cfg)
    return cfg


def _merge(base: dict, update: dict, context: str) -> None:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown {context} key {key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, context=f"{context}.{key}")
        else:
            base[key] = value


def validate_config(cfg: dict) -> None:
    if cfg.get("config_version") != CONFIG_VERSION:
        raise ConfigError(
            f"unsupported config_version {cfg.get('config_version')}"
        )
    ph = cfg["phantom"]
    for key in ("n_train", "n_val", "n_test"):
        if not isinstance(ph[key], int) or ph[key] < 1:
            raise ConfigError(f"phantom.{key} must be a positive integer")
    if cfg["inference"]["strategy"] not in ("extreme", "diagonal"):
        raise ConfigError(
            f"unknown strategy {cfg['inference']['strategy']!r}"
        )
    if cfg["inference"]["K"] < 1 or cfg["inference"]["steps_coarse"] < 1:
        raise ConfigError("inference.K and inference.steps_coarse must be >= 1")
    for stage in ("coarse", "fine"):
        tr = cfg["train"][stage]
        if tr["epochs"] < 1 or tr["batch_size"] < 1:
            raise ConfigError(f"train.{stage}: counts must be positive")
    for kind in cfg["baselines"]["kinds"]:
        if kind not in ("gs_mse", "gs_cosine", "gs_ncc", "fm_mse", "fm_cosine"):
            raise ConfigError(f"unknown baseline kind {kind!r}")


def output_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    if not out.is_absolute():
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root:
            out = Path(root) / out
    return out


@contextmanager
def _run_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock} if stale)"
        )
    try:
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _snapshot(cfg: dict, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"config_snapshot_{command}.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True)
    )


def _phantom_spec(cfg: dict) -> phantom.PhantomSpec:
    ph = cfg["phantom"]
    base = desk_phantom_spec(seed=cfg["seed"])
    return phantom.PhantomSpec(
        grid_shape=tuple(ph["grid_shape"]),
        spacing=tuple(ph["spacing"]),
        organs=base.organs,
        jitter=base.jitter,
        seed=cfg["seed"],
    )


def _dataset_dir(cfg: dict) -> Path:
    return output_dir(cfg) / "dataset"


def _ckpt_path(cfg: dict, stage: str) -> Path:
    return output_dir(cfg) / "checkpoints" / f"{stage}.pt"


def _train_config(cfg: dict, stage: str):
    from .pnet import TrainConfig

    spec = _phantom_spec(cfg)
    tr = cfg["train"][stage]
    r = tr["r"] if tr["r"] is not None else coarse_radius_mm(spec)
    return TrainConfig(
        stage=stage,
        r=float(r),
        patch_shape=tuple(cfg["train"]["patch_shape"]),
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        learning_rate=tr["learning_rate"],
        lr_schedule=tr["lr_schedule"],
        pairs_per_epoch=tr["pairs_per_epoch"],
        seed=cfg["seed"],
        deterministic=cfg["deterministic"],
    )


def _load_stage_checkpoint(cfg: dict, stage: str):
    path = _ckpt_path(cfg, stage)
    if not path.exists():
        raise DataError(
            f"missing {stage} checkpoint at {path}; run "
            f"'rprloc train --stage {stage}' first"
        )
    model = load_checkpoint(path)
    if model.stage != stage:
        raise DataError(
            f"checkpoint {path} was trained for stage {model.stage!r}, "
            f"refusing to use it as the {stage} model"
        )
    return model


def cmd_generate(cfg: dict, overwrite: bool = False) -> dict:
    out = output_dir(cfg)
    spec = _phantom_spec(cfg)
    ph = cfg["phantom"]
    with _run_lock(out):
        _snapshot(cfg, out, "generate")
        manifest = phantom.generate_dataset(
            spec,
            ph["n_train"],
            ph["n_val"],
            ph["n_test"],
            _dataset_dir(cfg),
            overwrite=overwrite,
        )
    n = sum(len(v) for v in manifest["splits"].values())
    print(f"generated {n} cases under {_dataset_dir(cfg)}")
    return manifest


def cmd_train(cfg: dict, stage: str, progress: bool = True):
    out = output_dir(cfg)
    dataset = _dataset_dir(cfg)
    if not (dataset / phantom.MANIFEST_NAME).exists():
        raise DataError(
            f"no dataset at {dataset}; run 'rprloc generate' first"
        )
    train_cfg = _train_config(cfg, stage)
    with _run_lock(out):
        _snapshot(cfg, out, f"train_{stage}")
        model, log = pipeline.train_stage_on_dataset(
            train_cfg,
            dataset,
            log_path=out / "logs" / f"{stage}_loss.csv",
            progress=progress,
        )
        save_checkpoint(model, _ckpt_path(cfg, stage))
    print(
        f"{stage} model saved to {_ckpt_path(cfg, stage)} "
        f"(final mean loss {log[-1]['mean_loss']:.2f})"
    )
    return model, log


def cmd_train_autoencoder(cfg: dict, progress: bool = True):
    out = output_dir(cfg)
    ae = cfg["baselines"]["autoencoder"]
    ae_cfg = AutoEncoderConfig(
        patch_shape=tuple(cfg["train"]["patch_shape"]),
        epochs=ae["epochs"],
        patches_per_epoch=ae["patches_per_epoch"],
        seed=cfg["seed"],
    )
    with _run_lock(out):
        _snapshot(cfg, out, "train_autoencoder")
        model, log = pipeline.train_baseline_autoencoder(
            ae_cfg, _dataset_dir(cfg), progress=progress
        )
        save_autoencoder(model, out / "checkpoints" / "autoencoder.pt")
    return model, log


def cmd_locate(cfg: dict) -> list[Path]:
    """Locate every organ in every test case; one JSON report per query
    volume."""
    out = output_dir(cfg)
    dataset = _dataset_dir(cfg)
    mc = _load_stage_checkpoint(cfg, "coarse")
    mf = _load_stage_checkpoint(cfg, "fine")
    inf = cfg["inference"]

    manifest = phantom.load_manifest(dataset)
    support = pipeline.support_case(dataset, seed=cfg["seed"])
    reports = []
    with _run_lock(out):
        _snapshot(cfg, out, "locate")
        report_dir = out / "reports"
        report_dir.mkdir(parents=True, exist_ok=True)
        for entry in phantom.case_entries(manifest, "test"):
            case = phantom.load_case(dataset, entry)
            case_report = {
                "case_id": entry["case_id"],
                "strategy": inf["strategy"],
                "K": inf["K"],
                "steps_coarse": inf["steps_coarse"],
                "organs": {},
            }
            for idx, organ in enumerate(sorted(case.masks)):
                rng = np.random.default_rng(
                    [cfg["seed"], entry["case_seed"], idx]
                )
                box, results = detect_organ(
                    mc,
                    mf,
                    case.volume,
                    support.volume,
                    support.masks[organ],
                    strategy=inf["strategy"],
                    K=inf["K"],
                    steps_coarse=inf["steps_coarse"],
                    rng=rng,
                )
                case_report["organs"][organ] = {
                    "box": {
                        "min_corner": box.min_corner.tolist(),
                        "max_corner": box.max_corner.tolist(),
                    },
                    "wall_time_s": sum(r.wall_time for r in results.values()),
                    "points": {
                        name: {
                            "final_world_mm": r.final_world.tolist(),
                            "per_run_world_mm": [
                                p.tolist() for p in r.per_run_worlds
                            ],
                            "trajectories_voxel": [
                                [p.tolist() for p in t] for t in r.trajectories
                            ],
                            "models": list(r.models),
                        }
                        for name, r in results.items()
                    },
                }
            path = report_dir / f"locate_{entry['case_id']}.json"
            path.write_text(json.dumps(case_report, indent=2, sort_keys=True))
            reports.append(path)
    print(f"wrote {len(reports)} localization reports to {out / 'reports'}")
    return reports


def cmd_evaluate(cfg: dict):
    """Score the localization reports against the dataset's ground-truth
    masks and emit records plus a per-organ summary."""
    out = output_dir(cfg)
    dataset = _dataset_dir(cfg)
    report_dir = out / "reports"
    reports = sorted(report_dir.glob("locate_*.json"))
    if not reports:
        raise DataError(f"no localization reports in {report_dir}; run locate")

    manifest = phantom.load_manifest(dataset)
    ground_truth = {}
    for entry in phantom.case_entries(manifest, "test"):
        case = phantom.load_case(dataset, entry)
        ground_truth[entry["case_id"]] = {
            organ: (mask, case.volume.spacing)
            for organ, mask in case.masks.items()
        }

    predictions: dict[str, dict[str, BBox3D]] = {}
    times: dict[str, dict[str, float]] = {}
    for path in reports:
        report = json.loads(path.read_text())
        case_id = report["case_id"]
        predictions[case_id] = {}
        times[case_id] = {}
        for organ, payload in report["organs"].items():
            predictions[case_id][organ] = BBox3D(
                min_corner=np.array(payload["box"]["min_corner"]),
                max_corner=np.array(payload["box"]["max_corner"]),
            )
            times[case_id][organ] = payload["wall_time_s"]

    from .evalkit import evaluate_run

    records, summary, flags = evaluate_run(
        predictions, ground_truth, method="ours", times=times
    )
    with _run_lock(out):
        _snapshot(cfg, out, "evaluate")
        tables = out / "tables"
        write_records_csv(records, tables / "records.csv")
        write_summary_csv({"ours": summary}, tables / "summary.csv")
        (tables / "summary.txt").write_text(
            render_table({"ours": summary}, "One-shot localization summary")
            + "\n"
        )
    if flags:
        print(f"missing predictions for {len(flags)} case/organ pairs: {flags}")
    print(render_table({"ours": summary}, "One-shot localization summary"))
    return records, summary, flags


def cmd_benchmark(cfg: dict):
    """Regression pipeline vs sliding-window baselines (accuracy + time)."""
    out = output_dir(cfg)
    dataset = _dataset_dir(cfg)
    mc = _load_stage_checkpoint(cfg, "coarse")
    mf = _load_stage_checkpoint(cfg, "fine")
    ae_path = out / "checkpoints" / "autoencoder.pt"
    if not ae_path.exists():
        raise DataError(
            f"missing autoencoder checkpoint at {ae_path}; run "
            f"'rprloc train --stage autoencoder' first"
        )
    encoder = load_autoencoder(ae_path)
    bl = cfg["baselines"]

    with _run_lock(out):
        _snapshot(cfg, out, "benchmark")
        records, failures = pipeline.benchmark_methods(
            mc,
            mf,
            encoder,
            dataset,
            kinds=bl["kinds"],
            stride=bl["stride"],
            K=bl["K"],
            steps_coarse=cfg["inference"]["steps_coarse"],
            seed=cfg["seed"],
            organs=bl["organs"],
            n_cases=bl["n_cases"],
        )
        summaries = pipeline.summarize_by_method(records)
        tables = out / "tables"
        write_records_csv(records, tables / "benchmark_records.csv")
        write_summary_csv(summaries, tables / "table3.csv", include_time=True)
        (tables / "table3.txt").write_text(
            render_table(summaries, "Method comparison", include_time=True) + "\n"
        )
    for kind, reason in failures.items():
        print(f"baseline {kind} failed: {reason}")
    print(render_table(summaries, "Method comparison", include_time=True))
    return records, failures


def cmd_repro_tables(cfg: dict, overwrite: bool = False):
    """One-command chain: generate -> train x2 -> autoencoder -> the three
    desk-scale trend tables."""
    out = output_dir(cfg)
    cmd_generate(cfg, overwrite=overwrite)
    mc, _ = cmd_train(cfg, "coarse")
    mf, _ = cmd_train(cfg, "fine")
    encoder, _ = cmd_train_autoencoder(cfg)

    dataset = _dataset_dir(cfg)
    inf = cfg["inference"]
    tables = out / "tables"

    # Table 1: strategy x multi-run ensemble, coarse model only.
    table1 = {}
    variants = [("diagonal", 1)] + [
        ("extreme", k) for k in cfg["repro"]["table1_mre"]
    ]
    for strategy, k in variants:
        records, _ = pipeline.evaluate_split(
            mc, None, dataset, strategy=strategy, K=k, seed=cfg["seed"]
        )
        table1[f"{strategy}_K{k}"] = summarize(records)

    # Table 2: multi-step methods, extreme strategy.
    table2 = {}
    for steps in cfg["repro"]["table2_steps"]:
        records, _ = pipeline.evaluate_split(
            mc, None, dataset, strategy="extreme", K=inf["K"],
            steps_coarse=steps, seed=cfg["seed"],
        )
        table2[f"mc_{steps}step"] = summarize(records)
    records, _ = pipeline.evaluate_split(
        mc, mf, dataset, strategy="extreme", K=inf["K"],
        steps_coarse=inf["steps_coarse"], seed=cfg["seed"],
    )
    table2["mc_plus_mf"] = summarize(records)

    with _run_lock(out):
        _snapshot(cfg, out, "repro_tables")
        write_summary_csv(table1, tables / "table1.csv")
        write_summary_csv(table2, tables / "table2.csv")
        (tables / "table1.txt").write_text(
            render_table(table1, "Strategy x multi-run ensemble") + "\n"
        )
        (tables / "table2.txt").write_text(
            render_table(table2, "Multi-step localization") + "\n"
        )

    cmd_benchmark(cfg)
    print(f"tables written to {tables}")
    return table1, table2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rprloc",
        description="Self-supervised one-shot localization toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (
        "generate",
        "train",
        "locate",
        "benchmark",
        "evaluate",
        "repro-tables",
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--overwrite", action="store_true")
        p.add_argument("--deterministic", action="store_true")
        if name == "train":
            p.add_argument(
                "--stage",
                choices=["coarse", "fine", "autoencoder"],
                required=True,
            )
        if name in ("locate", "repro-tables"):
            p.add_argument("--strategy", choices=["extreme", "diagonal"])
            p.add_argument("--ensemble", type=int, metavar="K")
            p.add_argument("--steps", type=int, metavar="N")
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    inference = {}
    if getattr(args, "strategy", None):
        inference["strategy"] = args.strategy
    if getattr(args, "ensemble", None):
        inference["K"] = args.ensemble
    if getattr(args, "steps", None):
        inference["steps_coarse"] = args.steps
    if inference:
        overrides["inference"] = inference
    return overrides


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides_from_args(args))
        if args.command == "generate":
            cmd_generate(cfg, overwrite=args.overwrite)
        elif args.command == "train":
            if args.stage == "autoencoder":
                cmd_train_autoencoder(cfg)
            else:
                cmd_train(cfg, args.stage)
        elif args.command == "locate":
            cmd_locate(cfg)
        elif args.command == "benchmark":
            cmd_benchmark(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        elif args.command == "repro-tables":
            cmd_repro_tables(cfg, overwrite=args.overwrite)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
