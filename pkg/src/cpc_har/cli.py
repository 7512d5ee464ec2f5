"""Command-line entry point for the pipeline.

Commands: ``synth`` (generate sinusoid CSV data), ``pretrain`` (contrastive
pretraining to a checkpoint), ``finetune`` (classifier head on frozen
features), ``evaluate`` (cross-validated frozen-feature probe), ``ablate``
(the five-row component swap matrix) and ``search`` (random hyperparameter
search).

Configuration comes from a TOML file with [data]/[cpc]/[train]/[probe]/
[search] sections, overridden by repeatable ``--set section.key=value``
flags. Every run directory receives the fully resolved config, the seed and
content hashes of the inputs, so a run can be reproduced exactly. Progress
goes to stderr; machine-readable results go to files only.

Exit codes: 0 success, 2 usage, 3 validation, 4 runtime.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import multiprocessing
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from cpc_har.data import (
    DataError,
    WindowedDataset,
    downsample,
    load_csv,
    make_folds,
    pretrain_split,
    sample_limited_labels,
    sample_window_fraction,
    synth_generate,
    windows_from_recordings,
    write_csv,
    zscore_apply,
    zscore_fit,
)
from cpc_har.models import (
    ConfigError,
    ModelConfig,
    count_params,
    load_checkpoint,
    save_checkpoint,
)
from cpc_har.tensor import Rng
from cpc_har.training import (
    BASELINE_HORIZON_GRID,
    CLASSIFIER_GRID,
    PRETRAIN_GRID,
    AuditLog,
    SearchSpace,
    TrainConfig,
    config_hash,
    cross_validate,
    finetune,
    pretrain,
    write_curves_csv,
    write_results_jsonl,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

GRID_KEYS = ("lr", "weight_decay", "causal_blocks", "horizon", "num_negatives")


def _defaults() -> dict:
    return {
        "data": {
            "path": "",
            "subjects": 8,
            "classes": 3,
            "rate_hz": 50.0,
            "duration_s": 600.0,
            "resample_hz": 0.0,
            "window_s": 2.0,
            "overlap": 0.0,
            "target_overlap": 0.5,
        },
        "cpc": asdict(ModelConfig()),
        "train": asdict(TrainConfig()),
        "probe": {
            "head": "linear",
            "lr": 5e-4,
            "weight_decay": 0.0,
            "batch_size": 256,
            "epochs": 50,
            "folds": 5,
            "seeds": 3,
            "per_class": 0,
        },
        "search": {
            "budget": 8,
            "target": "pretrain",
        },
    }


# -- config resolution ---------------------------------------------------------


def _parse_literal(text: str):
    """int, float, bool or bare string; comma-separated values become a list."""
    if "," in text:
        return [_parse_literal(part) for part in text.split(",") if part != ""]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _check_key(section: str, key: str, defaults: dict) -> None:
    if section not in defaults:
        raise ConfigError(
            f"unknown config section {section!r}; expected one of "
            f"{sorted(defaults)}")
    known = set(defaults[section])
    if section == "search":
        known |= set(GRID_KEYS)
    if key not in known:
        raise ConfigError(
            f"unknown config key {section}.{key}; {section} accepts "
            f"{sorted(known)}")


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def resolve_config(config_path: str | None, overrides: list[str],
                   seed: int | None) -> dict:
    """defaults <- config file <- --set overrides <- --seed flag."""
    cfg = _defaults()
    if config_path:
        loaded = load_config_file(config_path)
        for section, values in loaded.items():
            if not isinstance(values, dict):
                raise ConfigError(
                    f"top-level key {section!r} must be a section (table)")
            for key, value in values.items():
                _check_key(section, key, cfg)
                cfg[section][key] = value
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"--set key must be section.key, got {dotted!r}")
        section, key = parts
        _check_key(section, key, cfg)
        cfg[section][key] = _parse_literal(raw)
    if seed is not None:
        cfg["train"]["seed"] = seed
    return cfg


def model_from(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["cpc"]).validate()


def train_from(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def probe_train_from(cfg: dict) -> TrainConfig:
    p = cfg["probe"]
    if p["head"] not in ("linear", "mlp"):
        raise ConfigError(f"probe.head must be linear or mlp, got {p['head']!r}")
    for key in ("folds", "seeds"):
        if int(p[key]) < 1:
            raise ConfigError(f"probe.{key} must be >= 1, got {p[key]}")
    return TrainConfig(lr=p["lr"], weight_decay=p["weight_decay"],
                       batch_size=p["batch_size"], epochs=p["epochs"],
                       seed=cfg["train"]["seed"]).validate()


def allowed_horizons(cfg: dict) -> tuple:
    """The default grid depends on the variant; [search] horizon widens it."""
    widened = cfg["search"].get("horizon")
    if widened:
        return tuple(widened) if isinstance(widened, list) else (widened,)
    c = cfg["cpc"]
    if c["encoder_variant"] == "enhanced" and c["task_variant"] == "per_timestep":
        return PRETRAIN_GRID["horizon"]
    return BASELINE_HORIZON_GRID


def check_horizon(cfg: dict) -> None:
    grid = allowed_horizons(cfg)
    h = cfg["cpc"]["horizon"]
    if h not in grid:
        raise ConfigError(
            f"cpc.horizon={h} is not in the allowed grid {tuple(grid)} for "
            f"this variant; widen it with [search] horizon if intended")


# -- run directories -----------------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def prepare_run_dir(out: str, force: bool, command: str, cfg: dict,
                    inputs: dict[str, str]) -> Path:
    """Create the run directory and write config echo + manifest.

    Refuses to reuse a directory that already holds a manifest unless
    --force was given.
    """
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.json"
    if manifest.exists() and not force:
        raise ConfigError(
            f"{out_dir} already contains run artifacts; pass --force to "
            f"overwrite")
    (out_dir / "config_resolved.json").write_text(
        json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    manifest.write_text(json.dumps({
        "command": command,
        "seed": cfg["train"]["seed"],
        "config_hash": config_hash(cfg),
        "inputs": {name: _sha256(path) for name, path in inputs.items()},
    }, sort_keys=True, indent=2) + "\n")
    return out_dir


def _write_metrics(out_dir: Path, payload: dict) -> None:
    (out_dir / "metrics.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- data plumbing ---------------------------------------------------------------


def load_recordings(cfg: dict, rng: Rng):
    d = cfg["data"]
    if d["path"]:
        recordings = load_csv(d["path"])
        if d["resample_hz"]:
            recordings = [downsample(r, d["resample_hz"]) for r in recordings]
        return recordings
    return synth_generate(int(d["subjects"]), int(d["classes"]),
                          float(d["rate_hz"]), float(d["duration_s"]),
                          rng.child("data"))


def source_split(cfg: dict, recordings, rng: Rng):
    """Pretraining train/val window sets, normalized, plus the fitted stats."""
    d = cfg["data"]
    source = windows_from_recordings(recordings, d["window_s"], d["overlap"])
    subjects = sorted(r.subject_id for r in recordings)
    train_subj, val_subj = pretrain_split(subjects, rng.child("pretrain-split"))
    train = sample_window_fraction(source.for_subjects(train_subj),
                                   cfg["train"]["pretrain_fraction"],
                                   rng.child("fraction"))
    val = source.for_subjects(val_subj)
    stats = zscore_fit(train)
    return zscore_apply(train, stats), zscore_apply(val, stats), stats


def target_windows(cfg: dict, recordings) -> WindowedDataset:
    d = cfg["data"]
    ds = windows_from_recordings(recordings, d["window_s"], d["target_overlap"])
    if ds.labels is None:
        raise DataError("this command needs labeled data (CSV label column "
                        "or synthetic input)")
    return ds


def _stats_into_buffers(params, stats) -> None:
    params.buffers["norm.mean"] = np.asarray(stats[0], dtype=np.float64)
    params.buffers["norm.std"] = np.asarray(stats[1], dtype=np.float64)


def _stats_from_buffers(params):
    if "norm.mean" in params.buffers and "norm.std" in params.buffers:
        return params.buffers["norm.mean"], params.buffers["norm.std"]
    return None


# -- commands ---------------------------------------------------------------------


def cmd_synth(args, cfg: dict) -> int:
    d = cfg["data"]
    out_dir = prepare_run_dir(args.out, args.force, "synth", cfg, {})
    rng = Rng(cfg["train"]["seed"])
    recordings = synth_generate(int(d["subjects"]), int(d["classes"]),
                                float(d["rate_hz"]), float(d["duration_s"]),
                                rng.child("data"))
    write_csv(out_dir / "data.csv", recordings)
    total = sum(len(r) for r in recordings)
    _write_metrics(out_dir, {
        "subjects": len(recordings),
        "classes": int(d["classes"]),
        "rate_hz": float(d["rate_hz"]),
        "samples_total": total,
    })
    _say(f"wrote {total} samples for {len(recordings)} subjects to "
         f"{out_dir / 'data.csv'}")
    return EXIT_OK


def cmd_pretrain(args, cfg: dict) -> int:
    check_horizon(cfg)
    model = model_from(cfg)
    train_cfg = train_from(cfg)
    inputs = {"data": cfg["data"]["path"]} if cfg["data"]["path"] else {}
    if args.config:
        inputs["config"] = args.config
    out_dir = prepare_run_dir(args.out, args.force, "pretrain", cfg, inputs)
    rng = Rng(train_cfg.seed)
    recordings = load_recordings(cfg, rng)
    train, val, stats = source_split(cfg, recordings, rng)
    _say(f"pretraining on {len(train)} windows ({len(val)} validation)")
    audit = AuditLog()
    params, curves = pretrain(model, train, val, train_cfg, audit=audit)
    _stats_into_buffers(params, stats)
    save_checkpoint(out_dir / "checkpoint.npz", params)
    write_curves_csv(out_dir / "curves.csv", curves,
                     ["epoch", "train_loss", "val_loss", "lr"])
    best = curves[params.meta["best_epoch"]]["val_loss"]
    _write_metrics(out_dir, {
        "parameters": count_params(params),
        "epochs_trained": params.meta["epochs_trained"],
        "best_epoch": params.meta["best_epoch"],
        "val_loss_first": curves[0]["val_loss"],
        "val_loss_best": best,
    })
    _say(f"val loss {curves[0]['val_loss']:.4f} -> {best:.4f}, checkpoint in "
         f"{out_dir}")
    return EXIT_OK


def _finetune_split(cfg: dict, ds: WindowedDataset, rng: Rng):
    subjects = sorted(set(ds.subjects))
    train_subj, val_subj = pretrain_split(subjects, rng.child("finetune-split"))
    return ds.for_subjects(train_subj), ds.for_subjects(val_subj)


def cmd_finetune(args, cfg: dict) -> int:
    probe_cfg = probe_train_from(cfg)
    inputs = {"checkpoint": args.checkpoint}
    if cfg["data"]["path"]:
        inputs["data"] = cfg["data"]["path"]
    if args.config:
        inputs["config"] = args.config
    out_dir = prepare_run_dir(args.out, args.force, "finetune", cfg, inputs)
    params = load_checkpoint(args.checkpoint)
    rng = Rng(probe_cfg.seed)
    recordings = load_recordings(cfg, rng)
    ds = target_windows(cfg, recordings)
    train, val = _finetune_split(cfg, ds, rng)
    stats = _stats_from_buffers(params)
    if stats is None:
        stats = zscore_fit(train)
        _stats_into_buffers(params, stats)
    train, val = zscore_apply(train, stats), zscore_apply(val, stats)
    per_class = int(cfg["probe"]["per_class"])
    if per_class > 0:
        train = sample_limited_labels(train, per_class, rng.child("limit"))
    _say(f"fitting {cfg['probe']['head']} head on {len(train)} windows "
         f"({len(val)} validation)")
    audit = AuditLog()
    curves = finetune(params, cfg["probe"]["head"], train, val, probe_cfg,
                      audit=audit)
    save_checkpoint(out_dir / "checkpoint.npz", params)
    write_curves_csv(out_dir / "curves.csv", curves,
                     ["epoch", "train_loss", "val_macro_f1", "lr"])
    best = max(c["val_macro_f1"] for c in curves)
    _write_metrics(out_dir, {
        "epochs_trained": params.meta["epochs_trained"],
        "best_epoch": params.meta["best_epoch"],
        "val_macro_f1_best": best,
    })
    _say(f"best validation macro-F1 {best:.4f}, checkpoint in {out_dir}")
    return EXIT_OK


def cmd_evaluate(args, cfg: dict) -> int:
    probe_cfg = probe_train_from(cfg)
    inputs = {"checkpoint": args.checkpoint}
    if cfg["data"]["path"]:
        inputs["data"] = cfg["data"]["path"]
    if args.config:
        inputs["config"] = args.config
    out_dir = prepare_run_dir(args.out, args.force, "evaluate", cfg, inputs)
    params = load_checkpoint(args.checkpoint)
    rng = Rng(probe_cfg.seed)
    recordings = load_recordings(cfg, rng)
    ds = target_windows(cfg, recordings)
    plan = make_folds(sorted(set(ds.subjects)), int(cfg["probe"]["folds"]),
                      rng.child("folds"))
    per_class = int(cfg["probe"]["per_class"]) or None
    audit = AuditLog()
    _say(f"evaluating {len(ds)} windows over {len(plan)} folds x "
         f"{cfg['probe']['seeds']} seeds")
    metrics = cross_validate(ds, plan, params, cfg["probe"]["head"], probe_cfg,
                             num_seeds=int(cfg["probe"]["seeds"]),
                             per_class=per_class,
                             stats=_stats_from_buffers(params),
                             run_id=out_dir.name, audit=audit)
    audit.assert_test_only_reported()
    write_results_jsonl(out_dir / "results.jsonl", metrics.records)
    _write_metrics(out_dir, {
        "macro_f1_mean": metrics.mean,
        "macro_f1_std": metrics.std,
        "per_seed": [float(v) for v in metrics.per_seed],
        "folds": int(cfg["probe"]["folds"]),
        "seeds": int(cfg["probe"]["seeds"]),
    })
    _say(f"macro-F1 {metrics.mean:.4f} +/- {metrics.std:.4f}")
    return EXIT_OK


# -- ablation matrix -------------------------------------------------------------

# Component-swap rows: start from the stride-1/GRU/single-anchor baseline and
# flip encoder, aggregator and pretext task one at a time. Rows with the
# stride-1 encoder keep its native horizon grid; strided-encoder rows halve
# the temporal resolution, so the same grid now covers twice the duration.
ABLATION_ROWS = (
    {"name": "cpc-baseline",
     "cpc": {"encoder_variant": "original", "aggregator_variant": "gru",
             "task_variant": "single_anchor", "horizon": 16},
     "horizon_grid": BASELINE_HORIZON_GRID},
    {"name": "cpc-strided-encoder",
     "cpc": {"encoder_variant": "enhanced", "aggregator_variant": "gru",
             "task_variant": "single_anchor", "horizon": 16},
     "horizon_grid": BASELINE_HORIZON_GRID},
    {"name": "cpc-conv-aggregator",
     "cpc": {"encoder_variant": "original", "aggregator_variant": "causal_conv",
             "task_variant": "single_anchor", "horizon": 16},
     "horizon_grid": BASELINE_HORIZON_GRID},
    {"name": "cpc-strided-encoder-conv-aggregator",
     "cpc": {"encoder_variant": "enhanced", "aggregator_variant": "causal_conv",
             "task_variant": "single_anchor", "horizon": 16},
     "horizon_grid": BASELINE_HORIZON_GRID},
    {"name": "cpc-enhanced",
     "cpc": {"encoder_variant": "enhanced", "aggregator_variant": "causal_conv",
             "task_variant": "per_timestep", "horizon": 12},
     "horizon_grid": PRETRAIN_GRID["horizon"]},
)


def ablation_plan(cfg: dict) -> list[dict]:
    """Resolve the five row configs; hashes must come out pairwise distinct."""
    rows = []
    for row in ABLATION_ROWS:
        row_cfg = copy.deepcopy(cfg)
        row_cfg["cpc"].update(row["cpc"])
        if row_cfg["cpc"]["horizon"] not in row["horizon_grid"]:
            raise ConfigError(
                f"row {row['name']}: horizon {row_cfg['cpc']['horizon']} "
                f"not in grid {row['horizon_grid']}")
        model_from(row_cfg)
        rows.append({
            "name": row["name"],
            "horizon_grid": list(row["horizon_grid"]),
            "config": {"cpc": row_cfg["cpc"], "train": row_cfg["train"],
                       "probe": row_cfg["probe"]},
            "config_hash": config_hash(row_cfg["cpc"]),
        })
    hashes = [r["config_hash"] for r in rows]
    if len(set(hashes)) != len(hashes):
        raise ConfigError("ablation rows did not produce distinct config hashes")
    return rows


def run_pipeline(cfg: dict) -> dict:
    """pretrain -> frozen-probe cross-validation, as one deterministic unit."""
    model = model_from(cfg)
    train_cfg = train_from(cfg)
    probe_cfg = probe_train_from(cfg)
    rng = Rng(train_cfg.seed)
    recordings = load_recordings(cfg, rng)
    train, val, stats = source_split(cfg, recordings, rng)
    params, curves = pretrain(model, train, val, train_cfg)
    ds = target_windows(cfg, recordings)
    plan = make_folds(sorted(set(ds.subjects)), int(cfg["probe"]["folds"]),
                      rng.child("folds"))
    audit = AuditLog()
    metrics = cross_validate(ds, plan, params, cfg["probe"]["head"], probe_cfg,
                             num_seeds=int(cfg["probe"]["seeds"]),
                             per_class=int(cfg["probe"]["per_class"]) or None,
                             stats=stats, audit=audit)
    audit.assert_test_only_reported()
    return {
        "macro_f1_mean": metrics.mean,
        "macro_f1_std": metrics.std,
        "per_seed": [float(v) for v in metrics.per_seed],
        "val_loss_first": curves[0]["val_loss"],
        "val_loss_best": curves[params.meta["best_epoch"]]["val_loss"],
        "epochs_trained": params.meta["epochs_trained"],
    }


def _ablation_worker(payload: str) -> str:
    row = json.loads(payload)
    try:
        result = run_pipeline(row["config_full"])
    except Exception as exc:  # surfaced with the row name by the parent
        return json.dumps({"name": row["name"], "error": f"{type(exc).__name__}: {exc}"})
    result.update(name=row["name"], config_hash=row["config_hash"])
    return json.dumps(result)


def cmd_ablate(args, cfg: dict) -> int:
    inputs = {}
    if cfg["data"]["path"]:
        inputs["data"] = cfg["data"]["path"]
    if args.config:
        inputs["config"] = args.config
    out_dir = prepare_run_dir(args.out, args.force, "ablate", cfg, inputs)
    rows = ablation_plan(cfg)
    (out_dir / "ablation_plan.json").write_text(
        json.dumps(rows, sort_keys=True, indent=2) + "\n")
    if args.plan_only:
        for row in rows:
            _say(f"{row['name']:40s} hash {row['config_hash']} "
                 f"horizon grid {row['horizon_grid']}")
        _write_metrics(out_dir, {"rows_planned": len(rows)})
        return EXIT_OK

    payloads = []
    for row in rows:
        row_cfg = copy.deepcopy(cfg)
        row_cfg["cpc"] = dict(row["config"]["cpc"])
        payloads.append(json.dumps({
            "name": row["name"], "config_hash": row["config_hash"],
            "config_full": row_cfg,
        }))
    if args.workers > 1:
        with multiprocessing.Pool(min(args.workers, len(payloads))) as pool:
            raw = pool.map(_ablation_worker, payloads)
    else:
        raw = [_ablation_worker(p) for p in payloads]
    results = [json.loads(r) for r in raw]
    for result in results:
        if "error" in result:
            raise RuntimeError(f"row {result['name']} failed: {result['error']}")
        _say(f"{result['name']:40s} macro-F1 {result['macro_f1_mean']:.4f} "
             f"+/- {result['macro_f1_std']:.4f}")
    write_results_jsonl(out_dir / "results.jsonl", results)
    _write_metrics(out_dir, {"rows": {r["name"]: r["macro_f1_mean"]
                                      for r in results}})
    return EXIT_OK


# -- random search ----------------------------------------------------------------


def _search_space(cfg: dict) -> SearchSpace:
    target = cfg["search"]["target"]
    if target == "pretrain":
        grids = {k: tuple(v) for k, v in PRETRAIN_GRID.items()}
    elif target == "probe":
        grids = {k: tuple(v) for k, v in CLASSIFIER_GRID.items()}
    else:
        raise ConfigError(
            f"search.target must be pretrain or probe, got {target!r}")
    for key in GRID_KEYS:
        if key in cfg["search"] and key in grids:
            value = cfg["search"][key]
            grids[key] = tuple(value) if isinstance(value, list) else (value,)
    return SearchSpace(grids=grids)


def _apply_combo(cfg: dict, combo: dict, target: str) -> dict:
    out = copy.deepcopy(cfg)
    section = {"pretrain": "train", "probe": "probe"}[target]
    for key, value in combo.items():
        if key in ("lr", "weight_decay"):
            out[section][key] = value
        else:
            out["cpc"][key] = value
    return out


def _search_worker(payload: str) -> str:
    job = json.loads(payload)
    try:
        result = run_pipeline(job["config_full"])
    except Exception as exc:
        return json.dumps({"combo": job["combo"],
                           "error": f"{type(exc).__name__}: {exc}"})
    return json.dumps({"combo": job["combo"], "result": result})


def cmd_search(args, cfg: dict) -> int:
    inputs = {}
    if cfg["data"]["path"]:
        inputs["data"] = cfg["data"]["path"]
    if args.config:
        inputs["config"] = args.config
    out_dir = prepare_run_dir(args.out, args.force, "search", cfg, inputs)
    target = cfg["search"]["target"]
    space = _search_space(cfg)
    combos = space.sample(int(cfg["search"]["budget"]),
                          Rng(cfg["train"]["seed"]).child("search"))
    _say(f"searching {len(combos)} {target} combinations "
         f"(grid size {space.size()})")
    payloads = [json.dumps({"combo": combo,
                            "config_full": _apply_combo(cfg, combo, target)})
                for combo in combos]
    if args.workers > 1:
        with multiprocessing.Pool(min(args.workers, len(payloads))) as pool:
            raw = pool.map(_search_worker, payloads)
    else:
        raw = [_search_worker(p) for p in payloads]
    rows = []
    for item in map(json.loads, raw):
        if "error" in item:
            raise RuntimeError(f"combination {item['combo']} failed: "
                               f"{item['error']}")
        rows.append({"combo": item["combo"],
                     "macro_f1_mean": item["result"]["macro_f1_mean"],
                     "macro_f1_std": item["result"]["macro_f1_std"],
                     "config_hash": config_hash(item["combo"])})
    rows.sort(key=lambda r: (-r["macro_f1_mean"], r["config_hash"]))
    for row in rows:
        _say(f"macro-F1 {row['macro_f1_mean']:.4f} +/- "
             f"{row['macro_f1_std']:.4f}  {row['combo']}")
    write_results_jsonl(out_dir / "results.jsonl", rows)
    _write_metrics(out_dir, {"best_combo": rows[0]["combo"],
                             "best_macro_f1": rows[0]["macro_f1_mean"],
                             "evaluated": len(rows)})
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpc-har",
        description="Contrastive pretraining and probing for wearable sensor "
                    "windows.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_checkpoint=False):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override one resolved config value (repeatable)")
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override train.seed")
        p.add_argument("--force", action="store_true",
                       help="overwrite an existing run directory")
        p.add_argument("--workers", type=int, default=1,
                       help="worker processes for row/combination fan-out")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="backbone checkpoint (.npz)")

    p_synth = sub.add_parser("synth", help="generate synthetic sensor CSV data")
    common(p_synth)
    p_synth.add_argument("--subjects", type=int, default=None)
    p_synth.add_argument("--classes", type=int, default=None)
    p_synth.add_argument("--rate", type=float, default=None)
    p_synth.add_argument("--duration", type=float, default=None)

    for name, help_text, needs_ckpt in (
        ("pretrain", "contrastive pretraining to a checkpoint", False),
        ("finetune", "train a classifier head on frozen features", True),
        ("evaluate", "cross-validated frozen-feature probe", True),
        ("ablate", "run the five component-swap configurations", False),
        ("search", "random hyperparameter search", False),
    ):
        p = sub.add_parser(name, help=help_text)
        common(p, needs_checkpoint=needs_ckpt)
        if name == "ablate":
            p.add_argument("--plan-only", action="store_true",
                           help="emit row configs and hashes without training")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "search": cmd_search,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        if args.command == "synth":
            for flag, key in (("subjects", "subjects"), ("classes", "classes"),
                              ("rate", "rate_hz"), ("duration", "duration_s")):
                value = getattr(args, flag)
                if value is not None:
                    cfg["data"][key] = value
        if args.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {args.workers}")
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        _say(f"error: {exc}")
        return EXIT_VALIDATION
    except (DataError, OSError, RuntimeError, ValueError, KeyError,
            AssertionError) as exc:
        _say(f"error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
