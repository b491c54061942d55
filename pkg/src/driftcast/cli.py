"""Command-line entry point: synth, train, forecast, eval, gradcheck.

Configuration is a plain JSON file (``--config``) merged with defaults;
explicit command-line flags win over the file. Every command echoes the
effective configuration to the run directory so a rerun from that file
reproduces the results bit for bit. Log verbosity comes from the
``DRIFTCAST_LOG`` environment variable (debug/info/warning).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DataValidationError,
    build_advection_series,
    chronological_split,
    compute_norm_stats,
    load_dataset,
    make_windows,
    perturb_missing,
    perturb_noise,
    save_dataset,
    write_manifest,
)
from .dde import dump_trajectory
from .gradcheck import end_to_end_check
from .graphs import build_diffusion_graph
from .model import (
    ModelConfig,
    forecast as model_forecast,
    init_model,
    load_params_arrays,
    model_forward,
    params_to_arrays,
)
from .synth import default_config, simulate_transport
from .train import (
    Adam,
    TrainConfig,
    evaluate,
    evaluate_per_day,
    predict_windows,
    train_loop,
)

log = logging.getLogger("driftcast")

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "run",
    "workers": 1,
    # data
    "stations": None,
    "series": None,
    "ratios": "2:1:1",
    "stride_train": 1,
    "stride_eval": 1,
    # model
    "t_in": 24,
    "horizon": 12,
    "d": 16,
    "d_e": 16,
    "k_hops": 2,
    "memory_units": 16,
    "tau": 2,
    "diffusion_coeff": 0.1,
    "huber_delta": 1.0,
    "substeps": 4,
    "kappa": 0.1,
    "hold_covariates": False,
    # training
    "lr": 0.005,
    "batch_size": 16,
    "max_epochs": 100,
    "patience": 10,
    "clip_norm": None,
    "resume": None,
    # synth
    "n": 12,
    "length": 3000,
    # eval / forecast
    "checkpoint": None,
    "missing_rate": None,
    "snr_db": None,
    "perturb_seed": None,
    "window_index": -1,
    "dump_trajectory": False,
    # gradcheck
    "tolerance": 1e-4,
}


class UsageError(ValueError):
    pass


def _parse_ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = [float(p) for p in text.split(":")]
    except ValueError:
        parts = []
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise UsageError(f"ratios must look like '2:1:1', got {text!r}")
    return tuple(parts)


def build_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags; validates known keys."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys {unknown}")
        cfg.update(loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    _parse_ratios(cfg["ratios"])
    if cfg["workers"] != 1:
        log.info("workers=%s requested; this build executes batches serially", cfg["workers"])
    return cfg


def echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(cfg, sort_keys=True, indent=2, default=str) + "\n"
    )


def model_config_from(cfg: dict, n: int, d_m: int) -> ModelConfig:
    return ModelConfig(
        n=n,
        t_in=int(cfg["t_in"]),
        horizon=int(cfg["horizon"]),
        d=int(cfg["d"]),
        d_e=int(cfg["d_e"]),
        k_hops=int(cfg["k_hops"]),
        memory_units=int(cfg["memory_units"]),
        tau=int(cfg["tau"]),
        d_m=d_m,
        diffusion_coeff=float(cfg["diffusion_coeff"]),
        huber_delta=float(cfg["huber_delta"]),
        substeps=int(cfg["substeps"]),
        kappa=float(cfg["kappa"]),
        hold_covariates=bool(cfg["hold_covariates"]),
    )


def _model_config_dict(mcfg: ModelConfig) -> dict:
    return {
        "n": mcfg.n, "t_in": mcfg.t_in, "horizon": mcfg.horizon, "d": mcfg.d,
        "d_e": mcfg.d_e, "k_hops": mcfg.k_hops, "memory_units": mcfg.memory_units,
        "tau": mcfg.tau, "d_m": mcfg.d_m, "diffusion_coeff": mcfg.diffusion_coeff,
        "huber_delta": mcfg.huber_delta, "substeps": mcfg.substeps,
        "kappa": mcfg.kappa, "hold_covariates": mcfg.hold_covariates,
    }


def _stats_dict(stats) -> dict:
    return {
        "target_mean": stats.target_mean,
        "target_std": stats.target_std,
        "cov_mean": list(stats.cov_mean),
        "cov_std": list(stats.cov_std),
    }


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    if int(cfg["n"]) < 2:
        raise UsageError("synth needs at least 2 stations (graphs are undefined for N=1)")
    oracle = default_config(seed=int(cfg["seed"]), n=int(cfg["n"]),
                            length=int(cfg["length"]))
    dataset = simulate_transport(oracle)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out_dir / "stations.csv", out_dir / "series.csv")
    write_manifest(out_dir / "manifest.txt", {
        "channels": ",".join(dataset.channel_names),
        "granularity_hours": dataset.granularity_hours,
        "n_stations": dataset.n,
        "length": dataset.length,
        "seed": cfg["seed"],
    })
    echo_config(cfg, out_dir)
    print(f"wrote {out_dir / 'stations.csv'} and {out_dir / 'series.csv'} "
          f"({dataset.n} stations, {dataset.length} steps)")
    return 0


def _load_pipeline(cfg: dict):
    if not cfg["stations"] or not cfg["series"]:
        raise UsageError("--stations and --series are required")
    dataset = load_dataset(cfg["stations"], cfg["series"])
    ratios = _parse_ratios(cfg["ratios"])
    train, val, test = chronological_split(dataset, ratios)
    stats = compute_norm_stats(train)
    mcfg = model_config_from(cfg, dataset.n, dataset.d_m)
    a_diff = build_diffusion_graph(dataset.stations, mcfg.kappa)
    return dataset, (train, val, test), stats, mcfg, a_diff


def cmd_train(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    dataset, (train, val, _), stats, mcfg, a_diff = _load_pipeline(cfg)
    train_windows = make_windows(train, mcfg.t_in, mcfg.horizon,
                                 int(cfg["stride_train"]), mcfg.tau, stats)
    val_windows = make_windows(val, mcfg.t_in, mcfg.horizon,
                               int(cfg["stride_eval"]), mcfg.tau, stats)
    log.info("windows: %d train, %d val", len(train_windows), len(val_windows))

    tcfg = TrainConfig(
        learning_rate=float(cfg["lr"]),
        batch_size=int(cfg["batch_size"]),
        max_epochs=int(cfg["max_epochs"]),
        patience=int(cfg["patience"]),
        seed=int(cfg["seed"]),
        clip_norm=None if cfg["clip_norm"] is None else float(cfg["clip_norm"]),
    )
    params = init_model(mcfg, tcfg.seed)
    optimizer = Adam(list(params.named()), tcfg.beta1, tcfg.beta2, tcfg.eps)
    start_epoch = 1
    if cfg["resume"]:
        arrays, meta = load_checkpoint(cfg["resume"])
        if meta.get("model_config") != _model_config_dict(mcfg):
            raise UsageError(
                f"resume checkpoint model config {meta.get('model_config')} "
                f"does not match the effective config"
            )
        load_params_arrays(params, arrays)
        optimizer.load_state_arrays(arrays, meta["optimizer_steps"])
        start_epoch = int(meta["epoch"]) + 1
        log.info("resumed from %s at epoch %d", cfg["resume"], start_epoch)

    result = train_loop(params, mcfg, a_diff, train_windows, val_windows, tcfg,
                        stats, optimizer=optimizer, start_epoch=start_epoch,
                        log=log.info)

    out_dir.mkdir(parents=True, exist_ok=True)
    meta_common = {
        "model_config": _model_config_dict(mcfg),
        "norm_stats": _stats_dict(stats),
        "seed": tcfg.seed,
    }
    save_checkpoint(out_dir / "best.ckpt", result.best_arrays,
                    {**meta_common, "epoch": result.best_epoch,
                     "val_mae": result.best_val_mae, "optimizer_steps": 0})
    last_arrays = params_to_arrays(params)
    last_arrays.update(optimizer.state_arrays())
    save_checkpoint(out_dir / "last.ckpt", last_arrays,
                    {**meta_common, "epoch": result.epochs_run,
                     "optimizer_steps": optimizer.step_count})
    with open(out_dir / "loss_curves.csv", "w") as fh:
        fh.write("epoch,train_loss,val_mae\n")
        for row in result.curves:
            fh.write(f"{row['epoch']},{row['train_loss']:.17g},{row['val_mae']:.17g}\n")
    write_manifest(out_dir / "manifest.txt", {
        "channels": ",".join(dataset.channel_names),
        "granularity_hours": dataset.granularity_hours,
        "target_mean": f"{stats.target_mean:.17g}",
        "target_std": f"{stats.target_std:.17g}",
        "cov_mean": ",".join(f"{v:.17g}" for v in stats.cov_mean),
        "cov_std": ",".join(f"{v:.17g}" for v in stats.cov_std),
    })
    echo_config(cfg, out_dir)
    print(f"best val MAE {result.best_val_mae:.6f} at epoch {result.best_epoch} "
          f"({result.epochs_run} epochs run); checkpoints in {out_dir}")
    return 0


def _load_checkpoint_model(cfg: dict, dataset_n: int, dataset_dm: int):
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    arrays, meta = load_checkpoint(cfg["checkpoint"])
    mc = meta["model_config"]
    if mc["n"] != dataset_n or mc["d_m"] != dataset_dm:
        raise UsageError(
            f"checkpoint was trained for N={mc['n']}, d_m={mc['d_m']}; "
            f"dataset has N={dataset_n}, d_m={dataset_dm}"
        )
    mcfg = ModelConfig(**mc)
    params = init_model(mcfg, seed=0)
    load_params_arrays(params, arrays)
    return params, mcfg, meta


def _perturbed_test(cfg: dict, test):
    pert_seed = int(cfg["perturb_seed"]) if cfg["perturb_seed"] is not None \
        else int(cfg["seed"])
    perturbed = test
    if cfg["missing_rate"] is not None and float(cfg["missing_rate"]) > 0:
        perturbed, _ = perturb_missing(perturbed, float(cfg["missing_rate"]), pert_seed)
    if cfg["snr_db"] is not None:
        perturbed = perturb_noise(perturbed, float(cfg["snr_db"]), pert_seed)
    return perturbed if perturbed is not test else None


def cmd_eval(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    dataset, (train, val, test), stats, _, a_diff = _load_pipeline(cfg)
    params, mcfg, _ = _load_checkpoint_model(cfg, dataset.n, dataset.d_m)
    input_dataset = _perturbed_test(cfg, test)
    windows = make_windows(test, mcfg.t_in, mcfg.horizon, int(cfg["stride_eval"]),
                           mcfg.tau, stats, input_dataset=input_dataset)
    preds, targets = predict_windows(windows, a_diff, params, mcfg, stats)
    overall = evaluate(preds, targets)
    steps_per_day = max(1, int(round(24.0 / dataset.granularity_hours)))
    per_day = evaluate_per_day(preds, targets, steps_per_day)

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w") as fh:
        fh.write("scope,MAE,RMSE,MAPE_percent,SMAPE\n")
        fh.write("overall,{MAE:.17g},{RMSE:.17g},{MAPE_percent:.17g},{SMAPE:.17g}\n"
                 .format(**overall))
        for day, metrics in per_day:
            fh.write(f"day{day}," + ",".join(
                f"{metrics[k]:.17g}" for k in ("MAE", "RMSE", "MAPE_percent", "SMAPE")
            ) + "\n")
    echo_config(cfg, out_dir)
    print(f"test windows: {len(windows)}")
    print("overall  " + "  ".join(f"{k} {v:.4f}" for k, v in overall.items()))
    for day, metrics in per_day:
        print(f"day {day}   " + "  ".join(f"{k} {v:.4f}" for k, v in metrics.items()))
    return 0


def cmd_forecast(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    dataset, (_, _, test), stats, _, a_diff = _load_pipeline(cfg)
    params, mcfg, _ = _load_checkpoint_model(cfg, dataset.n, dataset.d_m)
    windows = make_windows(test, mcfg.t_in, mcfg.horizon, 1, mcfg.tau, stats)
    idx = int(cfg["window_index"])
    if not -len(windows) <= idx < len(windows):
        raise UsageError(f"window index {idx} out of range for {len(windows)} windows")
    sample = windows[idx]

    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg["dump_trajectory"]:
        buffers: list = []
        preds_norm = model_forward(sample, a_diff, params, mcfg,
                                   collect_history=buffers)
        dump_trajectory(buffers[0], out_dir / "trajectory.csv")
        preds = stats.denormalize_target(preds_norm.data)
    else:
        preds = model_forecast(sample, a_diff, params, mcfg, stats)

    with open(out_dir / "forecast.csv", "w") as fh:
        fh.write("station,horizon_step,prediction,target\n")
        for s, sid in enumerate(dataset.stations.ids):
            for h in range(mcfg.horizon):
                fh.write(f"{sid},{h + 1},{preds[s, h]:.17g},{sample.y_raw[s, h]:.17g}\n")
    echo_config(cfg, out_dir)
    print(f"forecast for window {idx} written to {out_dir / 'forecast.csv'}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    tolerance = float(cfg["tolerance"])
    groups = end_to_end_check(seed=int(cfg["seed"]), substeps=int(cfg["substeps"]),
                              tau=int(cfg["tau"]))
    worst = 0.0
    for name in sorted(groups):
        print(f"{name:12s} max relative error {groups[name]:.3e}")
        worst = max(worst, groups[name])
    if worst > tolerance:
        print(f"FAIL: worst group error {worst:.3e} exceeds tolerance {tolerance:g}")
        return 1
    print(f"OK: worst group error {worst:.3e} within tolerance {tolerance:g}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--workers", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftcast",
        description="Delay-aware continuous-time forecasting on sensor graphs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic transport dataset")
    _add_common(p)
    p.add_argument("--n", type=int, help="station count (grid layout)")
    p.add_argument("--length", type=int, help="series length in steps")

    for name, help_text in (
        ("train", "train a model on a dataset"),
        ("eval", "evaluate a checkpoint on the test split"),
        ("forecast", "emit predictions for one test window"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--stations")
        p.add_argument("--series")
        p.add_argument("--ratios")
        p.add_argument("--t-in", dest="t_in", type=int)
        p.add_argument("--horizon", type=int)
        p.add_argument("--tau", type=int)
        p.add_argument("--memory-units", dest="memory_units", type=int)
        p.add_argument("--d", type=int)
        p.add_argument("--d-e", dest="d_e", type=int)
        p.add_argument("--k-hops", dest="k_hops", type=int)
        p.add_argument("--substeps", type=int)
        p.add_argument("--kappa", type=float)
        p.add_argument("--huber-delta", dest="huber_delta", type=float)
        p.add_argument("--hold-covariates", dest="hold_covariates",
                       action="store_const", const=True)
        p.add_argument("--stride-eval", dest="stride_eval", type=int)
        if name == "train":
            p.add_argument("--lr", type=float)
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--max-epochs", dest="max_epochs", type=int)
            p.add_argument("--patience", type=int)
            p.add_argument("--clip-norm", dest="clip_norm", type=float)
            p.add_argument("--stride-train", dest="stride_train", type=int)
            p.add_argument("--resume", help="last.ckpt to continue from")
        else:
            p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--missing-rate", dest="missing_rate", type=float)
            p.add_argument("--snr-db", dest="snr_db", type=float)
            p.add_argument("--perturb-seed", dest="perturb_seed", type=int)
        if name == "forecast":
            p.add_argument("--window-index", dest="window_index", type=int)
            p.add_argument("--dump-trajectory", dest="dump_trajectory",
                           action="store_const", const=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    _add_common(p)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--tau", type=int)
    p.add_argument("--substeps", type=int)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "forecast": cmd_forecast,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("DRIFTCAST_LOG", "warning").upper(),
                      logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, DataValidationError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
