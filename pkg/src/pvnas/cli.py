"""Command-line entry points: ``search``, ``predict`` and ``synth``."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import report
from .autodiff import ShapeMismatch
from .blocks import InvalidOption
from .config import ConfigError, RunConfig, load_config
from .dataset import (HOUR, DataError, Scaler, TaskKind, TimeSeriesFrame, impute, load_csv, make_windows,
                      preprocess)
from .evaluator import Evaluator, mae, predict, prepare_task, wmape
from .search_space import Genotype, ModelGraph, TaskSpec
from .searcher import mobananas_search
from .selection import FeatureMask
from .synth import FEATURES, synth_pv


class CliError(Exception):
    pass


def load_frame(path: str | Path) -> TimeSeriesFrame:
    """Read a CSV; per-minute data goes through cleaning, imputation and hourly downsampling."""
    path = Path(path)
    if not path.is_file():
        raise CliError(f"data file not found: {path}")
    frame = load_csv(path)
    steps = np.diff(frame.timestamps)
    if len(steps) and np.median(steps) < HOUR:
        return preprocess(frame)
    if frame.missing_mask.any():
        frame = impute(frame)
    return frame


def run_frame(cfg: RunConfig) -> TimeSeriesFrame:
    if cfg.data_path:
        return load_frame(cfg.data_path)
    return synth_pv(cfg.synth_days, cfg.synth_seed)


def run_search(cfg: RunConfig, workers: int = 1, resume: bool = False, log=print) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame = run_frame(cfg)
    task = TaskSpec(cfg.t_s, cfg.horizon, cfg.task_kind)
    data = prepare_task(frame, task, train_step=cfg.window_step, sigma0=cfg.sigma0, gamma=cfg.gamma,
                        noise_seed=cfg.seed)
    log_path = out / "records.jsonl"
    if not resume and log_path.exists():
        log_path.unlink()
    evaluator = Evaluator(data, cfg.max_epochs, cfg.patience, cfg.seed, log_path, workers,
                          keep_weights=True)
    if resume:
        log(f"resumed {evaluator.load_log()} evaluated architectures from {log_path}")
    timings: list[dict] = []
    started = time.perf_counter()

    def on_iteration(snapshot: dict) -> None:
        evaluator.retain_weights(k for k, _, _ in snapshot["front"])
        timings.append({"iteration": snapshot["iteration"], "wall_seconds": time.perf_counter() - started})
        log(f"iteration {snapshot['iteration']}: {snapshot['evaluations']} evaluated, "
            f"best error {snapshot['best_error']}")

    try:
        result = mobananas_search(evaluator, cfg.search, cfg.space, on_iteration=on_iteration)
        report.write_pareto_csv(result.front, out / "pareto.csv")
        report.write_jsonl(result.history, out / "history.jsonl")
        report.write_jsonl(timings, out / "timings.jsonl")
        report.convergence_svg(result.history, out / "convergence.svg")
        best = result.best
        mask = evaluator.mask(best.genotype)
        report.write_json(architecture_record(best, task, data, mask), out / "best_arch.json")
        wdir = out / "weights"
        wdir.mkdir(exist_ok=True)
        for r in result.front:
            state = evaluator.weights_for(r.genotype)
            report.write_weights(state, wdir / f"{r.key}.bin", wdir / f"{r.key}.json")
        state = evaluator.weights_for(best.genotype)
        report.write_weights(state, out / "weights.bin", out / "weights.json")
    finally:
        evaluator.close()
    log(f"best architecture {best.key}: measured error {best.measured_error:.6g}, "
        f"{best.param_count} parameters; outputs in {out}")
    return 0


def architecture_record(rec, task: TaskSpec, data, mask: FeatureMask) -> dict:
    names = list(data.train_frame.feature_names)
    return {
        "key": rec.key,
        "genotype": rec.genotype.to_dict(),
        "measured_error": rec.measured_error,
        "param_count": rec.param_count,
        "task": {"kind": task.kind.value, "t_s": task.t_s, "t_p": task.t_p},
        "feature_names": names,
        "target_index": data.train_frame.target_index,
        "selected_features": [names[i] for i in mask.indices],
        "scaler": {"mean": data.scaler.mean.tolist(), "std": data.scaler.std.tolist()},
    }


def load_architecture(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"architecture file not found: {path}")
    try:
        arch = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: not valid JSON ({exc})") from None
    arch["genotype"] = Genotype.from_dict(arch["genotype"])
    return arch


def run_predict(arch_path, weights_path, data_path, horizon: int, out_csv, step: int = 1,
                noise_seed: int = 0, log=print) -> float:
    """Forecast every window of the data file; returns the MAE in power units."""
    arch = load_architecture(arch_path)
    g: Genotype = arch["genotype"]
    task = TaskSpec(arch["task"]["t_s"], arch["task"]["t_p"], arch["task"]["kind"])
    if horizon != task.t_p:
        raise CliError(f"architecture was searched for horizon {task.t_p}, not {horizon}")
    frame = load_frame(data_path)
    names = list(arch["feature_names"])
    if list(frame.feature_names) != names:
        raise ShapeMismatch(f"data features {list(frame.feature_names)} differ from the recorded set {names}")
    keep = np.array([n in arch["selected_features"] for n in names])
    mask = FeatureMask(keep, keep.astype(float))
    scaler = Scaler(np.asarray(arch["scaler"]["mean"]), np.asarray(arch["scaler"]["std"]))
    scaled = scaler.transform(frame)
    model = ModelGraph(g, task, mask, len(names), arch["target_index"])
    if not Path(weights_path).is_file():
        raise CliError(f"weights file not found: {weights_path}")
    model.load_state(report.read_weights(weights_path))
    windows = make_windows(scaled, task.t_s, task.t_p, step)
    if task.kind is TaskKind.TASK2:
        windows = windows.with_task(TaskKind.TASK2, noise_seed=noise_seed,
                                    feature_std=np.ones(len(names)))
    if len(windows) == 0:
        raise CliError(f"{data_path}: no complete window of {task.t_s + task.t_p} hourly rows")
    pred, truth = predict(model, windows)
    t = arch["target_index"]
    pred, truth = scaler.inverse_target(pred, t), scaler.inverse_target(truth, t)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    ts = scaled.timestamps
    with open(out_csv, "w", encoding="utf-8") as fh:
        fh.write("timestamp,window,step,forecast,truth\n")
        for w, s in enumerate(windows.starts):
            for h in range(task.t_p):
                fh.write(f"{ts[s + task.t_s + h]},{w},{h + 1},{float(pred[w, h])!r},{float(truth[w, h])!r}\n")
    if step >= task.t_p:   # windows tile the series: plot every forecast step
        shown, title = (truth.ravel(), pred.ravel()), f"Forecast, {len(windows)} consecutive windows"
    else:
        shown, title = (truth[:, 0], pred[:, 0]), "One-step-ahead forecast"
    report.forecast_svg(*shown, out_csv.with_suffix(".svg"), title=title)
    err = mae(pred, truth)
    msg = f"{len(windows)} windows x {task.t_p} steps: MAE {err:.6g}"
    try:
        msg += f", WMAPE {wmape(pred, truth):.4g}"
    except ValueError:
        pass
    log(f"{msg}; forecasts written to {out_csv}")
    return err


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvnas", description="Architecture search for PV power forecasting.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("search", help="run a multi-objective architecture search")
    s.add_argument("--config", required=True, help="key = value configuration file")
    s.add_argument("--workers", type=int, default=1, help="parallel training processes")
    s.add_argument("--resume", action="store_true", help="reuse records.jsonl from a previous run")
    pr = sub.add_parser("predict", help="forecast with a searched architecture")
    pr.add_argument("--arch", required=True, help="best_arch.json from a search")
    pr.add_argument("--weights", required=True, help="weights.bin from a search")
    pr.add_argument("--data", required=True, help="CSV with the same features")
    pr.add_argument("--horizon", type=int, required=True)
    pr.add_argument("--out", default="forecast.csv")
    pr.add_argument("--step", type=int, default=1, help="stride between forecast windows")
    sy = sub.add_parser("synth", help="write a synthetic PV dataset")
    sy.add_argument("--days", type=int, required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    sy.add_argument("--minute", action="store_true", help="per-minute rows instead of hourly")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "search":
            return run_search(load_config(args.config), args.workers, args.resume)
        if args.command == "predict":
            run_predict(args.arch, args.weights, args.data, args.horizon, args.out, args.step)
            return 0
        frame = synth_pv(args.days, args.seed, minute=args.minute)
        frame.to_csv(args.out)
        print(f"wrote {len(frame)} rows x {len(FEATURES)} features to {args.out}")
        return 0
    except (CliError, ConfigError, DataError, InvalidOption, ShapeMismatch, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
