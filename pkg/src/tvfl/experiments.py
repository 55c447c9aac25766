"""Experiment recipes: activation-ratio sweeps, power-level estimates and SU fusion gain.

Each recipe writes a CSV bundle plus gnuplot scripts into its output directory
and returns a small summary dict.
"""

from __future__ import annotations

import csv
import math
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import plotting
from .errors import ConfigError
from .scenario import Dataset, generate_dataset
from .trainer import (
    TrainResult,
    build_net,
    evaluate,
    round_to_levels,
    su_channel,
    train,
    write_manifest,
)

FIGURES = ("fig2", "fig3", "fig4", "fig5")
SWEEP_PRESET = {"fig2": "network-i", "fig3": "network-ii"}


def relative_spread(values) -> float:
    """``(max - min) / mean``; ``inf`` if any value is missing."""
    v = np.asarray([np.inf if x is None else x for x in values], dtype=float)
    if not np.all(np.isfinite(v)):
        return float("inf")
    return float((v.max() - v.min()) / v.mean())


def dataset_for(cfg: dict, num_su: int | None = None) -> Dataset:
    over = {} if num_su is None else {"num_su": num_su}
    return generate_dataset(cfgmod.scenario_config(cfg, **over))


def run_one(dataset: Dataset, cfg: dict, preset: str, alpha: float, seed: int, **train_overrides) -> TrainResult:
    """Train one network on ``dataset`` with activation ratio ``alpha``.

    The uplink large-scale state depends on the dataset seed only, so runs
    with different ``alpha`` or training seed share the same SU geometry.
    """
    spec = cfgmod.net_spec(cfg, dataset.num_su, dataset.feature_dims[0], dataset.labels.shape[1], preset)
    tcfg = cfgmod.train_config(cfg, activation_ratio=alpha, seed=seed, **train_overrides)
    channel = su_channel(dataset.config, dataset.config.rng_seed, cfgmod.channel_config(cfg))
    net = build_net(spec, dataset, tcfg)
    n = dataset.train_count if tcfg.batch_size is None else min(tcfg.batch_size, dataset.train_count)
    return train(dataset, net, tcfg, channel, cfgmod.latency_config(cfg, spec, n))


def sweep(dataset: Dataset, cfg: dict, preset: str, alphas, seeds, **train_overrides) -> dict:
    """``{(alpha, seed): TrainResult}`` over the grid."""
    return {(a, s): run_one(dataset, cfg, preset, a, s, **train_overrides) for s in seeds for a in alphas}


def mean_v0(result: TrainResult, upto: int | None = None) -> float:
    vals = [m.v0 for m in result.metrics[:upto] if not math.isnan(m.v0)]
    return float(np.mean(vals)) if vals else float("nan")


def _write_rows(path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return Path(path)


def _manifest(out: Path, cfg: dict, figure: str, preset: str, alphas, seeds, started: float) -> None:
    write_manifest(out / "manifest.json", figure=figure, config_digest=cfgmod.digest(cfg), config=cfg,
                   network_preset=preset, activation_ratios=list(alphas), seeds=list(seeds),
                   output_dir=str(out), started_unix=started, finished_unix=time.time())


def sweep_figure(figure: str, cfg: dict, out_dir, dataset: Dataset | None = None) -> dict:
    """Test MSE against rounds and against cumulative latency, one series per ``alpha``."""
    started = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    preset = SWEEP_PRESET[figure]
    exp = cfg["experiment"]
    dataset = dataset or dataset_for(cfg)
    results = sweep(dataset, cfg, preset, exp["alphas"], exp["seeds"], target_mse=exp["target_mse"])

    series, summary = [], []
    for (alpha, seed), res in results.items():
        name = f"series_a{alpha:g}_s{seed}.csv"
        _write_rows(out / name, ("round", "t_cum_s", "test_mse", "train_mse"),
                    [(m.round + 1, repr(m.t_cum), repr(m.test_mse), repr(m.train_mse)) for m in res.evaluated()])
        if seed == exp["seeds"][0]:
            series.append((name, f"alpha = {alpha:g}"))
        final = res.evaluated()[-1].test_mse if res.evaluated() else float("nan")
        summary.append((alpha, seed, res.rounds_to_target if res.rounds_to_target is not None else "",
                        repr(res.latency_to_target) if res.latency_to_target is not None else "",
                        repr(final), repr(mean_v0(res))))
    _write_rows(out / "summary.csv",
                ("alpha", "seed", "rounds_to_target", "latency_to_target_s", "final_test_mse", "mean_v0"), summary)
    label = "Network I" if preset == "network-i" else "Network II"
    plotting.write_script(out, "mse_vs_round.gp", plotting.line_plot(
        f"{figure}_mse_vs_round.png", series, 1, 3, "Round", "Test MSE", f"{label}: MSE versus rounds"))
    plotting.write_script(out, "mse_vs_latency.gp", plotting.line_plot(
        f"{figure}_mse_vs_latency.png", series, 2, 3, "Training latency (s)", "Test MSE",
        f"{label}: MSE versus training latency"))
    _manifest(out, cfg, figure, preset, exp["alphas"], exp["seeds"], started)
    return {"results": results, "dir": out}


def fig4(cfg: dict, out_dir, dataset: Dataset | None = None, result: TrainResult | None = None) -> dict:
    """Predicted versus true power level of each PU on the first test samples."""
    started = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset or dataset_for(cfg)
    seed = cfg["experiment"]["seeds"][0]
    alpha = max(cfg["experiment"]["alphas"])
    result = result or run_one(dataset, cfg, "network-ii", alpha, seed)
    levels, num_pu = dataset.config.power_levels, dataset.config.num_pu
    ev = evaluate(result.net, dataset.inputs("test"), dataset.targets("test"), levels, num_pu)
    n = min(cfg["experiment"]["fig4_samples"], dataset.test_count)
    y = dataset.targets("test")[:n]
    pred = ev.predictions[:n, :num_pu]
    rounded = round_to_levels(pred, levels)
    rows = [(j + 1, i + 1, repr(float(y[i, j])), repr(float(pred[i, j])), repr(float(rounded[i, j])))
            for j in range(num_pu) for i in range(n)]
    _write_rows(out / "power_levels.csv", ("pu", "sample", "label", "prediction", "rounded"), rows)
    for j in range(num_pu):
        _write_rows(out / f"pu{j + 1}.csv", ("sample", "label", "prediction", "rounded"),
                    [r[1:] for r in rows if r[0] == j + 1])
        plotting.write_script(out, f"pu{j + 1}.gp", plotting.scatter_plot(
            f"fig4_pu{j + 1}.png", f"pu{j + 1}.csv", 1, (2, 3, 4), ("label", "prediction", "rounded"),
            "Test sample", "Power level", f"PU {j + 1} transmit power level"))
    _write_rows(out / "accuracy.csv", ("pu", "power_accuracy", "test_mse"),
                [(j + 1, repr(float(ev.power_accuracy[j])), repr(ev.mse)) for j in range(num_pu)])
    _manifest(out, cfg, "fig4", "network-ii", (alpha,), (seed,), started)
    return {"eval": ev, "result": result, "dir": out}


def fig5(cfg: dict, out_dir, datasets: dict | None = None) -> dict:
    """3D location error of each PU with 4 and with 8 SUs (Network II)."""
    started = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["experiment"]["seeds"][0]
    alpha = max(cfg["experiment"]["alphas"])
    wide = dict(cfg, network=dict(cfg["network"], central_input="auto"))
    datasets = datasets or {}
    evals = {}
    for k in (4, 8):
        ds = datasets.get(k) or dataset_for(cfg, num_su=k)
        res = run_one(ds, wide, "network-ii", alpha, seed)
        evals[k] = evaluate(res.net, ds.inputs("test"), ds.targets("test"), ds.config.power_levels, ds.config.num_pu)
    e4, e8 = evals[4].location_error, evals[8].location_error
    num_pu = e4.shape[1]
    rows = [(i + 1, j + 1, repr(float(e4[i, j])), repr(float(e8[i, j])))
            for i in range(e4.shape[0]) for j in range(num_pu)]
    _write_rows(out / "location_error.csv", ("sample", "pu", "error_4su_m", "error_8su_m"), rows)
    med = {k: np.median(evals[k].location_error, axis=0) for k in evals}
    _write_rows(out / "summary.csv", ("pu", "median_error_4su_m", "median_error_8su_m"),
                [(j + 1, repr(float(med[4][j])), repr(float(med[8][j]))) for j in range(num_pu)])
    plotting.write_script(out, "location_error_cdf.gp", plotting.cdf_plot(
        "fig5_location_error_cdf.png", "location_error.csv", (3, 4), ("4 SUs", "8 SUs"),
        "3D location error (m)", "Location error, all PUs"))
    _manifest(out, cfg, "fig5", "network-ii", (alpha,), (seed,), started)
    return {"evals": evals, "medians": med, "dir": out}


def run_experiment(figure: str, cfg: dict, out_dir) -> dict:
    if figure in SWEEP_PRESET:
        return sweep_figure(figure, cfg, out_dir)
    if figure == "fig4":
        return fig4(cfg, out_dir)
    if figure == "fig5":
        return fig5(cfg, out_dir)
    raise ConfigError(f"unknown figure id {figure!r}; choose one of {FIGURES}")
