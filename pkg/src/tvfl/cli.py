"""Command-line front end.

Subcommands: ``gen-data``, ``train``, ``experiment``, ``bounds``, ``eval`` and
``print-config``. Relative output paths are resolved against
``$TVFL_OUTPUT_ROOT`` (default: the working directory). On failure the last
line on stderr is ``error: <code>: <message>`` and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .bounds import expected_rounds, round_latency
from .channel import inv_exp_integral
from .errors import ConfigError, TVFLError, UnreachableTargetError
from .experiments import FIGURES, run_experiment
from .scenario import export_csv, generate_dataset, load_dataset, persist_dataset
from .splitnn import load_checkpoint, save_checkpoint
from .trainer import build_net, evaluate, su_channel, train, write_manifest, write_metrics_csv

OUTPUT_ROOT_ENV = "TVFL_OUTPUT_ROOT"
EXIT_ERROR = 2


def output_path(p) -> Path:
    p = Path(p)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p


def _load_cfg(args) -> dict:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.defaults(args.profile)
    if getattr(args, "profile", None) and args.config and args.profile != cfg["run"]["profile"]:
        print(f"note: --profile {args.profile} ignored; {args.config} sets profile = {cfg['run']['profile']}",
              file=sys.stderr)
    return cfg


def _override(cfg: dict, section: str, key: str, value) -> None:
    if value is not None:
        cfg[section][key] = value


def cmd_print_config(args) -> int:
    sys.stdout.write(cfgmod.render_config(_load_cfg(args)))
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    _override(cfg, "scenario", "num_samples", args.samples)
    _override(cfg, "scenario", "train_count", args.train)
    _override(cfg, "scenario", "num_su", args.num_su)
    _override(cfg, "scenario", "rng_seed", args.seed)
    cfgmod.validate(cfg)
    ds = generate_dataset(cfgmod.scenario_config(cfg))
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    persist_dataset(ds, out)
    if args.csv:
        export_csv(ds, output_path(args.csv))
    print(f"wrote {out}: M={len(ds)} K={ds.num_su} d_k={ds.feature_dims[0]} train={ds.train_count} "
          f"test={ds.test_count}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    _override(cfg, "network", "preset", args.preset)
    _override(cfg, "network", "central_input", args.central_input)
    _override(cfg, "train", "activation_ratio", args.activation_ratio)
    _override(cfg, "train", "rounds", args.rounds)
    _override(cfg, "train", "seed", args.seed)
    _override(cfg, "train", "eta", args.eta)
    _override(cfg, "train", "target_mse", args.target_mse)
    _override(cfg, "train", "eval_every", args.eval_every)
    cfgmod.validate(cfg)
    ds = load_dataset(args.data)
    cfg["scenario"].update({k: v for k, v in ds.config.to_dict().items() if k in cfg["scenario"]})
    spec = cfgmod.net_spec(cfg, ds.num_su, ds.feature_dims[0], ds.labels.shape[1])
    tcfg = cfgmod.train_config(cfg)
    channel = su_channel(ds.config, ds.config.rng_seed, cfgmod.channel_config(cfg))
    net = build_net(spec, ds, tcfg)
    n = ds.train_count if tcfg.batch_size is None else min(tcfg.batch_size, ds.train_count)
    started = time.time()
    result = train(ds, net, tcfg, channel, cfgmod.latency_config(cfg, spec, n))

    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result.metrics, out / "metrics.csv")
    save_checkpoint(result.net, out / "model.ckpt")
    write_manifest(out / "manifest.json", config_digest=cfgmod.digest(cfg), config=cfg, seed=tcfg.seed,
                   network_preset=cfg["network"]["preset"], activation_ratios=[tcfg.activation_ratio],
                   dataset=str(Path(args.data).resolve()), dataset_digest=ds.config.digest(),
                   output_dir=str(out), started_unix=started, finished_unix=time.time())
    last = result.evaluated()[-1] if result.evaluated() else None
    final = last.test_mse if last else float("nan")
    print(f"rounds={len(result.metrics)} final_test_mse={final:.4f} "
          f"cumulative_latency_s={result.metrics[-1].t_cum if result.metrics else 0.0:.4f} "
          f"rounds_to_target={result.rounds_to_target if result.rounds_to_target is not None else 'none'}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    net = load_checkpoint(args.checkpoint)
    ev = evaluate(net, ds.inputs("test"), ds.targets("test"), ds.config.power_levels, ds.config.num_pu)
    acc = " ".join(f"power_acc_pu{j + 1}={a:.4f}" for j, a in enumerate(ev.power_accuracy))
    med = " ".join(f"median_loc_err_pu{j + 1}_m={m:.3f}" for j, m in enumerate(np.median(ev.location_error, 0)))
    print(f"test_mse={ev.mse:.4f} {acc} {med}")
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_cfg(args)
    if args.seeds:
        cfg["experiment"]["seeds"] = tuple(args.seeds)
    if args.alphas:
        cfg["experiment"]["alphas"] = tuple(args.alphas)
    _override(cfg, "train", "rounds", args.rounds)
    _override(cfg, "scenario", "num_samples", args.samples)
    _override(cfg, "scenario", "train_count", args.train)
    _override(cfg, "experiment", "target_mse", args.target_mse)
    cfgmod.validate(cfg)
    if args.figure not in FIGURES:
        raise ConfigError(f"unknown figure id {args.figure!r}; choose one of {FIGURES}")
    out = output_path(args.out or args.figure)
    run_experiment(args.figure, cfg, out)
    print(f"wrote {args.figure} bundle to {out}")
    return 0


BOUND_COLUMNS = ("g1", "epsilon", "v", "t_comm_s", "t_comp_s", "n_expect", "t_expect_s")


def bound_rows(cfg: dict) -> list:
    """One row per activation ratio; ``v`` is either shared or given per ratio."""
    b = cfg["bounds"]
    ratios, vs = b["ratios"], b["v"]
    if len(vs) == 1:
        vs = vs * len(ratios)
    if len(vs) != len(ratios):
        raise ConfigError("bounds.v must hold one value or one per entry of bounds.ratios")
    scen = cfgmod.scenario_config(cfg)
    ch = su_channel(scen, scen.rng_seed, cfgmod.channel_config(cfg))
    rho_1 = b["rho_1"] if b["rho_1"] is not None else float(ch.rho.min())
    spec = cfgmod.net_spec(cfg, scen.num_su, scen.feature_dim, scen.label_dim)
    lat = cfgmod.latency_config(cfg, spec, scen.train_count)
    rows = []
    for eps, v in zip(ratios, vs):
        g1 = inv_exp_integral(eps)
        t_comm, t_comp = round_latency(lat, ch.power_budget, ch.noise_power, rho_1, g1, active_count=1)
        try:
            n = expected_rounds(cfgmod.bound_params(cfg, v))
        except UnreachableTargetError:
            n = math.inf
        rows.append((g1, eps, v, t_comm, t_comp, n, (t_comm + t_comp) * n if n else 0.0))
    return rows


def cmd_bounds(args) -> int:
    cfg = cfgmod.load_config(args.params)
    rows = bound_rows(cfg)
    widths = (12, 10, 8, 14, 14, 14, 14)
    print("".join(f"{c:>{w}}" for c, w in zip(BOUND_COLUMNS, widths)))
    for r in rows:
        print("".join(f"{x:>{w}.6g}" for x, w in zip(r, widths)))
    if args.csv:
        out = output_path(args.csv)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(BOUND_COLUMNS)
            w.writerows([[repr(float(x)) for x in r] for r in rows])
    return 0


def _add_config_args(p) -> None:
    p.add_argument("--config", help="sectioned key = value config file")
    p.add_argument("--profile", choices=cfgmod.PROFILES, default="desk", help="defaults when no config is given")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvfl", description="Truncated vertical federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("print-config", help="print the fully resolved configuration")
    _add_config_args(p)
    p.set_defaults(func=cmd_print_config)

    p = sub.add_parser("gen-data", help="generate and persist a sensing dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--samples", type=int, help="number of samples M")
    p.add_argument("--train", type=int, help="training subset size")
    p.add_argument("--num-su", type=int, help="number of SUs K")
    p.add_argument("--seed", type=int, help="scenario seed")
    p.add_argument("--csv", help="also export a CSV copy")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one network on a dataset")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--preset", choices=cfgmod.PRESETS)
    p.add_argument("--central-input", help="'preset', 'auto' (K*d) or an integer width")
    p.add_argument("--activation-ratio", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--target-mse", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--out", default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="run a figure recipe and write its CSV bundle")
    _add_config_args(p)
    p.add_argument("figure", help=f"one of {', '.join(FIGURES)}")
    p.add_argument("--out")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--alphas", type=float, nargs="+")
    p.add_argument("--rounds", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--train", type=int)
    p.add_argument("--target-mse", type=float)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("bounds", help="evaluate round and latency bounds over a sweep")
    p.add_argument("--params", required=True, help="config file with a [bounds] section")
    p.add_argument("--csv", help="write the table as CSV")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test subset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TVFLError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"error: io_error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
