"""Command-line front end.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .densities import QuadratureError, make_target
from .diffnet import load_checkpoint
from .ebm import EnergyModel, log_density, train_ebm
from .emulator import EmulatorSampleSet, FlowModel, exact_log_likelihood, sample, train_emulator
from .errors import NumericalError
from .io import coordinate_columns, read_csv, write_csv, write_json
from .metrics import MetricReport, angle_w2, energy_w2
from .pipeline import PipelineError, comparison_table, make_training_data, run_ablation, run_full_pipeline
from .reweight import WeightedEnsemble, free_energy_difference, importance_weights

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_help: str):
    p.add_argument("--config", help="JSON config file or preset name")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="seed overriding the relevant config seeds")
    p.add_argument("--atol", type=float, help="ODE absolute tolerance (overrides ode.atol)")
    p.add_argument("--rtol", type=float, help="ODE relative tolerance (overrides ode.rtol)")
    p.add_argument("--out", required=True, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    epilog = ("config keys (default, then description):\n" + cfgmod.describe_keys()
              + "\n\npresets: " + ", ".join(cfgmod.preset_names())
              + "\n\nenvironment: BOLTZNCE_THREADS caps the number of torch threads.")
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="boltznce", description="Flow emulators, energy-based likelihoods "
                     "and Boltzmann reweighting.", epilog=epilog, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, out_help):
        p = sub.add_parser(name, help=help_, description=help_, epilog=epilog, formatter_class=fmt)
        _common(p, out_help)
        return p

    p = add("train-emulator", "train a flow emulator", "checkpoint path")
    p.add_argument("--data", help="CSV of training samples (default: drawn from the config)")

    p = add("sample", "draw samples from a trained emulator", "CSV path")
    p.add_argument("--model", required=True, help="emulator checkpoint")
    p.add_argument("--n", type=int, help="number of samples (default: sample.n)")
    p.add_argument("--loglik", action="store_true", help="also integrate the exact log-likelihood")

    p = add("likelihood", "exact log-likelihood of samples under an emulator", "CSV path")
    p.add_argument("--model", required=True, help="emulator checkpoint")
    p.add_argument("--samples", required=True, help="CSV of samples")

    p = add("train-ebm", "train an energy model on samples", "checkpoint path")
    p.add_argument("--samples", help="CSV of samples (default: exact target draws)")

    add("ablation", "compare the loss variants of the energy model", "output directory")

    p = add("reweight", "Boltzmann importance weights for samples", "CSV path")
    p.add_argument("--samples", required=True, help="CSV of samples")
    p.add_argument("--ebm", help="energy checkpoint; without it the loglik column is used")

    p = add("free-energy", "free-energy difference from a weights CSV", "JSON path")
    p.add_argument("--weights", required=True, help="CSV written by reweight or pipeline")
    p.add_argument("--region", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--bins", type=int)
    p.add_argument("--coordinate", type=int)

    p = add("metrics", "energy W2 (and angle W2) between two sample sets", "JSON path")
    p.add_argument("--samples", required=True, help="CSV of samples")
    p.add_argument("--reference", required=True, help="CSV of reference samples")

    add("pipeline", "run the full workflow into a run directory", "run directory")

    p = add("density-grid", "dump a log-density over a grid as CSV", "CSV path")
    p.add_argument("--model", help="emulator or energy checkpoint (default: the config target)")
    p.add_argument("--points", type=int, default=128, help="grid points per axis")
    p.add_argument("--bounds", type=float, nargs=2, metavar=("LO", "HI"),
                   help="grid bounds (default: the target's default grid)")
    return parser


def _config(args) -> dict:
    overrides = list(args.overrides)
    if args.atol is not None:
        overrides.append(f"ode.atol={args.atol!r}")
    if args.rtol is not None:
        overrides.append(f"ode.rtol={args.rtol!r}")
    return cfgmod.load_config(args.config, overrides)


def _target(cfg):
    return make_target(cfg["target.name"], cfg["target.params"], cfg["target.kT"])


def _samples(path) -> np.ndarray:
    return coordinate_columns(read_csv(path))


def _cmd_train_emulator(args, cfg):
    if args.seed is not None:
        cfg.update({"data.seed": args.seed, "emulator.seed": args.seed})
    data = _samples(args.data) if args.data else make_training_data(cfg)[0]
    model, result = train_emulator(data, cfg["emulator.objective"], cfg["emulator.schedule"],
                                   cfg["emulator.coupling"], cfgmod.emulator_train_config(cfg),
                                   cfg["emulator.cfm_sigma"])
    model.save(args.out, trainer=result.trainer)
    print(json.dumps(result.summary()))


def _cmd_sample(args, cfg):
    seed = args.seed if args.seed is not None else cfg["sample.seed"]
    n = args.n if args.n is not None else cfg["sample.n"]
    s = sample(FlowModel.load(args.model), n, seed, cfg["ode.atol"], cfg["ode.rtol"],
               with_loglik=args.loglik, divergence_mode=cfg["ode.divergence"],
               chunk_size=cfg["sample.chunk_size"])
    s.to_csv(args.out)


def _cmd_likelihood(args, cfg):
    x = _samples(args.samples)
    ll = exact_log_likelihood(FlowModel.load(args.model), x, cfg["ode.atol"], cfg["ode.rtol"],
                              cfg["ode.divergence"], cfg["sample.chunk_size"])
    EmulatorSampleSet(x, ll, {"model": str(args.model)}).to_csv(args.out)


def _cmd_train_ebm(args, cfg):
    seed = args.seed
    if args.samples:
        data = _samples(args.samples)[: int(cfg["ebm.n"])]
    else:
        data = _target(cfg).sample(int(cfg["ebm.n"]), cfg["data.seed"] if seed is None else seed)
    model, result = train_ebm(data, config=cfgmod.ebm_config(cfg, seed=seed))
    model.save(args.out, trainer=result.trainer)
    print(json.dumps(result.summary()))


def _cmd_ablation(args, cfg):
    if args.seed is not None:
        cfg["ablation.seeds"] = [args.seed]
    report = run_ablation(cfg, out=args.out)
    print(json.dumps(report["mean"], sort_keys=True))
    if "both_is_best" in report:
        print(f"both is best: {report['both_is_best']}")


def _cmd_reweight(args, cfg):
    table = read_csv(args.samples)
    x = coordinate_columns(table)
    if args.ebm:
        ens = importance_weights(x, _target(cfg), log_density(EnergyModel.load(args.ebm), x),
                                 "ebm_likelihood")
    elif "loglik" in table:
        ens = importance_weights(x, _target(cfg), table["loglik"], "exact_likelihood")
    else:
        raise UsageError("reweight needs --ebm or a samples CSV with a loglik column")
    ens.to_csv(args.out)
    print(json.dumps({"n": len(ens), "ess": ens.ess(), "n_excluded": ens.n_excluded}))


def _cmd_free_energy(args, cfg):
    ens = WeightedEnsemble.from_csv(args.weights)
    region = tuple(args.region) if args.region else tuple(cfg["reweight.region"])
    bins = args.bins if args.bins is not None else cfg["reweight.bins"]
    coord = args.coordinate if args.coordinate is not None else cfg["reweight.coordinate"]
    rep = free_energy_difference(ens, coord, region, bins, seed=args.seed)
    rep.to_json(args.out)
    rep.histogram_csv(Path(args.out).with_suffix(".hist.csv"))
    print(json.dumps({"delta_f": rep.delta_f}))


def _cmd_metrics(args, cfg):
    a, b = _samples(args.samples), _samples(args.reference)
    target = _target(cfg)
    report = MetricReport(e_w2=energy_w2(target.energy(a), target.energy(b)),
                          seeds={"metrics": cfg["metrics.seed"]})
    if cfg["metrics.angular"]:
        cols = list(cfg["metrics.angular"])
        report.t_w2 = angle_w2(a[:, cols], b[:, cols], batch_size=cfg["metrics.w2_batch"],
                               repeats=cfg["metrics.w2_repeats"], seed=cfg["metrics.seed"])
        report.batch_sizes["t_w2"] = cfg["metrics.w2_batch"]
    write_json(args.out, report.to_dict())
    print(report.table())


def _cmd_pipeline(args, cfg):
    out = run_full_pipeline(cfg, args.out, seed=args.seed)
    print(comparison_table(out))


def _cmd_density_grid(args, cfg):
    target = _target(cfg)
    if args.bounds:
        lo, hi = args.bounds
        axes = [np.linspace(lo, hi, args.points)] * 2
    else:
        g = target.default_grid()
        axes = [np.linspace(l, u, args.points) for l, u in zip(g.lower, g.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    if args.model is None:
        values = target.log_density(nodes)
    else:
        _, doc = load_checkpoint(args.model)
        if doc["kind"] == "energy":
            values = log_density(EnergyModel.load(args.model), nodes)
        else:
            values = exact_log_likelihood(FlowModel.load(args.model), nodes, cfg["ode.atol"],
                                          cfg["ode.rtol"], cfg["ode.divergence"],
                                          cfg["sample.chunk_size"])
    write_csv(args.out, {"x_0": nodes[:, 0], "x_1": nodes[:, 1], "log_density": values})


_COMMANDS = {
    "train-emulator": _cmd_train_emulator, "sample": _cmd_sample, "likelihood": _cmd_likelihood,
    "train-ebm": _cmd_train_ebm, "ablation": _cmd_ablation, "reweight": _cmd_reweight,
    "free-energy": _cmd_free_energy, "metrics": _cmd_metrics, "pipeline": _cmd_pipeline,
    "density-grid": _cmd_density_grid,
}


def _exit_code(err: BaseException) -> int:
    if isinstance(err, PipelineError):
        err = err.cause
    if isinstance(err, (NumericalError, QuadratureError, FloatingPointError)):
        return EXIT_NUMERICAL
    if isinstance(err, (OSError, json.JSONDecodeError, KeyError)):
        return EXIT_IO
    return EXIT_USAGE


def main(argv=None) -> int:
    threads = os.environ.get("BOLTZNCE_THREADS")
    try:
        if threads:
            torch.set_num_threads(max(1, int(threads)))
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        _COMMANDS[args.command](args, cfg)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # mapped to an exit code with a one-line diagnostic
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return _exit_code(err)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
