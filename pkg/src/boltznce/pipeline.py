"""End-to-end workflow: emulator -> samples -> energy model -> reweighting -> reports.

Every stage reads its inputs from the run directory and writes its outputs
there, so a run can resume from any completed stage. Stages are keyed by a
hash of the config entries they depend on plus the hash of their upstream
stage; changing a key re-runs exactly the stages below it.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .densities import make_target, region_free_energy
from .ebm import EnergyModel, log_density, train_ebm
from .emulator import EmulatorSampleSet, FlowModel, exact_log_likelihood, nll, sample, train_emulator
from .io import read_csv, read_json, write_csv, write_json
from .metrics import MetricReport, angle_w2, energy_w2, grid_density_l2
from .reweight import (FreeEnergyReport, WeightedEnsemble, bias_resample, free_energy_difference,
                       importance_weights, tune_von_mises_scale, von_mises_weight)

log = logging.getLogger(__name__)

__all__ = ["STAGES", "PipelineError", "run_full_pipeline", "run_ablation", "comparison_table",
           "make_training_data", "read_timings"]


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it and the run directory records it as failed."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# stage name -> (config prefixes it reads, artifacts it writes)
STAGES = {
    "data": (("target.", "data.", "bias."), ("train_data.csv",)),
    "emulator": (("emulator.",), ("emulator.ckpt",)),
    "samples": (("sample.", "ode."), ("samples.csv",)),
    "exact_likelihood": (("ode.",), ("weights_exact.csv",)),
    "ebm": (("ebm.",), ("ebm.ckpt",)),
    "ebm_likelihood": ((), ("weights_ebm.csv",)),
    "free_energy": (("reweight.",), ("free_energy_exact.json", "free_energy_ebm.json")),
    "metrics": (("metrics.",), ("metrics.json",)),
}


def _target(cfg):
    return make_target(cfg["target.name"], cfg["target.params"], cfg["target.kT"])


def make_training_data(cfg: dict) -> tuple[np.ndarray, dict]:
    """Draw the emulator's training set, optionally biased toward one region."""
    target = _target(cfg)
    n, seed = int(cfg["data.n"]), int(cfg["data.seed"])
    if not cfg["bias.enabled"]:
        return target.sample(n, seed), {"biased": False}
    scale = cfg["bias.scale"]
    if scale == "auto":
        scale = tune_von_mises_scale(target, cfg["bias.coordinate"], cfg["bias.mu"],
                                     cfg["bias.kappa"], cfg["bias.offset"],
                                     tuple(cfg["reweight.region"]), cfg["bias.share"])
    weight = von_mises_weight(cfg["bias.mu"], cfg["bias.kappa"], float(scale), cfg["bias.offset"],
                              cfg["bias.coordinate"])
    rng = np.random.default_rng(seed)
    pool = target.sample(int(cfg["bias.pool"]) * n, rng)
    data = bias_resample(pool, weight, n, rng)
    return data, {"biased": True, "scale": float(scale)}


def _write_samples(path, x, extra=None):
    cols = {f"x_{i}": x[:, i] for i in range(x.shape[1])}
    cols.update(extra or {})
    write_csv(path, cols)


@dataclass
class _Run:
    cfg: dict
    out: Path
    atol: float
    rtol: float

    def path(self, name) -> Path:
        return self.out / name

    def samples(self) -> np.ndarray:
        return EmulatorSampleSet.from_csv(self.path("samples.csv")).samples

    def emulator(self) -> FlowModel:
        return FlowModel.load(self.path("emulator.ckpt"))

    # -- stages ------------------------------------------------------------

    def data(self):
        data, info = make_training_data(self.cfg)
        _write_samples(self.path("train_data.csv"), data)
        return info

    def emulator_stage(self):
        data = EmulatorSampleSet.from_csv(self.path("train_data.csv")).samples
        cfg = self.cfg
        model, result = train_emulator(data, cfg["emulator.objective"], cfg["emulator.schedule"],
                                       cfg["emulator.coupling"], cfgmod.emulator_train_config(cfg),
                                       cfg["emulator.cfm_sigma"])
        model.save(self.path("emulator.ckpt"), trainer=result.trainer)
        return result.summary()

    def samples_stage(self):
        cfg = self.cfg
        s = sample(self.emulator(), int(cfg["sample.n"]), int(cfg["sample.seed"]), self.atol,
                   self.rtol, chunk_size=cfg["sample.chunk_size"])
        s.meta["config_hash"] = cfgmod.config_hash(cfg)
        s.to_csv(self.path("samples.csv"))
        return {"n": len(s)}

    def exact_likelihood(self):
        x = self.samples()
        t0 = time.perf_counter()
        ll = exact_log_likelihood(self.emulator(), x, self.atol, self.rtol,
                                  self.cfg["ode.divergence"], self.cfg["sample.chunk_size"])
        seconds = time.perf_counter() - t0
        ens = importance_weights(x, _target(self.cfg), ll, "exact_likelihood")
        ens.to_csv(self.path("weights_exact.csv"))
        return {"likelihood_seconds": seconds, "n": len(x)}

    def ebm(self):
        x = self.samples()[: int(self.cfg["ebm.n"])]
        model, result = train_ebm(x, config=cfgmod.ebm_config(self.cfg))
        model.save(self.path("ebm.ckpt"), trainer=result.trainer)
        return result.summary()

    def ebm_likelihood(self):
        x = self.samples()
        model = EnergyModel.load(self.path("ebm.ckpt"))
        t0 = time.perf_counter()
        ll = log_density(model, x)
        seconds = time.perf_counter() - t0
        ens = importance_weights(x, _target(self.cfg), ll, "ebm_likelihood")
        ens.to_csv(self.path("weights_ebm.csv"))
        return {"likelihood_seconds": seconds, "n": len(x)}

    def free_energy(self):
        cfg = self.cfg
        out = {}
        for tag in ("exact", "ebm"):
            ens = WeightedEnsemble.from_csv(self.path(f"weights_{tag}.csv"))
            rep = free_energy_difference(ens, int(cfg["reweight.coordinate"]),
                                         tuple(cfg["reweight.region"]), int(cfg["reweight.bins"]),
                                         seed=int(cfg["sample.seed"]))
            rep.to_json(self.path(f"free_energy_{tag}.json"))
            rep.histogram_csv(self.path(f"free_energy_{tag}_hist.csv"))
            out[tag] = rep.delta_f
        return out

    def metrics(self):
        cfg = self.cfg
        target = _target(cfg)
        seed = int(cfg["metrics.seed"])
        x = self.samples()
        reference = target.sample(int(cfg["metrics.n_reference"]), seed)
        report = MetricReport(seeds={"metrics": seed, "sample": int(cfg["sample.seed"])},
                              batch_sizes={"nll": int(cfg["metrics.nll_batch"])})
        report.e_w2 = energy_w2(target.energy(x), target.energy(reference))
        if cfg["metrics.angular"]:
            cols = list(cfg["metrics.angular"])
            report.t_w2 = angle_w2(x[:, cols], reference[:, cols], batch_size=int(cfg["metrics.w2_batch"]),
                                   repeats=int(cfg["metrics.w2_repeats"]), seed=seed)
            report.batch_sizes["t_w2"] = int(cfg["metrics.w2_batch"])
        holdout = target.sample(int(cfg["metrics.n_holdout"]), seed + 1)
        res = nll(self.emulator(), holdout, int(cfg["metrics.nll_batch"]), self.atol, self.rtol,
                  cfg["ode.divergence"])
        report.nll_mean, report.nll_std, report.nll_batch_std = res.mean, res.std, res.batch_std

        ebm = EnergyModel.load(self.path("ebm.ckpt"))
        if target.normalized and target.dim == 2:
            report.density_l2 = grid_density_l2(lambda g: log_density(ebm, g), target)

        ens = {t: WeightedEnsemble.from_csv(self.path(f"weights_{t}.csv")) for t in ("exact", "ebm")}
        fe = {t: FreeEnergyReport.from_json(self.path(f"free_energy_{t}.json")) for t in ens}
        region = tuple(cfg["reweight.region"])
        try:
            truth = region_free_energy(target, region, int(cfg["reweight.coordinate"]))
        except ValueError:
            truth = None
        # both ensembles keep every finite sample, so the rows line up when nothing was excluded
        agreement = None
        if len(ens["exact"]) == len(ens["ebm"]):
            a, b = ens["exact"].loglik, ens["ebm"].loglik
            agreement = {"pearson": float(np.corrcoef(a, b)[0, 1]), "std_diff": float(np.std(b - a))}
        report.extra = {
            "delta_f_quadrature": truth,
            "likelihood_agreement": agreement,
            "provenances": {t: {"delta_f": fe[t].delta_f, "ess": ens[t].ess(),
                                "ess_fraction": ens[t].ess_fraction(),
                                "n_excluded": ens[t].n_excluded} for t in ens},
        }
        write_json(self.path("metrics.json"), report.to_dict())
        return {"e_w2": report.e_w2}


_METHODS = {"data": "data", "emulator": "emulator_stage", "samples": "samples_stage",
            "exact_likelihood": "exact_likelihood", "ebm": "ebm", "ebm_likelihood": "ebm_likelihood",
            "free_energy": "free_energy", "metrics": "metrics"}


def _stage_hashes(cfg: dict) -> dict:
    hashes, upstream = {}, ""
    for name, (prefixes, _) in STAGES.items():
        own = cfgmod.config_hash(cfg, prefixes) if prefixes else ""
        upstream = cfgmod.config_hash({"stage": name, "own": own, "upstream": upstream})
        hashes[name] = upstream
    return hashes


def run_full_pipeline(cfg: dict, out, atol: float | None = None, rtol: float | None = None,
                      seed: int | None = None) -> Path:
    """Run (or resume) every stage into directory ``out`` and return it.

    ``seed`` overrides the data, training and sampling seeds together.
    """
    cfg = dict(cfg)
    if seed is not None:
        for key in ("data.seed", "emulator.seed", "sample.seed", "ebm.seed"):
            cfg[key] = int(seed)
    if atol is not None:
        cfg["ode.atol"] = atol
    if rtol is not None:
        cfg["ode.rtol"] = rtol
    cfgmod.apply_overrides(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg)

    run = _Run(cfg, out, float(cfg["ode.atol"]), float(cfg["ode.rtol"]))
    hashes = _stage_hashes(cfg)
    ledger_path = out / "stages.json"
    ledger = read_json(ledger_path) if ledger_path.exists() else {}
    timings = {}
    torch.manual_seed(0)

    for name, (_, artifacts) in STAGES.items():
        rec = ledger.get(name, {})
        if (rec.get("hash") == hashes[name] and rec.get("status") == "done"
                and all((out / a).exists() for a in artifacts)):
            log.info("stage %s: up to date", name)
            continue
        log.info("stage %s: running", name)
        t0 = time.perf_counter()
        try:
            info = getattr(run, _METHODS[name])()
        except Exception as err:
            ledger[name] = {"hash": hashes[name], "status": "failed", "error": str(err)}
            write_json(ledger_path, ledger)
            raise PipelineError(name, err) from err
        timings[name] = {"seconds": time.perf_counter() - t0, **(info or {})}
        _log_timing(out, name, timings[name])
        ledger[name] = {"hash": hashes[name], "status": "done"}
        write_json(ledger_path, ledger)
        # downstream stages are stale once anything upstream reran
        for later in list(STAGES)[list(STAGES).index(name) + 1:]:
            if ledger.get(later, {}).get("hash") != hashes[later]:
                ledger.pop(later, None)

    exact = timings.get("exact_likelihood", {})
    learned = timings.get("ebm_likelihood", {})
    if exact.get("likelihood_seconds") and learned.get("likelihood_seconds"):
        speedup = exact["likelihood_seconds"] / learned["likelihood_seconds"]
        _log_timing(out, "likelihood_speedup", {"ratio": speedup})
    return out


def _log_timing(out: Path, name: str, info: dict) -> None:
    """Append to ``timings.log``; wall-clock data stays out of the reproducible CSV/JSON outputs."""
    fields = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                      for k, v in info.items() if isinstance(v, (int, float, str, bool)))
    with open(out / "timings.log", "a") as fh:
        fh.write(f"{name} {fields}\n")


def read_timings(run_dir) -> dict:
    """Latest entry per name from ``timings.log`` as ``{name: {key: value}}``."""
    path = Path(run_dir) / "timings.log"
    result = {}
    if path.exists():
        for line in path.read_text().splitlines():
            name, *fields = line.split()
            entry = {}
            for f in fields:
                k, _, v = f.partition("=")
                try:
                    entry[k] = float(v)
                except ValueError:
                    entry[k] = v
            result[name] = entry
    return result


def comparison_table(run_dir) -> str:
    """Side-by-side summary of the exact-likelihood and energy-model provenances."""
    m = read_json(Path(run_dir) / "metrics.json")
    prov = m["extra"]["provenances"]
    truth = m["extra"].get("delta_f_quadrature")
    lines = [f"{'provenance':<18} {'delta_f':>10} {'ESS':>10} {'ESS frac':>9} {'excluded':>9}"]
    for name, key in (("exact_likelihood", "exact"), ("ebm_likelihood", "ebm")):
        p = prov[key]
        lines.append(f"{name:<18} {float(p['delta_f']):>10.4f} {p['ess']:>10.1f} "
                     f"{p['ess_fraction']:>9.4f} {p['n_excluded']:>9d}")
    if truth is not None:
        lines.append(f"{'quadrature':<18} {truth:>10.4f}")
    return "\n".join(lines)


def run_ablation(cfg: dict, variants=None, seeds=None, out=None) -> dict:
    """Train one energy model per loss variant and seed on exact target samples.

    Seed ``s`` draws the training data with ``data.seed + s`` and initialises
    the network with ``s``, so every variant sees identical data per seed.
    """
    variants = list(variants or cfg["ablation.variants"])
    seeds = [int(s) for s in (seeds if seeds is not None else cfg["ablation.seeds"])]
    unknown = set(variants) - {"both", "nce_only", "sm_only"}
    if unknown:
        raise ValueError(f"unknown ablation variants: {sorted(unknown)}")
    target = _target(cfg)
    errors = {v: [] for v in variants}
    seconds = {v: 0.0 for v in variants}
    for s in seeds:
        data = target.sample(int(cfg["data.n"]), int(cfg["data.seed"]) + s)
        for v in variants:
            t0 = time.perf_counter()
            model, _ = train_ebm(data, config=cfgmod.ebm_config(cfg, variant=v, seed=s))
            errors[v].append(grid_density_l2(lambda g, m=model: log_density(m, g), target))
            seconds[v] += time.perf_counter() - t0
    means = {v: float(np.mean(e)) for v, e in errors.items()}
    report = {"target": cfg["target.name"], "seeds": seeds, "errors": errors, "mean": means}
    if "both" in means and len(means) > 1:
        report["both_is_best"] = all(means["both"] < m for v, m in means.items() if v != "both")
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "ablation.json", report)
        write_json(out / "ablation_timings.json", seconds)
    return report
