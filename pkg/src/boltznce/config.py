"""Flat, dotted-key experiment configuration.

A config is a plain ``dict`` mapping keys such as ``"ebm.lr"`` to JSON
values. Files and ``--set key=value`` overrides are merged on top of
:data:`DEFAULTS`; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path

from .ebm import EbmConfig
from .training import TrainConfig

__all__ = [
    "DEFAULTS",
    "ConfigError",
    "load_config",
    "apply_overrides",
    "config_hash",
    "emulator_train_config",
    "ebm_config",
    "preset_names",
    "describe_keys",
]


class ConfigError(ValueError):
    pass


# key -> (default, description)
_SPEC = {
    "target.name": ("two_well", "target density: eight_gaussians, checkerboard, two_well or gaussian"),
    "target.params": ({}, "constructor parameters of the target (JSON object)"),
    "target.kT": (None, "thermal energy; null keeps the target's default"),
    "data.n": (20000, "number of training samples drawn from the target"),
    "data.seed": (0, "seed for drawing the training data"),
    "bias.enabled": (False, "resample the training data with a von Mises weight on one coordinate"),
    "bias.coordinate": (0, "column the von Mises weight reads"),
    "bias.mu": (1.0, "von Mises location"),
    "bias.kappa": (10.0, "von Mises concentration"),
    "bias.scale": (150.0, "weight scale; \"auto\" bisects it so the region holds bias.share of the mass"),
    "bias.offset": (1.0, "constant added to the von Mises weight"),
    "bias.share": (0.5, "target share of the region under the biased data when bias.scale is auto"),
    "bias.pool": (5, "the unbiased pool holds bias.pool * data.n samples before resampling"),
    "emulator.objective": ("vector_field", "vector_field, endpoint or cfm"),
    "emulator.schedule": ("linear", "interpolant schedule of the emulator: linear or trig"),
    "emulator.coupling": ("ot", "pairing of data and prior draws: ot or independent"),
    "emulator.cfm_sigma": (0.0, "noise level of the conditional flow-matching path"),
    "emulator.epochs": (100, "training epochs"),
    "emulator.batch_size": (128, "mini-batch size"),
    "emulator.lr": (1e-3, "initial Adam learning rate"),
    "emulator.min_lr": (1e-5, "floor of the plateau scheduler"),
    "emulator.lr_patience": (20, "epochs without improvement before the learning rate is halved"),
    "emulator.lr_schedule": ("plateau", "plateau or cosine (anneal to min_lr over the epochs)"),
    "emulator.ema_decay": (0.995, "EMA decay"),
    "emulator.ema_every": (1, "iterations between EMA updates"),
    "emulator.early_stop": (0, "stop after this many epochs without improvement (0 disables)"),
    "emulator.hidden": ([64, 64, 64], "hidden layer widths"),
    "emulator.n_freqs": (8, "Fourier features of t"),
    "emulator.seed": (0, "initialisation and batching seed"),
    "sample.n": (100000, "number of emulator samples to generate"),
    "sample.seed": (0, "seed of the prior draws"),
    "sample.chunk_size": (10000, "samples integrated per ODE solve"),
    "ode.atol": (1e-5, "absolute tolerance of the adaptive solver"),
    "ode.rtol": (1e-5, "relative tolerance of the adaptive solver"),
    "ode.divergence": ("exact_autodiff", "exact_autodiff or exact_finite_difference"),
    "ebm.n": (20000, "number of emulator samples the energy model is trained on"),
    "ebm.negatives_count": (1, "negative times per positive"),
    "ebm.negatives_std": (0.025, "standard deviation of the negative times"),
    "ebm.sm_weight": (1.0, "weight of the score-matching loss"),
    "ebm.nce_weight": (1.0, "weight of the InfoNCE loss"),
    "ebm.schedule": ("trig", "interpolant schedule of the energy model"),
    "ebm.coupling": ("independent", "pairing used for the energy model: independent or ot"),
    "ebm.time_power": (3.0, "t is drawn as u**time_power with u uniform"),
    "ebm.epochs": (100, "training epochs"),
    "ebm.batch_size": (128, "mini-batch size"),
    "ebm.lr": (6e-3, "initial Adam learning rate"),
    "ebm.min_lr": (1e-5, "floor of the plateau scheduler"),
    "ebm.lr_patience": (20, "epochs without improvement before the learning rate is halved"),
    "ebm.lr_schedule": ("cosine", "plateau or cosine (anneal to min_lr over the epochs)"),
    "ebm.ema_decay": (0.995, "EMA decay"),
    "ebm.ema_every": (1, "iterations between EMA updates"),
    "ebm.early_stop": (0, "stop after this many epochs without improvement (0 disables)"),
    "ebm.hidden": ([64, 64, 64], "hidden layer widths"),
    "ebm.n_freqs": (8, "Fourier features of t"),
    "ebm.seed": (0, "initialisation and batching seed"),
    "reweight.coordinate": (0, "column used as the collective variable"),
    "reweight.region": ([0.0, 2.0], "interval whose free energy is compared with its complement"),
    "reweight.bins": (100, "histogram bins"),
    "metrics.n_reference": (100000, "exact target draws used as the reference for energy W2"),
    "metrics.n_holdout": (2000, "exact target draws used for the emulator NLL"),
    "metrics.nll_batch": (1000, "batch size of the NLL report"),
    "metrics.seed": (12345, "seed of the reference and hold-out draws"),
    "metrics.angular": ([], "columns treated as angles for the torsion W2 (empty skips it)"),
    "metrics.w2_batch": (2000, "sub-batch size of the angular W2"),
    "metrics.w2_repeats": (5, "number of angular W2 sub-batches"),
    "ablation.variants": (["both", "nce_only", "sm_only"], "loss variants compared by the ablation"),
    "ablation.seeds": ([0, 1, 2], "seeds averaged by the ablation"),
}

DEFAULTS = {k: v[0] for k, v in _SPEC.items()}


def describe_keys() -> str:
    width = max(map(len, _SPEC))
    return "\n".join(f"  {k:<{width}}  {json.dumps(d)}\n  {'':<{width}}  {doc}"
                     for k, (d, doc) in _SPEC.items())


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("boltznce.presets").iterdir()
                  if p.name.endswith(".json"))


def _read(source) -> dict:
    if isinstance(source, dict):
        return dict(source)
    path = Path(source)
    if not path.exists() and str(source) in preset_names():
        text = resources.files("boltznce.presets").joinpath(f"{source}.json").read_text()
    else:
        text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{source}: not valid JSON ({err})") from err
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: the config must be a JSON object")
    return data


def _check(cfg: dict) -> dict:
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides=()) -> dict:
    """Apply ``key=value`` strings; values are parsed as JSON, falling back to strings."""
    cfg = dict(cfg)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        cfg[key.strip()] = _parse_value(value.strip())
    return _check(cfg)


def load_config(source=None, overrides=()) -> dict:
    """Defaults, then ``source`` (path, preset name or dict), then ``overrides``."""
    cfg = dict(DEFAULTS)
    if source is not None:
        cfg.update(_check(_read(source)))
    return apply_overrides(cfg, overrides)


def config_hash(cfg: dict, prefixes=None) -> str:
    """sha256 of the keys under ``prefixes`` (all keys when None)."""
    if prefixes is not None:
        cfg = {k: v for k, v in cfg.items() if any(k.startswith(p) for p in prefixes)}
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


_TRAIN_KEYS = ("epochs", "batch_size", "lr", "min_lr", "lr_patience", "lr_schedule", "ema_decay", "ema_every",
               "early_stop", "hidden", "n_freqs", "seed")


def _train_config(cfg: dict, section: str, seed=None) -> TrainConfig:
    kw = {k: cfg[f"{section}.{k}"] for k in _TRAIN_KEYS}
    if seed is not None:
        kw["seed"] = seed
    return TrainConfig(**kw)


def emulator_train_config(cfg: dict, seed=None) -> TrainConfig:
    return _train_config(cfg, "emulator", seed)


def ebm_config(cfg: dict, variant: str | None = None, seed=None) -> EbmConfig:
    kw = dict(negatives_count=cfg["ebm.negatives_count"], negatives_std=cfg["ebm.negatives_std"],
              schedule=cfg["ebm.schedule"], coupling=cfg["ebm.coupling"],
              time_power=cfg["ebm.time_power"], train=_train_config(cfg, "ebm", seed))
    if variant is None:
        return EbmConfig(sm_weight=cfg["ebm.sm_weight"], nce_weight=cfg["ebm.nce_weight"], **kw)
    return EbmConfig.variant(variant, **kw)
