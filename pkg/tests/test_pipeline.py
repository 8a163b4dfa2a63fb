import json

import numpy as np
import pytest

from boltznce.config import apply_overrides
from boltznce.pipeline import (
    STAGES,
    PipelineError,
    comparison_table,
    make_training_data,
    read_timings,
    run_ablation,
    run_full_pipeline,
)


def _outputs(run_dir):
    return {p.name: p.read_bytes() for p in sorted(run_dir.iterdir())
            if p.suffix in (".csv", ".json")}


def _mtimes(run_dir):
    return {p.name: p.stat().st_mtime_ns for p in run_dir.iterdir()}


def test_full_run_writes_every_artifact(tiny_config, tmp_path):
    out = run_full_pipeline(tiny_config, tmp_path / "run")
    for _, artifacts in STAGES.values():
        for name in artifacts:
            assert (out / name).exists(), name
    stages = json.loads((out / "stages.json").read_text())
    assert all(stages[s]["status"] == "done" for s in STAGES)
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["e_w2"] >= 0 and metrics["nll_mean"] is not None
    assert metrics["extra"]["delta_f_quadrature"] == pytest.approx(1.8624530938717632, abs=2e-3)
    timings = read_timings(out)
    assert timings["likelihood_speedup"]["ratio"] > 1 and timings["ebm"]["seconds"] > 0
    table = comparison_table(out)
    assert "exact_likelihood" in table and "ebm_likelihood" in table and "quadrature" in table


def test_rerun_is_a_no_op_and_changes_rerun_downstream_only(tiny_config, tmp_path):
    out = run_full_pipeline(tiny_config, tmp_path / "run")
    before = _mtimes(out)
    run_full_pipeline(tiny_config, out)
    after = _mtimes(out)
    assert {k: v for k, v in after.items() if k not in ("timings.log", "config.json")} == \
        {k: v for k, v in before.items() if k not in ("timings.log", "config.json")}

    changed = apply_overrides(tiny_config, ["ebm.epochs=2"])
    run_full_pipeline(changed, out)
    again = _mtimes(out)
    for name in ("train_data.csv", "emulator.ckpt", "samples.csv", "weights_exact.csv"):
        assert again[name] == before[name], name
    for name in ("ebm.ckpt", "weights_ebm.csv", "metrics.json"):
        assert again[name] != before[name], name


def test_same_config_and_seed_reproduce_bytes(tiny_config, tmp_path):
    a = run_full_pipeline(tiny_config, tmp_path / "a", seed=3)
    b = run_full_pipeline(tiny_config, tmp_path / "b", seed=3)
    assert _outputs(a) == _outputs(b)
    c = run_full_pipeline(tiny_config, tmp_path / "c", seed=4)
    assert _outputs(a)["samples.csv"] != _outputs(c)["samples.csv"]


def test_failed_stage_is_recorded(tiny_config, tmp_path):
    bad = apply_overrides(tiny_config, ["reweight.bins=0"])
    with pytest.raises(PipelineError) as info:
        run_full_pipeline(bad, tmp_path / "run")
    assert info.value.stage == "free_energy"
    stages = json.loads((tmp_path / "run" / "stages.json").read_text())
    assert stages["free_energy"]["status"] == "failed" and stages["free_energy"]["error"]
    assert stages["ebm_likelihood"]["status"] == "done"
    # fixing the config resumes from the failed stage
    before = _mtimes(tmp_path / "run")
    run_full_pipeline(tiny_config, tmp_path / "run")
    assert _mtimes(tmp_path / "run")["emulator.ckpt"] == before["emulator.ckpt"]


def test_biased_training_data_shifts_mass_into_the_region(tiny_config):
    cfg = apply_overrides(tiny_config, ["data.n=4000"])
    data, info = make_training_data(cfg)
    assert info["biased"] and info["scale"] == pytest.approx(5.4978, abs=1e-3)
    assert np.mean((data[:, 0] > 0) & (data[:, 0] < 2)) == pytest.approx(0.5, abs=0.05)
    plain, info = make_training_data(apply_overrides(cfg, ["bias.enabled=false"]))
    assert not info["biased"]
    assert np.mean((plain[:, 0] > 0) & (plain[:, 0] < 2)) < 0.25


def test_ablation_report(tiny_config, tmp_path):
    cfg = apply_overrides(tiny_config, ["target.name=eight_gaussians", "target.params={}",
                                        "target.kT=null", "bias.enabled=false"])
    report = run_ablation(cfg, seeds=[0, 1], out=tmp_path)
    assert set(report["errors"]) == {"both", "nce_only", "sm_only"}
    assert all(len(v) == 2 for v in report["errors"].values())
    assert isinstance(report["both_is_best"], bool)
    assert json.loads((tmp_path / "ablation.json").read_text())["mean"] == report["mean"]
    with pytest.raises(ValueError):
        run_ablation(cfg, variants=["everything"], seeds=[0])
