import json
import math

import numpy as np
import pytest

from tubefield import harness
from tubefield.harness import (
    ConfigError,
    Experiment,
    ExperimentConfig,
    StageError,
    add_noise_snr,
    field_error,
    load_config,
    realized_snr_db,
)


def test_noise_vanishes_at_huge_snr():
    s = np.sin(np.linspace(0, 20, 1000))
    np.testing.assert_allclose(add_noise_snr(s, 300.0, 0), s, rtol=1e-12, atol=1e-12 * np.abs(s).max())


def test_noise_realized_snr_and_seed():
    s = 60 * np.sin(np.linspace(0, 2 * np.pi, 1000, endpoint=False))
    a = add_noise_snr(s, 40.0, 1234)
    assert abs(realized_snr_db(s, a) - 40.0) <= 0.5
    assert np.array_equal(a, add_noise_snr(s, 40.0, 1234))
    assert not np.array_equal(a, add_noise_snr(s, 40.0, 1235))


def test_noise_variance_converges_at_root_n_rate():
    for n in (10**3, 10**5):
        s = np.ones(n)
        noise = add_noise_snr(s, 20.0, 7) - s
        var = noise.var()
        # target 0.01; standard error of a sample variance is sigma^2 sqrt(2/n)
        assert abs(var - 0.01) < 4 * 0.01 * math.sqrt(2 / n)


def test_noise_rejects_silent_signal():
    with pytest.raises(ValueError):
        add_noise_snr(np.zeros(10), 40.0, 0)


def test_field_error_examples():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(20, 30))
    rep = field_error(p, p)
    assert rep.rel_l2 == 0 and rep.max_abs == 0
    assert math.isclose(field_error(1.01 * p, p).rel_l2, 0.01, rel_tol=1e-12)
    assert math.isclose(field_error(p + 0.3, p).max_abs, 0.3, rel_tol=1e-12)
    assert rep.per_x.shape == (30,) and rep.per_t.shape == (20,)
    with pytest.raises(ValueError):
        field_error(p, p[:, :-1])


# ---------------------------------------------------------------- configuration


def test_default_config_round_trip():
    cfg = ExperimentConfig()
    back = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg
    assert back.content_hash() == cfg.content_hash()


def test_hash_tracks_content():
    a = ExperimentConfig()
    b = a.with_overrides(["training.adam_epochs=100"])
    assert b.training.adam_epochs == 100
    assert a.content_hash() != b.content_hash()


def test_defaults_follow_the_reference_setup():
    cfg = ExperimentConfig()
    assert (cfg.network.n_f, cfg.network.n_b, cfg.network.ffe_size) == (200, 5, 50)
    assert (cfg.training.adam_epochs, cfg.training.lbfgs_epochs) == (20000, 3000)
    assert (cfg.ftm.adam_epochs, cfg.ftm.lbfgs_epochs) == (20000, 1500)
    assert (cfg.collocation.n_pde, cfg.collocation.n_bc) == (5000, 1000)
    assert cfg.noise.snr_db == 40.0


def test_unknown_key_suggests_neighbours():
    with pytest.raises(ConfigError, match="training.adam_epochs"):
        ExperimentConfig().with_overrides(["training.adam_epoch=3"])


@pytest.mark.parametrize("item", ["training.adam_epochs=abc", "weights.mode=\"other\"",
                                  "network.xi=-1", "novalue", "ftm.update_net=1"])
def test_bad_overrides_raise(item):
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides([item])


def test_override_types():
    cfg = ExperimentConfig().with_overrides(
        ["network.xi=\"auto\"", "ftm.update_rad=false", "geometry.radius_end=0.03", "name=x"])
    assert cfg.network.xi == "auto" and cfg.ftm.update_rad is False
    assert cfg.geometry.radius_end == 0.03 and cfg.name == "x"


def test_schema_covers_every_key():
    sch = harness.schema()
    assert set(sch) == set(harness.schema_keys())
    assert all(v["doc"] for v in sch.values())
    assert sch["source.frequency"]["units"] == "Hz"


def test_presets_load():
    for name in ("reference", "desk", "smoke"):
        cfg = load_config(name)
        assert cfg.name == name
    assert load_config("reference") == ExperimentConfig(name="reference")
    desk = load_config("desk")
    assert (desk.network.n_f, desk.network.n_b) == (64, 3)
    assert (desk.training.adam_epochs, desk.training.lbfgs_epochs) == (5000, 300)


def test_missing_config_file():
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/config.json")


def test_run_directory_uses_hash(tmp_path):
    cfg = ExperimentConfig(name="abc")
    assert harness.run_directory(cfg, tmp_path).name == f"abc-{cfg.content_hash()[:12]}"


# ---------------------------------------------------------------- pipeline


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    cfg = load_config("smoke")
    Experiment(cfg, out).run_all()
    return cfg, out


def test_pipeline_layout(smoke_run):
    _, out = smoke_run
    for rel in ("config.json", "manifest.json", "fdm/field.csv", "fdm/boundary.csv",
                "obs/observations.csv", "gamma/checkpoint.bin", "gamma/train_log.csv",
                "eval/field_error.json", "eval/p_field.csv", "inverse/ftm.json",
                "inverse/ftm_trace.csv", "inverse/tom.json", "inverse/tomb.json", "table2.json"):
        assert (out / rel).exists(), rel
    table = json.loads((out / "table2.json").read_text())
    assert set(table) == {"GT", "FTM", "TOM", "TOMB"}


def test_manifest_contents(smoke_run):
    cfg, out = smoke_run
    m = json.loads((out / "manifest.json").read_text())
    assert m["config_hash"] == cfg.content_hash()
    assert m["seeds"] == {"network": cfg.network.seed, "noise": cfg.noise.seed}
    assert {"torch", "numpy", "python"} <= set(m["versions"])
    for stage in ("forward", "synth-obs", "train", "evaluate", "tom", "ftm"):
        assert m["stages"][stage]["status"] == "ok"
        assert m["stages"][stage]["seconds"] > 0


def test_observations_carry_realized_noise(smoke_run):
    cfg, out = smoke_run
    cols = harness.read_columns(out / "obs" / "observations.csv")
    assert np.array_equal(cols["p_noisy"], add_noise_snr(cols["p_clean"], cfg.noise.snr_db, cfg.noise.seed))


def test_stage_error_is_attributed(tmp_path):
    exp = Experiment(load_config("smoke"), tmp_path)
    with pytest.raises(StageError) as info:
        exp.train()
    assert info.value.stage == "train"
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["stages"]["train"]["status"] == "failed"


def test_completed_outputs_survive_a_later_failure(tmp_path):
    cfg = load_config("smoke").with_overrides(["training.adam_lr=1e30"])
    exp = Experiment(cfg, tmp_path)
    exp.forward()
    exp.synth_obs()
    with pytest.raises(StageError):
        exp.train()
    assert (tmp_path / "fdm" / "solution.npz").exists()
    assert (tmp_path / "obs" / "observations.csv").exists()
