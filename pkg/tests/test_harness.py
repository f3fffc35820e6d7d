import json

import numpy as np
import pytest

from score_assim.errors import ConfigError
from score_assim.harness import (
    ExperimentConfig,
    compare,
    format_table,
    list_presets,
    load_preset,
    read_results_csv,
    rmse,
    run_experiment,
    simulate,
    write_results,
)

SMALL_SF = {"n_samples": 200, "width": 16, "num_steps": 50, "init_epochs": 20, "epochs": 5, "batch_size": 50}


def lg_config(**kw):
    base = {"problem": "linear_gaussian", "filter": "kf", "steps": 50, "seed": 3,
            "model": {"a": 0.9, "c": 1.0, "q": 0.04, "r": 0.25}}
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def riccati_steady_std(a, c, q, r, iters=10_000):
    p = 1.0
    for _ in range(iters):
        prior = a * a * p + q
        p = prior - prior * c * c * prior / (c * c * prior + r)
    return np.sqrt(p)


# ---------------------------------------------------------------- rmse

def test_rmse_zero_when_exact():
    x = np.random.default_rng(0).standard_normal((7, 3))
    per, agg = rmse(x, x)
    assert np.all(per == 0) and agg == 0


def test_rmse_scalar_example():
    per, agg = rmse(np.ones((1, 1)), np.zeros((1, 1)))
    np.testing.assert_array_equal(per, [1.0])
    assert agg == 1.0


def test_rmse_two_dim_example():
    per, _ = rmse(np.array([[3.0, 4.0]]), np.zeros((1, 2)))
    np.testing.assert_allclose(per, [np.sqrt(12.5)], rtol=1e-15)
    assert abs(per[0] - 3.5355) < 1e-4


def test_rmse_pools_repetitions_before_root():
    est = np.array([[[1.0]], [[3.0]]])
    per, _ = rmse(est, np.zeros_like(est))
    np.testing.assert_allclose(per, [np.sqrt(5.0)])


def test_rmse_shape_mismatch():
    with pytest.raises(ConfigError):
        rmse(np.zeros((3, 2)), np.zeros((3, 1)))


# ---------------------------------------------------------------- config

@pytest.mark.parametrize("bad", [
    {"problem": "double_well", "bogus": 1},
    {"problem": "double_well", "model": {"gamma": 1}},
    {"problem": "double_well", "sf": {"neurons": 3}},
    {"problem": "double_well", "filter": "kf"},
    {"problem": "double_well", "steps": 0},
    {"problem": "double_well", "repetitions": 0},
    {"problem": "double_well", "filter": "ukf"},
    {"problem": "pendulum"},
    {"problem": "double_well", "score_loss": "sliced"},
    {"problem": "double_well", "shocks": [[1]]},
    {"problem": "double_well", "apf": {"n_particles": 0}},
    {"filter": "sf"},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_config_from_json_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(bad)


def test_config_echo_is_replayable():
    cfg = load_preset("ex1_double_well_beta03")
    echo = cfg.to_dict()
    assert echo["score_loss"] == "denoising"
    assert echo["sf"]["num_steps"] == 600
    assert echo["model"]["beta"] == 0.3
    replay = ExperimentConfig.from_dict({k: v for k, v in echo.items() if k != "model"} | {"model": cfg.model})
    assert replay.to_dict() == echo
    assert replay.sf_config() == cfg.sf_config()


@pytest.mark.parametrize("name", list_presets())
def test_presets_load(name):
    cfg = load_preset(name)
    assert cfg.description
    cfg.build_model()


def test_preset_values():
    names = set(list_presets())
    assert {"ex1_double_well_beta03", "ex1_double_well_beta02", "ex2_bearing",
            "ex3_lorenz96_d10", "ex3_lorenz96_d100"} <= names
    ex1 = load_preset("ex1_double_well_beta03")
    assert (ex1.steps, ex1.model["beta"], ex1.sf["num_steps"], ex1.apf["n_particles"],
            ex1.enkf["n_members"]) == (100, 0.3, 600, 1000, 100)
    assert load_preset("ex1_double_well_beta02").model["beta"] == 0.2
    assert load_preset("ex2_bearing").steps == 20
    d10 = load_preset("ex3_lorenz96_d10")
    assert d10.shocks == [[21, 2.0], [41, 2.0]] and d10.model["dim"] == 10
    d100 = load_preset("ex3_lorenz96_d100")
    assert (d100.model["dim"], d100.sf["num_steps"], d100.sf["width"], d100.repetitions) == (100, 1000, 400, 20)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        load_preset("nope")


# ---------------------------------------------------------------- runs

def test_kalman_run_within_three_steady_std():
    res = run_experiment(lg_config())
    bound = 3 * riccati_steady_std(0.9, 1.0, 0.04, 0.25)
    assert res.estimates.shape == (1, 50, 1)
    assert res.aggregate_rmse <= bound
    assert res.ok


def test_repeat_seed_makes_repetitions_identical():
    res = run_experiment(lg_config(filter="enkf", repetitions=2, repeat_seed=True, steps=10))
    np.testing.assert_array_equal(res.estimates[0], res.estimates[1])
    np.testing.assert_array_equal(res.truth[0], res.truth[1])


def test_repetitions_differ_without_hook():
    res = run_experiment(lg_config(repetitions=2, steps=10))
    assert not np.array_equal(res.truth[0], res.truth[1])


def test_threads_match_serial(monkeypatch):
    cfg = lg_config(filter="enkf", repetitions=2, steps=10)
    serial = run_experiment(cfg)
    monkeypatch.setenv("SCORE_ASSIM_THREADS", "2")
    parallel = run_experiment(cfg)
    np.testing.assert_array_equal(serial.estimates, parallel.estimates)


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("SCORE_ASSIM_THREADS", "many")
    with pytest.raises(ConfigError):
        run_experiment(lg_config(steps=2))


def test_simulate_matches_run_truth():
    cfg = lg_config(steps=8)
    np.testing.assert_array_equal(simulate(cfg).truth, run_experiment(cfg).truth[0])


def test_none_filter_propagates_prior_mean():
    res = run_experiment(lg_config(filter="none", steps=5))
    np.testing.assert_allclose(res.estimates[0, :, 0], 0.0)


def test_apf_records_ess():
    res = run_experiment(lg_config(filter="apf", steps=5, apf={"n_particles": 300}))
    assert len(res.ess[0]) == 5
    assert all(0 < e <= 300 for e in res.ess[0])


def test_sf_small_run_rows():
    res = run_experiment(ExperimentConfig(problem="double_well", steps=4, sf=SMALL_SF))
    assert res.estimates.shape == (1, 4, 1)
    assert np.all(np.isfinite(res.estimates))
    assert len(res.diagnostics[0]) == 5


@pytest.mark.slow
def test_double_well_sf_hundred_steps():
    sf = {"n_samples": 500, "width": 50, "num_steps": 200, "init_epochs": 100, "epochs": 10, "batch_size": 100}
    res = run_experiment(load_preset("ex1_double_well_beta03").replace(sf=sf))
    assert res.estimates.shape == (1, 100, 1)
    assert np.all(np.isfinite(res.estimates))
    assert np.all(res.per_step_rmse >= 0)


def test_failing_step_is_recorded(monkeypatch):
    import score_assim.harness as h
    from score_assim.errors import UpdateError

    def boom(*a, **k):
        raise UpdateError("injected")

    monkeypatch.setattr(h, "enkf_step", boom)
    res = run_experiment(lg_config(filter="enkf", steps=3))
    assert not res.ok
    assert res.errors == [{"rep": 0, "step": 1, "error": "injected"}]
    assert np.all(np.isnan(res.estimates))


# ---------------------------------------------------------------- output

def test_csv_round_trip_and_line_count(tmp_path):
    res = run_experiment(lg_config(filter="enkf", steps=12))
    path = tmp_path / "r.csv"
    write_results(res, path, "csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 13
    assert lines[0] == "step,truth_0,estimate_0,rmse"
    steps, truth, est, err = read_results_csv(path)
    np.testing.assert_array_equal(steps, np.arange(1, 13))
    np.testing.assert_array_equal(truth, res.truth[0])
    np.testing.assert_array_equal(est, res.estimates[0])
    np.testing.assert_array_equal(err, res.per_step_rmse)
    echo = json.loads((tmp_path / "r.csv.config.json").read_text())
    assert echo["config"]["filter"] == "enkf"


def test_jsonl_mirrors_fields(tmp_path):
    res = run_experiment(lg_config(filter="kf", steps=4, repetitions=2))
    path = tmp_path / "r.jsonl"
    write_results(res, path, "jsonl")
    recs = [json.loads(s) for s in path.read_text().splitlines()]
    assert recs[0]["type"] == "header" and recs[0]["config"]["problem"] == "linear_gaussian"
    assert len(recs) == 1 + 2 * 4
    assert recs[-1]["rep"] == 1 and recs[-1]["step"] == 4
    assert recs[-1]["estimate"] == res.estimates[1, 3].tolist()


def test_multi_rep_csv_has_rep_column(tmp_path):
    res = run_experiment(lg_config(steps=3, repetitions=2))
    write_results(res, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("rep,step,") and len(lines) == 7


def test_output_bytes_identical_modulo_wall_time(tmp_path):
    cfg = lg_config(filter="apf", steps=6, apf={"n_particles": 200})
    texts = []
    for i in range(2):
        p = tmp_path / f"r{i}.jsonl"
        write_results(run_experiment(cfg), p, "jsonl")
        lines = p.read_text().splitlines()
        head = json.loads(lines[0])
        head.pop("wall_time")
        texts.append((head, lines[1:]))
        write_results(run_experiment(cfg), tmp_path / f"r{i}.csv", "csv")
    assert texts[0] == texts[1]
    assert (tmp_path / "r0.csv").read_bytes() == (tmp_path / "r1.csv").read_bytes()


def test_write_results_rejects_format(tmp_path):
    res = run_experiment(lg_config(steps=2))
    with pytest.raises(ConfigError):
        write_results(res, tmp_path / "x", "xml")


def test_write_results_reports_path(tmp_path):
    res = run_experiment(lg_config(steps=2))
    target = tmp_path / "missing_dir" / "r.csv"
    with pytest.raises(OSError, match="missing_dir"):
        write_results(res, target)


def test_compare_table():
    results = compare(lg_config(steps=5, apf={"n_particles": 200}), ["kf", "enkf", "apf", "none"])
    table = format_table(results)
    assert set(results) == {"kf", "enkf", "apf", "none"}
    assert len(table.splitlines()) == 5
    assert results["kf"].aggregate_rmse < results["none"].aggregate_rmse
