import csv
import json

import numpy as np
import pytest

from dynatraj import cli, io
from dynatraj.baselines import BSplineFeatures, BSplineGP, NoPersonalization
from dynatraj.exceptions import InputError, NumericalError
from dynatraj.model import Hyperparams, IndividualRecord, observed_data_loglik
from dynatraj.prediction import predict_trajectory
from dynatraj.simulate import sample_dataset, scenario_presets

from helpers import random_params

H = Hyperparams.defaults()


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert cli.main(["simulate", "--preset", "mixed", "--M", "60", "--seed", "3", "--out-dir", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def fitted(sim):
    out = sim / "model.json"
    argv = ["fit", "--obs", str(sim / "observations.csv"), "--features", str(sim / "features.csv"),
            "--out", str(out), "-G", "3", "--restarts", "1", "--max-iters", "40"]
    assert cli.main(argv) == 0
    return out


def data_args(sim):
    return ["--obs", str(sim / "observations.csv"), "--features", str(sim / "features.csv")]


def test_dataset_round_trip(tmp_path):
    data, truth = sample_dataset(scenario_presets(M=15, seed=2)["mixed"])
    io.write_dataset(data, tmp_path / "o.csv", tmp_path / "f.csv")
    io.write_truth(truth, tmp_path / "t.csv")
    back = io.load_dataset(tmp_path / "o.csv", tmp_path / "f.csv")
    assert back.ids == data.ids
    for a, b in zip(data, back):
        assert a.times.tobytes() == b.times.tobytes()
        assert a.values.tobytes() == b.values.tobytes()
        np.testing.assert_array_equal(a.x_z, b.x_z)
    t = io.read_truth(tmp_path / "t.csv")
    for id_, tr in truth.items():
        assert t[id_][0] == tr.z
        np.testing.assert_array_equal(t[id_][1], tr.b)


def test_model_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    p = random_params(rng, G=3)
    data, _ = sample_dataset(scenario_presets(M=20, seed=1)["mixed"])
    io.save_model(tmp_path / "m.json", p, {"note": "x"})
    kind, q, meta = io.load_model(tmp_path / "m.json")
    assert kind == "proposed" and meta == {"note": "x"}
    for name in ("Lambda", "W", "beta"):
        assert getattr(q, name).tobytes() == getattr(p, name).tobytes()
    assert q.hyper.Sigma_b.tobytes() == p.hyper.Sigma_b.tobytes()
    assert observed_data_loglik(q, data) == pytest.approx(observed_data_loglik(p, data), rel=1e-12, abs=0)
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["format"] == "dynatraj-model" and doc["rng"] == "PCG64"


def test_baseline_files_round_trip(tmp_path):
    data, _ = sample_dataset(scenario_presets(M=30, seed=1)["mixed"])
    ind = data[data.ids[0]]
    tq = [1.0, 6.0, 12.0]
    models = [BSplineFeatures(H.basis_z).fit(data), BSplineGP(H).fit(data),
              NoPersonalization(random_params(np.random.default_rng(1)), keep_ou=True).fit(data)]
    for m in models:
        io.save_model(tmp_path / f"{m.name}.json", m)
        kind, back, _ = io.load_model(tmp_path / f"{m.name}.json")
        assert kind == m.name
        np.testing.assert_array_equal(back.predict(ind, tq).yhat, m.predict(ind, tq).yhat)


def test_bad_model_file(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(InputError):
        io.load_model(tmp_path / "x.json")
    (tmp_path / "y.json").write_text("{not json")
    with pytest.raises(InputError):
        io.load_model(tmp_path / "y.json")


def test_malformed_row_exit_code_names_line(sim, tmp_path, capsys):
    lines = (sim / "observations.csv").read_text().splitlines()
    lines[4] = lines[4].split(",")[0] + ",abc,70.0"
    (tmp_path / "obs.csv").write_text("\n".join(lines) + "\n")
    rc = cli.main(["fit", "--obs", str(tmp_path / "obs.csv"), "--features", str(sim / "features.csv"),
                   "--out", str(tmp_path / "m.json")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "line 5" in err and "obs.csv" in err
    assert not (tmp_path / "m.json").exists()


@pytest.mark.parametrize("row", ["a,-1.0,70", "a,1.0,nan", "a,1.0"])
def test_invalid_observation_rows(tmp_path, row):
    (tmp_path / "o.csv").write_text("id,time,value\n" + row + "\n")
    with pytest.raises(InputError):
        io.read_observations(tmp_path / "o.csv")


def test_features_must_be_binary_and_present(tmp_path):
    (tmp_path / "o.csv").write_text("id,time,value\na,1.0,70\nb,2.0,60\n")
    (tmp_path / "f.csv").write_text("id,x\na,2\n")
    with pytest.raises(InputError):
        io.load_dataset(tmp_path / "o.csv", tmp_path / "f.csv")
    (tmp_path / "f.csv").write_text("id,x\na,1\n")
    with pytest.raises(InputError):
        io.load_dataset(tmp_path / "o.csv", tmp_path / "f.csv")


def test_fit_writes_model_and_trace(fitted, capsys):
    kind, params, meta = io.load_model(fitted)
    assert kind == "proposed" and params.G == 3
    for key in ("G", "seed", "em_config", "final_loglik", "l2_weight_penalty", "bic"):
        assert key in meta
    with open(str(fitted.with_suffix("")) + "_trace.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ll = np.array([float(r["loglik"]) for r in rows])
    assert ll[-1] == pytest.approx(meta["final_loglik"], rel=1e-12)


def test_predict_unknown_id_exit_4(sim, fitted, capsys):
    rc = cli.main(["predict", *data_args(sim), "--model", str(fitted), "--id", "nobody"])
    assert rc == 4
    assert "nobody" in capsys.readouterr().err


def test_predict_matches_library_and_columns_sum(sim, fitted, tmp_path):
    out = tmp_path / "p.csv"
    ids = io.load_dataset(sim / "observations.csv", sim / "features.csv").ids
    assert cli.main(["predict", *data_args(sim), "--model", str(fitted), "--id", ids[0],
                     "--cutoff", "2", "--grid", "0:10:1", "--out", str(out)]) == 0
    table = io.read_prediction_csv(out)
    np.testing.assert_allclose(table[:, 1:5].sum(axis=1), table[:, 5], rtol=1e-14)
    _, params, _ = io.load_model(fitted)
    data = io.load_dataset(sim / "observations.csv", sim / "features.csv")
    want = predict_trajectory(params, data[ids[0]].truncate(2.0), np.arange(11.0), "map_subtype")
    np.testing.assert_array_equal(table[:, 5], want.yhat)


def test_cutoff_zero_is_prior_predictive(sim, fitted, tmp_path):
    data = io.load_dataset(sim / "observations.csv", sim / "features.csv")
    ind = next(i for i in data if i.times[0] > 0)
    out = tmp_path / "p.json"
    assert cli.main(["predict", *data_args(sim), "--model", str(fitted), "--id", ind.id, "--cutoff", "0",
                     "--grid", "1,5", "--out", str(out), "--mode", "posterior_mean"]) == 0
    doc = json.loads(out.read_text())
    assert doc["n_history"] == 0
    _, params, _ = io.load_model(fitted)
    empty = IndividualRecord(ind.id, [], [], ind.x_p, ind.x_z)
    want = predict_trajectory(params, empty, [1.0, 5.0], "posterior_mean").yhat
    np.testing.assert_allclose([r["yhat"] for r in doc["rows"]], want, rtol=1e-14)
    assert all(r["individual"] == 0.0 and r["noise"] == 0.0 for r in doc["rows"])
    probs = [s["probability"] for s in doc["ranked_subtypes"]]
    assert probs == sorted(probs, reverse=True)


def test_grid_selects_highest_likelihood(sim, tmp_path, capsys):
    grid = tmp_path / "grid.csv"
    grid.write_text("amplitude,length_scale,sigma2\n6.0,2.0,1.0\n0.5,0.5,40.0\n")
    out = tmp_path / "m.json"
    assert cli.main(["fit", *data_args(sim), "--out", str(out), "--grid", str(grid),
                     "--restarts", "1", "--max-iters", "30"]) == 0
    text = capsys.readouterr().out
    lls = [float(line.rsplit("loglik=", 1)[1]) for line in text.splitlines() if line.startswith("candidate")]
    _, params, _ = io.load_model(out)
    best = int(np.argmax(lls))
    assert f"selected candidate {best}" in text
    assert params.hyper.ou.amplitude == (6.0, 0.5)[best]


def test_simulate_list(capsys):
    assert cli.main(["simulate", "--list"]) == 0
    out = capsys.readouterr().out
    for name in ("stable", "rapid-decline", "recovering", "mixed"):
        assert name in out


def test_simulate_unknown_preset(tmp_path):
    assert cli.main(["simulate", "--preset", "nope", "--out-dir", str(tmp_path)]) == 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nG = 4\nsigma2 = 2.5  # trailing\n--length-scale = 3\n")
    args = cli.build_parser().parse_args(["fit", "--obs", "o", "--features", "f", "--out", "m",
                                          "--config", str(cfg), "-G", "2"])
    s = cli.resolve(args, ("G", "sigma2", "length_scale", "amplitude"))
    assert s == {"G": 2, "sigma2": 2.5, "length_scale": 3.0, "amplitude": 6.0}


def test_config_errors_name_line(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("G = 3\nbogus = 1\n")
    with pytest.raises(InputError, match="line 2"):
        cli.read_config(cfg)
    cfg.write_text("G = three\n")
    args = cli.build_parser().parse_args(["simulate", "--config", str(cfg)])
    with pytest.raises(InputError, match="line 1"):
        cli.resolve(args, ("G",))


def test_parse_grid():
    np.testing.assert_allclose(cli.parse_grid("0:1:0.25"), [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(cli.parse_grid("3,1.5"), [3, 1.5])
    with pytest.raises(InputError):
        cli.parse_grid("0:1:0")


def test_evaluate_writes_reports(sim, tmp_path):
    out = tmp_path / "eval"
    assert cli.main(["evaluate", *data_args(sim), "--out-dir", str(out), "--folds", "3", "--restarts", "1",
                     "--max-iters", "20", "--models", "proposed,bspline_features", "--cutoffs", "2",
                     "--bins", "2-4,4-8"]) == 0
    for name in ("report.csv", "report_folds.csv", "detection.csv", "report.txt"):
        assert (out / name).exists()
    with open(out / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2
    assert {r["model"] for r in rows} == {"proposed", "bspline_features"}
    assert all(r["p_value_vs"] == "" for r in rows if r["model"] == "proposed")
    for r in rows:
        if r["model"] != "proposed":
            assert r["p_value_vs"] == "n/a" or 0.0 <= float(r["p_value_vs"]) <= 1.0


def test_evaluate_unknown_model(sim, tmp_path):
    assert cli.main(["evaluate", *data_args(sim), "--out-dir", str(tmp_path), "--models", "magic"]) == 2


def test_select_writes_bic_table(sim, tmp_path):
    out = tmp_path / "bic.csv"
    assert cli.main(["select", *data_args(sim), "--out", str(out), "--g-range", "1-3",
                     "--restarts", "2", "--max-iters", "60"]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["G"]) for r in rows] == [1, 2, 3]
    ll = [float(r["loglik"]) for r in rows]
    assert all(b >= a - 1e-3 * abs(a) for a, b in zip(ll, ll[1:]))
    bics = [float(r["bic"]) for r in rows]
    assert [int(r["selected"]) for r in rows] == [int(k == int(np.argmin(bics))) for k in range(3)]


def test_numerical_failure_exit_3(sim, tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise NumericalError("covariance not positive definite", ladder=[1e-8])

    monkeypatch.setattr(cli, "fit_em", boom)
    rc = cli.main(["fit", *data_args(sim), "--out", str(tmp_path / "m.json")])
    assert rc == 3
    assert "numerical failure" in capsys.readouterr().err


def test_atomic_write_leaves_no_temp_files(tmp_path):
    io.atomic_write(tmp_path / "a.txt", "one")
    io.atomic_write(tmp_path / "a.txt", "two")
    assert (tmp_path / "a.txt").read_text() == "two"
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]
