import json

import numpy as np
import pandas as pd
import pytest

from latmix import cli, mcem
from latmix.core import McemConfig
from latmix import simulate as sim

FAST = ["--gibbs-l", "200", "--burn-in", "20", "--max-iter", "300", "--starts", "1",
        "--ml-draws", "300", "--threads", "1"]


def _write_data(path, rng, m=8, n=25, empty=("new",)):
    rows = []
    for i in range(m):
        pi = rng.beta(5, 3)
        for _ in range(n):
            x = rng.normal()
            y = (-1 + x if rng.random() < pi else 1 - x) + 0.5 * rng.normal()
            rows.append((f"g{i}", y, x))
    for cid in empty:
        rows.append((cid, np.nan, np.nan))
    pd.DataFrame(rows, columns=["cluster_id", "y", "x_1"]).to_csv(path, index=False)


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    _write_data(d / "data.csv", np.random.default_rng(0))
    code = cli.main(["fit", str(d / "data.csv"), "--k", "2", "--seed", "5", "--out", str(d / "a.json")] + FAST)
    return d, code


def test_fit_writes_two_experts(fitted):
    d, code = fitted
    assert code == cli.EXIT_OK
    doc = json.loads((d / "a.json").read_text())
    assert doc["K"] == 2 and len(doc["experts"]) == 2
    assert doc["format_version"] == cli.FORMAT_VERSION
    assert [c["id"] for c in doc["clusters"]][-1] == "new"
    assert doc["n_params"] == 8 and set(doc["streams"]) >= {"fit", "start", "ml"}


def test_fit_is_reproducible_apart_from_timestamp(fitted):
    d, _ = fitted
    args = ["fit", str(d / "data.csv"), "--k", "2", "--seed", "5", "--out", str(d / "b.json")] + FAST
    assert cli.main(args) == cli.EXIT_OK
    a, b = (json.loads((d / f).read_text()) for f in ("a.json", "b.json"))
    a.pop("created"), b.pop("created")
    assert json.dumps(a) == json.dumps(b)


def test_predict_rows(fitted):
    d, _ = fitted
    assert cli.main(["predict", str(d / "a.json"), "--x", "0.4", "--out", str(d / "p.csv")]) == 0
    table = pd.read_csv(d / "p.csv", dtype={"cluster_id": str})
    assert len(table) == 512 * (9 + 1)
    assert (table["density"] >= 0).all()
    new = table[table.cluster_id == "new"]["density"].to_numpy()
    marginal = table[table.cluster_id == cli.MARGINAL]["density"].to_numpy()
    np.testing.assert_allclose(new, marginal, rtol=0, atol=1e-12)


def test_artifact_round_trip(rng, tmp_path):
    _write_data(tmp_path / "d.csv", rng, m=5, n=20)
    ds = cli.read_dataset(tmp_path / "d.csv")
    fit = mcem.fit(ds, 2, config=McemConfig(L=40, burn_in=5, H=5, d=2, max_iter=15, n_starts=1,
                                            ml_draws=200))
    path = tmp_path / "f.json"
    path.write_text(json.dumps(cli.fit_to_dict(fit)))
    loaded, _ = cli.load_fit(path)
    x = np.array([1.0, -0.3])
    pd.testing.assert_frame_equal(cli.prediction_rows(fit, x), cli.prediction_rows(loaded, x))


def test_varying_cluster_covariate_is_rejected(tmp_path, capsys):
    pd.DataFrame({"cluster_id": ["a", "a", "b"], "y": [1.0, 2.0, 3.0], "x_1": [0.0, 1.0, 2.0],
                  "w_1": [0.0, 1.0, 0.0]}).to_csv(tmp_path / "bad.csv", index=False)
    code = cli.main(["fit", str(tmp_path / "bad.csv"), "--k", "2"])
    assert code == cli.EXIT_VALIDATION
    err = json.loads(capsys.readouterr().err)
    assert "'a'" in err["message"] and "'w_1'" in err["message"]


def test_cd_predict_needs_w(tmp_path, capsys):
    rng = np.random.default_rng(3)
    rows = []
    for i in range(6):
        w = i % 2
        for _ in range(15):
            x = rng.normal()
            rows.append((f"g{i}", x + rng.normal(), x, w))
    pd.DataFrame(rows, columns=["cluster_id", "y", "x_1", "w_1"]).to_csv(tmp_path / "cd.csv", index=False)
    code = cli.main(["fit", str(tmp_path / "cd.csv"), "--k", "2", "--mixing", "cd",
                     "--out", str(tmp_path / "cd.json")] + FAST)
    assert code in (cli.EXIT_OK, cli.EXIT_CONVERGENCE)
    code = cli.main(["predict", str(tmp_path / "cd.json"), "--x", "0", "--out", str(tmp_path / "p.csv")])
    assert code == cli.EXIT_VALIDATION
    assert cli.main(["predict", str(tmp_path / "cd.json"), "--x", "0", "--w", "1",
                     "--out", str(tmp_path / "p.csv")]) == cli.EXIT_OK


def test_non_convergence_exit_code(tmp_path, capsys):
    _write_data(tmp_path / "d.csv", np.random.default_rng(1), m=4, n=10)
    args = ["fit", str(tmp_path / "d.csv"), "--k", "3", "--max-iter", "3", "--gibbs-l", "20",
            "--burn-in", "2", "--starts", "1", "--ml-draws", "50", "--out", str(tmp_path / "f.json")]
    assert cli.main(args) == cli.EXIT_CONVERGENCE
    assert json.loads(capsys.readouterr().err)["error"] == "non-convergence"
    assert (tmp_path / "f.json").exists()


def test_simulate_is_reproducible(tmp_path):
    for sub in ("a", "b"):
        assert cli.main(["simulate", "--scenario", "I", "--m", "50", "--n", "30", "--r", "1",
                         "--seed", "7", "--out-dir", str(tmp_path / sub)]) == 0
    a = (tmp_path / "a" / "scenario_I_rep000.csv").read_bytes()
    assert a == (tmp_path / "b" / "scenario_I_rep000.csv").read_bytes()


def test_simulated_file_reads_back_as_same_dataset(tmp_path):
    cli.main(["simulate", "--scenario", "III", "--m", "12", "--seed", "2", "--out-dir", str(tmp_path)])
    ds = cli.read_dataset(tmp_path / "scenario_III_rep000.csv")
    ref, _ = sim.generate(sim.ScenarioSpec("III", m=12, seed=2), 0)
    assert ds.ids == ref.ids
    for a, b in zip(ds.clusters, ref.clusters):
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.w, b.w)


def test_scenario_two_guard(capsys):
    assert cli.main(["simulate", "--scenario", "II", "--m", "40"]) == cli.EXIT_VALIDATION
    assert json.loads(capsys.readouterr().err)["error"] == "validation"


def test_evaluate_end_to_end_shape(tmp_path):
    out = tmp_path / "mise.csv"
    args = ["evaluate", "--scenario", "I", "--r", "2", "--methods", "lmr,gm", "--k-max", "2",
            "--out", str(out)] + FAST
    assert cli.main(args) == 0
    table = pd.read_csv(out)
    assert list(table.columns) == sim.CSV_COLUMNS
    assert len(table) == 2 * 2 * 3 * 50


def test_evaluate_from_artifact(tmp_path):
    cli.main(["simulate", "--scenario", "I", "--m", "10", "--seed", "4", "--out-dir", str(tmp_path)])
    cli.main(["fit", str(tmp_path / "scenario_I_rep000.csv"), "--k", "2", "--out",
              str(tmp_path / "f.json")] + FAST)
    out = tmp_path / "m.csv"
    assert cli.main(["evaluate", "--scenario", "I", "--m", "10", "--seed", "4", "--fit",
                     str(tmp_path / "f.json"), "--out", str(out)]) == 0
    table = pd.read_csv(out)
    assert len(table) == 3 * 10 and (table["mise"] >= 0).all()
