import json

import numpy as np
import pytest

from spatialfh import cli
from spatialfh.dataset import SurveyDataset, write_data_csv
from spatialfh.lattice import grid_lattice, serialize_neighbor_list
from spatialfh.sampler import SamplerError

pytestmark = pytest.mark.filterwarnings("ignore:.*split R-hat:RuntimeWarning")

FAST = ["--iterations", "60", "--burn-in", "20"]


@pytest.fixture
def files(tmp_path):
    adj = grid_lattice(3, 4)
    rng = np.random.default_rng(0)
    X = [np.column_stack([np.ones(12), rng.normal(size=12)])] * 3
    y = rng.normal(size=(12, 3))
    ds = SurveyDataset(adj, y, np.full((12, 3), 0.1), X)
    nb = tmp_path / "nb.txt"
    nb.write_text(serialize_neighbor_list(adj))
    d2 = tmp_path / "d2.csv"
    d2.write_text(write_data_csv(SurveyDataset(adj, y[:, :2], ds.sampling_cov[:, :2, :2], X[:2])))
    d3 = tmp_path / "d3.csv"
    d3.write_text(write_data_csv(ds))
    return tmp_path, str(nb), str(d2), str(d3)


def run(argv, capsys):
    code = cli.main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_missing_file_exit_2(files, capsys):
    tmp, nb, d2, _ = files
    code, _, err = run(["fit", "--neighbors", nb, "--data", str(tmp / "absent.csv"), "--model", "iw"], capsys)
    assert code == 2 and "absent.csv" in err


def test_fit_byte_identical(files, capsys):
    tmp, nb, d2, _ = files
    outs = []
    for k in (1, 2):
        code, _, _ = run(["fit", "--neighbors", nb, "--data", d2, "--transform", "none", "--model", "gmcar",
                          "--out", str(tmp / f"o{k}"), *FAST], capsys)
        assert code == 0
        outs.append((tmp / f"o{k}" / "chains.csv").read_bytes())
    assert outs[0] == outs[1]
    summ = json.loads((tmp / "o1" / "summary.json").read_text())
    assert outs[0].decode().startswith(f"# config_digest={summ['config_digest']}\n")
    assert json.loads((tmp / "o1" / "diagnostics.json").read_text())["config_digest"] == summ["config_digest"]
    assert "eta1" in summ["summary"] and summ["model"] == "gmcar"


def test_digest_changes_with_seed(files, capsys):
    tmp, nb, d2, _ = files
    digests = []
    for seed in ("1", "2"):
        run(["fit", "--neighbors", nb, "--data", d2, "--transform", "none", "--model", "iw",
             "--seed", seed, "--out", str(tmp / seed), *FAST], capsys)
        digests.append(json.loads((tmp / seed / "summary.json").read_text())["config_digest"])
    assert digests[0] != digests[1]


def test_gmcar_with_three_outcomes(files, capsys, monkeypatch):
    tmp, nb, _, d3 = files
    monkeypatch.setattr(cli, "fit", lambda *a, **k: pytest.fail("sampling started"))
    code, _, err = run(["fit", "--neighbors", nb, "--data", d3, "--transform", "none", "--model", "gmcar",
                        "--out", str(tmp / "x")], capsys)
    assert code == 2 and "2 outcomes" in err


def test_unknown_config_key(files, capsys):
    tmp, nb, d2, _ = files
    bad = tmp / "c.yaml"
    bad.write_text("mcmc:\n  iterationz: 10\n")
    code, _, err = run(["fit", "--neighbors", nb, "--data", d2, "--model", "iw", "--config", str(bad)], capsys)
    assert code == 2 and "iterationz" in err
    bad.write_text("priors: {}\n")
    assert run(["fit", "--neighbors", nb, "--data", d2, "--model", "iw", "--config", str(bad)], capsys)[0] == 2


def test_config_file_applied(files, capsys):
    tmp, nb, d2, _ = files
    c = tmp / "c.json"
    c.write_text(json.dumps({"mcmc": {"iterations": 50, "burn_in": 10, "thin": 2},
                             "transform": {"kind": "none"}, "prior": {"eta_sd": 5.0}}))
    code, _, _ = run(["fit", "--neighbors", nb, "--data", d2, "--model", "gmcar", "--config", str(c),
                      "--out", str(tmp / "o")], capsys)
    assert code == 0
    summ = json.loads((tmp / "o" / "summary.json").read_text())
    assert summ["config"]["mcmc"]["thin"] == 2 and summ["config"]["prior"] == {"eta_sd": 5.0}
    assert summ["scale"] == "identity"
    assert len((tmp / "o" / "chains.csv").read_text().splitlines()) == 2 + 20


def test_runtime_failure_exit_1(files, capsys, monkeypatch):
    tmp, nb, d2, _ = files

    def boom(*a, **k):
        raise SamplerError("Cholesky failed", 7)

    monkeypatch.setattr(cli, "fit", boom)
    code, _, err = run(["fit", "--neighbors", nb, "--data", d2, "--transform", "none", "--model", "iw",
                        "--out", str(tmp / "o")], capsys)
    assert code == 1 and "iteration 7" in err


def test_validate_truth_equals_data(files, capsys, tmp_path):
    adj = grid_lattice(3, 4)
    rng = np.random.default_rng(1)
    y = rng.normal(size=(12, 2))
    X = [np.column_stack([np.ones(12), rng.normal(size=12)])] * 2
    d = tmp_path / "d.csv"
    d.write_text(write_data_csv(SurveyDataset(adj, y, np.full((12, 2), 1e-10), X)))
    t = tmp_path / "t.csv"
    t.write_text("area_id,outcome,value\n" + "".join(
        f"{a},{j + 1},{float(y[i, j])!r}\n" for i, a in enumerate(adj.ids) for j in range(2)))
    nb = files[1]
    code, _, _ = run(["validate", "--neighbors", nb, "--data", str(d), "--truth", str(t), "--transform", "none",
                      "--out", str(tmp_path / "v"), *FAST], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "v" / "report.json").read_text())
    assert all(v < 1e-6 for m in rep["overall"].values() for v in m.values())
    csv_text = (tmp_path / "v" / "per_location.csv").read_text()
    assert "relative_reduction_iw_vs_gmcar" in csv_text and "relative_reduction_iw_vs_separable" in csv_text


def test_validate_matches_simulate(tmp_path, capsys):
    proto = tmp_path / "p.yaml"
    proto.write_text("lattice: grid:3x4\nreplicates: 2\ngmcar:\n  eta1: 0.21\n")
    sim = tmp_path / "sim"
    code, _, _ = run(["simulate", "--protocol", str(proto), "--write-data", "--out", str(sim), *FAST], capsys)
    assert code == 0
    rep = json.loads((sim / "sim_report.json").read_text())
    for r in range(2):
        out = tmp_path / f"v{r}"
        code, _, _ = run(["validate", "--neighbors", str(sim / "neighbors.txt"), "--data", str(sim / f"data_r{r}.csv"),
                          "--truth", str(sim / f"truth_r{r}.csv"), "--transform", "none", "--replicate", str(r),
                          "--out", str(out), *FAST], capsys)
        assert code == 0
        v = json.loads((out / "report.json").read_text())
        for k in ("iw", "separable", "gmcar"):
            assert [v["overall"][k][o] for o in ("1", "2")] == rep["replicate_mse"][k][r]
        assert v["percent_better"]["iw_vs_gmcar"]["1"]["gmcar_better"] >= 0


def test_simulate_default_protocol_writes(tmp_path, capsys):
    code, _, _ = run(["simulate", "--models", "", "--write-data", "--eta1", "0.21", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert (tmp_path / "data_r9.csv").exists() and (tmp_path / "truth_r0.csv").exists()
    assert run(["simulate", "--models", "", "--out", str(tmp_path)], capsys)[0] == 2
    assert run(["simulate", "--models", "car", "--out", str(tmp_path)], capsys)[0] == 2


def test_loo_and_determinism(files, capsys):
    tmp, nb, d2, _ = files
    texts = []
    for k in (1, 2):
        code, _, _ = run(["loo", "--neighbors", nb, "--data", d2, "--transform", "none", "--models", "iw,separable",
                          "--out", str(tmp / f"l{k}"), "--iterations", "30", "--burn-in", "10"], capsys)
        assert code == 0
        texts.append((tmp / f"l{k}" / "loo_per_location.csv").read_text())
    assert texts[0] == texts[1]
    rep = json.loads((tmp / "l1" / "loo_report.json").read_text())
    assert rep["metric"] == "mspe" and set(rep["overall"]) == {"iw", "separable"}


def test_loo_island_error(tmp_path, capsys):
    nb = tmp_path / "nb.txt"
    nb.write_text("A B\nB C\nC A\nC D\n")
    d = tmp_path / "d.csv"
    d.write_text("area_id,outcome,estimate,moe_or_var,var_flag\n" + "".join(f"{a},y,1.0,0.1,var\n" for a in "ABCD"))
    code, _, err = run(["loo", "--neighbors", str(nb), "--data", str(d), "--models", "iw", "--out", str(tmp_path)],
                       capsys)
    assert code == 2 and "'D'" in err


def test_diagnose(files, capsys, tmp_path):
    _, nb, d2, _ = files
    outs = []
    for k in (1, 2):
        code, out, _ = run(["diagnose", "--neighbors", nb, "--data", d2, "--transform", "none",
                            "--permutations", "199", "--out", str(tmp_path / str(k))], capsys)
        assert code == 0 and "Moran" in out
        outs.append((tmp_path / str(k) / "diagnostics.json").read_text())
    assert outs[0] == outs[1]
    d = json.loads(outs[0])
    assert d["outcomes"]["1"]["moran_permutations"] == 199 and "config_digest" in d


def test_diagnose_error_paths(tmp_path, capsys):
    adj = grid_lattice(3, 4)
    nb = tmp_path / "nb.txt"
    nb.write_text(serialize_neighbor_list(adj))
    x = np.arange(12.0)
    d = tmp_path / "d.csv"
    d.write_text(write_data_csv(SurveyDataset(adj, np.column_stack([1 + x, 2 - x]), np.ones((12, 2)),
                                              [np.column_stack([np.ones(12), x])] * 2)))
    code, _, err = run(["diagnose", "--neighbors", str(nb), "--data", str(d), "--transform", "none",
                        "--out", str(tmp_path)], capsys)
    assert code == 2 and "fitted exactly" in err
