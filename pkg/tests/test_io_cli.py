import csv
import json

import numpy as np
import pytest

from gplmprof.cli import main, parse_scenario
from gplmprof.io import (ArtifactError, ModelArtifact, PanelParseError, csv_text, describe_panel,
                         expand_categorical, format_value, load_artifact, load_panel, panel_hash,
                         save_artifact, save_panel)
from gplmprof.model import DropoutSpec, NetworkTopology, OutcomeFamily, init_params
from gplmprof.profile import estimate_sigma2
from gplmprof.sim import SimScenario, generate_panel


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# panels
# ---------------------------------------------------------------------------


def test_load_three_row_file(tmp_path):
    f = write(tmp_path / "p.csv", "provider_id,outcome,z1,z2\nB,1,0.5,1\nA,0,-1,2\nB,0,3,4\n")
    panel = load_panel(f, "bernoulli")
    assert panel.provider_ids == ["B", "A"]
    assert (panel.m, panel.n, panel.p0) == (2, 3, 2)
    np.testing.assert_array_equal(panel.sizes, [2, 1])
    np.testing.assert_array_equal(panel.covariates[panel.rows(0)], [[0.5, 1.0], [3.0, 4.0]])
    assert describe_panel(panel) == {"m": 2, "n": 3, "min_size": 1, "max_size": 2, "p0": 2}


@pytest.mark.parametrize("text, line, column", [
    ("provider_id,outcome,z1\nA,1,0\nA,2,0\n", 3, "outcome"),
    ("provider_id,outcome,z1\nA,1,0\nB,0,x\n", 3, "z1"),
    ("provider_id,outcome,z1\nA,1\n", 2, None),
    ("provider,outcome,z1\nA,1,0\n", 1, "provider_id"),
    ("provider_id,outcome\nA,1\n", 1, None),
    ("provider_id,outcome,z1\n,1,0\n", 2, "provider_id"),
])
def test_load_errors_name_the_line(tmp_path, text, line, column):
    with pytest.raises(PanelParseError) as info:
        load_panel(write(tmp_path / "bad.csv", text), "bernoulli")
    assert info.value.line == line and info.value.column == column
    assert info.value.as_dict()["line"] == line


def test_outcome_row_reported_in_file_order(tmp_path):
    # the bad row belongs to the first provider but sits on line 4
    f = write(tmp_path / "p.csv", "provider_id,outcome,z\nA,1,0\nB,0,0\nA,2,0\n")
    with pytest.raises(PanelParseError, match="line 4"):
        load_panel(f, "bernoulli")
    load_panel(f, "poisson")


def test_categorical_expansion(tmp_path):
    dummies, names = expand_categorical(["b", "a", "c", "a"], "sex")
    np.testing.assert_array_equal(dummies, [[1, 0], [0, 0], [0, 1], [0, 0]])
    assert names == ["sex=b", "sex=c"]
    f = write(tmp_path / "p.csv", "provider_id,outcome,age,grp\nA,1,3,x\nA,0,4,y\n")
    panel = load_panel(f, categorical=["grp"])
    np.testing.assert_array_equal(panel.covariates, [[3, 0], [4, 1]])


def test_large_panel_roundtrip_hash(tmp_path):
    sim = generate_panel(SimScenario(m=1000, mean_size=105, min_size=20), 0)
    assert sim.panel.n > 100_000
    save_panel(sim.panel, tmp_path / "big.csv")
    back = load_panel(tmp_path / "big.csv", "bernoulli")
    assert panel_hash(back) == panel_hash(sim.panel)


def test_number_formatting():
    assert format_value(0.1234567891) == "0.123457"
    assert format_value(float("inf")) == "inf" and format_value(float("-inf")) == "-inf"
    assert format_value(float("nan")) == "nan"
    assert format_value(np.int64(3)) == "3" and format_value(True) == "true"
    assert csv_text(["a", "b"], [[1e-20, "x"]]) == "a,b\n1e-20,x\n"


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def test_artifact_roundtrip_bytes(tmp_path):
    topo = NetworkTopology.mlp(3, (5, 4))
    params = init_params(topo, 3, 1)
    params.gamma[:] = [0.1, -1 / 3, 2e-17]
    art = ModelArtifact(topo, params, ["a", "b", "c"], OutcomeFamily("gaussian", 0.7), DropoutSpec(0.9),
                        {"iterations": 12})
    save_artifact(art, tmp_path / "m1.json")
    back = load_artifact(tmp_path / "m1.json")
    np.testing.assert_array_equal(back.params.flat, params.flat)
    assert back.family == art.family and back.dropout == art.dropout
    save_artifact(back, tmp_path / "m2.json")
    assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


def test_artifact_version_checked(tmp_path):
    topo = NetworkTopology.linear(2)
    data = ModelArtifact(topo, init_params(topo, 1, 0), ["a"], OutcomeFamily("bernoulli")).to_dict()
    data["version"] = 99
    write(tmp_path / "m.json", json.dumps(data))
    with pytest.raises(ArtifactError, match="version"):
        load_artifact(tmp_path / "m.json")
    write(tmp_path / "junk.json", "{")
    with pytest.raises(ArtifactError):
        load_artifact(tmp_path / "junk.json")


def test_sigma2_needs_degrees_of_freedom(tmp_path):
    f = write(tmp_path / "p.csv", "provider_id,outcome,z\nA,1.0,0\nB,2.0,1\n")
    panel = load_panel(f, "gaussian")
    topo = NetworkTopology.linear(1)
    with pytest.raises(ValueError, match="n - m - p0"):
        estimate_sigma2(panel, init_params(topo, 2, 0), topo)


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    # small mean size so that some providers fall below the default floor of 15
    sim = generate_panel(SimScenario(m=80, mean_size=20, min_size=5, rho=0.5, truth="linear"), 0)
    assert sim.panel.sizes.min() < 15
    save_panel(sim.panel, d / "panel.csv")
    code = main(["fit", "--input", str(d / "panel.csv"), "--output", str(d / "model.json"),
                 "--hidden", "", "--learning-rate", "0.05", "--batch-fraction", "0.5", "--seed", "3"])
    assert code == 0
    return d, sim.panel


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_cli_profile_report(fitted, capsys):
    d, panel = fitted
    assert main(["profile", "--input", str(d / "panel.csv"), "--model", str(d / "model.json"),
                 "--output", str(d / "report.csv"), "--min-size", "25"]) == 0
    rows = read_csv(d / "report.csv")
    assert rows[0] == ["provider_id", "n_i", "O_i", "E_i", "SRR", "mid_p", "score_p", "wald_p",
                       "ci_lower", "ci_upper", "flag_exact", "flag_score"]
    kept = {pid for pid, n in zip(panel.provider_ids, panel.sizes) if n >= 25}
    assert {r[0] for r in rows[1:]} == kept and len(kept) < panel.m
    for r in rows[1:]:
        p, srr = float(r[5]), float(r[4])
        expected = "worse" if p < 0.05 and srr > 1 else "better" if p < 0.05 and srr < 1 else "expected"
        assert r[10] == expected
        assert float(r[8]) < float(r[9])


def test_cli_profile_default_size_floor(fitted):
    d, panel = fitted
    assert main(["profile", "--input", str(d / "panel.csv"), "--model", str(d / "model.json"),
                 "--output", str(d / "r15.csv"), "--no-ci"]) == 0
    got = {r[0] for r in read_csv(d / "r15.csv")[1:]}
    assert got == {pid for pid, n in zip(panel.provider_ids, panel.sizes) if n >= 15}


def test_cli_profile_deterministic(fitted):
    d, _ = fitted
    args = ["profile", "--input", str(d / "panel.csv"), "--model", str(d / "model.json"), "--min-size", "0"]
    main(args + ["--output", str(d / "a.csv")])
    main(args + ["--output", str(d / "b.csv")])
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()


def test_cli_funnel_nested_limits(fitted):
    d, _ = fitted
    assert main(["funnel", "--input", str(d / "panel.csv"), "--model", str(d / "model.json"),
                 "--output", str(d / "funnel.csv"), "--alpha", "0.05,0.002", "--tau", "0.9,1",
                 "--svg", str(d / "funnel.svg"), "--overdispersion"]) == 0
    rows = read_csv(d / "funnel.csv")
    h = rows[0]
    assert h[:6] == ["provider_id", "n_i", "O_i", "E_i", "precision", "SRR"]
    for r in rows[1:]:
        v = dict(zip(h, r))
        for tau in ("0.9", "1"):
            assert float(v[f"lower_exact_tau{tau}_a0.002"]) <= float(v[f"lower_exact_tau{tau}_a0.05"])
            assert float(v[f"upper_exact_tau{tau}_a0.002"]) >= float(v[f"upper_exact_tau{tau}_a0.05"])
            assert float(v[f"upper_adjusted_tau{tau}_a0.002"]) > float(v[f"upper_adjusted_tau{tau}_a0.05"])
    svg = (d / "funnel.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<circle") == len(rows) - 1


def test_cli_errors(fitted, tmp_path, capsys):
    d, _ = fitted
    bad = write(tmp_path / "bad.csv", "provider_id,outcome,z1,z2,z3\nA,7,0,0,0\n")
    assert main(["fit", "--input", str(bad), "--output", str(tmp_path / "m.json")]) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["line"] == 2 and err["column"] == "outcome"
    assert main(["profile", "--input", str(d / "panel.csv"), "--model", str(tmp_path / "none.json"),
                 "--output", str(tmp_path / "r.csv")]) == 3
    assert main(["funnel", "--input", str(d / "panel.csv"), "--model", str(d / "model.json"),
                 "--output", str(tmp_path / "f.csv"), "--tau", "-1"]) == 2
    with pytest.raises(SystemExit) as info:
        main(["fit"])
    assert info.value.code == 2
    assert main(["simulate", "--table", "1", "--scenario", "cubic-m1"]) == 2


def test_cli_unknown_provider(fitted, tmp_path):
    d, _ = fitted
    other = write(tmp_path / "o.csv", "provider_id,outcome,z1,z2,z3\nZZZ,1,0,0,0\n")
    assert main(["profile", "--input", str(other), "--model", str(d / "model.json"),
                 "--output", str(tmp_path / "r.csv")]) == 3


def test_parse_scenario():
    s = parse_scenario("weak-nonlinear-m100-rho0.5-nu100-n1100", 10, 1)
    assert (s.truth, s.m, s.rho, s.mean_size, s.focal_size, s.replicates) == (
        "weak-nonlinear", 100, 0.5, 100.0, 100, 10)


def test_cli_simulate_writes_deterministic_table(tmp_path):
    args = ["simulate", "--table", "3", "--scenario", "nonlinear-m20-rho0.5-nu30", "--replicates", "3"]
    assert main(args + ["--output-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--output-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "table3.csv").read_bytes() == (tmp_path / "b" / "table3.csv").read_bytes()
