import csv
import io
import json

import pytest

from cachemodel import cli
from cachemodel._solve import ConvergenceError
from cachemodel.cli import COLUMNS, ConfigError, load_scenario, main

FIG1_POLICIES = ["lru", "qlru(0.1)", "2lru", "3lru", "fifo", "random", "lfu"]


def scenario(**over):
    doc = {
        "engine": "analytic",
        "system": {"type": "single", "policies": FIG1_POLICIES},
        "traffic": {"kind": "irm"},
        "popularity": {"alpha": 0.8, "M": 2000},
        "sweep": {"capacities": [20, 100]},
        "sim": {"requests": 200_000, "seed": 1, "replications": 2},
    }
    doc.update(over)
    return doc


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return path


def run(tmp_path, doc, *extra, name="out.csv"):
    out = tmp_path / name
    code = main(["run", str(write(tmp_path, doc)), "--out", str(out), *extra])
    return code, out


def rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def body_without_runtime(path):
    return [{k: v for k, v in r.items() if k != "runtime_s"} for r in rows(path)]


# -- run ---------------------------------------------------------------------

def test_single_cache_curves(tmp_path):
    code, out = run(tmp_path, scenario())
    assert code == 0
    table = rows(out)
    assert tuple(table[0].keys()) == COLUMNS
    assert len(table) == len(FIG1_POLICIES) * 2
    for policy in ("lru", "lfu", "2lru", "3lru"):
        curve = [float(r["hit_total"]) for r in table if r["policy"] == policy]
        assert len(curve) == 2 and curve[0] < curve[1]
    lru = next(r for r in table if r["policy"] == "lru" and r["C"] == "20")
    assert lru["engine"] == "analytic" and lru["per_node_hits"] == lru["hit_total"]
    assert float(lru["tc_values"]) > 0


def test_both_engines_pair_up(tmp_path):
    code, out = run(tmp_path, scenario(engine="both", system={"type": "single", "policies": ["lru", "fifo"]}))
    assert code == 0
    table = rows(out)
    keys = {(r["policy"], r["C"], r["engine"]) for r in table}
    assert keys == {(p, c, e) for p in ("lru", "fifo") for c in ("20", "100") for e in ("analytic", "sim")}
    for r in table:
        if r["engine"] == "sim":
            twin = next(a for a in table if a["engine"] == "analytic" and a["policy"] == r["policy"] and a["C"] == r["C"])
            assert abs(float(r["hit_total"]) - float(twin["hit_total"])) < 0.01
            assert float(r["hit_ci"]) > 0 and r["seed"] == "1;2"


def test_network_scenario(tmp_path):
    doc = scenario(engine="both", system={"type": "network", "topology": {"kind": "chain", "length": 3},
                                          "strategies": ["lce", "lcp(0.5)", "lcd"]},
                   sweep={"capacities": [25]})
    code, out = run(tmp_path, doc)
    assert code == 0
    table = rows(out)
    assert {r["strategy"] for r in table} == {"lce", "lcp(0.5)", "lcd"}
    for r in table:
        assert len(r["per_node_hits"].split(";")) == 3
        assert len(r["tc_values"].split(";")) == (3 if r["engine"] == "analytic" else 1)


def test_capacity_scales_need_topology_file(tmp_path):
    topo = tmp_path / "tree.json"
    from cachemodel import CacheNetwork
    CacheNetwork.kary_tree(2, 2, [40, 10]).save(topo)
    doc = scenario(system={"type": "network", "topology": "tree.json", "strategies": ["lce"]},
                   sweep={"capacity_scales": [0.5, 1]})
    code, out = run(tmp_path, doc)
    assert code == 0
    assert [r["C"] for r in rows(out)] == ["x0.5", "x1"]
    doc["system"]["topology"] = {"kind": "chain", "length": 2}
    assert run(tmp_path, doc, name="bad.csv")[0] == 2


def test_output_is_deterministic_and_pool_independent(tmp_path):
    doc = scenario(engine="sim", system={"type": "single", "policies": ["lru", "random", "qlru(0.2)"]})
    _, a = run(tmp_path, doc, "--threads", "1", name="a.csv")
    _, b = run(tmp_path, doc, "--threads", "4", name="b.csv")
    assert body_without_runtime(a) == body_without_runtime(b)


def test_stdout_when_no_output(tmp_path, capsys):
    assert main(["run", str(write(tmp_path, scenario(sweep={"capacities": [10]})))]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == ",".join(COLUMNS)
    assert len(text.splitlines()) == 1 + len(FIG1_POLICIES)


# -- malformed input ---------------------------------------------------------

@pytest.mark.parametrize("mutate, path", [
    (lambda d: d["sweep"].update(capacities=[10, 2000]), "sweep.capacities[1]"),
    (lambda d: d["system"].update(policies=["lru", "mru"]), "system.policies[1]"),
    (lambda d: d.pop("traffic"), ""),
    (lambda d: d.update(engine="fast"), "engine"),
    (lambda d: d["sweep"].update(capacities=[]), "sweep"),
    (lambda d: d["sweep"].update(capacities=[10, 10]), "sweep"),
])
def test_config_errors_locate_field(mutate, path):
    doc = scenario()
    mutate(doc)
    with pytest.raises(ConfigError) as err:
        load_scenario(doc)
    assert err.value.path.startswith(path)


@pytest.mark.parametrize("doc", [
    scenario(sweep={"capacities": [10, 2000]}),
    scenario(system={"type": "single", "policies": ["lru", "nope"]}),
    "{ not json",
])
def test_malformed_config_exits_two_without_csv(tmp_path, doc, capsys):
    code, out = run(tmp_path, doc)
    assert code == 2
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run", str(tmp_path / "absent.json")]) == 2


def test_non_convergence_exits_three(tmp_path, monkeypatch):
    def fail(*args, **kwargs):
        raise ConvergenceError("did not converge", 1.0, 10)

    monkeypatch.setattr(cli, "solve_characteristic_time", fail)
    code, out = run(tmp_path, scenario())
    assert code == 3
    assert not out.exists()


# -- compare -----------------------------------------------------------------

def test_compare_identical(tmp_path, capsys):
    _, out = run(tmp_path, scenario())
    assert main(["compare", str(out), str(out), "--tol", "0"]) == 0
    assert "max_diff=0" in capsys.readouterr().out


def test_compare_model_against_simulation(tmp_path, capsys):
    policies = {"type": "single", "policies": ["lru", "fifo", "2lru"]}
    _, a = run(tmp_path, scenario(system=policies), name="a.csv")
    _, s = run(tmp_path, scenario(system=policies, engine="sim"), name="s.csv")
    assert main(["compare", str(a), str(s), "--tol", "0.01"]) == 0
    assert main(["compare", str(a), str(s), "--tol", "0"]) == 1
    report = capsys.readouterr().out
    assert "FAIL" in report and "lru,,20" in report


def test_compare_lists_key_mismatch(tmp_path, capsys):
    _, a = run(tmp_path, scenario(), name="a.csv")
    _, b = run(tmp_path, scenario(sweep={"capacities": [20, 50]}), name="b.csv")
    assert main(["compare", str(a), str(b), "--tol", "1"]) == 1
    assert "only in" in capsys.readouterr().out


def test_compare_bad_file(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    assert main(["compare", str(bad), str(bad), "--tol", "0"]) == 2


# -- trace -------------------------------------------------------------------

def test_trace_subcommand(tmp_path, capsys):
    trace = tmp_path / "t.tsv"
    trace.write_text("".join(f"{i}\t{k}\n" for i, k in enumerate("abacab")))
    assert main(["trace", str(trace), "--policy", "lru", "--capacity", "2"]) == 0
    row = rows_from_text(capsys.readouterr().out)[0]
    assert row["engine"] == "trace" and row["C"] == "2"
    assert float(row["hit_total"]) == pytest.approx(2 / 6)


def test_trace_subcommand_errors(tmp_path, capsys):
    trace = tmp_path / "t.tsv"
    trace.write_text("0\ta\n1\n")
    assert main(["trace", str(trace), "--policy", "lru", "--capacity", "2"]) == 2
    assert "line 2" in capsys.readouterr().err
    assert main(["trace", str(trace), "--policy", "bogus", "--capacity", "2"]) == 2


def rows_from_text(text):
    return list(csv.DictReader(io.StringIO(text)))
