import csv
import json

import pytest

from faasfabric import errors
from faasfabric.harness import (ScenarioConfig, bundled_manifest, colocated, emit_report, load_config,
                                parse_config, read_timeseries, run_scenario, summarize_timeseries)
from faasfabric.harness.apps import boutique_graph, reference_response, sub_request
from faasfabric.harness.cli import main
from faasfabric.harness.runner import WINDOW_FIELDS, fairness_summary, window_rows

BASE = {
    "name": "t",
    "nodes": [{"name": "a"}, {"name": "b"}],
    "tenants": [{"id": 1, "buffers": 128}],
    "functions": [
        {"fn_id": 1, "tenant": 1, "node": "a", "app": "echo_client"},
        {"fn_id": 2, "tenant": 1, "node": "b", "app": "echo_server"},
    ],
    "clients": [{"fn_id": 1, "target_fn": 2, "concurrency": 2, "message_size": 512}],
    "duration_s": 0.004,
    "window_s": 0.001,
}


def cfg_with(**changes):
    data = json.loads(json.dumps(BASE))
    data.update(changes)
    return parse_config(data)


def small_chain(requests=60, **changes):
    cfg = load_config(bundled_manifest("chain"))
    data = cfg.model_dump()
    data["chain"]["requests"] = requests
    data.update(changes)
    return ScenarioConfig.model_validate(data)


# -- manifests ---------------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["echo", "fairness", "chain", "ingress"])
def test_bundled_manifests_validate(name):
    assert load_config(bundled_manifest(name)).name == name


@pytest.mark.parametrize("patch, where", [
    ({"functions": [{"fn_id": 1, "tenant": 1, "node": "zz", "app": "echo_server"}], "clients": []},
     "functions[0].node"),
    ({"functions": [{"fn_id": 1, "tenant": 9, "node": "a", "app": "echo_server"}], "clients": []},
     "functions[0].tenant"),
    ({"clients": [{"fn_id": 1, "target_fn": 99}]}, "clients[0].target_fn"),
    ({"clients": [{"fn_id": 2, "target_fn": 1}]}, "clients[0].fn_id"),
    ({"clients": [{"fn_id": 1, "target_fn": 2, "message_size": 4089}]}, "clients[0].message_size"),
    ({"tenants": [{"id": 1, "weight": 0}]}, "tenants.0.weight"),
    ({"tenants": [{"id": 1, "colour": "red"}]}, "tenants.0.colour"),
    ({"scheduler": "RR"}, "scheduler"),
    ({"transfer_mode": "OWDL"}, "primitive"),
])
def test_bad_manifests_name_the_field(patch, where):
    data = json.loads(json.dumps(BASE))
    data.update(patch)
    with pytest.raises(errors.ConfigInvalid) as exc:
        parse_config(data)
    assert exc.value.code == "CONFIG_INVALID"
    assert any(p.startswith(where) for p in exc.value.problems), exc.value.problems


def test_unreadable_and_non_json_manifests(tmp_path):
    with pytest.raises(errors.ConfigInvalid, match="No such file"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(errors.ConfigInvalid, match="not JSON"):
        load_config(bad)


def test_chain_manifest_needs_every_service():
    data = small_chain().model_dump()
    data["functions"] = [f for f in data["functions"] if f.get("service") != "email"]
    with pytest.raises(errors.ConfigInvalid, match="email"):
        parse_config(data)


# -- echo --------------------------------------------------------------------------------------

def test_echo_pair_is_zero_copy_and_delivers_everything():
    r = run_scenario(cfg_with())
    s = r.summary
    assert s["function_copies"] == 0 and sum(s["counters"]["copies"].values()) == 0
    assert s["delivered"]["1"] == s["sent"]["1"] > 0
    assert r.violations == 0 and s["rq_depth_restored"] and s["dead_letters"] == 0
    assert s["fabric_ops"] == 2 * s["delivered"]["1"]


def test_same_seed_gives_identical_metrics():
    a = run_scenario(cfg_with(seed=3)).metrics_lines()
    b = run_scenario(cfg_with(seed=3)).metrics_lines()
    assert a == b


def test_colocated_echo_uses_no_fabric():
    r = run_scenario(colocated(cfg_with()))
    assert r.summary["fabric_ops"] == 0 and r.summary["delivered"]["1"] > 0
    assert r.violations == 0


def test_window_rows_are_contiguous_per_tenant():
    r = run_scenario(cfg_with())
    # four windows of run time, one more for replies that land after the end
    assert [w["window"] for w in r.windows] == [0, 1, 2, 3, 4]
    assert [w["start_s"] for w in r.windows] == [0.0, 0.001, 0.002, 0.003, 0.004]
    assert sum(w["delivered"] for w in r.windows) == r.summary["delivered"]["1"]


# -- fairness bookkeeping ------------------------------------------------------------------------

def test_window_rows_bucket_by_window():
    comps = {1: [(100, 10, 5), (1500, 10, 7)], 2: [(1200, 20, 9)]}
    rows = window_rows(comps, 0, 1000, 3)
    assert [(r["window"], r["tenant"], r["delivered"]) for r in rows] == [
        (0, 1, 1), (0, 2, 0), (1, 1, 1), (1, 2, 1), (2, 1, 0), (2, 2, 0)]
    assert rows[2]["share"] == 0.5 and rows[2]["mean_latency_ns"] == 7
    assert rows[0]["share"] == 1.0


def test_fairness_summary_skips_windows_near_joins():
    data = json.loads(json.dumps(BASE))
    data["tenants"] = [{"id": 1, "weight": 2}, {"id": 2, "weight": 1}]
    data["functions"] += [{"fn_id": 3, "tenant": 2, "node": "a", "app": "echo_client"},
                          {"fn_id": 4, "tenant": 2, "node": "b", "app": "echo_server"}]
    data["clients"] = [{"fn_id": 1, "target_fn": 2}, {"fn_id": 3, "target_fn": 4, "start_s": 2.0}]
    data["settle_margin_s"] = 1.0
    data["window_s"] = 1.0
    cfg = parse_config(data)
    rows = []
    for win in range(8):
        rows.append({"window": win, "tenant": 1, "delivered": 20})
        # a wild share right after the join must not count
        rows.append({"window": win, "tenant": 2, "delivered": 100 if win == 2 else 10})
    f = fairness_summary(rows, cfg, 8.0)
    # windows 3..6: clear of the join at 2 s and the end at 8 s by one second
    assert f["phases"]["1+2"]["windows"] == 4
    assert f["ratio_error"] == 0.0
    rows[9]["delivered"] = 12
    assert fairness_summary(rows, cfg, 8.0)["ratio_error"] == pytest.approx(abs((12 / 32) / (1 / 3) - 1), abs=1e-6)


# -- chain ---------------------------------------------------------------------------------------

def test_reference_response_counts_hops():
    graph = boutique_graph()
    for op in ["home", "product", "checkout"]:
        digest, hops = reference_response(graph, "frontend", op.encode() + b"|abc")
        assert len(digest) == 32 and hops >= 13
    # one leaf call: request plus response
    assert reference_response(graph, "email", b"send|x")[1] == 2


def test_sub_request_depends_on_position_and_payload():
    from faasfabric.harness.apps import Call
    call = Call("cart", "get")
    a = sub_request("frontend", "home", b"home|x", 0, call)
    assert a.startswith(b"get|")
    assert a != sub_request("frontend", "home", b"home|x", 1, call)
    assert a != sub_request("frontend", "home", b"home|y", 0, call)


def test_chain_across_two_nodes_is_correct():
    r = run_scenario(small_chain())
    ch = r.summary["chain"]
    assert ch["responses"] == ch["correct"] == 60
    assert ch["hop_mismatches"] == 0 and ch["min_hops"] >= 11
    assert r.summary["function_copies"] == 0
    assert r.summary["fabric_ops"] > 0 and r.violations == 0


def test_chain_output_is_placement_independent():
    cfg = small_chain()
    split = run_scenario(cfg).summary
    together = run_scenario(colocated(cfg)).summary
    assert together["fabric_ops"] == 0
    data = cfg.model_dump()
    for f in data["functions"]:
        if f.get("service") == "cart":
            f["node"] = "node-1"
        elif f.get("service") == "frontend":
            f["node"] = "node-2"
    swapped = run_scenario(ScenarioConfig.model_validate(data)).summary
    digests = {s["chain"]["response_digest"] for s in (split, together, swapped)}
    assert len(digests) == 1
    assert all(s["chain"]["correct"] == 60 for s in (split, together, swapped))


# -- primitives ------------------------------------------------------------------------------------

def test_primitive_scenario_reports_per_message_counts():
    cfg = cfg_with(transfer_mode="OWRC_BEST", primitive={"message_size": 4096, "messages": 5})
    s = run_scenario(cfg).summary
    assert s["delivered"] == 5 and s["fabric_ops_per_msg"] == 1 and s["copies_per_msg"] == 1


# -- reports and CLI -------------------------------------------------------------------------------

def test_report_files(tmp_path):
    r = run_scenario(cfg_with())
    files = emit_report(r, tmp_path)
    with files["timeseries"].open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5 and list(rows[0]) == WINDOW_FIELDS
    assert json.loads(files["summary"].read_text())["delivered"]["1"] == r.summary["delivered"]["1"]
    assert files["metrics"].read_text().splitlines() == r.metrics_lines()
    back = read_timeseries(files["timeseries"])
    assert summarize_timeseries(back)["tenants"]["1"]["delivered"] == r.summary["delivered"]["1"]


def test_empty_run_writes_header_only_csv(tmp_path):
    r = run_scenario(cfg_with(clients=[]))
    files = emit_report(r, tmp_path)
    assert files["timeseries"].read_text() == ",".join(WINDOW_FIELDS) + "\n"
    assert read_timeseries(files["timeseries"]) == []


def test_report_io_failure_surfaces(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_report(run_scenario(cfg_with(clients=[])), blocker / "sub")


def test_cli_run_validate_report(tmp_path, capsys):
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps(BASE))
    assert main(["validate", str(manifest)]) == 0
    assert capsys.readouterr().out.startswith("ok: t")
    out = tmp_path / "out"
    assert main(["run", str(manifest), "--out", str(out), "--seed", "4", "--trace"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["seed"] == 4 and summary["violations"]["buffer_leak"] == 0
    assert (out / "trace.jsonl").read_text().count("\n") > 0
    assert main(["report", str(out / "timeseries.csv")]) == 0
    assert json.loads(capsys.readouterr().out)["windows"] == 5


def test_cli_bad_manifest_exits_2(tmp_path, capsys):
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps({**BASE, "tenants": []}))
    assert main(["validate", str(manifest)]) == 2
    assert "tenants" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    assert main(["report", str(manifest)]) == 2


def test_cli_exit_code_reflects_violations(monkeypatch, tmp_path):
    from faasfabric.harness import cli
    real = cli.run_scenario

    def tampered(*a, **kw):
        r = real(*a, **kw)
        r.summary["violations"]["buffer_leak"] = 1
        return r

    monkeypatch.setattr(cli, "run_scenario", tampered)
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps(BASE))
    assert main(["run", str(manifest)]) == 1
