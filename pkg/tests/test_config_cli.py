import copy
import json
import subprocess
import sys

import pytest

from stochnet import algebra as alg
from stochnet import cli
from stochnet.config import ConfigError, fixture_path, load_fixture, parse_model


def fixture(name):
    return str(fixture_path(name))


def raw(name):
    return json.loads(fixture_path(name).read_text())


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


# --------------------------------------------------------------------------
# schema


def test_all_fixtures_load():
    for path in fixture_path("figure1").parent.glob("*.json"):
        load_fixture(path.stem)


def test_unknown_field_rejected_with_path():
    data = raw("figure1")
    data["network"]["colour"] = "blue"
    with pytest.raises(ConfigError) as info:
        parse_model(data)
    assert info.value.path.startswith("network")


def test_routing_destination_out_of_range_has_path():
    data = raw("queue3")
    data["network"]["routing"]["table"][1][2] = 4
    with pytest.raises(ConfigError) as info:
        parse_model(data)
    assert info.value.path == "network.routing.table[1][2]"


def test_missing_schema_version_rejected():
    data = raw("figure1")
    del data["schema"]
    with pytest.raises(ConfigError):
        parse_model(data)


def test_default_theta_outside_box():
    data = raw("figure1")
    data["theta"]["default"] = [5.0] * 6
    with pytest.raises(ConfigError, match="theta.default"):
        parse_model(data)


def test_unknown_measure():
    data = raw("figure1")
    data["target"] = {"measure": "w"}
    with pytest.raises(ConfigError, match="target.measure"):
        parse_model(data)


def test_variate_family_errors_are_located():
    data = copy.deepcopy(raw("figure1"))
    data["variates"][2]["base"] = "gamma"
    with pytest.raises(ConfigError) as info:
        parse_model(data)
    assert info.value.path == "variates[2].base"


# --------------------------------------------------------------------------
# commands


def test_simulate_figure1_fixed(capsys):
    code, out, _ = run(["simulate", fixture("figure1_fixed")], capsys)
    assert code == 0
    rows = out.strip().splitlines()
    assert rows == ["replication,status,t", "0,completed,15.0"]


def test_simulate_figure2_fixed(capsys):
    code, out, _ = run(["simulate", fixture("figure2_fixed")], capsys)
    assert code == 0 and out.strip().splitlines()[1] == "0,completed,4.0"


def test_simulate_queue_fixed(capsys):
    code, out, _ = run(["simulate", fixture("queue3_fixed")], capsys)
    header, row = out.strip().splitlines()
    assert code == 0
    assert dict(zip(header.split(","), row.split(",")))["delta"] == "12.0"


def test_simulate_reports_starvation(tmp_path, capsys):
    data = raw("queue3")
    data["network"]["routing"]["table"] = [[1], [1], [1]]
    path = tmp_path / "starve.json"
    path.write_text(json.dumps(data))
    code, out, err = run(["simulate", str(path), "--N", "3"], capsys)
    assert code == 0 and "starved=3" in err
    assert out.count(",starved,") == 3


def test_invalid_routing_entry_exit_code(tmp_path, capsys):
    data = raw("queue3")
    data["network"]["routing"]["table"][0][1] = 4
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    code, _, err = run(["simulate", str(path)], capsys)
    assert code == 2 and "network.routing.table[0][1]" in err


def test_missing_file_exit_code(capsys):
    assert run(["simulate", "/nonexistent/model.json"], capsys)[0] == 2


def test_bad_json_exit_code(tmp_path, capsys):
    path = tmp_path / "x.json"
    path.write_text("{not json")
    assert run(["simulate", str(path)], capsys)[0] == 2


def test_theta_outside_box_exit_code(capsys):
    assert run(["gradient", fixture("figure1"), "--theta", "9,9,9,9,9,9"], capsys)[0] == 2


def test_ipa_on_example3_refused(capsys):
    code, _, err = run(["gradient", fixture("example3"), "--method", "ipa", "--N", "100"], capsys)
    assert code == 2 and "independence" in err


def test_ipa_on_example3_with_override(capsys):
    code, out, err = run(["gradient", fixture("example3"), "--N", "100", "--allow-uncertified"], capsys)
    assert code == 0 and "potentially biased" in err
    assert out.splitlines()[1].endswith(",True")


def test_crn_output_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run(["gradient", fixture("figure1"), "--method", "crn", "--N", "2000", "--seed", "3", "--out", str(p)], capsys)[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_workers_do_not_change_output(tmp_path, capsys):
    outs = []
    for workers in ("1", "3"):
        p = tmp_path / f"w{workers}.json"
        argv = ["gradient", fixture("queue3"), "--method", "sd-crn", "--N", "300", "--workers", workers, "--out", "-", "--json", str(p)]
        outs.append((run(argv, capsys)[1], p.read_bytes()))
    assert outs[0] == outs[1]


def test_finite_difference_needs_step(tmp_path, capsys):
    data = raw("single_node")
    path = tmp_path / "s.json"
    path.write_text(json.dumps(data))
    assert run(["gradient", str(path), "--method", "crn", "--N", "10"], capsys)[0] == 2
    assert run(["gradient", str(path), "--method", "crn", "--N", "10", "--delta", "0.01"], capsys)[0] == 0


def test_starved_gradient_exit_code(tmp_path, capsys):
    data = raw("queue3")
    data["network"]["routing"]["table"] = [[1], [1], [1]]
    path = tmp_path / "starve.json"
    path.write_text(json.dumps(data))
    assert run(["gradient", str(path), "--method", "ipa", "--N", "10"], capsys)[0] == 3


def test_unroll_outputs(capsys):
    code, out, _ = run(["unroll", fixture("single_node")], capsys)
    assert code == 0 and out.strip() == "t1"
    code, out, _ = run(["unroll", fixture("figure1")], capsys)
    e = alg.parse_sexpr(out)
    assert alg.evaluate(e, {f"t{i}": i for i in range(1, 7)}) == 15


def test_unroll_structural_starvation_exit_code(tmp_path, capsys):
    data = raw("queue3")
    data["network"]["routing"]["table"] = [[1], [1], [1]]
    path = tmp_path / "starve.json"
    path.write_text(json.dumps(data))
    assert run(["unroll", str(path)], capsys)[0] == 3


def test_unroll_size_cap_exit_code(capsys):
    assert run(["unroll", fixture("queue3"), "--K", "2", "--M", "3", "--size-cap", "5"], capsys)[0] == 3


def test_compare_without_oracle(capsys):
    assert run(["compare", fixture("figure1"), "--N-grid", "10", "--macro-reps", "2"], capsys)[0] == 2


def test_compare_with_oracle(capsys):
    code, out, err = run(["compare", fixture("two_exp_max"), "--N-grid", "10,100", "--macro-reps", "5"], capsys)
    assert code == 0
    assert out.splitlines()[0] == "method,N,delta,mse,macro_reps"
    assert len(out.splitlines()) == 1 + 3 * 2
    assert err.startswith("method,slope")


def test_optimize_benchmark(tmp_path, capsys):
    p = tmp_path / "rm.csv"
    code, _, err = run(["optimize", fixture("rm_benchmark"), "--iterations", "2000", "--out", str(p)], capsys)
    assert code == 0
    last = p.read_text().strip().splitlines()[-1].split(",")
    assert abs(float(last[1]) - 1.0) <= 0.05
    assert "final theta" in err


def test_optimize_bad_gain(capsys):
    assert run(["optimize", fixture("rm_benchmark"), "--gain-s", "0"], capsys)[0] == 2


def test_argparse_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        cli.main(["gradient", fixture("figure1"), "--method", "bogus"])
    assert info.value.code == 2


def test_console_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "stochnet.cli", "simulate", fixture("figure1_fixed")], capture_output=True, text=True
    )
    assert proc.returncode == 0 and "15.0" in proc.stdout


def test_normal_queue_service_rejected(tmp_path, capsys):
    data = raw("queue3")
    for v in data["variates"]:
        if v["id"] == "s2":
            v.clear()
            v.update({"id": "s2", "family": "location-scale", "base": "normal", "loc": 1.0, "scale": 0.1})
    path = tmp_path / "normal.json"
    path.write_text(json.dumps(data))
    code, _, err = run(["simulate", str(path)], capsys)
    assert code == 2 and "negative" in err
