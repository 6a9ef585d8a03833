"""Harness: scenario runs, exit codes, topology transform, DOT round trip."""

import io
import json

import pytest

from relaysim import cli, oracle, rules
from relaysim.kernel import fig_triangle


def write_scenario(tmp_path, name="scenario.json", **fields):
    path = tmp_path / name
    path.write_text(json.dumps(fields))
    return str(path)


def run_cli(args):
    out = io.StringIO()
    if args[0] == "run":
        code = cli.run_scenario(
            args[1],
            max_steps=None,
            out=out,
        )
    return code, out.getvalue()


def report_dict(text):
    return dict(line.split("=", 1) for line in text.strip().splitlines())


def test_clean_triangle_run_is_legal(tmp_path):
    path = write_scenario(tmp_path, seed=1, topology="triangle", predicate="is_legal")
    out = io.StringIO()
    code = cli.run_scenario(path, out=out)
    report = report_dict(out.getvalue())
    assert code == cli.EXIT_OK
    assert report["reached"] == "yes" and report["legal"] == "yes"
    assert report["valid_graph_cycle_free"] == "yes"


def test_adversarial_run_converges(tmp_path):
    path = write_scenario(
        tmp_path,
        seed=5,
        topology="adversarial",
        processes=4,
        relays=12,
        messages=12,
        predicate="is_legal",
        max_steps=60000,
    )
    out = io.StringIO()
    code = cli.run_scenario(path, out=out)
    assert code == cli.EXIT_OK
    assert report_dict(out.getvalue())["reached"] == "yes"


def test_departure_scenario(tmp_path):
    path = write_scenario(
        tmp_path,
        seed=2,
        topology="departure_line",
        processes=4,
        leaving=[1],
        predicate="fdp_legitimate",
        max_steps=60000,
    )
    out = io.StringIO()
    code = cli.run_scenario(path, out=out)
    assert code == cli.EXIT_OK


def test_malformed_scenario_is_parse_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    out = io.StringIO()
    assert cli.run_scenario(str(path), out=out) == cli.EXIT_PARSE


def test_unknown_field_is_parse_error(tmp_path):
    path = write_scenario(tmp_path, seed=1, banana=True)
    out = io.StringIO()
    assert cli.run_scenario(path, out=out) == cli.EXIT_PARSE


def test_budget_exhaustion_exit_code(tmp_path):
    path = write_scenario(tmp_path, seed=1, topology="triangle", predicate="none", max_steps=5)
    out = io.StringIO()
    assert cli.run_scenario(path, out=out) == cli.EXIT_BUDGET


def test_trace_and_seed_override(tmp_path):
    path = write_scenario(tmp_path, seed=1, topology="triangle", predicate="none", max_steps=50)
    t1, t2 = tmp_path / "a.log", tmp_path / "b.log"
    out = io.StringIO()
    cli.run_scenario(path, trace_path=str(t1), seed=9, out=out)
    cli.run_scenario(path, trace_path=str(t2), seed=9, out=io.StringIO())
    assert t1.read_bytes() == t2.read_bytes()


def test_report_is_reproducible(tmp_path):
    path = write_scenario(tmp_path, seed=7, topology="random_connected", processes=4,
                          predicate="settled", max_steps=20000)
    a, b = io.StringIO(), io.StringIO()
    cli.run_scenario(path, out=a)
    cli.run_scenario(path, out=b)
    assert a.getvalue() == b.getvalue()


def test_dot_export_round_trips_through_own_parser(tmp_path):
    world = fig_triangle()
    dot_path = tmp_path / "world.dot"
    cli.export_dot(world, str(dot_path))
    text = dot_path.read_text()
    assert text.startswith("digraph")
    # process-level dot files parse back into multigraphs
    g = rules.ProcessMultigraph.of(range(3), [(0, 1), (1, 2)])
    lines = ["digraph g {"] + [f"  p{u} -> p{v};" for u, v in g.edges] + ["}"]
    parsed = cli.parse_process_dot("\n".join(lines))
    assert parsed.edges == g.edges


def test_dot_frames_written(tmp_path):
    path = write_scenario(tmp_path, seed=1, topology="triangle", predicate="none", max_steps=30)
    out = io.StringIO()
    cli.run_scenario(path, dot_every=10, dot_dir=str(tmp_path / "frames"), out=out)
    frames = sorted((tmp_path / "frames").glob("*.dot"))
    assert len(frames) == 3
    assert frames[0].read_text().startswith("digraph")


def test_transform_command(tmp_path):
    src = tmp_path / "src.dot"
    tgt = tmp_path / "tgt.dot"
    src.write_text("digraph g {\n p0 -> p1;\n p1 -> p2;\n}\n")
    tgt.write_text("digraph g {\n p1 -> p0;\n p2 -> p0;\n}\n")
    out = io.StringIO()
    code = cli.run_transform(str(src), str(tgt), out=out)
    report = report_dict(out.getvalue())
    assert code == cli.EXIT_OK
    assert report["final_cpg"] == "match"
    assert report["connectivity_violations"] == "0"


def test_transform_bad_dot_is_parse_error(tmp_path):
    src = tmp_path / "src.dot"
    tgt = tmp_path / "tgt.dot"
    src.write_text("this is not dot")
    tgt.write_text("digraph g { p0 -> p1; }")
    out = io.StringIO()
    assert cli.run_transform(str(src), str(tgt), out=out) == cli.EXIT_PARSE


def test_main_entry_point(tmp_path):
    path = write_scenario(tmp_path, seed=1, topology="triangle", predicate="is_legal")
    assert cli.main(["run", path]) == cli.EXIT_OK
