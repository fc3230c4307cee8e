from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from pivotbsp.cli import ConfigError, format_config, load_config, main, parse_bool, parse_config_text
from pivotbsp.factorgraph import load_pose_graph
from pivotbsp.oracle import symbolic_eliminate
from pivotbsp.ordering import PatternGraph, constrained_min_degree
from pivotbsp.simworld import CSV_COLUMNS, ScenarioConfig

ROOT = Path(__file__).resolve().parents[1]
REFERENCE = ROOT / "configs" / "reference.cfg"

SMALL = """# small scenario for quick checks
rows = 6
cols = 8
obstacle_density = 0.1
n_goals = 2
goal_separation = 6
K = 3
lc_stride = 1
tactics = baseline, pivotmaxstar
"""

TWO_VERTEX = """VERTEX_SE2 0 0 0 0
VERTEX_SE2 1 1 0 0
EDGE_SE2 0 1 1 0 0 100 0 0 100 0 400
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


def loop_rich_file(path: Path, side=5, seed=1):
    """Grid of poses with every lattice edge as a constraint, vertex ids shuffled."""
    rng = np.random.default_rng(seed)
    ids = rng.permutation(side * side)
    cell_id = {(r, c): int(ids[r * side + c]) for r in range(side) for c in range(side)}
    lines = [f"VERTEX_SE2 {i} {c}.0 {r}.0 0.3" for (r, c), i in sorted(cell_id.items(), key=lambda t: t[1])]
    for (r, c), i in cell_id.items():
        for dr, dc in ((0, 1), (1, 0)):
            j = cell_id.get((r + dr, c + dc))
            if j is not None:
                lines.append(f"EDGE_SE2 {i} {j} {dc}.0 {dr}.0 0.0 100 0 0 100 0 400")
    path.write_text("\n".join(lines) + "\n")
    return path


def test_parse_bool():
    assert parse_bool("Yes") and parse_bool("1") and not parse_bool("off")
    with pytest.raises(ConfigError):
        parse_bool("maybe")


def test_config_text_round_trip():
    cfg = ScenarioConfig(goals=[(1, 2), (3, 4)], tactics=["baseline", "pivot5"], multi_hyp=True)
    assert load_config(None, parse_config_text(format_config(cfg))) == cfg


def test_reference_config_matches_defaults():
    assert load_config(str(REFERENCE)) == ScenarioConfig()


@pytest.mark.parametrize("text", ["rows 5", "colour = red", "rows = many", "keep_order = perhaps"])
def test_bad_config_lines(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_run_writes_outputs(small_cfg, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(small_cfg), "--out", str(out)]) == 0
    header = (out / "sessions.csv").read_text().splitlines()[0]
    assert header.split(",") == list(CSV_COLUMNS)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["tactics"] == ["baseline", "pivotmaxstar"]


def test_missing_config_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert main(["run", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_seed_override_changes_summary(small_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(small_cfg), "--out", str(a)]) == 0
    assert main(["run", "--config", str(small_cfg), "--out", str(b), "--seed", "7"]) == 0
    assert (a / "summary.json").read_text() != (b / "summary.json").read_text()


def test_bool_flags_and_bad_flag(small_cfg, tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(small_cfg), "--out", str(out), "--keep-order=false", "--multi-hyp=true", "--branch-k", "1"]) == 0
    assert main(["run", "--config", str(small_cfg), "--keep-order=sometimes"]) == 2
    assert main([]) == 2


def test_compare_two_tactics_prints_two_rows(small_cfg, tmp_path, capsys):
    args = ["compare", "--config", str(small_cfg), "--out", str(tmp_path), "--tactics", "baseline,pivotmaxstar"]
    assert main(args) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    assert lines[1].split()[0] == "baseline" and lines[2].split()[0] == "pivotmaxstar"
    first = (tmp_path / "sessions.csv").read_bytes()
    assert main(args) == 0
    assert (tmp_path / "sessions.csv").read_bytes() == first


def test_compare_rejects_unknown_or_single_tactic(small_cfg, tmp_path, capsys):
    assert main(["compare", "--config", str(small_cfg), "--out", str(tmp_path), "--tactics", "baseline,pivot0"]) == 2
    assert main(["compare", "--config", str(small_cfg), "--out", str(tmp_path), "--tactics", "baseline"]) == 2


def test_graph_two_vertices(tmp_path, capsys):
    f = tmp_path / "two.g2o"
    f.write_text(TWO_VERTEX)
    assert main(["graph", str(f)]) == 0
    out = dict(line.rsplit(" ", 1) for line in capsys.readouterr().out.strip().splitlines())
    # structural count from the dense oracle: axis-aligned geometry leaves exact zeros in the coupling
    assert int(out["nnz(R)"]) == 12
    assert int(out["variables"]) == 2


def test_graph_mindeg_beats_identity_on_loops(tmp_path, capsys):
    f = loop_rich_file(tmp_path / "grid.g2o")
    nnz = {}
    for order in ("identity", "mindeg"):
        assert main(["graph", str(f), "--order", order]) == 0
        out = dict(line.rsplit(" ", 1) for line in capsys.readouterr().out.strip().splitlines())
        nnz[order] = int(out["nnz(R)"])
    assert nnz["mindeg"] <= nnz["identity"]
    # the symbolic count bounds the numeric one under both orders
    g = load_pose_graph(f.open())
    vs = list(g.variables)
    md = constrained_min_degree(PatternGraph.from_factors(g.factors, vs), {v: 0 for v in vs}, vs)
    assert nnz["mindeg"] <= symbolic_eliminate(g, md).scalar_nnz()


def test_graph_order_file(tmp_path, capsys):
    f = tmp_path / "two.g2o"
    f.write_text(TWO_VERTEX)
    (tmp_path / "ord.txt").write_text("1 0\n")
    assert main(["graph", str(f), "--order", str(tmp_path / "ord.txt")]) == 0
    (tmp_path / "bad.txt").write_text("1\n")
    assert main(["graph", str(f), "--order", str(tmp_path / "bad.txt")]) == 3


def test_graph_errors(tmp_path, capsys):
    empty = tmp_path / "empty.g2o"
    empty.write_text("")
    assert main(["graph", str(empty)]) == 3
    bad = tmp_path / "bad.g2o"
    bad.write_text("VERTEX_SE2 0 0 0\n")
    assert main(["graph", str(bad)]) == 3
