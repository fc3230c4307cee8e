"""Command-line entry point.

Subcommands::

    pivotbsp run     --config ref.cfg --out out/
    pivotbsp compare --config ref.cfg --tactics baseline,pivotmaxstar
    pivotbsp graph   file.g2o --order identity|mindeg|<order file>

Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import typing
from pathlib import Path
from typing import Sequence

from .factorgraph import GraphError, StateOrder, assemble, load_pose_graph
from .linalg import LinalgError, qr_factorize
from .ordering import PatternGraph, constrained_min_degree
from .planner import TACTIC_NAMES, PlanningError, UnknownTactic, parse_tactic
from .simworld import (
    GoalUnreachable,
    ScenarioConfig,
    ScenarioError,
    csv_text,
    run_scenario,
    summary_json,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# key = value configuration
# ---------------------------------------------------------------------------


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_goals(text: str) -> list[tuple[int, int]] | None:
    text = text.strip()
    if text.lower() in ("", "auto", "none"):
        return None
    goals = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        r, c = item.split(",")
        goals.append((int(r), int(c)))
    return goals


def _field_parser(name: str):
    hints = typing.get_type_hints(ScenarioConfig)
    hint = hints[name]
    if name == "goals":
        return _parse_goals
    if name == "tactics":
        return lambda s: [t.strip() for t in s.split(",") if t.strip()]
    if hint is bool:
        return parse_bool
    if hint is int:
        return lambda s: int(s.strip())
    if hint is float:
        return lambda s: float(s.strip())
    if typing.get_origin(hint) is tuple:
        return lambda s: tuple(float(x) for x in s.split(","))
    raise ConfigError(f"unsupported field {name}")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    names = {f.name for f in dataclasses.fields(ScenarioConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in names:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _field_parser(key)(value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def load_config(path: str | None, overrides: dict | None = None) -> ScenarioConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = parse_config_text(p.read_text(), str(p))
    values.update(overrides or {})
    cfg = ScenarioConfig(**values)
    try:
        cfg.validate()
    except UnknownTactic as exc:
        raise ConfigError(f"unknown tactic {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def format_config(cfg: ScenarioConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "goals":
            text = "auto" if v is None else ";".join(f"{r},{c}" for r, c in v)
        elif isinstance(v, (list, tuple)):
            text = ",".join(str(x) for x in v)
        else:
            text = str(v).lower() if isinstance(v, bool) else str(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "tactics", None):
        out["tactics"] = [t.strip() for t in args.tactics.split(",") if t.strip()]
    if getattr(args, "keep_order", None) is not None:
        out["keep_order"] = args.keep_order
    if getattr(args, "multi_hyp", None) is not None:
        out["multi_hyp"] = args.multi_hyp
    if getattr(args, "branch_k", None) is not None:
        out["branch_k"] = args.branch_k
    return out


def _write_outputs(result, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sessions.csv").write_text(csv_text(result.logs))
    (out_dir / "summary.json").write_text(summary_json(result.summary))


def cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    result = run_scenario(cfg)
    _write_outputs(result, Path(args.out))
    print(f"wrote {Path(args.out) / 'sessions.csv'} and {Path(args.out) / 'summary.json'}")
    return EXIT_OK


TABLE_COLUMNS = (
    ("planning_update_fma", "plan upd"),
    ("reorder_fma", "reorder"),
    ("planning_total_fma", "plan total"),
    ("planning_total_relative", "plan rel"),
    ("inference_update_fma", "inf upd"),
    ("backsub_fma", "backsub"),
    ("inference_total_fma", "inf total"),
    ("inference_total_relative", "inf rel"),
    ("fill_in_before_final_reorder", "nnz pre"),
    ("fill_in", "nnz final"),
)


def format_table(summary: dict) -> str:
    header = ["tactic"] + [label for _, label in TABLE_COLUMNS]
    rows = [header]
    for name in summary["tactics"]:
        t = summary["totals"][name]
        row = [name]
        for key, _ in TABLE_COLUMNS:
            v = t.get(key)
            if v is None:
                row.append("-")
            elif isinstance(v, float):
                row.append(f"{100 * v:.2f}%")
            else:
                row.append(str(v))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"


def cmd_compare(args) -> int:
    names = [t.strip() for t in (args.tactics or "").split(",") if t.strip()]
    for n in names:
        parse_tactic(n)
    cfg = load_config(args.config, _overrides(args))
    if len(cfg.tactics) < 2:
        raise ConfigError("compare needs at least two tactics")
    result = run_scenario(cfg)
    sys.stdout.write(format_table(result.summary))
    _write_outputs(result, Path(args.out))
    return EXIT_OK


def read_order_file(path: str) -> list[int]:
    text = Path(path).read_text()
    return [int(tok) for tok in text.split()]


def cmd_graph(args) -> int:
    path = Path(args.file)
    if not path.is_file():
        raise ConfigError(f"pose-graph file not found: {args.file}")
    with path.open() as fh:
        graph = load_pose_graph(fh)
    if not graph.variables:
        raise GraphError(f"{args.file}: empty pose graph")
    variables = list(graph.variables)
    if args.order == "identity":
        order = StateOrder(variables)
    elif args.order == "mindeg":
        pattern = PatternGraph.from_factors(graph.factors, variables)
        order = constrained_min_degree(pattern, {v: 0 for v in variables}, variables)
    else:
        ids = read_order_file(args.order)
        by_id = {v.id: v for v in variables}
        if sorted(ids) != sorted(by_id):
            raise GraphError("order file must list every vertex id exactly once")
        order = StateOrder(by_id[i] for i in ids)
    a, rhs = assemble(graph, order)
    r, _, counter = qr_factorize(a, rhs)
    print(f"variables {len(order)}")
    print(f"nnz(R) {r.nnz}")
    print(f"build_fma {counter.fma}")
    print(f"build_rotations {counter.rotations}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _bool_flag(text: str) -> bool:
    try:
        return parse_bool(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pivotbsp", description="Predictive variable ordering for belief space planning.")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_flags(p, tactics_help):
        p.add_argument("--config", help="key = value scenario file")
        p.add_argument("--out", default="out", help="output directory for sessions.csv and summary.json")
        p.add_argument("--seed", type=int)
        p.add_argument("--tactics", help=tactics_help)
        p.add_argument("--keep-order", type=_bool_flag, metavar="BOOL")
        p.add_argument("--multi-hyp", type=_bool_flag, metavar="BOOL")
        p.add_argument("--branch-k", type=int)

    names = ",".join(TACTIC_NAMES)
    scenario_flags(sub.add_parser("run", help="run a scenario"), f"comma list from {names}")
    scenario_flags(sub.add_parser("compare", help="compare tactics on one scenario"), f"two or more of {names}")
    g = sub.add_parser("graph", help="factorize a pose-graph file under an order")
    g.add_argument("file")
    g.add_argument("--order", default="identity", help="identity, mindeg, or a file of vertex ids")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    handlers = {"run": cmd_run, "compare": cmd_compare, "graph": cmd_graph}
    try:
        return handlers[args.command](args)
    except UnknownTactic as exc:
        print(f"error: unknown tactic {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphError, LinalgError, PlanningError, GoalUnreachable, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
