"""Command-line entry point: ``run``, ``report``, ``validate``, ``make-workload``."""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from .compactor import FaultSchedule
from .errors import ConfigError, LifecycleInvariantError
from .llm_backend import API_KEY_ENV, HttpBackend
from .metrics import deviation_locality, expand_globs, format_table, report
from .orchestrator import Mode, Orchestrator, RunConfig, RunResult
from .workloads import WorkloadParams, WorkloadScript, generate_workload

logger = logging.getLogger("trajcompact")

_CONFIG_KEYS = {
    "name", "workload", "backend", "model", "sampling", "modes", "mode", "thresholds", "threshold",
    "threshold_grid", "accept_threshold", "k_max", "max_update_attempts", "seed", "max_turns",
    "inject_faults", "trace_dir", "parallel",
}  # fmt: skip


def threshold_grid(default: int) -> list[int]:
    """Default threshold plus the 2/3x and 4/3x sensitivity points."""
    return [round(default * 2 / 3), default, round(default * 4 / 3)]


def _resolve(base: Path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else base / p


def validate_config(config: dict | str | os.PathLike, base: Path | None = None) -> list[str]:
    """Every problem with an experiment config, as human-readable diagnostics."""
    diags: list[str] = []
    if not isinstance(config, dict):
        path = Path(config)
        base = path.parent
        try:
            config = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return [f"config: file not found: {path}"]
        except json.JSONDecodeError as exc:
            return [f"config: invalid JSON: {exc}"]
        if not isinstance(config, dict):
            return ["config: top level must be a JSON object"]
    base = base or Path(".")
    for key in sorted(set(config) - _CONFIG_KEYS):
        diags.append(f"{key}: unknown field")

    modes = config.get("modes", [config.get("mode", "slipstream")])
    if not isinstance(modes, list) or not modes:
        diags.append("modes: must be a nonempty list")
        modes = []
    for m in modes:
        try:
            Mode.parse(m)
        except (ValueError, AttributeError):
            diags.append(f"modes: unknown mode {m!r}")

    thresholds = config.get("thresholds", [config.get("threshold", 6000)])
    if not isinstance(thresholds, list) or not thresholds:
        diags.append("thresholds: must be a nonempty list")
        thresholds = []
    for t in thresholds:
        if isinstance(t, bool) or not isinstance(t, int) or t <= 0:
            diags.append(f"threshold: must be a positive integer, got {t!r}")

    acc = config.get("accept_threshold", 7)
    if isinstance(acc, bool) or not isinstance(acc, int) or not 0 <= acc <= 10:
        diags.append(f"accept_threshold: must be an integer in [0, 10], got {acc!r}")
    for key in ("k_max", "max_turns"):
        v = config.get(key, 1)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            diags.append(f"{key}: must be a positive integer, got {v!r}")
    v = config.get("max_update_attempts", 1)
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        diags.append(f"max_update_attempts: must be a nonnegative integer, got {v!r}")
    if not isinstance(config.get("seed", 0), int):
        diags.append("seed: must be an integer")

    backend = config.get("backend", "script")
    if not isinstance(backend, str) or not (backend == "script" or backend.startswith("http:")):
        diags.append(f"backend: expected 'script' or 'http:<url>', got {backend!r}")
    elif backend.startswith("http:") and not config.get("model"):
        diags.append("model: required for an http backend")

    workload = config.get("workload")
    if workload is None:
        diags.append("workload: required (script file path or {'generator': {...}})")
    elif isinstance(workload, str):
        wpath = _resolve(base, workload)
        if not wpath.exists():
            diags.append(f"workload: script file not found: {wpath}")
        else:
            try:
                ws = WorkloadScript.load(wpath)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                diags.append(f"workload: cannot parse {wpath}: {exc}")
            else:
                if backend == "script":
                    diags.extend(f"workload: {p}" for p in ws.problems())
    elif isinstance(workload, dict) and "generator" in workload:
        try:
            WorkloadParams.from_dict(workload["generator"])
        except TypeError as exc:
            diags.append(f"workload.generator: {exc}")
    else:
        diags.append("workload: must be a file path or {'generator': {...}}")

    faults = config.get("inject_faults")
    if faults is not None:
        fpath = _resolve(base, faults)
        if not fpath.exists():
            diags.append(f"inject_faults: file not found: {fpath}")
        else:
            try:
                FaultSchedule.load(fpath)
            except Exception as exc:
                diags.append(f"inject_faults: {exc}")
    return diags


@dataclass
class Experiment:
    workload: WorkloadScript
    configs: list[RunConfig]
    backend: str
    model: str | None
    sampling: dict
    faults: FaultSchedule | None
    trace_dir: Path


def load_experiment(config_path: str | os.PathLike, overrides: dict | None = None) -> Experiment:
    path = Path(config_path)
    config = json.loads(path.read_text(encoding="utf-8"))
    config.update(overrides or {})
    diags = validate_config(config, path.parent)
    if diags:
        raise ConfigError(diags)
    return build_experiment(config, path.parent)


def build_experiment(config: dict, base: Path) -> Experiment:
    seed = config.get("seed", 0)
    workload = config["workload"]
    if isinstance(workload, str):
        ws = WorkloadScript.load(_resolve(base, workload))
    else:
        ws = generate_workload(WorkloadParams.from_dict(workload["generator"]), seed, config.get("name", "generated"))
    thresholds = config.get("thresholds") or [config.get("threshold", 6000)]
    if config.get("threshold_grid"):
        thresholds = threshold_grid(thresholds[0])
    modes = config.get("modes") or [config.get("mode", "slipstream")]
    configs = [
        RunConfig(
            mode=Mode.parse(m),
            threshold=t,
            accept_threshold=config.get("accept_threshold", 7),
            k_max=config.get("k_max", 8),
            max_update_attempts=config.get("max_update_attempts", 1),
            seed=seed,
            max_turns=config.get("max_turns", 500),
        )
        for m in modes
        for t in thresholds
    ]
    specs = list(ws.faults)
    if config.get("inject_faults"):
        specs.extend(FaultSchedule.load(_resolve(base, config["inject_faults"])).to_list())
    faults = FaultSchedule.from_list(specs) if specs else None
    return Experiment(
        ws,
        configs,
        config.get("backend", "script"),
        config.get("model"),
        config.get("sampling", {}),
        faults,
        _resolve(base, config.get("trace_dir", "traces")),
    )


def trace_name(cfg: RunConfig, query: str) -> str:
    return f"{cfg.mode.value}__T{cfg.threshold}__{query}.jsonl"


def run_one(exp: Experiment, cfg: RunConfig, query) -> RunResult:
    if exp.backend == "script":
        backend, tools = query.mock()
    else:
        backend = HttpBackend(exp.backend[len("http:"):], exp.model, sampling=exp.sampling)
        tools = None
    orch = Orchestrator(
        backend,
        RunConfig(**{**asdict(cfg)}),
        tools=tools,
        system_preamble=exp.workload.system_preamble,
        faults=exp.faults,
        query=query.name,
    )
    return orch.run(query.task)


def run_experiment(config_path: str | os.PathLike, parallel: bool = False, overrides: dict | None = None) -> int:
    """Run the mode x threshold x query grid; one trace file per cell.

    Returns 0 on success, 1 if any run ended with an error, 2 on a config
    error or lifecycle invariant violation.
    """
    try:
        exp = load_experiment(config_path, overrides)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"config error: {d}", file=sys.stderr)
        return 2
    return execute(exp, parallel)


def execute(exp: Experiment, parallel: bool = False) -> int:
    exp.trace_dir.mkdir(parents=True, exist_ok=True)
    cells = [(cfg, q) for cfg in exp.configs for q in exp.workload.queries]

    def _cell(cell) -> str | None:
        cfg, q = cell
        result = run_one(exp, cfg, q)
        (exp.trace_dir / trace_name(cfg, q.name)).write_text(result.trace_jsonl(), encoding="utf-8")
        return result.error

    status = 0
    try:
        if parallel:
            with cf.ThreadPoolExecutor() as pool:
                errors = list(pool.map(_cell, cells))
        else:
            errors = [_cell(c) for c in cells]
    except LifecycleInvariantError as exc:
        print(f"lifecycle invariant violated: {exc}", file=sys.stderr)
        return 2
    for (cfg, q), err in zip(cells, errors):
        if err:
            print(f"{trace_name(cfg, q.name)}: {err}", file=sys.stderr)
            status = 1
    logger.info("wrote %d traces to %s", len(cells), exp.trace_dir)
    return status


# ---------------------------------------------------------------------------


def _cmd_run(args: argparse.Namespace) -> int:
    if args.config:
        overrides: dict[str, Any] = {}
        if args.trace_out:
            overrides["trace_dir"] = os.path.abspath(args.trace_out)
        if args.seed is not None:
            overrides["seed"] = args.seed
        return run_experiment(args.config, args.parallel, overrides)
    if not args.backend:
        print("run: either --config or --backend is required", file=sys.stderr)
        return 2
    config: dict[str, Any] = {
        "modes": [args.mode],
        "thresholds": [args.threshold],
        "accept_threshold": args.accept_threshold,
        "k_max": args.k_max,
        "seed": args.seed or 0,
        "trace_dir": os.path.abspath(args.trace_out or "traces"),
    }
    if args.backend.startswith("script:"):
        config["backend"] = "script"
        config["workload"] = os.path.abspath(args.backend[len("script:"):])
    else:
        config["backend"] = args.backend
        config["model"] = args.model
        config["workload"] = os.path.abspath(args.workload) if args.workload else None
    if args.inject_faults:
        config["inject_faults"] = os.path.abspath(args.inject_faults)
    diags = validate_config(config, Path("."))
    if diags:
        for d in diags:
            print(f"config error: {d}", file=sys.stderr)
        return 2
    return execute(build_experiment(config, Path(".")), args.parallel)


def _cmd_report(args: argparse.Namespace) -> int:
    paths = expand_globs(args.traces)
    if not paths:
        print(f"report: no traces match {args.traces}", file=sys.stderr)
        return 1
    rep = report(paths)
    if args.labels:
        with open(args.labels, encoding="utf-8") as fh:
            rep["deviation_locality"] = deviation_locality(json.load(fh)).to_dict()
    text = format_table(rep) if args.format == "table" else json.dumps(rep, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    diags = validate_config(args.config)
    for d in diags:
        print(d)
    if not diags:
        print("ok")
    return 1 if diags else 0


def _cmd_make_workload(args: argparse.Namespace) -> int:
    params = WorkloadParams.from_dict(json.loads(args.params)) if args.params else WorkloadParams()
    generate_workload(params, args.seed, args.name).dump(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajcompact", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run an experiment grid or a single configuration")
    run.add_argument("--config", help="experiment config JSON (grid over modes x thresholds x queries)")
    run.add_argument("--mode", default="slipstream", choices=["none", "sync", "async-nojudge", "slipstream"])
    run.add_argument("--threshold", type=int, default=6000, help="compaction trigger, in tokens")
    run.add_argument("--accept-threshold", type=int, default=7)
    run.add_argument("--k-max", type=int, default=8)
    run.add_argument("--backend", help="http:<base-url> or script:<workload.json>")
    run.add_argument("--model", help="model name for an http backend")
    run.add_argument("--workload", help="task list for an http backend")
    run.add_argument("--inject-faults", help="JSON list of {mode, target, replacement}")
    run.add_argument("--trace-out", help="directory for trace files")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--parallel", action="store_true", help="run independent queries concurrently")
    run.set_defaults(fn=_cmd_run)

    rep = sub.add_parser("report", help="aggregate trace files")
    rep.add_argument("--traces", nargs="+", required=True, help="glob(s) of trace files")
    rep.add_argument("--out", help="output path (default stdout)")
    rep.add_argument("--format", choices=["json", "table"], default="json")
    rep.add_argument("--labels", help="JSON list of deviation labels for the locality histogram")
    rep.set_defaults(fn=_cmd_report)

    val = sub.add_parser("validate", help="check an experiment config")
    val.add_argument("config")
    val.set_defaults(fn=_cmd_validate)

    mk = sub.add_parser("make-workload", help="write a seeded synthetic workload script")
    mk.add_argument("--out", required=True)
    mk.add_argument("--seed", type=int, default=0)
    mk.add_argument("--name", default="generated")
    mk.add_argument("--params", help="JSON object of generator parameters")
    mk.set_defaults(fn=_cmd_make_workload)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.cmd == "run" and args.backend and args.backend.startswith("http:") and not os.environ.get(API_KEY_ENV):
        logger.info("%s not set; sending requests without an API key", API_KEY_ENV)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
