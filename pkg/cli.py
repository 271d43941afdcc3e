import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, TextIO

import numpy as np

from config import settings
from config.models import EngineConfig, GraphBuildConfig, get_engine_config
from core.errors import InputNotFoundError, StepwatchError
from evaluation.loso import SessionRecord, intervention_study, load_dataset, loso_evaluate
from evaluation.metrics import frame_confusion, frame_macro_f1, per_step_f1
from evaluation.report import write_report, write_tick_trace
from file_operations.file_io import require_file, sha256_of_file
from file_operations.json_operations import read_json, write_json, write_json_lines
from logger import logging_utils
from policy.engine import SessionEngine, run_session
from policy.intervention import InterventionSpec, load_specs, save_specs, suggest_intervention_kind
from procedure.graph import TransitionGraph, build_graph, graph_from_dict, load_graph, load_step_names, save_graph
from procedure.sessions import load_sessions
from service.replay import replay
from service.server import GraphRegistry, serve
from simulator.simulator import Scenario, save_scenario, simulate_batch, write_simulated_session
from tracker.tracker import FrameObservation, decode_session, load_frames, raw_argmax_steps

EXIT_OK = 0
EXIT_ENGINE_ERROR = 1
EXIT_USAGE = 2
EXIT_NO_INPUT = 66
MANIFEST_FILE = "manifest.json"


def _hash_inputs(paths: Iterable[Optional[Path]]) -> Dict[str, str]:
    """sha256 per input file; directories contribute every file below them."""
    hashes: Dict[str, str] = {}
    for path in paths:
        if path is None:
            continue
        if path.is_dir():
            # logs carry wall-clock timestamps
            files = sorted(p for p in path.rglob("*") if p.is_file() and p.name != logging_utils.LOG_FILE_NAME)
        else:
            files = [path]
        for file_path in files:
            hashes[file_path.as_posix()] = sha256_of_file(file_path)
    return hashes


def write_manifest(out_dir: Path, args: argparse.Namespace, inputs: Sequence[Optional[Path]],
                   outputs: Sequence[Path], engine_cfg: Optional[EngineConfig] = None,
                   extra: Optional[Dict[str, Any]] = None) -> Path:
    """Everything needed to rerun the command: arguments, configs, seeds, input hashes. No timestamps."""
    manifest: Dict[str, Any] = {
        "command": args.command,
        "args": {key: (str(value) if isinstance(value, Path) else value)
                 for key, value in sorted(vars(args).items()) if key not in ("command", "handler")},
        "seed": args.seed,
        "inputs": _hash_inputs(inputs),
        "outputs": sorted(p.relative_to(out_dir).as_posix() for p in outputs if p.is_relative_to(out_dir)),
    }
    if engine_cfg is not None:
        manifest["engine"] = engine_cfg.to_dict()
    if extra:
        manifest.update(extra)
    return write_json(out_dir / MANIFEST_FILE, manifest)


def _engine_config(args: argparse.Namespace) -> EngineConfig:
    return get_engine_config(args.preset).with_seed(args.seed)


def _require(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise InputNotFoundError(f"{flag} is required for this command")
    if not path.exists():
        raise InputNotFoundError(f"input not found: {path}")
    return path


def _load_specs(args: argparse.Namespace) -> List[InterventionSpec]:
    return load_specs(require_file(args.specs)) if args.specs else []


def _session_dir(path: Path) -> Path:
    return path / "sessions" if (path / "sessions").is_dir() else path


def _frame_streams(path: Path) -> Dict[str, List[FrameObservation]]:
    """A single frame file, or every `frames/<id>.csv` of a dataset directory."""
    if path.is_file():
        return {path.stem: load_frames(path)}
    frame_dir = path / "frames" if (path / "frames").is_dir() else path
    files = sorted(frame_dir.glob("*.csv"))
    if not files:
        raise InputNotFoundError(f"no frame files under {frame_dir}")
    return {f.stem: load_frames(f) for f in files}


def cmd_build_graph(args: argparse.Namespace) -> List[Path]:
    sessions_path = _require(args.sessions, "--sessions")
    names = load_step_names(require_file(args.names)) if args.names else None
    f1_scores = ({int(k): float(v) for k, v in read_json(require_file(args.f1)).items()} if args.f1 else None)
    graph_cfg = GraphBuildConfig(min_edge_count=args.min_edge_count)
    graph = build_graph(load_sessions(_session_dir(sessions_path)), names=names, f1_scores=f1_scores, cfg=graph_cfg)
    outputs = [save_graph(graph, args.out / "graph.json")]
    if f1_scores:
        suggested = [InterventionSpec(step.id, suggest_intervention_kind(step)) for step in graph.steps
                     if step.detectability_f1 is not None]
        outputs.append(save_specs(suggested, args.out / "suggested_specs.json"))
    outputs.append(write_manifest(args.out, args, [sessions_path, args.names, args.f1], outputs,
                                  extra={"graph_build": graph_cfg.to_dict(), "graph_hash": graph.graph_hash}))
    return outputs


def cmd_simulate(args: argparse.Namespace) -> List[Path]:
    scenario_path = _require(args.graph, "--graph")
    data = read_json(scenario_path)
    data["seed"] = args.seed
    scenario = Scenario.from_dict(data)
    outputs = [save_scenario(scenario, args.out / "scenario.json")]
    for session in simulate_batch(scenario, args.n_sessions, prefix=args.prefix, workers=args.workers):
        write_simulated_session(session, scenario, args.out)
        outputs.append(args.out / "sessions" / f"{session.log.session_id}.json")
        outputs.append(args.out / "frames" / f"{session.log.session_id}.csv")
    outputs.append(write_manifest(args.out, args, [scenario_path], outputs))
    return outputs


def _load_run_graph(path: Path) -> TransitionGraph:
    data = read_json(path)
    return graph_from_dict(data) if "confusion" in data else load_graph(path)


def cmd_run(args: argparse.Namespace) -> List[Path]:
    graph = _load_run_graph(_require(args.graph, "--graph"))
    sessions_path = _require(args.sessions, "--sessions")
    specs = _load_specs(args)
    engine_cfg = _engine_config(args)
    outputs: List[Path] = []
    for session_id, frames in _frame_streams(sessions_path).items():
        run = run_session(graph, specs, frames, engine_cfg, session_id=session_id,
                          dump_distributions=args.dump_distributions)
        outputs.append(write_json(args.out / "events" / f"{session_id}.json",
                                  [event.to_dict() for event in run.events]))
        outputs.append(write_tick_trace(run.tick_log, args.out / "ticks" / f"{session_id}.tsv"))
        if args.dump_distributions:
            outputs.append(write_json_lines(args.out / "distributions" / f"{session_id}.jsonl", run.distributions))
        for event in run.events:
            print(f"{session_id}\t{event.t:.1f}\ts{event.target}\t{event.kind.value}\t{event.message}")
    outputs.append(write_manifest(args.out, args, [args.graph, sessions_path, args.specs], outputs,
                                  engine_cfg=engine_cfg, extra={"graph_hash": graph.graph_hash}))
    return outputs


def _frame_f1(records: Sequence[SessionRecord], names: Optional[Dict[int, str]],
              engine_cfg: EngineConfig) -> Dict[str, Any]:
    """Frame-level F1 of raw argmax and of the tracker's decoding, on a graph built from all sessions."""
    graph = build_graph([record.log for record in records], names=names)
    truth, raw, decoded = [], [], []
    for record in records:
        for frame, raw_step, decoded_step in zip(record.frames, raw_argmax_steps(graph, record.frames),
                                                 decode_session(graph, record.frames, engine_cfg.tracker)):
            true_step = record.log.step_at(frame.t - engine_cfg.tracker.frame_length / 2)
            if true_step is None:
                continue
            truth.append(true_step)
            raw.append(raw_step)
            decoded.append(decoded_step)
    if not truth:
        return {"raw_argmax": None, "tracker": None}
    labels = graph.step_ids
    return {
        "raw_argmax": frame_macro_f1(truth, raw, labels),
        "tracker": frame_macro_f1(truth, decoded, labels),
        "per_step": {
            "raw_argmax": {str(k): v for k, v in per_step_f1(truth, raw, labels).items()},
            "tracker": {str(k): v for k, v in per_step_f1(truth, decoded, labels).items()},
        },
        "tracker_confusion": frame_confusion(truth, decoded, labels).tolist(),
    }


def cmd_evaluate(args: argparse.Namespace) -> List[Path]:
    dataset_path = _require(args.sessions, "--sessions")
    names = load_step_names(require_file(args.names)) if args.names else None
    engine_cfg = get_engine_config(args.preset or "evaluation").with_seed(args.seed)
    records = load_dataset(dataset_path)
    report = loso_evaluate(records, engine_cfg, grid=args.grid, names=names,
                           max_tuning_sessions=args.max_tuning_sessions or None, workers=args.workers,
                           task=args.task)
    report.metadata["seed"] = args.seed
    report.metadata["frame_macro_f1"] = _frame_f1(records, names, engine_cfg)
    inputs = [dataset_path, args.names]
    if args.study:
        scenario = Scenario.from_dict({**read_json(require_file(args.study)), "seed": args.seed})
        tallies, _ = intervention_study(scenario, _load_specs(args), args.n_sessions, engine_cfg,
                                        workers=args.workers)
        report.dispositions = tallies
        inputs += [args.study, args.specs]
    outputs = write_report(report, args.out, names)
    outputs.append(write_manifest(args.out, args, inputs, outputs, engine_cfg=engine_cfg))
    return outputs


def _registry(args: argparse.Namespace) -> GraphRegistry:
    registry = GraphRegistry()
    registry.register(_load_run_graph(_require(args.graph, "--graph")), _load_specs(args))
    return registry


def cmd_serve(args: argparse.Namespace) -> List[Path]:
    engine_cfg = get_engine_config(args.preset or "watch").with_seed(args.seed)
    serve(_registry(args), engine_cfg, host=args.host, port=args.port, emit_ticks=args.ticks)
    return []


def cmd_replay(args: argparse.Namespace) -> List[Path]:
    graph = _load_run_graph(_require(args.graph, "--graph"))
    sessions_path = _require(args.sessions, "--sessions")
    specs = _load_specs(args) if args.specs else None
    outputs: List[Path] = []
    failed = []
    for session_id, frames in _frame_streams(sessions_path).items():
        result = replay(frames, graph.graph_hash, host=args.host, port=args.port, speed=args.speed,
                        session=session_id, specs=specs)
        # client-side receive times are wall-clock dependent and stay out of the event file
        outputs.append(write_json(args.out / "events" / f"{session_id}.json",
                                  [event.to_dict() for event in result.events]))
        transcript = [{"received_s": round(at, 3), **{k: (v.value if k == "kind" else v) for k, v in record.items()}}
                      for at, record in result.transcript]
        outputs.append(write_json_lines(args.out / "transcripts" / f"{session_id}.jsonl", transcript))
        if result.status != 0:
            failed.append(session_id)
            if result.error and result.error.startswith("cannot connect"):
                break
    outputs.append(write_manifest(args.out, args, [args.graph, sessions_path, args.specs], outputs,
                                  extra={"graph_hash": graph.graph_hash}))
    if failed:
        raise StepwatchError(f"replay failed for sessions {failed}")
    return outputs


def live_frames(lines: Iterable[str], graph: TransitionGraph, frame_length: float) -> Iterable[FrameObservation]:
    """Turn typed `<step> [seconds]` lines into one-hot frames; `end` or EOF stops."""
    frame_index = 0
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0].lower() in ("end", "quit", "q"):
            return
        try:
            step_id = int(parts[0].lstrip("s"))
            step = graph.step_by_id[step_id]
            seconds = float(parts[1]) if len(parts) > 1 else step.mean_duration
        except (ValueError, KeyError, IndexError):
            print(f"? expected '<step id> [seconds]', one of {graph.step_ids}", file=sys.stderr)
            continue
        probs = np.zeros(graph.n_steps)
        probs[graph.index_of[step_id]] = 1.0
        for _ in range(max(1, int(round(seconds / frame_length)))):
            frame_index += 1
            yield FrameObservation(t=round(frame_index * frame_length, 6), probs=probs)


def cmd_live(args: argparse.Namespace, stdin: TextIO = sys.stdin) -> List[Path]:
    graph = _load_run_graph(_require(args.graph, "--graph"))
    engine_cfg = _engine_config(args)
    engine = SessionEngine(graph, _load_specs(args), engine_cfg, session_id="live")
    print(f"Begin the task. Type a step id (1..{graph.n_steps}) and optional seconds; 'end' to finish.")
    for frame in live_frames(stdin, graph, engine_cfg.tracker.frame_length):
        for event in engine.feed(frame):
            print(f"[{event.t:7.1f}s] {event.message}", flush=True)
    for event in engine.finish():
        print(f"[{event.t:7.1f}s] {event.message}", flush=True)
    print(f"End the task: {len(engine.events)} interventions over {engine.belief.t:.1f}s.")
    return []


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepwatch",
                                     description="Forecast procedural steps and time proactive interventions")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, help=f"Output directory (default: ${settings.OUTPUT_DIR_ENV_VAR} "
                                                 f"or the user data dir)")
    common.add_argument("--seed", type=int, default=0, help="Seed for sampling and simulation")
    common.add_argument("--preset", choices=["laptop", "watch", "evaluation"], help="Engine preset")
    common.add_argument("--graph", type=Path, help="Graph (or scenario) JSON file")
    common.add_argument("--sessions", type=Path, help="Session file, session dir or dataset dir")
    common.add_argument("--specs", type=Path, help="Intervention spec JSON file")
    common.add_argument("--workers", type=int, default=1, help="Worker threads")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", parents=[common], help="Build a step graph from annotated sessions")
    p.add_argument("--names", type=Path, help='Step names JSON {"1": "name", ...}')
    p.add_argument("--f1", type=Path, help='Per-step detectability F1 JSON {"1": 0.8, ...}')
    p.add_argument("--min-edge-count", type=int, default=settings.MIN_EDGE_COUNT)
    p.set_defaults(handler=cmd_build_graph)

    p = sub.add_parser("simulate", parents=[common], help="Simulate sessions from a scenario")
    p.add_argument("--n-sessions", type=int, default=10)
    p.add_argument("--prefix", default="sim")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("run", parents=[common], help="Run the engine offline over frame files")
    p.add_argument("--dump-distributions", action="store_true", help="Write per-tick remaining-time histograms")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("evaluate", parents=[common], help="Leave-one-session-out evaluation",
                       description="Leave-one-session-out evaluation. Without --preset it runs the coarser "
                                   "\"evaluation\" preset (1 s ticks, 1,000 samples); pass --preset laptop "
                                   "for 0.2 s ticks and 10,000 samples.")
    p.add_argument("--grid", type=lambda s: [float(v) for v in s.split(",")], default=list(settings.DEFAULT_GRID),
                   help="Comma-separated entropy thresholds in nats")
    p.add_argument("--names", type=Path)
    p.add_argument("--task", default="task")
    p.add_argument("--max-tuning-sessions", type=int, default=settings.MAX_TUNING_SESSIONS,
                   help="Training sessions used for threshold search per fold (0 = all)")
    p.add_argument("--study", type=Path, help="Scenario for a notify-if-forgotten disposition study")
    p.add_argument("--n-sessions", type=int, default=100)
    p.set_defaults(handler=cmd_evaluate)

    for name, handler, help_text in (("serve", cmd_serve, "Serve sessions over TCP"),
                                     ("replay", cmd_replay, "Replay frame files to a server")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--host", default=settings.SERVICE_HOST)
        p.add_argument("--port", type=int, default=settings.SERVICE_PORT)
        if name == "serve":
            p.add_argument("--ticks", action="store_true", help="Push per-tick E/H snapshots")
        else:
            p.add_argument("--speed", type=float, default=1.0, help="Pacing multiplier, 0 = as fast as possible")
        p.set_defaults(handler=handler)

    p = sub.add_parser("live", parents=[common], help="Type step ids and watch interventions fire")
    p.set_defaults(handler=cmd_live)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point: parses arguments, sets up logging, dispatches the subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    # serve and live log to stderr only unless an output dir is asked for
    log_dir = args.out
    if args.out is None:
        args.out = settings.get_output_dir() / args.command
    if args.command not in ("serve", "live"):
        log_dir = args.out
    if args.preset is None and args.command in ("run", "live", "replay"):
        args.preset = "laptop"
    logging_utils.configure_logging(log_dir)
    logging.info(f"stepwatch {args.command} started.")

    try:
        outputs = args.handler(args)
        logging.info(f"{args.command} wrote {len(outputs)} files to {args.out}")
        return EXIT_OK
    except InputNotFoundError as e:
        print(str(e), file=sys.stderr)
        return EXIT_NO_INPUT
    except (StepwatchError, ValueError) as e:
        logging_utils.log_exception(e, f"{args.command} failed")
        print(str(e), file=sys.stderr)
        return EXIT_ENGINE_ERROR
    finally:
        logging.info(f"stepwatch {args.command} finished.")


if __name__ == "__main__":
    sys.exit(main())
