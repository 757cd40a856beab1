"""Command line entry point.

Every stage talks to the next through files: MGF model JSON, schedule JSON,
tuning-log JSON lines, trace CSV, signature-DB JSON and prediction JSON.

Exit status: 0 success, 1 invalid input, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from ..attack import SignatureDB
from ..autotuner import dump_tuning_log
from ..model_ir import MGFError, load_model, save_model
from ..perfsim import DeviceProfile
from ..schedule import default_assignment, dump_schedules, load_schedules
from ..sidechannel import TraceFormatError, export_trace_csv, parse_trace_csv
from ..zoo import FAMILIES, generate_model
from .pipeline import attack_cell, compile_cell, dump_prediction, profile_cell
from .report import report
from .sweep import DEFAULT_SIGMA, ConfigError, ExperimentConfig, build_corpus_db, run_sweep

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class _Config:
    """Values from ``--config``; relative paths resolve against the file's directory."""

    def __init__(self, path: str | None):
        self.path = Path(path) if path else None
        self.doc: dict[str, Any] = {}
        if self.path is not None:
            self.doc = json.loads(self.path.read_text())
            if not isinstance(self.doc, dict):
                raise ConfigError("config file must hold a JSON object")

    def get(self, key: str, default=None):
        return self.doc.get(key, default)

    def device(self, flag: str | None) -> DeviceProfile:
        if flag:
            return DeviceProfile.load(flag)
        if self.doc.get("device"):
            p = Path(self.doc["device"])
            if not p.is_absolute() and self.path is not None:
                p = self.path.parent / p
            return DeviceProfile.load(p)
        return DeviceProfile.load()


def _write(out: str | None, data: bytes) -> None:
    if out in (None, "-"):
        sys.stdout.buffer.write(data)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_bytes(data)


def _sigma(args, cfg: _Config) -> float:
    if args.sigma is not None:
        return args.sigma
    return float(cfg.get("noise_sigma", DEFAULT_SIGMA))


def cmd_gen(args, cfg: _Config) -> None:
    family = args.family or cfg.get("family")
    if family is None:
        raise ConfigError("gen needs --family")
    scale = args.scale if args.scale is not None else int(cfg.get("scale", 2))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    _write(args.out, save_model(generate_model(family, scale, seed)))


def cmd_compile(args, cfg: _Config) -> None:
    graph = load_model(Path(args.model).read_bytes())
    device = cfg.device(args.device)
    seed = args.seed if args.seed is not None else 0
    assignment, log = compile_cell(graph, device, args.trials, seed, cfg.get("tuner", {}))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "schedules.json").write_bytes(dump_schedules(assignment))
    (out / "tuning_log.jsonl").write_bytes(dump_tuning_log(log))


def cmd_profile(args, cfg: _Config) -> None:
    graph = load_model(Path(args.model).read_bytes())
    device = cfg.device(args.device)
    if args.schedules:
        assignment = load_schedules(Path(args.schedules).read_bytes())
    else:
        assignment = default_assignment(graph)
    seed = args.seed if args.seed is not None else 0
    trace = profile_cell(graph, assignment, device, _sigma(args, cfg), seed)
    _write(args.out, export_trace_csv(trace))


def cmd_buildb(args, cfg: _Config) -> None:
    device = cfg.device(args.device)
    if args.model:
        corpus = [load_model(Path(p).read_bytes()) for p in args.model]
        seeds = list(args.corpus_seeds or [0, 1, 2])
        sigma = _sigma(args, cfg)
    else:
        # same corpus, seeds and noise as a sweep run from this config
        exp = ExperimentConfig.load(cfg.path) if cfg.path else ExperimentConfig()
        corpus = exp.corpus_graphs(exp.victims())
        seeds = list(args.corpus_seeds or exp.corpus.seeds)
        sigma = args.sigma if args.sigma is not None else exp.corpus_sigma()
    db = build_corpus_db(corpus, device, sigma, seeds)
    _write(args.out, db.to_json().encode())


def cmd_attack(args, cfg: _Config) -> None:
    trace = parse_trace_csv(Path(args.trace).read_bytes())
    db = SignatureDB.from_json(Path(args.db).read_text())
    graph = load_model(Path(args.model).read_bytes()) if args.model else None
    pred, score = attack_cell(trace, db, graph)
    _write(args.out, dump_prediction(pred, score))


def cmd_sweep(args, cfg: _Config) -> None:
    if cfg.path is not None:
        exp = ExperimentConfig.load(cfg.path)
    else:
        exp = ExperimentConfig()
    if args.seed is not None:
        exp = ExperimentConfig.from_dict({**exp.to_dict(), "seeds": [args.seed]}, exp.base_dir)
    out = Path(args.out) if args.out else exp.resolve(exp.output_dir)
    result = run_sweep(exp, out)
    report(result, out)
    for row in result.rows:
        print(
            f"{row.model:28s} trials={row.trials:4d} fidelity={row.fidelity_mean:.4f} "
            f"({row.rel_fidelity_change:+.1%}) latency={row.latency_mean_ns:.0f}ns "
            f"({row.rel_latency_change:+.1%})"
        )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="experiment seed")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--config", default=None, help="JSON config supplying defaults")
    common.add_argument("--device", default=None, help="device profile JSON (default: a100-like)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="compdefense", description="Tensor-optimization defense against kernel side channels."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="emit an MGF model from a generator")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--scale", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("compile", parents=[common], help="tune schedules for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--trials", type=int, required=True)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("profile", parents=[common], help="simulate inference, write a trace CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--schedules", help="schedule JSON; default schedules when omitted")
    p.add_argument("--sigma", type=float, help="metric noise (default 0.05)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("buildb", parents=[common], help="build a signature database")
    p.add_argument("--model", action="append", help="corpus MGF file (repeatable)")
    p.add_argument("--corpus-seeds", type=int, nargs="+")
    p.add_argument("--sigma", type=float)
    p.set_defaults(func=cmd_buildb)

    p = sub.add_parser("attack", parents=[common], help="predict an architecture from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--model", help="ground-truth MGF; adds a fidelity field")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", parents=[common], help="run the trials sweep and report")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = _Config(args.config)
        args.func(args, cfg)
    except (MGFError, TraceFormatError, ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
