"""Command line entry point: ``hetpar --config PATH --mode {parity,dispatch,traffic,trace}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from hetpar import simnet
from hetpar.config import ConfigError, ExperimentConfig, ParseError, ValidationError, parse_config, validate
from hetpar.oracle import oracle_step, parity_compare
from hetpar.sched import ScheduleError, render_dispatch, render_phase_plan, validate_dispatch
from hetpar.tinymodel.engine import DistributedTrainer
from hetpar.tinymodel.model import dump_params, init_params, make_batch

log = logging.getLogger("hetpar")

EXIT_OK = 0
EXIT_PARSE = 3
EXIT_VALIDATION = 4
EXIT_PARITY = 5
EXIT_DEADLOCK = 6

MODES = ("parity", "dispatch", "traffic", "trace")


@dataclass
class Report:
    text: str
    exit_code: int = EXIT_OK
    checkpoint: str = ""  # assembled parameters after the run, as dump_params text


def render_traffic(ledger: simnet.TrafficLedger) -> str:
    """One section per label, sorted by label, listing each direction's counts."""
    by_label: dict[str, list[tuple[str, simnet.LedgerEntry]]] = {}
    for (label, direction), entry in sorted(ledger.entries.items()):
        by_label.setdefault(label, []).append((direction or "-", entry))
    lines = []
    for label, rows in by_label.items():
        lines.append(f"[{label}]")
        for direction, entry in rows:
            lines.append(f"  {direction:<4} messages={entry.messages} bytes={entry.nbytes}")
    total = ledger.total()
    lines.append(f"total messages={total.messages} bytes={total.nbytes}")
    return "\n".join(lines) + "\n"


def build_trainer(cfg: ExperimentConfig, fabric: simnet.Fabric | None = None) -> DistributedTrainer:
    batch = make_batch(cfg.model, cfg.run.global_batch, cfg.run.seed)
    return DistributedTrainer(
        cfg.model,
        cfg.layouts,
        batch,
        cfg.run.num_microbatches,
        seed=cfg.run.seed,
        trainable=cfg.run.trainable,
        fabric=fabric,
    )


def run_experiment(cfg: ExperimentConfig, mode: str) -> Report:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    try:
        trainer = build_trainer(cfg)
    except ScheduleError as exc:
        return Report(f"sched: {exc}\n", EXIT_VALIDATION)

    if mode == "dispatch":
        if trainer.phase_plan is not None:
            text = render_phase_plan(trainer.phase_plan)
            violations = validate_dispatch(trainer.phase_plan, trainer.graph)
        else:
            text = render_dispatch(trainer.table)
            violations = validate_dispatch(trainer.table, trainer.graph)
        text += "".join(f"violation {v}\n" for v in violations)
        return Report(text, EXIT_VALIDATION if violations else EXIT_OK)

    if mode == "parity":
        params = init_params(cfg.model, cfg.run.seed)
        lines, ok, last = [], True, None
        for step in range(cfg.run.steps):
            dist = trainer.step()
            ref = oracle_step(cfg.model, params, trainer.batch, cfg.run.num_microbatches, cfg.run.trainable)
            params = ref.params
            last = parity_compare(dist, ref, cfg.run.tolerance)
            ok = ok and last.passed
            status = "PASS" if last.passed else "FAIL"
            lines.append(f"step {step}: loss {dist.loss:.12e} max deviation {last.max_deviation:.3e} {status}")
        text = "\n".join(lines) + "\n" + last.render() + last.structured()
        return Report(text, EXIT_OK if ok else EXIT_PARITY, dump_params(trainer.assembled_params()))

    steps = 1 if mode == "traffic" else cfg.run.steps
    for _ in range(steps):
        trainer.step()
    checkpoint = dump_params(trainer.assembled_params())
    if mode == "traffic":
        return Report(render_traffic(trainer.fabric.ledger_snapshot()), checkpoint=checkpoint)
    return Report(trainer.fabric.trace_export(), checkpoint=checkpoint)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetpar", description=__doc__)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--steps", type=int, help="override run.steps")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--tolerance", type=float, help="override run.tolerance")
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")
    p.add_argument("--checkpoint", type=Path, help="write assembled parameters after the run here")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = parse_config(args.config.read_text())
        overrides = {k: getattr(args, k) for k in ("steps", "seed", "tolerance") if getattr(args, k) is not None}
        if overrides:
            cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, **overrides))
            validate(cfg)
    except OSError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ParseError as exc:
        print(f"config: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ValidationError, ConfigError) as exc:
        print(f"config: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        report = run_experiment(cfg, args.mode)
    except simnet.Deadlock as exc:
        print(f"simnet: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    if args.checkpoint and report.checkpoint:
        args.checkpoint.write_text(report.checkpoint)
    if args.out:
        args.out.write_text(report.text)
    else:
        sys.stdout.write(report.text)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
