"""Command-line entry point: ``moving-hw <scenario> --config PATH``."""

from __future__ import annotations

import argparse
import os
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from moving_hw.config import SCENARIOS
from moving_hw.context import Context
from moving_hw.graph import RECURSION_LIMIT, create_graph, tracing_callbacks
from moving_hw.opik_logger import status

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILED = 2


def build_parser() -> argparse.ArgumentParser:
    """Create the argument parser with one subcommand per scenario."""
    parser = argparse.ArgumentParser(prog="moving-hw", description="Helmholtz-Weyl decomposition and periodic Navier-Stokes on moving domains.")
    sub = parser.add_subparsers(dest="scenario", required=True)
    for name in SCENARIOS:
        cmd = sub.add_parser(name, help=f"run the {name} scenario")
        cmd.add_argument("--config", required=True, type=Path, help="scenario file (key = value lines)")
        cmd.add_argument("--seed", type=int, default=None, help="seed of the random probes")
        cmd.add_argument("--out", type=str, default=None, help="output directory, overrides output.dir")
        cmd.add_argument("--strict", action="store_true", help="fail when the decomposition input is not solenoidal")
    return parser


def exit_status(state: dict[str, Any]) -> int:
    """Map a final pipeline state to the process exit status."""
    if state.get("config_error"):
        return EXIT_CONFIG
    if state.get("error") is not None:
        return EXIT_FAILED
    return EXIT_OK


def run_scenario(config_path: str | Path, scenario: str, context: Context) -> tuple[int, dict[str, Any]]:
    """Run one scenario file through the pipeline.

    The subcommand decides the scenario; a different ``scenario`` line in the
    file is replaced.

    Returns:
        Exit status and the final state.
    """
    if context.opik_tracing:
        os.environ["OPIK_TRACING"] = "true"

    text = Path(config_path).read_text(encoding="utf-8")
    lines = [line for line in text.splitlines() if line.split("#", 1)[0].split("=", 1)[0].strip() != "scenario"]
    config_text = "\n".join([f"scenario = {scenario}", *lines])
    runner = create_graph().with_config({"callbacks": tracing_callbacks(), "recursion_limit": RECURSION_LIMIT})
    state = runner.invoke({"config_text": config_text, "config_path": str(config_path)}, context=context)
    return exit_status(state), state


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, run the scenario and return the exit status."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    overrides: dict[str, Any] = {"strict": args.strict} if args.strict else {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    context = Context(**overrides)
    try:
        code, _ = run_scenario(args.config, args.scenario, context)
    except OSError as e:
        status("❌", f"cannot read {args.config}: {e}")
        return EXIT_CONFIG
    return code


if __name__ == "__main__":
    raise SystemExit(main())
