"""``recupfl`` command line.

Exit status: 0 on success, 1 for configuration or usage errors, 2 for
failures while running. ``RECUP_THREADS`` caps how many seeds run at once
(0 or unset runs them sequentially).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from recupfl.attacks import to_csv_grid, to_pgm
from recupfl.errors import ConfigError
from recupfl.fl import run_rounds, save_checkpoint
from recupfl.harness import experiment as ex
from recupfl.harness.config import ExperimentConfig, load_config
from recupfl.harness.plot import Axes, emit_plot
from recupfl.harness.results import (
    ConvergenceRow,
    TradeoffPoint,
    write_convergence,
    write_points,
)
from recupfl.models import serialize_zoo

COMMANDS = {
    "train-zoo": "train defender zoos at the initial weights and save them as .zoo.json",
    "run-fl": "run undefended federated training and save the per-round test loss",
    "sweep": "utility-privacy trade-off sweep over every configured defense",
    "reconstruct": "gradient-inversion attack on one record, with and without RecUP",
    "convergence": "per-round test loss with RecUP always on, per participation ratio",
    "ablate-variants": "RecUP against single-shot FGSM variants",
    "zoo-size": "RecUP with nested zoos of increasing size",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit with status 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="recupfl", description="Federated-learning privacy defense experiments.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
        p.add_argument("--out", help="output directory (default: the config's [experiment] out)")
        p.add_argument("--timing", action="store_true", help="also write elapsed wall-clock seconds to timing.json")
        if name == "zoo-size":
            p.add_argument("--sizes", type=int, nargs="+", help="zoo sizes (default: [zoo_study] sizes)")
    return parser


def _errors_log(points: Sequence[TradeoffPoint], out: Path, messages: list[str]) -> None:
    if messages:
        (out / "errors.log").write_text("".join(m + "\n" for m in messages), encoding="utf-8")


def _plots(points: Sequence[TradeoffPoint], out: Path, stem: str) -> None:
    usable = [p for p in points if not p.is_error]
    for adv in sorted({p.adversary for p in usable}):
        for t in sorted({p.round for p in usable}):
            sel = [p for p in usable if p.adversary == adv and p.round == t]
            if sel:
                emit_plot(sel, out / f"{stem}-{adv.replace('@', '-')}-r{t}.svg", Axes(adv, t, f"{adv}, round {t}"))


def _trade_off(cfg: ExperimentConfig, out: Path, stem: str, runner) -> None:
    messages: list[str] = []
    points = runner(cfg, log=messages.append)
    write_points(points, out / f"{stem}.csv")
    _errors_log(points, out, messages)
    _plots(points, out, stem)


def cmd_train_zoo(cfg, out, args):
    for seed in cfg.seeds:
        scn = ex.build_scenario(cfg, seed)
        for spec in ex.protected_attributes(cfg, scn):
            path = out / f"zoo-{spec.id}-seed{seed}.zoo.json"
            path.write_bytes(serialize_zoo(scn.zoo(spec.id)))


def cmd_run_fl(cfg, out, args):
    rows = []
    for seed in cfg.seeds:
        scn = ex.build_scenario(cfg, seed)
        state, records = run_rounds(scn.fl, scn.spec, scn.clients, scn.test)
        rows += [ConvergenceRow("none", scn.fl.participation_ratio, r.round, r.test_loss, seed) for r in records]
        save_checkpoint(state, scn.spec, out / f"model-seed{seed}.json")
    write_convergence(rows, out / "run_fl.csv")


def cmd_reconstruct(cfg, out, args):
    outcomes = ex.run_reconstruction(cfg)
    points = [TradeoffPoint(o.defense, o.param, 1, "reconstruction", None, o.loss, o.mse, o.seed) for o in outcomes]
    write_points(points, out / "reconstruct.csv")
    shape = cfg.reconstruction.image_shape
    for o in outcomes:
        stem = out / f"recon-{o.defense}-seed{o.seed}"
        grid = shape if shape and len(shape) == 2 else (1, o.x_hat.size)
        Path(f"{stem}.csv").write_text(to_csv_grid(o.x_hat, grid), encoding="utf-8")
        if shape and len(shape) == 2:
            Path(f"{stem}.pgm").write_bytes(to_pgm(o.x_hat, grid))


def cmd_convergence(cfg, out, args):
    write_convergence(ex.run_convergence(cfg), out / "convergence.csv")


def cmd_zoo_size(cfg, out, args):
    if args.sizes:
        cfg = replace(cfg, zoo_study=replace(cfg.zoo_study, sizes=tuple(args.sizes)))
    _trade_off(cfg, out, "zoo_size", ex.run_zoo_size_study)


HANDLERS = {
    "train-zoo": cmd_train_zoo,
    "run-fl": cmd_run_fl,
    "sweep": lambda cfg, out, args: _trade_off(cfg, out, "sweep", ex.run_sweep),
    "reconstruct": cmd_reconstruct,
    "convergence": cmd_convergence,
    "ablate-variants": lambda cfg, out, args: _trade_off(cfg, out, "ablation", ex.run_variant_ablation),
    "zoo-size": cmd_zoo_size,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help (0) or usage error (1)
        return int(exc.code or 0)
    start = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seeds([args.seed])
        out = Path(args.out if args.out is not None else cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"recupfl: configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to status 2
        print(f"recupfl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    if args.timing:
        elapsed = time.perf_counter() - start
        (out / "timing.json").write_text(json.dumps({"command": args.command, "seconds": round(elapsed, 3)}) + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
