"""``chainflow`` command line: data generation, training, evaluation, plots."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import CONFIG_ENV, RunConfig, load_config

log = logging.getLogger("chainflow")


class Outputs:
    """Tracks paths a command creates so a failed run can remove them."""

    def __init__(self):
        self.created: list[Path] = []

    def file(self, path) -> Path:
        p = Path(path)
        if not p.parent.exists():
            self.dir(p.parent)
        if not p.exists():
            self.created.append(p)
        return p

    def dir(self, path) -> Path:
        p = Path(path)
        missing = []
        q = p
        while not q.exists():
            missing.append(q)
            q = q.parent
        for m in reversed(missing):
            m.mkdir()
            self.created.append(m)
        return p

    def cleanup(self) -> None:
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _echo_config(cfg: RunConfig, out: Outputs, where: Path, args) -> None:
    """Resolved config next to the outputs; wall-clock data goes to a sidecar."""
    cfg.dump(out.file(where / "config.yaml"))
    meta = {"command": args.command, "argv": sys.argv[1:], "started": args._started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
    out.file(where / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")


def _sidecar_dir(path: Path, out: Outputs) -> Path:
    d = path.parent / (path.name + ".run")
    return out.dir(d)


def _load_data(path, cfg: RunConfig):
    from .scenario import load_dataset

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset not found: {p}")
    return load_dataset(p, cfg.scenario)


def _need(path, what="checkpoint") -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, cfg: RunConfig, out: Outputs) -> None:
    from .scenario import generate_dataset, save_dataset

    if args.count < 0:
        raise ValueError("--count must be >= 0")
    data = generate_dataset(args.seed, args.count, cfg.scenario)
    path = out.file(args.out)
    save_dataset(data, path, cfg.scenario)
    _echo_config(cfg, out, _sidecar_dir(path, out), args)
    log.info("wrote %d scenarios to %s", len(data), path)


def cmd_train_stage1(args, cfg: RunConfig, out: Outputs) -> None:
    from .model import build_planner
    from .training import train_stage

    data = _load_data(args.data, cfg)
    if not data:
        raise ValueError("training set is empty")
    d = out.dir(args.out)
    planner = build_planner(cfg.planner, cfg.train.seed)
    for name in ("train_log.csv", "stage1.ckpt"):
        out.file(d / name)
    res = train_stage(1, data, planner, cfg.train, d, epochs=args.epochs)
    _echo_config(cfg, out, d, args)
    log.info("stage 1 done in %.0fs, final min-ADE %.3f", res["wall_time"], res["min_ade_train"])


def cmd_train_stage2(args, cfg: RunConfig, out: Outputs) -> None:
    from .model import load_planner, with_flow
    from .training import train_stage

    data = _load_data(args.data, cfg)
    if not data:
        raise ValueError("training set is empty")
    base, _ = load_planner(_need(args.stage1_ckpt))
    planner = with_flow(base, cfg.flow, cfg.train.seed)
    d = out.dir(args.out)
    for name in ("train_log.csv", "stage2.ckpt"):
        out.file(d / name)
    res = train_stage(2, data, planner, cfg.train, d, epochs=args.epochs,
                      ckpt_extra={"stage1": str(args.stage1_ckpt)})
    _echo_config(cfg, out, d, args)
    log.info("stage 2 done in %.0fs", res["wall_time"])


def _checkpoints(args) -> dict:
    ck = {"main": _need(args.ckpt)}
    if args.ckpt_semantic:
        ck["semantic_ctx"] = _need(args.ckpt_semantic)
    if args.ckpt_scene:
        ck["scene_tokens"] = _need(args.ckpt_scene)
    return ck


def cmd_eval(args, cfg: RunConfig, out: Outputs) -> None:
    from .evaluate import evaluate_pipeline

    ck = _checkpoints(args)
    data = _load_data(args.data, cfg)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    rep = evaluate_pipeline(data, ck, arms, n_steps=cfg.eval.n_steps, seed=cfg.eval.seed,
                            batch_size=cfg.eval.batch_size, metric_config=cfg.metrics)
    d = out.dir(args.out)
    rep.write_csv(out.file(d / "report.csv"))
    out.file(d / "summary.txt").write_text(rep.summary() + "\n")
    _echo_config(cfg, out, d, args)
    print(rep.summary())


def cmd_plan(args, cfg: RunConfig, out: Outputs) -> None:
    from .evaluate import plan_scenario
    from .model import load_planner
    from .svg import render_plan

    planner, _ = load_planner(_need(args.ckpt))
    data = _load_data(args.data, cfg)
    match = [s for s in data if s.id == args.scenario_id]
    if not match:
        raise KeyError(f"scenario {args.scenario_id!r} not in {args.data}")
    res = plan_scenario(match[0], planner, refine=not args.no_refine, n_steps=cfg.eval.n_steps,
                        seed=cfg.eval.seed)
    path = out.file(args.svg_out)
    path.write_text(render_plan(match[0], res))
    _echo_config(cfg, out, _sidecar_dir(path, out), args)
    print(f"selected candidate {res.selected}")


def cmd_sweep_steps(args, cfg: RunConfig, out: Outputs) -> None:
    from .evaluate import METRICS, sweep_steps

    try:
        steps = [int(s) for s in args.steps.split(",") if s.strip()]
    except ValueError:
        raise ValueError(f"--steps must be comma-separated integers, got {args.steps!r}") from None
    if not steps:
        raise ValueError("--steps is empty")
    ck = _need(args.ckpt)
    data = _load_data(args.data, cfg)
    rows = sweep_steps(data, ck, steps, seed=cfg.eval.seed, metric_config=cfg.metrics)
    path = out.file(args.out)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["steps", *METRICS], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"steps": r["steps"], **{m: f"{r[m]:.6f}" for m in METRICS}})
    _echo_config(cfg, out, _sidecar_dir(path, out), args)
    for r in rows:
        print(f"steps={r['steps']:>3} pdms={100 * r['pdms']:.2f}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False, formatter_class=fmt)
    common.add_argument("--config", default=None,
                        help=f"YAML/JSON run config (default: ${CONFIG_ENV} if set)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable (e.g. train.epochs_stage1=5)")
    common.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS/OpenMP threads")
    common.add_argument("-v", "--verbose", action="store_true", help="info-level logging")

    ap = argparse.ArgumentParser(prog="chainflow", description=__doc__, formatter_class=fmt)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, parents=[common], help=help, formatter_class=fmt)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic scenario dataset (JSON lines)")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--count", type=int, default=500, help="number of scenarios")
    p.add_argument("--out", required=True, help="output .jsonl path")

    p = add("train-stage1", cmd_train_stage1, "train chain and scorer")
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs_stage1")

    p = add("train-stage2", cmd_train_stage2, "train refiner and scorer on a frozen chain")
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--stage1-ckpt", required=True, help="Stage I checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs_stage2")

    p = add("eval", cmd_eval, "evaluate checkpoints on a dataset")
    p.add_argument("--data", required=True, help="evaluation dataset")
    p.add_argument("--ckpt", required=True, help="main checkpoint (full and ar-only arms)")
    p.add_argument("--ckpt-semantic", default=None, help="checkpoint for cond-semantic")
    p.add_argument("--ckpt-scene", default=None, help="checkpoint for cond-scene")
    p.add_argument("--arms", default="full,ar-only",
                   help="comma list from full, ar-only, cond-semantic, cond-scene")
    p.add_argument("--out", required=True, help="output directory")

    p = add("plan", cmd_plan, "plan one scenario and write an SVG")
    p.add_argument("--data", required=True, help="dataset containing the scenario")
    p.add_argument("--scenario-id", required=True, help="scenario id")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--svg-out", required=True, help="output .svg path")
    p.add_argument("--no-refine", action="store_true", help="select among raw proposals")

    p = add("sweep-steps", cmd_sweep_steps, "evaluate the refined arm over DDIM step counts")
    p.add_argument("--data", required=True, help="evaluation dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--steps", default="2,4,8,12,16", help="comma-separated step counts")
    p.add_argument("--out", required=True, help="output CSV path")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args._started = time.strftime("%Y-%m-%dT%H:%M:%S")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    out = Outputs()
    try:
        cfg = load_config(args.config, args.set)
        if args.threads is not None and args.threads < 1:
            raise ValueError("--threads must be >= 1")
        limit = threadpool_limits(args.threads) if args.threads else nullcontext()
        with limit:
            args.fn(args, cfg, out)
    except Exception as e:  # noqa: BLE001  one-line report, no traceback
        out.cleanup()
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"chainflow: error: {args.command}: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
