"""Desk-scale end-to-end run: data, Stage I, Stage II, evaluation.

Usage: python3 scripts/desk_run.py OUT_DIR [--epochs1 N] [--epochs2 N] [--space residual]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from chainflow.desk import TEST_SEED, TRAIN_SEED
from chainflow.evaluate import evaluate_pipeline
from chainflow.flow import FlowConfig
from chainflow.model import PlannerConfig, build_planner, load_planner, with_flow
from chainflow.scenario import generate_dataset
from chainflow.training import TrainConfig, train_stage


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--train", type=int, default=500)
    ap.add_argument("--test", type=int, default=100)
    ap.add_argument("--epochs1", type=int, default=25)
    ap.add_argument("--epochs2", type=int, default=40)
    ap.add_argument("--space", default="residual")
    ap.add_argument("--cond", default="semantic_ctx")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr2", type=float, default=None, help="Stage II base lr override")
    ap.add_argument("--stage1", help="reuse an existing Stage I checkpoint")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(a.out)
    train = generate_dataset(TRAIN_SEED, a.train)
    test = generate_dataset(TEST_SEED, a.test)
    tc = TrainConfig(seed=a.seed)
    if a.lr2 is not None:
        tc = TrainConfig(seed=a.seed, base_lr_stage2=a.lr2)
    if a.stage1:
        planner = with_flow(load_planner(a.stage1)[0],
                            FlowConfig(space=a.space, conditioning_source=a.cond), a.seed)
    else:
        planner = build_planner(PlannerConfig(flow=FlowConfig(space=a.space, conditioning_source=a.cond)), a.seed)
        t = time.time()
        train_stage(1, train, planner, tc, out, epochs=a.epochs1)
        print("stage1 wall", time.time() - t)
    ar = evaluate_pipeline(test, planner, ("ar-only",))
    print(ar.summary())
    t = time.time()
    train_stage(2, train, planner, tc, out, epochs=a.epochs2)
    print("stage2 wall", time.time() - t)
    rep = evaluate_pipeline(test, planner, ("full", "ar-only"))
    print(rep.summary())
    (out / "summary.json").write_text(json.dumps({arm: rep.aggregates(arm) for arm in rep.arms()}))


if __name__ == "__main__":
    main()
