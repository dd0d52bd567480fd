"""Train every checkpoint the acceptance suite needs (about 70 min on one core).

Usage: python3 scripts/build_desk_cache.py [CACHE_DIR]
"""

import logging
import sys
from pathlib import Path

from chainflow.desk import ACCEPTANCE_RUNS, stage1, stage2

DEFAULT = Path(__file__).resolve().parents[1] / ".desk_cache"

if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cache = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT
    print("stage1", stage1(cache)["wall_time"], flush=True)
    for run in ACCEPTANCE_RUNS:
        info = stage2(cache, run)
        print(run, "wall", round(info["wall_time"], 1), flush=True)
