"""Sweep the number of DDIM steps used to draw the domain-aware prior pool.

    python scripts/sampling_steps_sweep.py            # desk scale, steps 0, T/40, ..., T
    python scripts/sampling_steps_sweep.py --tiny     # seconds-scale smoke run
"""

import argparse
from pathlib import Path

from lifelong_pose.config import desk_scale, load_config, tiny
from lifelong_pose.experiments import sampling_steps_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--tiny", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, nargs="+", help="explicit step counts")
    p.add_argument("--out", default="runs/sweep")
    args = p.parse_args()

    cfg = load_config(args.config) if args.config else (tiny() if args.tiny else desk_scale())
    cfg.seed = args.seed
    out = Path(args.out)
    res = sampling_steps_sweep(cfg, args.steps, cache=out / "cache", progress=print)
    print()
    print(res.table())
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.txt").write_text(res.table())
    (out / "sweep.jsonl").write_text(res.records())


if __name__ == "__main__":
    main()
