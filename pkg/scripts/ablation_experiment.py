"""Component ablation at desk scale: full vs no-DE vs no-EMA (plus optional loss ablations).

    python scripts/ablation_experiment.py --seeds 0 1 2 --out runs/ablation
"""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from lifelong_pose.config import desk_scale, load_config
from lifelong_pose.experiments import ABLATIONS, ablation_study, ablation_table, forgetting_ordering


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="base configuration (defaults to the desk-scale preset)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", default=["full", "no-DE", "no-EMA"], choices=list(ABLATIONS))
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()

    base = load_config(args.config) if args.config else desk_scale()
    out = Path(args.out)
    outcomes = ablation_study(args.seeds, args.variants, base, out=out, cache=out / "cache", progress=print)
    table = ablation_table(outcomes)
    print()
    print(table)
    key = next(iter(outcomes[0].forgetting), None)
    if key and {"full", "no-DE", "no-EMA"} <= set(args.variants):
        print(f"full forgets no more than the ablations ({key}):", forgetting_ordering(outcomes, key))
    (out / "ablation.txt").write_text(table)
    (out / "ablation.json").write_text(json.dumps([asdict(o) for o in outcomes], indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
