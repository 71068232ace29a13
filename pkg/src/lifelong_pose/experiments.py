"""Desk-scale experiment harnesses: the component ablation and the sampling-steps sweep."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig, config_from_dict, desk_scale
from .lifelong import RunResult, run_experiment

ABLATIONS = {
    "full": {},
    "no-DE": {"generator": {"de": False}},
    "no-EMA": {"ablation": {"ema": False}},
    "no-L_dis": {"ablation": {"l_dis": False}},
    "no-L_2D": {"ablation": {"l_2d": False}},
    "no-L_3D": {"ablation": {"l_3d": False}},
}


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    d = cfg.to_dict()
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = copy.deepcopy(v)
    return config_from_dict(d)


@dataclass
class VariantOutcome:
    variant: str
    seed: int
    source_only: dict  # target -> MPJPE of the t=0 estimator
    current_anchor: dict  # target j -> anchor MPJPE on tg_j after phase j
    current_live: dict  # target j -> live MPJPE on tg_j at the end of phase j
    forgetting: dict  # "tg@j" -> F_d(j)
    seconds: float = 0.0
    run_dir: str | None = None

    def improvement(self, domain: str, model: str = "anchor") -> float:
        """Relative MPJPE reduction on ``domain`` after its own phase vs the source-only estimator."""
        cur = (self.current_anchor if model == "anchor" else self.current_live)[domain]
        return (self.source_only[domain] - cur) / self.source_only[domain]


def summarize(variant: str, seed: int, res: RunResult, seconds: float) -> VariantOutcome:
    so = {r.domain: r.mpjpe for r in res.source_only.rows} if any(r.model == "source-only" for r in res.reports) else {}
    anchor, live = {}, {}
    for rep in res.reports:
        if rep.phase > 0 and rep.model == "anchor":
            anchor[rep.rows[-1].domain] = rep.rows[-1].mpjpe
        if rep.phase > 0 and rep.model == "live":
            live[rep.rows[-1].domain] = rep.rows[-1].mpjpe
    fg = {f"{d}@{j}": v for (d, j), v in res.forgetting.items()}
    return VariantOutcome(variant, seed, so, anchor, live, fg, seconds, str(res.run_dir) if res.run_dir else None)


def ablation_study(seeds, variants=("full", "no-DE", "no-EMA"), base: RunConfig | None = None,
                   out: Path | None = None, cache: Path | None = None, progress=None) -> list[VariantOutcome]:
    base = base or desk_scale()
    outcomes = []
    for seed in seeds:
        for name in variants:
            cfg = with_overrides(base, ABLATIONS[name])
            cfg.seed = seed
            t0 = time.time()
            res = run_experiment(cfg, out, force=True, cache=cache, progress=lambda s: None)
            outcomes.append(summarize(name, seed, res, time.time() - t0))
            if progress:
                o = outcomes[-1]
                progress(f"seed {seed} {name:8s} {o.seconds:5.1f}s current {fmt(o.current_anchor)} "
                         f"live {fmt(o.current_live)} forgetting {fmt(o.forgetting)}")
    return outcomes


def fmt(d: dict) -> str:
    return " ".join(f"{k}={v:.1f}" for k, v in d.items())


def forgetting_ordering(outcomes: list[VariantOutcome], key: str, reference="full", others=("no-DE", "no-EMA")):
    """Per seed: does ``reference`` forget no more than each of ``others``?"""
    by = {(o.seed, o.variant): o for o in outcomes}
    seeds = sorted({o.seed for o in outcomes})
    return {s: {v: by[(s, reference)].forgetting[key] <= by[(s, v)].forgetting[key] for v in others} for s in seeds}


def ablation_table(outcomes: list[VariantOutcome]) -> str:
    doms = list(outcomes[0].current_anchor)
    keys = list(outcomes[0].forgetting)
    head = ["variant", "seed"] + [f"src-only {d}" for d in doms] + [f"anchor {d}" for d in doms] + \
           [f"live {d}" for d in doms] + [f"F {k}" for k in keys]
    rows = [head]
    for o in outcomes:
        rows.append([o.variant, str(o.seed)] + [f"{o.source_only.get(d, float('nan')):.1f}" for d in doms] +
                    [f"{o.current_anchor[d]:.1f}" for d in doms] + [f"{o.current_live[d]:.1f}" for d in doms] +
                    [f"{o.forgetting[k]:+.2f}" for k in keys])
    w = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(x) for c, x in zip(r, w)) for r in rows) + "\n"


# ------------------------------------------------------------------------------ sampling-steps sweep


def sweep_steps(T: int) -> list[int]:
    """0 plus T/40, T/20, T/10, T/5, T/2 and T."""
    return [0] + [max(1, round(T * f)) for f in (1 / 40, 1 / 20, 1 / 10, 1 / 5, 1 / 2, 1)]


@dataclass
class SweepRow:
    steps: int
    final: dict  # domain -> (MPJPE, PA-MPJPE) of the final anchor
    avg: tuple
    seconds: float
    live: float = float("nan")  # MPJPE of the final live estimator on the last domain


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def table(self) -> str:
        doms = list(self.rows[0].final)
        head = ["steps"] + doms + ["Avg", "live", "time"]
        lines = [head]
        for r in self.rows:
            lines.append([str(r.steps)] + [f"{r.final[d][0]:.2f}/{r.final[d][1]:.2f}" for d in doms] +
                         [f"{r.avg[0]:.2f}/{r.avg[1]:.2f}", f"{r.live:.2f}", f"{r.seconds:.1f}s"])
        w = [max(len(x[i]) for x in lines) for i in range(len(head))]
        out = ["  ".join(c.rjust(x) for c, x in zip(line, w)) for line in lines]
        return "\n".join([out[0], "  ".join("-" * x for x in w)] + out[1:]) + "\n"

    def records(self) -> str:
        return "".join(json.dumps({"steps": r.steps, "final": r.final, "avg": r.avg, "live": r.live, "seconds": r.seconds},
                                  sort_keys=True) + "\n" for r in self.rows)


def sampling_steps_sweep(cfg: RunConfig, steps=None, cache: Path | None = None, progress=None) -> SweepResult:
    """One lifelong run per number of DDIM steps used to draw the domain-aware prior pool."""
    steps = sweep_steps(cfg.diffusion.T) if steps is None else list(steps)
    result = SweepResult()
    for s in steps:
        run_cfg = with_overrides(cfg, {"diffusion": {"ddim_steps": s}, "generator": {"de": True}})
        t0 = time.time()
        res = run_experiment(run_cfg, cache=cache, progress=lambda m: None)
        final = res.reports[-2] if res.reports[-1].model == "live" else res.reports[-1]
        live = res.reports[-1].rows[0].mpjpe if res.reports[-1].model == "live" else float("nan")
        row = SweepRow(s, {r.domain: (r.mpjpe, r.pa_mpjpe) for r in final.rows},
                       (final.avg_mpjpe, final.avg_pa_mpjpe), time.time() - t0, live)
        result.rows.append(row)
        if progress:
            progress(f"steps {s:4d}: avg {row.avg[0]:.2f}/{row.avg[1]:.2f} mm ({row.seconds:.1f}s)")
    return result
