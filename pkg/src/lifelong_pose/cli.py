"""Command-line entry point: ``lifelong-pose <command> [options]``.

Usage errors exit with status 2, runtime failures with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, desk_scale, load_config
from .data import FormatError, SkeletonHashMismatch, normalize_2d, read_dataset, write_dataset, write_pose_file
from .diffusion import DiffusionSampler, DiffusionSchedule, new_sampler, sampler_pool, train_sampler
from .lifelong import (AccessViolation, AdaptationState, DomainHandle, DomainStream, adapt_phase, build_stream,
                       evaluate_model, format_records, format_table, initial_state, latest_state, load_reports,
                       phase_seed, pretrain_stage, run_experiment)
from .probes import run_probes
from .substrate import load_checkpoint, save_checkpoint

log = logging.getLogger("lifelong_pose")


class CommandError(RuntimeError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else desk_scale()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _out(args, default: str) -> Path:
    return Path(args.out if args.out else default)


def _emit(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(f"wrote {out}")


def cmd_synth(args):
    cfg = _config(args)
    out = _out(args, "data")
    stream = build_stream(cfg)
    prov = {"config_hash": cfg.hash(), "seed": cfg.seed}
    with stream.evaluation():
        for phase, name in enumerate(stream.names):
            stream.enter_phase(phase)
            train = stream.read_train(phase, labels=True) if phase == 0 else stream.handle(phase)._load("train")
            write_dataset(out / f"{name}.train.2d.pose", train, **prov)
            write_dataset(out / f"{name}.eval.2d.pose", stream.read_eval(phase), **prov)
            print(f"{name}: {train.n_frames} train frames -> {out}/{name}.train.2d.pose")
    return 0


def cmd_pretrain(args):
    cfg = _config(args)
    cfg.source.train_file = str(Path(args.source).resolve())
    stream = DomainStream(DomainHandle(cfg.source.name, lambda: read_dataset(args.source)), [])
    anchor, sampler, losses = pretrain_stage(cfg, stream, progress=print)
    state = initial_state(cfg, anchor, sampler)
    out = _out(args, "pretrained")
    state.save(out, config_hash=cfg.hash(), seed=cfg.seed, pretrain_losses=losses)
    (out / "COMPLETE").write_text("")
    print(f"wrote {out}")
    return 0


def cmd_adapt(args):
    cfg = _config(args)
    state = latest_state(args.state)
    target = read_dataset(args.target, with_labels=False)
    handles = [DomainHandle(f"previous-{k}", lambda: None) for k in range(state.phase)]
    stream = DomainStream(DomainHandle("source", lambda: None), handles + [DomainHandle(target.name, lambda: target)])
    new = adapt_phase(state, stream, cfg, state.phase + 1, progress=print)
    out = _out(args, f"phase_{new.phase:02d}")
    new.save(out, config_hash=cfg.hash(), seed=cfg.seed)
    (out / "COMPLETE").write_text("")
    print(f"wrote {out}")
    return 0


def cmd_run(args):
    cfg = _config(args)
    base = Path(args.config).resolve().parent if args.config else None
    res = run_experiment(cfg, _out(args, "runs"), force=args.force, base_dir=base, progress=print)
    sys.stdout.write(format_table(res.reports))
    for (dom, phase), f in sorted(res.forgetting.items()):
        print(f"forgetting {dom} at phase {phase}: {f:+.2f} mm")
    print(f"run directory: {res.run_dir}")
    return 0


def cmd_eval(args):
    state = latest_state(args.state)
    sets = [read_dataset(p) for p in args.domains]
    model = state.live if args.model == "live" else state.anchor
    if model is None:
        raise CommandError("state holds no live model")
    seed = args.seed if args.seed is not None else 0
    rep = evaluate_model(model, sets, state.phase, args.model, seed=seed)
    _emit(format_table([rep]) if args.format == "table" else format_records([rep]),
          Path(args.out) if args.out else None)
    return 0


def cmd_report(args):
    reps = load_reports(args.state)
    if not reps:
        raise CommandError(f"no reports under {args.state}")
    _emit(format_table(reps) if args.format == "table" else format_records(reps), Path(args.out) if args.out else None)
    return 0


def cmd_diffuse_train(args):
    cfg = _config(args)
    d = cfg.diffusion
    ds = read_dataset(args.data, with_labels=False)
    poses = normalize_2d(ds.frames2d(), ds.camera)
    seed = cfg.seed if args.seed is None else args.seed
    if args.init:
        init = DiffusionSampler.load(args.init)
    else:
        init = new_sampler(poses, phase_seed(seed, 0), DiffusionSchedule(d.T, d.beta_start, d.beta_end),
                           d.hidden, d.depth)
    sampler = train_sampler(poses, init, d.epochs, d.lr, d.batch_size, seed)
    out = _out(args, "sampler")
    sampler.save(out, config_hash=cfg.hash(), seed=seed)
    print(f"final loss {sampler.losses[-1] if sampler.losses else float('nan'):.5f}; wrote {out}")
    return 0


def cmd_diffuse_sample(args):
    cfg = _config(args)
    d = cfg.diffusion
    sampler = DiffusionSampler.load(args.sampler)
    steps = d.ddim_steps if args.steps is None else args.steps
    seed = cfg.seed if args.seed is None else args.seed
    eta = d.ddim_eta if args.eta is None else args.eta
    z = sampler_pool(sampler, args.n, steps, eta, seed, d.truncated).numpy()
    cam = cfg.camera
    px = np.stack([z[..., 0] * cam.fx + cam.cx, z[..., 1] * cam.fy + cam.cy], axis=-1)
    out = _out(args, "samples.2d.pose")
    write_pose_file(out, [px], dims=2, units="px", domain="diffusion-samples", camera=vars(cam),
                    config_hash=cfg.hash(), seed=seed, steps=steps)
    print(f"wrote {len(px)} samples to {out}")
    return 0


def cmd_check(args):
    results = run_probes()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} probes passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (YAML); defaults to the desk-scale preset")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lifelong-pose", description="Lifelong domain-adaptive 2D-to-3D pose lifting")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic source/target pose files")
    s.set_defaults(fn=cmd_synth)
    s = sub.add_parser("pretrain", parents=[common], help="supervised source pretraining")
    s.add_argument("--source", required=True, help="labelled source 2D pose file")
    s.set_defaults(fn=cmd_pretrain)
    s = sub.add_parser("adapt", parents=[common], help="one adaptation phase on an unlabelled target")
    s.add_argument("--state", required=True)
    s.add_argument("--target", required=True)
    s.set_defaults(fn=cmd_adapt)
    s = sub.add_parser("run", parents=[common], help="full lifelong experiment")
    s.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    s.set_defaults(fn=cmd_run)
    s = sub.add_parser("eval", parents=[common], help="evaluate a state on labelled pose files")
    s.add_argument("--state", required=True)
    s.add_argument("--domains", nargs="+", required=True)
    s.add_argument("--model", choices=("anchor", "live"), default="anchor")
    s.add_argument("--format", choices=("table", "records"), default="table")
    s.set_defaults(fn=cmd_eval)
    s = sub.add_parser("report", parents=[common], help="print the reports of a run directory")
    s.add_argument("--state", required=True)
    s.add_argument("--format", choices=("table", "records"), default="table")
    s.set_defaults(fn=cmd_report)
    s = sub.add_parser("diffuse-train", parents=[common], help="train a 2D pose diffusion sampler")
    s.add_argument("--domain", "--data", dest="data", required=True, help="2D pose file of the domain")
    s.add_argument("--init", help="sampler checkpoint to continue from")
    s.set_defaults(fn=cmd_diffuse_train)
    s = sub.add_parser("diffuse-sample", parents=[common], help="draw 2D poses from a sampler")
    s.add_argument("--ckpt", "--sampler", dest="sampler", required=True, help="sampler checkpoint")
    s.add_argument("--n", type=int, default=256)
    s.add_argument("--steps", type=int)
    s.add_argument("--eta", type=float)
    s.set_defaults(fn=cmd_diffuse_sample)
    s = sub.add_parser("check", parents=[common], help="run the invariant probe suite")
    s.set_defaults(fn=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FormatError, SkeletonHashMismatch, AccessViolation, CommandError, FileExistsError,
            FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
