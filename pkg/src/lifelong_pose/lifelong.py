"""Sequential adaptation over a stream of unlabelled target domains.

Phase 0 pretrains the estimator on the labelled source.  Phase j adapts a live
copy of the anchor to target j with the generator/critic game, then hands the
result to the next phase through the parameter EMA.  The diffusion sampler
trained on target j is first consumed in phase j + 1.
"""

from __future__ import annotations

import contextlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import DomainConfig, RunConfig
from .data import PoseDataset, SynthDomainSpec, normalize_2d, padded_windows, read_dataset, synth_domain
from .diffusion import DiffusionSampler, DiffusionSchedule, new_sampler, sampler_pool, train_sampler
from .generators import GeneratorBundle, augment
from .lifter import MM_PER_UNIT, LiftingModel, new_lifter, predict_sequences, pretrain_source
from .losses import Discriminator, LossWeights, loss_2d, loss_3d, loss_dis
from .skeleton import Camera, mpjpe, pa_mpjpe
from .substrate import (DTYPE, NonFiniteLoss, apply_gradients, ema_update, load_checkpoint, make_generator,
                        make_optimizer, save_checkpoint)

log = logging.getLogger("lifelong_pose")


class AccessViolation(PermissionError):
    pass


class MissingLabels(ValueError):
    pass


class RunExists(FileExistsError):
    pass


def phase_seed(seed: int, phase: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(phase)]).generate_state(1)[0])


# ------------------------------------------------------------------------------ data access


class DomainHandle:
    """Lazily materialised train/eval splits of one domain."""

    def __init__(self, name: str, train_loader, eval_loader=None):
        self.name = name
        self._loaders = {"train": train_loader, "eval": eval_loader}
        self._cache: dict[str, PoseDataset] = {}

    def _load(self, split: str) -> PoseDataset:
        if split not in self._cache:
            loader = self._loaders.get(split)
            if loader is None:
                raise MissingLabels(f"domain {self.name} has no {split} split")
            self._cache[split] = loader()
        return self._cache[split]


class DomainStream:
    """Source plus ordered targets; during phase j only that phase's training split may be read.

    Phase 0 is source pretraining.  Evaluation splits are readable inside
    ``evaluation()``; they are used for metrics only.
    """

    def __init__(self, source: DomainHandle, targets: list[DomainHandle]):
        self.source = source
        self.targets = list(targets)
        self.phase = 0
        self._eval_depth = 0
        self.audit: list[tuple[int, str, str]] = []

    @property
    def names(self) -> list[str]:
        return [self.source.name] + [t.name for t in self.targets]

    def handle(self, phase: int) -> DomainHandle:
        if not 0 <= phase <= len(self.targets):
            raise IndexError(f"no domain for phase {phase}")
        return self.source if phase == 0 else self.targets[phase - 1]

    def enter_phase(self, phase: int) -> None:
        self.handle(phase)
        self.phase = phase

    @contextlib.contextmanager
    def evaluation(self):
        self._eval_depth += 1
        try:
            yield self
        finally:
            self._eval_depth -= 1

    def read_train(self, phase: int, labels: bool = False) -> PoseDataset:
        if phase != self.phase:
            raise AccessViolation(f"phase {self.phase} may not read training data of domain "
                                  f"{self.handle(phase).name!r} (phase {phase})")
        ds = self.handle(phase)._load("train")
        self.audit.append((self.phase, self.handle(phase).name, "train"))
        if labels and phase != 0:
            raise AccessViolation("target labels are not available during adaptation")
        return ds if labels else ds.without_labels()

    def read_eval(self, phase: int) -> PoseDataset:
        if self._eval_depth == 0:
            raise AccessViolation("evaluation splits are only readable in evaluation mode")
        self.audit.append((self.phase, self.handle(phase).name, "eval"))
        return self.handle(phase)._load("eval")


def domain_handle(dom: DomainConfig, cam: Camera, frames: int, base_dir: Path | None = None) -> DomainHandle:
    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() or base_dir is None else base_dir / p

    spec = SynthDomainSpec(dom.name, dom.seed, dom.scale, tuple(dom.yaw_deg), tuple(dom.pitch_deg), dom.noise_px,
                           dict(dom.mixture), cam, dom.seq_len)
    if dom.train_file:
        train = lambda: read_dataset(resolve(dom.train_file))
    else:
        train = lambda: synth_domain(spec, dom.n_clips, frames, "train")
    if dom.eval_file:
        evaluate = lambda: read_dataset(resolve(dom.eval_file))
    else:
        evaluate = lambda: synth_domain(spec, dom.eval_clips, frames, "eval")
    return DomainHandle(dom.name, train, evaluate)


def build_stream(cfg: RunConfig, base_dir: Path | None = None) -> DomainStream:
    cam = Camera(**vars(cfg.camera))
    frames = cfg.model.frames
    return DomainStream(domain_handle(cfg.source, cam, frames, base_dir),
                        [domain_handle(t, cam, frames, base_dir) for t in cfg.targets])


# ------------------------------------------------------------------------------ reports


@dataclass
class DomainMetrics:
    domain: str
    mpjpe: float
    pa_mpjpe: float


@dataclass
class EvaluationReport:
    phase: int
    model: str
    rows: list[DomainMetrics]
    config_hash: str = ""
    seed: int = 0

    @property
    def avg_mpjpe(self) -> float:
        return float(np.mean([r.mpjpe for r in self.rows])) if self.rows else float("nan")

    @property
    def avg_pa_mpjpe(self) -> float:
        return float(np.mean([r.pa_mpjpe for r in self.rows])) if self.rows else float("nan")

    def get(self, domain: str) -> DomainMetrics:
        for r in self.rows:
            if r.domain == domain:
                return r
        raise KeyError(domain)

    def to_dict(self) -> dict:
        return {"phase": self.phase, "model": self.model, "config_hash": self.config_hash, "seed": self.seed,
                "rows": [vars(r) for r in self.rows], "avg_mpjpe": self.avg_mpjpe, "avg_pa_mpjpe": self.avg_pa_mpjpe}

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(d["phase"], d["model"], [DomainMetrics(**r) for r in d["rows"]], d.get("config_hash", ""),
                   d.get("seed", 0))


def evaluate_model(model: LiftingModel, datasets: list[PoseDataset], phase: int, label: str,
                   config_hash: str = "", seed: int = 0) -> EvaluationReport:
    rows = []
    for ds in datasets:
        if ds.pose3d is None:
            raise MissingLabels(f"domain {ds.name} has no 3D ground truth")
        pred = np.concatenate(predict_sequences(model, ds.pose2d, ds.camera))
        gt = ds.frames3d()
        rows.append(DomainMetrics(ds.name, mpjpe(pred, gt), pa_mpjpe(pred, gt)))
    return EvaluationReport(phase, label, rows, config_hash, seed)


def evaluate_predictions(preds: dict[str, np.ndarray], gts: dict[str, np.ndarray], phase=0, label="probe") -> EvaluationReport:
    rows = [DomainMetrics(k, mpjpe(preds[k], gts[k]), pa_mpjpe(preds[k], gts[k])) for k in preds]
    return EvaluationReport(phase, label, rows)


def forgetting(series: list[EvaluationReport]) -> dict[tuple[str, int], float]:
    """F_d(j) = MPJPE_d(phase j) - MPJPE_d(phase d) for every past domain d < j (anchor reports)."""
    by_phase = {r.phase: r for r in series if r.model == "anchor" and r.phase > 0}
    names = {p: r.rows[-1].domain for p, r in by_phase.items()}
    out = {}
    for j, rep in sorted(by_phase.items()):
        for d in range(1, j):
            name = names[d]
            out[(name, j)] = rep.get(name).mpjpe - by_phase[d].get(name).mpjpe
    return out


def format_table(series: list[EvaluationReport]) -> str:
    """Aligned text table: one row per report, ``MPJPE/PA-MPJPE`` cells per domain plus the average."""
    domains: list[str] = []
    for rep in series:
        for r in rep.rows:
            if r.domain not in domains:
                domains.append(r.domain)
    header = ["t", "model"] + domains + ["Avg"]
    lines = [header]
    for rep in series:
        cells = [str(rep.phase), rep.model]
        for d in domains:
            try:
                r = rep.get(d)
                cells.append(f"{r.mpjpe:.1f}/{r.pa_mpjpe:.1f}")
            except KeyError:
                cells.append("-")
        cells.append(f"{rep.avg_mpjpe:.1f}/{rep.avg_pa_mpjpe:.1f}")
        lines.append(cells)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.rjust(w) if i > 1 else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
    out = [fmt(lines[0]), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines[1:]]
    return "\n".join(out) + "\n"


def format_records(series: list[EvaluationReport]) -> str:
    recs = []
    for rep in series:
        for r in rep.rows:
            recs.append({"phase": rep.phase, "model": rep.model, "domain": r.domain, "mpjpe": r.mpjpe,
                         "pa_mpjpe": r.pa_mpjpe, "config_hash": rep.config_hash, "seed": rep.seed})
        recs.append({"phase": rep.phase, "model": rep.model, "domain": "Avg", "mpjpe": rep.avg_mpjpe,
                     "pa_mpjpe": rep.avg_pa_mpjpe, "config_hash": rep.config_hash, "seed": rep.seed})
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in recs)


# ------------------------------------------------------------------------------ state


@dataclass
class AdaptationState:
    phase: int
    anchor: LiftingModel
    generators: GeneratorBundle
    discriminator: Discriminator
    sampler: DiffusionSampler  # trained through the completed phase
    live: LiftingModel | None = None
    log: list = field(default_factory=list)

    def hash(self) -> str:
        import hashlib
        parts = [self.anchor.param_hash(), self.generators.param_hash(), self.discriminator.param_hash(),
                 self.sampler.predictor.param_hash()]
        return hashlib.sha256(("|".join(parts) + f"|{self.phase}").encode()).hexdigest()[:16]

    def save(self, path, **manifest) -> Path:
        path = Path(path)
        models = {"anchor": self.anchor, "generators": self.generators, "discriminator": self.discriminator}
        if self.live is not None:
            models["live"] = self.live
        save_checkpoint(path, models, phase=self.phase, log=self.log, state_hash=self.hash(), **manifest)
        self.sampler.save(path / "sampler", **manifest)
        return path

    @classmethod
    def load(cls, path) -> "AdaptationState":
        path = Path(path)
        models, man = load_checkpoint(path)
        return cls(man["phase"], models["anchor"], models["generators"], models["discriminator"],
                   DiffusionSampler.load(path / "sampler"), models.get("live"), list(man.get("log", [])))


def initial_state(cfg: RunConfig, anchor: LiftingModel, sampler: DiffusionSampler) -> AdaptationState:
    g = cfg.generator
    seed = phase_seed(cfg.seed, 1000)
    gens = GeneratorBundle(embed_dim=g.embed_dim, segment_dim=g.segment_dim, hidden=g.hidden,
                           activation=g.activation, gen=make_generator(seed))
    disc = Discriminator(hidden=tuple(cfg.model.disc_hidden), gen=make_generator(seed + 1))
    return AdaptationState(0, anchor, gens, disc, sampler)


def _project_t(pose_m, offset_m: float):
    """Pinhole projection to normalised image coordinates of root-relative metre poses."""
    return pose_m[..., :2] / (pose_m[..., 2:3] + offset_m)


def adapt_phase(state: AdaptationState, stream: DomainStream, cfg: RunConfig, phase: int,
                progress=None, step_log=None) -> AdaptationState:
    """One adaptation phase on target ``phase`` of ``stream``; returns the post-phase state.

    ``step_log`` receives one record per optimisation step and loss.
    """
    if phase != state.phase + 1:
        raise ValueError(f"state is at phase {state.phase}; cannot run phase {phase}")
    stream.enter_phase(phase)
    ds = stream.read_train(phase)
    t, g, d, ab = cfg.train, cfg.generator, cfg.diffusion, cfg.ablation
    src_cam = Camera(**vars(cfg.camera))
    offset = src_cam.subject_depth_offset / MM_PER_UNIT
    weights = LossWeights(t.alpha, t.beta, t.gamma, t.penalty_mode, t.swap_critic_sign)
    crit_sign = {"literal": 1.0, "adversarial": -1.0, "off": 0.0}[t.estimator_critic]
    seed = phase_seed(cfg.seed, phase)
    gen = make_generator(seed)

    frames, te = cfg.model.frames, g.te_frames if g.te else 1
    half_te = te // 2
    norm = [normalize_2d(s, ds.camera) for s in ds.pose2d]
    stacked, index = padded_windows(norm, frames // 2 + half_te)
    stacked = torch.as_tensor(stacked, dtype=DTYPE)
    n = len(index)

    live = state.anchor.clone()
    gens = state.generators.clone()
    disc = state.discriminator.clone()
    p_params = list(live.parameters())
    g_params = list(gens.parameters())
    d_params = list(disc.parameters())
    opt_p = make_optimizer("adamw", p_params, t.lr_estimator, weight_decay=t.weight_decay)
    opt_g = make_optimizer("adam", g_params, t.lr_gen_dis)
    opt_d = make_optimizer("adam", d_params, t.lr_gen_dis)

    pool = None
    if g.de:
        pool = sampler_pool(state.sampler, d.pool_size, d.ddim_steps, d.ddim_eta, seed + 1, d.truncated)

    # theta_j: independent of the adaptation game, trained from theta_{j-1} on this domain's 2D poses
    sampler = train_sampler(np.concatenate(norm), state.sampler, d.epochs, d.lr, d.batch_size, seed + 2)

    history = []
    step = 0
    for epoch in range(t.epochs_adapt):
        perm = torch.randperm(n, generator=gen)
        sums = np.zeros(2)
        for start in range(0, n, t.batch_size):
            idx = perm[start : start + t.batch_size]
            b = len(idx)
            clip = stacked[torch.as_tensor(index[idx.numpy()])]
            x = clip[:, clip.shape[1] // 2]
            x = x - x[:, :1]
            prior = pool[torch.randint(0, pool.shape[0], (b,), generator=gen)] if pool is not None else None
            eps_g = torch.rand(b, generator=gen, dtype=DTYPE)
            eps_d = torch.rand(b, generator=gen, dtype=DTYPE)
            with torch.no_grad():
                seq = live(clip)  # (B, te, J, 3)
            y_hat = seq[:, half_te]

            # generator step on L_G
            y_aug = augment(gens, seq, prior, g)
            x_aug = _project_t(y_aug, offset)
            loss_g = torch.zeros((), dtype=DTYPE)
            if ab.l_3d:
                loss_g = loss_g + loss_3d(y_hat, y_aug)
            if ab.l_dis:
                loss_g = loss_g - weights.beta * loss_dis(x, x_aug, disc, weights, eps=eps_g)
            if loss_g.requires_grad:
                _step(opt_g, g_params, loss_g, "generator")

            # critic + estimator step on L_DP, gradients flow through the live prediction
            centre = live.centre(clip[:, half_te : half_te + frames])
            seq_p = torch.cat([seq[:, :half_te], centre[:, None], seq[:, half_te + 1 :]], dim=1)
            y_aug = augment(gens, seq_p, prior, g)
            x_aug = _project_t(y_aug, offset)
            l2 = loss_2d(x, x_aug) if ab.l_2d else torch.zeros((), dtype=DTYPE)
            ld = weights.gamma * loss_dis(x, x_aug, disc, weights, eps=eps_d) if ab.l_dis else None
            loss_dp = l2 if ld is None else l2 + ld
            _step_critic_estimator(opt_d, d_params, opt_p, p_params, l2, ld, crit_sign)
            sums += [loss_g.item() * b, loss_dp.item() * b]
            step += 1
            if step_log is not None:
                step_log({"phase": phase, "step": step, "loss": "L_G", "value": loss_g.item()})
                step_log({"phase": phase, "step": step, "loss": "L_DP", "value": loss_dp.item()})
        history.append({"epoch": epoch + 1, "loss_g": sums[0] / n, "loss_dp": sums[1] / n})
        if progress is not None:
            progress(f"phase {phase} epoch {epoch + 1}/{t.epochs_adapt} "
                     f"L_G {history[-1]['loss_g']:.5f} L_DP {history[-1]['loss_dp']:.5f}")

    eta = t.ema_eta if ab.ema else 0.0
    anchor = ema_update(state.anchor, live, eta)
    entry = {"phase": phase, "domain": ds.name, "history": history, "eta": eta,
             "sampler_losses": sampler.losses[len(state.sampler.losses):]}
    return AdaptationState(phase, anchor, gens, disc, sampler, live, state.log + [entry])


def _step(opt, params, loss, what):
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"{what} loss is {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    apply_gradients(opt, params, grads)


def _step_critic_estimator(opt_d, d_params, opt_p, p_params, l2, ld, crit_sign):
    """Critic descends ``l2 + ld``; the estimator descends ``l2 + crit_sign * ld``."""
    total = l2 if ld is None else l2 + ld
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"critic/estimator loss is {total.item()}")
    if ld is None or crit_sign == 1.0:
        grads = torch.autograd.grad(total, d_params + p_params, allow_unused=True)
        g_d, g_p = grads[: len(d_params)], grads[len(d_params) :]
    else:
        g_d = torch.autograd.grad(ld, d_params, retain_graph=True, allow_unused=True)
        loss_p = l2 + crit_sign * ld if crit_sign else l2
        g_p = torch.autograd.grad(loss_p, p_params, allow_unused=True) if loss_p.requires_grad else [None] * len(p_params)
    if ld is not None:
        apply_gradients(opt_d, d_params, g_d)
    if l2.requires_grad or (ld is not None and crit_sign):
        apply_gradients(opt_p, p_params, g_p)


# ------------------------------------------------------------------------------ pretraining


def source_training_arrays(ds: PoseDataset, frames: int):
    norm = [normalize_2d(s, ds.camera) for s in ds.pose2d]
    stacked, index = padded_windows(norm, frames // 2)
    clips = stacked[index]
    poses = ds.frames3d() / MM_PER_UNIT
    return clips, poses


def pretrain_stage(cfg: RunConfig, stream: DomainStream, progress=None):
    """Phase 0: supervised estimator and the source-trained diffusion sampler theta_0."""
    stream.enter_phase(0)
    ds = stream.read_train(0, labels=True)
    m, t, d = cfg.model, cfg.train, cfg.diffusion
    lifter = new_lifter(m.frames, m.channels, m.dilations, m.activation, m.input_gain, seed=phase_seed(cfg.seed, 0))
    clips, poses = source_training_arrays(ds, m.frames)
    anchor, losses = pretrain_source(lifter, clips, poses, t.epochs_pretrain, t.lr_pretrain, t.batch_size,
                                     t.weight_decay, seed=phase_seed(cfg.seed, 0) + 1, log=progress)
    norm = normalize_2d(ds.frames2d(), ds.camera)
    sched = DiffusionSchedule(d.T, d.beta_start, d.beta_end)
    init = new_sampler(norm, phase_seed(cfg.seed, 0) + 2, sched, d.hidden, d.depth)
    sampler = train_sampler(norm, init, d.epochs, d.lr, d.batch_size, phase_seed(cfg.seed, 0) + 3)
    return anchor, sampler, losses


def pretrain_key(cfg: RunConfig) -> str:
    import hashlib
    d = cfg.to_dict()
    diff = {k: d["diffusion"][k] for k in ("T", "beta_start", "beta_end", "epochs", "lr", "batch_size", "hidden", "depth")}
    keep = {"seed": cfg.seed, "camera": d["camera"], "source": d["source"], "model": d["model"], "diffusion": diff,
            "train": {k: d["train"][k] for k in ("lr_pretrain", "batch_size", "epochs_pretrain", "weight_decay")}}
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:12]


# ------------------------------------------------------------------------------ experiments


@dataclass
class RunResult:
    run_dir: Path | None
    reports: list[EvaluationReport]
    forgetting: dict
    state: AdaptationState

    def anchor_report(self, phase: int) -> EvaluationReport:
        return next(r for r in self.reports if r.phase == phase and r.model == "anchor")

    def live_report(self, phase: int) -> EvaluationReport:
        return next(r for r in self.reports if r.phase == phase and r.model == "live")

    @property
    def source_only(self) -> EvaluationReport:
        return next(r for r in self.reports if r.model == "source-only")


def run_dir_for(cfg: RunConfig, out: Path) -> Path:
    return Path(out) / f"run-{cfg.hash()}-s{cfg.seed}"


def _phase_dir(run_dir: Path, phase: int) -> Path:
    return run_dir / f"phase_{phase:02d}"


def _complete(path: Path) -> bool:
    return (path / "COMPLETE").exists()


def evaluate_phase(state: AdaptationState, stream: DomainStream, cfg: RunConfig) -> list[EvaluationReport]:
    """Anchor on domains 1..j (the source at phase 0), plus the live model on the current domain."""
    h = cfg.hash()
    with stream.evaluation():
        if state.phase == 0:
            reps = [evaluate_model(state.anchor, [stream.read_eval(0)], 0, "anchor", h, cfg.seed)]
            targets = [stream.read_eval(k) for k in range(1, len(stream.targets) + 1)]
            if targets:
                reps.append(evaluate_model(state.anchor, targets, 0, "source-only", h, cfg.seed))
            return reps
        seen = [stream.read_eval(k) for k in range(1, state.phase + 1)]
        reps = [evaluate_model(state.anchor, seen, state.phase, "anchor", h, cfg.seed)]
        if state.live is not None:
            reps.append(evaluate_model(state.live, seen[-1:], state.phase, "live", h, cfg.seed))
        return reps


def run_experiment(cfg: RunConfig, out: Path | None = None, *, force: bool = False, resume: bool = True,
                   stop_after: int | None = None, cache: Path | None = None, base_dir: Path | None = None,
                   progress=None) -> RunResult:
    """Pretrain, then adapt to every target in order, evaluating after each phase.

    With ``out`` every phase is checkpointed under ``run-<config hash>-s<seed>``.
    An existing completed run directory is refused unless ``force``; an
    incomplete one is resumed from its last complete phase.  ``cache`` shares
    the (ablation-independent) pretrained estimator and source sampler
    between runs with the same source settings and seed.
    """
    cfg.validate()
    run_dir = None
    if out is not None:
        run_dir = run_dir_for(cfg, out)
        if run_dir.exists():
            if force:
                shutil.rmtree(run_dir)
            elif _complete(run_dir):
                raise RunExists(f"{run_dir} already holds a completed run (use --force to overwrite)")
            elif not resume:
                raise RunExists(f"{run_dir} exists (use --force to overwrite)")
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(run_dir / "config.yaml")
    stream = build_stream(cfg, base_dir)
    say = progress or (lambda s: log.info(s))
    reports: list[EvaluationReport] = []
    manifest = {"config_hash": cfg.hash(), "seed": cfg.seed}

    state = None
    start = 0
    if run_dir is not None:
        done = [p for p in range(len(cfg.targets) + 1) if _complete(_phase_dir(run_dir, p))]
        last = -1
        for p in done:
            if p == last + 1:
                last = p
        if last >= 0:
            state = AdaptationState.load(_phase_dir(run_dir, last))
            for p in range(last + 1):
                reports += [EvaluationReport.from_dict(r) for r in
                            json.loads((_phase_dir(run_dir, p) / "reports.json").read_text())]
            start = last + 1
            say(f"resuming after phase {last}")

    if state is None:
        anchor = sampler = None
        if cache is not None:
            cdir = Path(cache) / f"pretrain-{pretrain_key(cfg)}"
            if _complete(cdir):
                models, _ = load_checkpoint(cdir)
                anchor, sampler = models["anchor"], DiffusionSampler.load(cdir / "sampler")
        if anchor is None:
            t0 = time.time()
            anchor, sampler, losses = pretrain_stage(cfg, stream, say)
            say(f"pretraining done in {time.time() - t0:.1f}s")
            if cache is not None:
                save_checkpoint(cdir, {"anchor": anchor}, key=pretrain_key(cfg))
                sampler.save(cdir / "sampler")
                (cdir / "COMPLETE").write_text("")
        state = initial_state(cfg, anchor, sampler)
        reps = evaluate_phase(state, stream, cfg)
        reports += reps
        _checkpoint(run_dir, state, reps, manifest)
        start = 1

    last_phase = len(cfg.targets) if stop_after is None else min(stop_after, len(cfg.targets))
    for phase in range(max(start, 1), last_phase + 1):
        t0 = time.time()
        records = []
        state = adapt_phase(state, stream, cfg, phase, progress=say, step_log=records.append)
        reps = evaluate_phase(state, stream, cfg)
        reports += reps
        say(f"phase {phase} ({cfg.targets[phase - 1].name}) done in {time.time() - t0:.1f}s: "
            f"anchor avg {reps[0].avg_mpjpe:.2f} mm")
        _checkpoint(run_dir, state, reps, manifest, records)

    result = RunResult(run_dir, reports, forgetting(reports), state)
    if run_dir is not None:
        (run_dir / "report.txt").write_text(format_table(reports))
        (run_dir / "reports.jsonl").write_text(format_records(reports))
        fg = [{"domain": k[0], "phase": k[1], "forgetting_mm": v, **manifest} for k, v in result.forgetting.items()]
        (run_dir / "forgetting.json").write_text(json.dumps(fg, indent=2, sort_keys=True))
        if last_phase == len(cfg.targets):
            (run_dir / "COMPLETE").write_text(json.dumps(manifest))
    return result


def _checkpoint(run_dir, state: AdaptationState, reps, manifest, step_records=()):
    if run_dir is None:
        return
    pdir = _phase_dir(run_dir, state.phase)
    state.save(pdir, **manifest)
    with open(pdir / "steps.jsonl", "w") as fh:
        fh.writelines(json.dumps({**r, **manifest}, sort_keys=True) + "\n" for r in step_records)
    (pdir / "reports.json").write_text(json.dumps([r.to_dict() for r in reps], indent=2, sort_keys=True))
    (pdir / "COMPLETE").write_text("")


def latest_state(path) -> AdaptationState:
    """A phase directory, or the last complete phase of a run directory."""
    path = Path(path)
    if (path / "manifest.json").exists():
        return AdaptationState.load(path)
    phases = sorted(p for p in path.glob("phase_*") if _complete(p))
    if not phases:
        raise FileNotFoundError(f"no complete phase checkpoint under {path}")
    return AdaptationState.load(phases[-1])


def load_reports(run_dir) -> list[EvaluationReport]:
    run_dir = Path(run_dir)
    reps = []
    for p in sorted(run_dir.glob("phase_*")):
        if (p / "reports.json").exists():
            reps += [EvaluationReport.from_dict(r) for r in json.loads((p / "reports.json").read_text())]
    return reps
