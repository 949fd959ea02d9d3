"""Joint optimization of generator, discriminators and identity head."""

from __future__ import annotations

import contextlib
import copy
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import identity_mixup as im
from .conditioning import BagOfTokensEncoder, ConditioningAugmentation, build_encoder
from .core import (Checkpoint, ConfigError, RandomStream, ResolutionProfile, TrainConfig,
                   load_checkpoint, save_checkpoint, set_deterministic, validate_config)
from .data import Batch, Corpus, make_batches, to_nchw
from .discriminator import build_discriminators, d_loss, g_loss_adv, gradient_penalty, interpolate, input_gradient_norms
from .generator import GeneratorNet, ImagePyramid, init_weights
from .metrics import build_extractor, fid

log = logging.getLogger(__name__)

KL_WEIGHT = 1.0
# The CA term enters the objective averaged over condition dimensions rather
# than summed; summed, it squeezes the text signal out of c before the
# generator learns to use it.
KL_PER_DIMENSION = True


class TrainingDiverged(RuntimeError):
    def __init__(self, term: str, step: int, last_checkpoint: str | None):
        super().__init__(f"non-finite {term} at step {step}; last good checkpoint: {last_checkpoint}")
        self.term, self.step, self.last_checkpoint = term, step, last_checkpoint


@dataclass
class StepReport:
    step: int
    epoch: int
    d_loss: float
    gp: float
    g_loss_adv: float
    ce_loss: float
    mixup_loss: float
    kl_loss: float  # the KL term as it enters g_total
    g_total: float
    head_real_loss: float
    kl_sum: float  # CA divergence summed over condition dimensions
    gp_grad_norm: list[float]
    grad_norm: dict[str, float]
    saturated: int
    per_scale: list[dict[str, float]]
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def comparable(self) -> dict:
        """Everything except wall time, for determinism checks."""
        d = self.to_dict()
        d.pop("wall_time")
        return d


@dataclass
class Models:
    encoder: BagOfTokensEncoder
    ca: ConditioningAugmentation
    generator: GeneratorNet
    discriminators: nn.ModuleList
    head: im.IdentityHead
    teacher: im.TeacherNet
    profile: ResolutionProfile
    cfg: TrainConfig

    @property
    def g_params(self) -> list[nn.Parameter]:
        return [*self.encoder.parameters(), *self.ca.parameters(), *self.generator.parameters()]

    @torch.no_grad()
    def encode(self, captions: Sequence[str]) -> torch.Tensor:
        return self.encoder(list(captions))

    @torch.no_grad()
    def sample(self, captions: Sequence[str], rng: RandomStream, batch_size: int = 256,
               z: torch.Tensor | None = None) -> list[torch.Tensor]:
        """Eval-mode generation; returns per-scale tensors, lowest first."""
        nets = (self.encoder, self.ca, self.generator)
        modes = [n.training for n in nets]
        for n in nets:
            n.eval()
        out: list[list[torch.Tensor]] = []
        try:
            for k in range(0, len(captions), batch_size):
                caps = list(captions[k:k + batch_size])
                cond = self.ca(self.encoder(caps), rng)
                zz = z[k:k + batch_size] if z is not None else rng.randn("noise", len(caps), self.cfg.noise_dim)
                out.append(list(self.generator(cond.c, zz)))
        finally:
            for n, m in zip(nets, modes):
                n.train(m)
        return [torch.cat(level) for level in zip(*out)]

    def feature_extractor(self):
        return build_extractor(self.cfg.feature_extractor, self.teacher)


def build_models(cfg: TrainConfig, prof: ResolutionProfile, captions: Sequence[str] | None,
                 num_classes: int, rng: RandomStream, vocab: Sequence[str] | None = None,
                 teacher: im.TeacherNet | None = None) -> Models:
    gen = torch.Generator().manual_seed(rng.torch_seed("init"))
    with torch.random.fork_rng():
        torch.manual_seed(rng.torch_seed("init"))
        if vocab is not None:
            encoder = BagOfTokensEncoder(vocab, cfg.embed_dim)
        else:
            encoder = build_encoder(cfg.text_encoder, captions, cfg.embed_dim)
        ca = ConditioningAugmentation(cfg.embed_dim, cfg.cond_dim)
        generator = GeneratorNet(prof, cfg.cond_dim, cfg.noise_dim, cfg.gen_channels, cfg.gen_res_blocks)
        discs = build_discriminators(prof, cfg.embed_dim, cfg.cond_dim, cfg.disc_channels,
                                     cfg.disc_pair_channels)
        head = im.IdentityHead(prof, num_classes, cfg.head_channels, cfg.feat_dim)
        if teacher is None:
            teacher = im.TeacherNet(prof, num_classes, cfg.teacher_channels, cfg.feat_dim)
            init_weights(teacher, gen)
    for net in (encoder, ca, generator, discs, head):
        init_weights(net, gen)
    ca.init_(gen)
    return Models(encoder, ca, generator, discs, head, teacher, prof, cfg)


@dataclass
class TrainState:
    models: Models
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    opt_head: torch.optim.Optimizer
    rng: RandomStream
    identities: list[int]
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0
    epoch_data_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    best_fid: float = math.inf
    last_checkpoint: str | None = None
    identity_captions: dict[int, list[str]] = field(default_factory=dict)
    data_info: dict = field(default_factory=dict)

    @property
    def cfg(self) -> TrainConfig:
        return self.models.cfg

    @property
    def profile(self) -> ResolutionProfile:
        return self.models.profile


def _optimizers(models: Models, cfg: TrainConfig):
    betas = (cfg.beta1, cfg.beta2)
    return (torch.optim.Adam(models.g_params, lr=cfg.lr_g, betas=betas),
            torch.optim.Adam(models.discriminators.parameters(), lr=cfg.lr_d, betas=betas),
            torch.optim.Adam(models.head.parameters(), lr=cfg.lr_head, betas=betas))


def prepare_teacher(corpus: Corpus, cfg: TrainConfig, prof: ResolutionProfile,
                    rng: RandomStream) -> tuple[im.TeacherNet, float]:
    """Train and freeze the teacher on the train split; accuracy measured on val (or train)."""
    train = corpus.split("train")
    val = corpus.split("val")
    gen = torch.Generator().manual_seed(rng.torch_seed("teacher_init"))
    teacher = im.TeacherNet(prof, corpus.num_identities, cfg.teacher_channels, cfg.feat_dim)
    init_weights(teacher, gen)
    y = train.labels([r.identity_id for r in train.records])
    val_pair = None
    if len(val):
        val_pair = (val.pyramid(), val.labels([r.identity_id for r in val.records]))
    acc = im.train_teacher(teacher, train.pyramid(), y, rng, epochs=cfg.teacher_epochs, val=val_pair)
    if acc < cfg.teacher_min_accuracy:
        log.warning("teacher accuracy %.3f below target %.2f", acc, cfg.teacher_min_accuracy)
    return teacher.freeze(), acc


def init_state(corpus: Corpus, cfg: TrainConfig, prof: ResolutionProfile | None = None,
               teacher: im.TeacherNet | None = None) -> TrainState:
    prof = prof or corpus.profile
    problems = validate_config(cfg, prof)
    if problems:
        raise ConfigError(problems)
    set_deterministic(cfg.deterministic)
    rng = RandomStream(cfg.rng_seed)
    train = corpus.split("train")
    if teacher is None:
        teacher, _ = prepare_teacher(corpus, cfg, prof, rng)
    captions = [c for r in train.records for c in r.captions]
    models = build_models(cfg, prof, captions, corpus.num_identities, rng, teacher=teacher)
    first: dict[int, list[str]] = {}
    for r in corpus.records:
        first.setdefault(r.identity_id, list(r.captions))
    return TrainState(models, *_optimizers(models, cfg), rng=rng, identities=list(corpus.identities),
                      identity_captions=first)


def _f(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def _grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.stack(sq).sum().sqrt()) if sq else 0.0


@contextlib.contextmanager
def _frozen(module: nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def _finite(state: TrainState, **terms) -> None:
    for name, v in terms.items():
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise TrainingDiverged(name, state.global_step, state.last_checkpoint)


def train_step(state: TrainState, batch: Batch, update_d: bool = True) -> StepReport:
    """One discriminator update followed by one generator/conditioning/head update."""
    t0 = time.perf_counter()
    m, cfg, rng = state.models, state.cfg, state.rng
    n = len(batch)
    labels = batch.labels
    reals = batch.pyramid

    phi = m.encoder(batch.captions)
    cond = m.ca(phi, rng)
    z = rng.randn("noise", n, cfg.noise_dim)
    fakes = m.generator(cond.c, z)

    # discriminator
    with torch.no_grad():
        phi_d = phi.detach()
        phi_mis = m.encoder(batch.mismatched)
    adv_d = d_loss(m.discriminators, reals, list(fakes), phi_d, phi_mis, cfg.adv_loss)
    gps, gp_norms = [], []
    for d, real, fake in zip(m.discriminators, reals, fakes):
        x_hat = interpolate(real, fake, rng)
        norms = input_gradient_norms(d.image_score, x_hat, create_graph=cfg.gp_weight > 0)
        gps.append((norms - 1).pow(2).mean())
        gp_norms.append(float(norms.detach().mean()))
    gp_total = sum(gps)
    loss_d = adv_d.d_loss + cfg.gp_weight * gp_total if cfg.gp_weight > 0 else adv_d.d_loss
    _finite(state, d_loss=adv_d.d_loss, gp=gp_total)
    state.opt_d.zero_grad(set_to_none=True)
    if update_d:
        loss_d.backward()
        d_norm = _grad_norm(m.discriminators.parameters())
        state.opt_d.step()
    else:
        d_norm = 0.0
    state.opt_d.zero_grad(set_to_none=True)

    # generator, conditioning and identity head
    stats: dict = {}
    with _frozen(m.discriminators):
        adv_g = g_loss_adv(m.discriminators, list(fakes), phi.detach(), cfg.adv_loss)
        ce = im.identity_ce_loss(m.head, fakes, labels)
        perm = torch.from_numpy(im.derangement(labels.numpy(), rng))
        samples = im.mixup(fakes, fakes.select(perm), labels, labels[perm], rng, cfg.alpha,
                           m.head.num_classes)
        mix = im.r_g(samples, m.head, m.teacher, num_scales=len(fakes), stats=stats)
        kl = KL_WEIGHT * (cond.kl / cfg.cond_dim if KL_PER_DIMENSION else cond.kl)
        g_total = adv_g.g_loss_adv + cfg.lambda1 * ce + cfg.lambda2 * mix + kl
        head_real = sum(F.cross_entropy(m.head(x, i), labels) for i, x in enumerate(reals))
        _finite(state, g_loss_adv=adv_g.g_loss_adv, ce_loss=ce, mixup_loss=mix, kl_loss=kl,
                head_real_loss=head_real)
        state.opt_g.zero_grad(set_to_none=True)
        state.opt_head.zero_grad(set_to_none=True)
        (g_total + cfg.head_real_weight * head_real).backward()
    leaked = [p for p in (*m.discriminators.parameters(), *m.teacher.parameters()) if p.grad is not None]
    if leaked:
        raise RuntimeError(f"generator losses produced gradients on discriminator/teacher parameters ({len(leaked)} tensors)")
    g_norm, h_norm = _grad_norm(m.g_params), _grad_norm(m.head.parameters())
    state.opt_g.step()
    state.opt_head.step()

    per_scale = [
        {"scale": i + 1, **row, "gp": _f(gps[i]), **adv_g.per_scale[i]}
        for i, row in enumerate(adv_d.per_scale)
    ]
    report = StepReport(
        step=state.global_step, epoch=state.epoch,
        d_loss=_f(adv_d.d_loss), gp=_f(gp_total),
        g_loss_adv=_f(adv_g.g_loss_adv), ce_loss=_f(ce), mixup_loss=_f(mix),
        kl_loss=_f(kl), g_total=_f(g_total), head_real_loss=_f(head_real), kl_sum=_f(cond.kl),
        gp_grad_norm=gp_norms, grad_norm={"g": g_norm, "d": d_norm, "head": h_norm},
        saturated=int(stats.get("saturated", 0)), per_scale=per_scale,
        wall_time=time.perf_counter() - t0,
    )
    state.global_step += 1
    return report


@contextlib.contextmanager
def preserve_buffers(module: nn.Module):
    saved = {k: v.clone() for k, v in module.state_dict().items() if not k.endswith("weight") and not k.endswith("bias")}
    try:
        yield
    finally:
        module.load_state_dict(saved, strict=False)


def gradient_norm_probe(d_nets: Sequence, reals: Sequence[torch.Tensor], fakes: Sequence[torch.Tensor],
                        rng: RandomStream) -> list[float]:
    """Per-scale mean ``||grad D(x_hat)||`` on real/fake interpolates; BN statistics are left untouched."""
    out = []
    for d, real, fake in zip(d_nets, reals, fakes):
        score = d.image_score if hasattr(d, "image_score") else d
        ctx = preserve_buffers(d) if isinstance(d, nn.Module) else contextlib.nullcontext()
        with ctx:
            out.append(float(input_gradient_norms(score, interpolate(real, fake, rng)).mean()))
    return out


# -- checkpoints --------------------------------------------------------------

def save_state(state: TrainState, path: str | Path) -> Path:
    m = state.models
    sections = {
        "encoder": m.encoder.state_dict(), "ca": m.ca.state_dict(),
        "generator": m.generator.state_dict(), "discriminators": m.discriminators.state_dict(),
        "head": m.head.state_dict(), "teacher": m.teacher.state_dict(),
        "opt_g": state.opt_g.state_dict(), "opt_d": state.opt_d.state_dict(),
        "opt_head": state.opt_head.state_dict(),
        "rng": state.rng.state_dict(),
        "trainer": {"epoch": state.epoch, "step_in_epoch": state.step_in_epoch,
                    "global_step": state.global_step, "epoch_data_state": state.epoch_data_state,
                    "history": state.history, "best_fid": state.best_fid,
                    "identities": state.identities, "vocab": m.encoder.vocab,
                    "identity_captions": {str(k): v for k, v in state.identity_captions.items()},
                    "data_info": state.data_info},
    }
    path = save_checkpoint(path, sections, state.cfg, state.profile,
                           meta={"num_classes": m.head.num_classes})
    state.last_checkpoint = str(path)
    return path


REQUIRED_SECTIONS = ("encoder", "ca", "generator", "discriminators", "head", "teacher",
                     "opt_g", "opt_d", "opt_head", "rng", "trainer")


def load_state(path: str | Path | Checkpoint) -> TrainState:
    from .core import CheckpointError

    ckpt = path if isinstance(path, Checkpoint) else load_checkpoint(path)
    missing = [s for s in REQUIRED_SECTIONS if s not in ckpt.sections]
    if missing:
        raise CheckpointError(f"checkpoint is missing section(s): {', '.join(missing)}")
    cfg, prof = ckpt.config, ckpt.profile
    tr = ckpt.sections["trainer"]
    rng = RandomStream.from_state_dict(ckpt.sections["rng"])
    num_classes = ckpt.manifest["meta"]["num_classes"]
    teacher = im.TeacherNet(prof, num_classes, cfg.teacher_channels, cfg.feat_dim)
    teacher.load_state_dict(ckpt.sections["teacher"])
    teacher.freeze()
    models = build_models(cfg, prof, None, num_classes, RandomStream(0), vocab=tr["vocab"],
                          teacher=teacher)
    for name in ("encoder", "ca", "generator", "discriminators", "head"):
        getattr(models, name).load_state_dict(ckpt.sections[name])
    opt_g, opt_d, opt_head = _optimizers(models, cfg)
    opt_g.load_state_dict(ckpt.sections["opt_g"])
    opt_d.load_state_dict(ckpt.sections["opt_d"])
    opt_head.load_state_dict(ckpt.sections["opt_head"])
    state = TrainState(models, opt_g, opt_d, opt_head, rng, identities=list(tr["identities"]),
                       epoch=tr["epoch"], step_in_epoch=tr["step_in_epoch"],
                       global_step=tr["global_step"], epoch_data_state=tr["epoch_data_state"],
                       history=list(tr["history"]), best_fid=tr["best_fid"],
                       last_checkpoint=str(path) if not isinstance(path, Checkpoint) else None,
                       identity_captions={int(k): list(v) for k, v in tr.get("identity_captions", {}).items()},
                       data_info=dict(tr.get("data_info", {})))
    set_deterministic(cfg.deterministic)
    return state


# -- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    reports: list[StepReport]
    history: list[dict]
    checkpoint: Path | None


def validation_fid(state: TrainState, corpus: Corpus) -> float | None:
    """FID at the lowest scale on a fixed validation slice, with a dedicated random stream."""
    val = corpus.split("val")
    if len(val) == 0:
        val = corpus.split("test")
    if len(val) == 0:
        return None
    caps = [r.captions[0] for r in val.records][: state.cfg.eval_captions]
    rng = RandomStream(state.cfg.rng_seed + 7_919)
    fake = torch.cat([state.models.sample(caps, rng)[0] for _ in range(4)])
    ext = state.models.feature_extractor()
    return fid(ext(val.pyramid()[0]), ext(fake))


def _write_rows(fh, report: StepReport) -> None:
    fh.write(json.dumps({"kind": "step", **{k: v for k, v in report.to_dict().items() if k != "per_scale"}}) + "\n")
    for row in report.per_scale:
        fh.write(json.dumps({"kind": "scale", "step": report.step, **row}) + "\n")


def train(corpus: Corpus, cfg: TrainConfig, prof: ResolutionProfile | None = None,
          out_dir: str | Path | None = None, resume: str | Path | TrainState | None = None,
          max_steps: int | None = None, teacher: im.TeacherNet | None = None,
          on_eval: Callable[[dict], None] | None = None) -> TrainResult:
    """Run epochs up to ``cfg.epochs``; ``max_steps`` stops early (for interruption tests).

    Validation FID is computed every ``cfg.eval_interval`` epochs; the best
    state goes to ``best.ckpt`` and the final one to ``last.ckpt``.
    """
    if resume is None:
        state = init_state(corpus, cfg, prof, teacher)
    else:
        state = resume if isinstance(resume, TrainState) else load_state(resume)
        cfg = state.cfg
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(out / "train_log.jsonl", "a", encoding="utf-8") if out is not None else None
    train_split = corpus.split("train")
    reports: list[StepReport] = []
    steps_done = 0
    try:
        while state.epoch < cfg.epochs:
            if state.step_in_epoch == 0:
                state.epoch_data_state = copy.deepcopy(state.rng["data"].bit_generator.state)
            else:
                state.rng["data"].bit_generator.state = copy.deepcopy(state.epoch_data_state)
            for batch in make_batches(train_split, cfg.batch_size, state.rng, skip=state.step_in_epoch):
                if max_steps is not None and steps_done >= max_steps:
                    return _finish(state, reports, out)
                report = train_step(state, batch)
                reports.append(report)
                steps_done += 1
                state.step_in_epoch += 1
                if log_fh is not None:
                    _write_rows(log_fh, report)
            state.epoch += 1
            state.step_in_epoch = 0
            if state.epoch % cfg.eval_interval == 0:
                value = validation_fid(state, corpus)
                entry = {"epoch": state.epoch, "step": state.global_step, "fid": value}
                state.history.append(entry)
                if on_eval is not None:
                    on_eval(entry)
                if value is not None and value < state.best_fid:
                    state.best_fid = value
                    if out is not None:
                        save_state(state, out / "best.ckpt")
        return _finish(state, reports, out)
    finally:
        if log_fh is not None:
            log_fh.close()


def _finish(state: TrainState, reports: list[StepReport], out: Path | None) -> TrainResult:
    path = save_state(state, out / "last.ckpt") if out is not None else None
    return TrainResult(state, reports, list(state.history), path)


def evaluate_state(state: TrainState, corpus: Corpus, metrics: Sequence[str] = ("fid", "is", "vs"),
                   seed: int = 0, max_captions: int | None = None):
    """Run the evaluation protocol on the test split of ``corpus``.

    IS uses the frozen teacher's class probabilities. VS embedders are fitted
    on real train images (teacher features) against their encoded captions.
    """
    from .metrics import evaluate_protocol, train_vs_embedders

    m = state.models
    rng = RandomStream(seed)
    ext = m.feature_extractor()
    test = corpus.split("test")
    vs_model = None
    if "vs" in metrics:
        train_split = corpus.split("train")
        caps = [r.captions[k % len(r.captions)] for k, r in enumerate(train_split.records)]
        feats = ext(train_split.pyramid()[-1])
        vs_model = train_vs_embedders(feats, m.encode(caps).numpy(),
                                      [r.identity_id for r in train_split.records], rng)
    return evaluate_protocol(m, test, ext, rng, classifier=m.teacher.probs, vs_model=vs_model,
                             metrics=metrics, is_splits=state.cfg.is_splits, max_captions=max_captions)
