"""Identity-consistency classification, manifold mix-up and teacher-student soft labels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import RandomStream, ResolutionProfile
from .generator import ImagePyramid

# The identity cross-entropy is divided by the number of identities.
CE_CLASS_NORMALIZATION = True
KL_EPS = 1e-8


class TeacherNet(nn.Module):
    """Four conv blocks over images resized to the lowest profile scale.

    Any pyramid level can be fed in; it is area-shrunk or bilinearly enlarged
    to ``prof.resolution(1)`` first. The penultimate layer serves as the
    feature extractor for FID and IS.
    """

    def __init__(self, prof: ResolutionProfile, num_classes: int, channels: int = 32,
                 feat_dim: int = 128):
        super().__init__()
        self.input_size = prof.resolution(1)
        h = self.input_size[0]
        widths = [channels, channels, 2 * channels, 2 * channels]
        layers, cin = [], 3
        for k, cout in enumerate(widths):
            layers += [nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout),
                       nn.ReLU(inplace=True)]
            if k % 2 == 1 and h > 4:
                layers.append(nn.MaxPool2d(2))
                h //= 2
            cin = cout
        layers.append(nn.AdaptiveAvgPool2d((4, 2)))
        self.blocks = nn.Sequential(*layers)
        self.embed = nn.Sequential(nn.Flatten(), nn.Linear(cin * 8, feat_dim), nn.ReLU(inplace=True))
        self.classifier = nn.Linear(feat_dim, num_classes)
        self.num_classes = num_classes
        self.feat_dim = feat_dim

    def resize(self, x: torch.Tensor) -> torch.Tensor:
        h, w = self.input_size
        if x.shape[-2] > h:
            return F.adaptive_avg_pool2d(x, (h, w))
        if x.shape[-2] < h:
            return F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        return x

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.embed(self.blocks(self.resize(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))

    def probs(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self(x), dim=1)

    def freeze(self) -> "TeacherNet":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        return self

    def train(self, mode: bool = True):
        # a frozen teacher stays in eval mode so its BN statistics never move
        if mode and any(not p.requires_grad for p in self.parameters()):
            mode = False
        return super().train(mode)


class IdentityHead(nn.Module):
    """One conv extractor per scale feeding a classifier shared across scales."""

    def __init__(self, prof: ResolutionProfile, num_classes: int, channels: int = 32,
                 feat_dim: int = 128):
        super().__init__()
        self.extractors = nn.ModuleList()
        for h, w in prof.resolutions:
            n_down = int(math.log2(h // 4))
            layers, cin = [], 3
            for k in range(n_down):
                cout = min(channels * 2 ** k, 8 * channels)
                layers += [nn.Conv2d(cin, cout, 4, 2, 1, bias=False), nn.BatchNorm2d(cout),
                           nn.LeakyReLU(0.2, inplace=True)]
                cin = cout
            layers += [nn.Flatten(), nn.Linear(cin * 8, feat_dim), nn.ReLU(inplace=True)]
            self.extractors.append(nn.Sequential(*layers))
        self.classifier = nn.Linear(feat_dim, num_classes)
        self.num_classes = num_classes
        self.feat_dim = feat_dim

    def features(self, x: torch.Tensor, scale: int) -> torch.Tensor:
        """Penultimate features of images at 0-based ``scale``."""
        return self.extractors[scale](x)

    def forward(self, x: torch.Tensor, scale: int) -> torch.Tensor:
        return self.classifier(self.features(x, scale))

    def probs(self, x: torch.Tensor, scale: int) -> torch.Tensor:
        return F.softmax(self(x, scale), dim=1)


def _check_labels(y: torch.Tensor, num_classes: int) -> None:
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= num_classes):
        raise ValueError(f"identity labels must lie in [0, {num_classes}), got "
                         f"[{int(y.min())}, {int(y.max())}]")


def scaled_cross_entropy(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``-(1/C) * sum_k y_k log yhat_k`` for integer targets."""
    num_classes = logits.shape[1]
    _check_labels(y, num_classes)
    ce = F.cross_entropy(logits, y)
    return ce / num_classes if CE_CLASS_NORMALIZATION else ce


def identity_ce_loss(head: IdentityHead, pyramid: ImagePyramid | Sequence[torch.Tensor],
                     y: torch.Tensor) -> torch.Tensor:
    """Scaled identity cross-entropy summed over every scale of ``pyramid``."""
    _check_labels(y, head.num_classes)
    return sum(scaled_cross_entropy(head(x, i), y) for i, x in enumerate(pyramid))


# -- mix-up -------------------------------------------------------------------

@dataclass
class MixupSample:
    """Batched mix-up at one scale: ``x_bar = lam * X_a + (1 - lam) * X_b``."""

    x_bar: torch.Tensor
    lam: torch.Tensor  # N
    y_bar: torch.Tensor  # N x C
    a: torch.Tensor
    b: torch.Tensor
    scale: int


def mixup(pyr_a: ImagePyramid | Sequence[torch.Tensor], pyr_b: ImagePyramid | Sequence[torch.Tensor],
          a: torch.Tensor, b: torch.Tensor, rng: RandomStream | None, alpha: float = 0.2,
          num_classes: int | None = None, lam: torch.Tensor | None = None) -> list[MixupSample]:
    """Mix two pyramids pairwise with one ``lam ~ Beta(alpha, alpha)`` per pair, shared by all scales."""
    a = torch.as_tensor(a, dtype=torch.long)
    b = torch.as_tensor(b, dtype=torch.long)
    if bool((a == b).any()):
        raise ValueError("mix-up pairs must come from different identities (a == b)")
    if len(pyr_a) != len(pyr_b):
        raise ValueError("pyramids have different numbers of scales")
    n = a.shape[0]
    if lam is None:
        lam = torch.from_numpy(rng["mixup"].beta(alpha, alpha, size=n).astype(np.float32))
    lam = torch.as_tensor(lam, dtype=pyr_a[0].dtype).reshape(n)
    c = num_classes if num_classes is not None else int(max(a.max(), b.max())) + 1
    y_bar = lam[:, None] * F.one_hot(a, c).to(lam.dtype) + (1 - lam[:, None]) * F.one_hot(b, c).to(lam.dtype)
    out = []
    for i, (xa, xb) in enumerate(zip(pyr_a, pyr_b)):
        l4 = lam.view(-1, *[1] * (xa.ndim - 1))
        out.append(MixupSample(l4 * xa + (1 - l4) * xb, lam, y_bar, a, b, i))
    return out


def derangement(labels: torch.Tensor | np.ndarray, rng: RandomStream, tries: int = 64) -> np.ndarray:
    """Permutation ``perm`` with ``labels[perm] != labels`` everywhere."""
    labels = np.asarray(labels)
    n = len(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("mix-up pairing needs at least two identities in the batch")
    g = rng["mixup"]
    for _ in range(tries):
        perm = g.permutation(n)
        if np.all(labels[perm] != labels):
            return perm
    perm = np.empty(n, dtype=np.int64)
    for i in range(n):
        choices = np.flatnonzero(labels != labels[i])
        perm[i] = choices[g.integers(len(choices))]
    return perm


# -- teacher-student ----------------------------------------------------------

def kl_divergence(q: torch.Tensor, p: torch.Tensor, eps: float = KL_EPS,
                  stats: dict | None = None) -> torch.Tensor:
    """Batch mean of ``sum_m q log(q / p)``; ``p`` is clamped at ``eps``."""
    if stats is not None:
        stats["saturated"] = stats.get("saturated", 0) + int(((p < eps) & (q > 0)).sum())
    p = p.clamp_min(eps)
    return (torch.xlogy(q, q) - q * torch.log(p)).sum(1).mean()


def teacher_student_loss(samples: Sequence[MixupSample], student: IdentityHead, teacher: TeacherNet,
                         detach_teacher: bool = True, stats: dict | None = None) -> torch.Tensor:
    """``sum over scales of E[KL(q || p)]``: teacher ``q`` supervises student ``p`` on mixed images.

    Teacher parameters never receive gradient. With ``detach_teacher`` the
    target is a constant; otherwise gradient also reaches ``x_bar`` through
    the teacher's input.
    """
    total = 0.0
    for s in samples:
        q = teacher.probs(s.x_bar)
        if detach_teacher:
            q = q.detach()
        p = student.probs(s.x_bar, s.scale)
        total = total + kl_divergence(q, p, stats=stats)
    return total


def r_g(samples: Sequence[MixupSample], student: IdentityHead, teacher: TeacherNet,
        num_scales: int | None = None, **kwargs) -> torch.Tensor:
    """Mix-up regularizer of the generator over all pyramid scales."""
    if num_scales is not None and len({s.scale for s in samples}) != num_scales:
        raise ValueError(f"mix-up samples cover {len({s.scale for s in samples})} of {num_scales} scales")
    return teacher_student_loss(samples, student, teacher, **kwargs)


def correlation_ratio(features) -> float:
    """Largest singular value over the sum of singular values (rows are samples)."""
    a = np.asarray(features, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError("features must be an m x n matrix with m ≥ 1")
    s = np.linalg.svd(a, compute_uv=False)
    if s.sum() == 0:
        raise ValueError("correlation ratio is undefined for an all-zero feature matrix")
    return float(s[0] / s.sum())


# -- teacher training ---------------------------------------------------------

def train_teacher(teacher: TeacherNet, pyramid: Sequence[np.ndarray], labels: np.ndarray,
                  rng: RandomStream, epochs: int = 8, batch_size: int = 32, lr: float = 1e-3,
                  val: tuple[Sequence[np.ndarray], np.ndarray] | None = None) -> float:
    """Fit the teacher on real images at every scale; returns accuracy (val if given)."""
    g = rng["teacher"]
    opt = torch.optim.Adam(teacher.parameters(), lr=lr)
    levels = [torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))) for x in pyramid]
    y = torch.as_tensor(labels, dtype=torch.long)
    n = len(y)
    teacher.train()
    for _ in range(epochs):
        order = g.permutation(n)
        for k in range(0, n - batch_size + 1, batch_size):
            idx = torch.from_numpy(order[k:k + batch_size])
            loss = sum(F.cross_entropy(teacher(lv[idx]), y[idx]) for lv in levels)
            opt.zero_grad()
            loss.backward()
            opt.step()
    teacher.eval()
    eval_pyr, eval_y = val if val is not None else (pyramid, labels)
    return classifier_accuracy(teacher, eval_pyr, eval_y)


@torch.no_grad()
def classifier_accuracy(net: nn.Module, pyramid: Sequence[np.ndarray], labels) -> float:
    """Mean accuracy over all scales of channel-last arrays."""
    was = net.training
    net.eval()
    y = torch.as_tensor(labels, dtype=torch.long)
    accs = []
    for lv in pyramid:
        x = torch.from_numpy(np.ascontiguousarray(lv.transpose(0, 3, 1, 2)))
        accs.append(float((net(x).argmax(1) == y).float().mean()))
    net.train(was)
    return float(np.mean(accs))


# -- mix-up probe -------------------------------------------------------------

def beta_quantile_lambdas(u: np.ndarray, alpha: float) -> np.ndarray:
    """``Beta(alpha, alpha)`` draws by inversion of shared uniforms ``u``.

    Reusing ``u`` across alphas couples the sweeps: a larger alpha pulls every
    draw toward 0.5, so accuracy differences reflect alpha rather than noise.
    """
    from scipy.stats import beta

    return beta.ppf(np.asarray(u, dtype=np.float64), alpha, alpha).astype(np.float32)


def _mixed_set(levels: Sequence[torch.Tensor], y: torch.Tensor, perm: np.ndarray, lam: np.ndarray,
               num_classes: int) -> tuple[list[torch.Tensor], torch.Tensor, torch.Tensor]:
    idx_b = torch.from_numpy(perm)
    samples = mixup(levels, [lv[idx_b] for lv in levels], y, y[idx_b], None,
                    num_classes=num_classes, lam=torch.from_numpy(lam))
    dominant = torch.where(torch.from_numpy(lam) >= 0.5, y, y[idx_b])
    return [s.x_bar for s in samples], samples[0].y_bar, dominant


def mixup_probe(levels: Sequence[torch.Tensor], labels, alphas: Sequence[float],
                epoch_budgets: Sequence[int], rng: RandomStream, channels: int = 16,
                feat_dim: int = 64, batch_size: int = 32, lr: float = 1e-3,
                prof: ResolutionProfile | None = None) -> list[dict]:
    """Probe accuracy on mix-upped samples for each ``alpha`` and epoch budget.

    Samples of each identity are split in half. Each half is paired with a
    derangement over identities and mixed with ``lam`` from shared uniforms.
    A fresh :class:`TeacherNet`-shaped probe (same init for every alpha) is
    fitted on the soft labels of the first half; accuracy is the fraction of
    second-half mixtures whose dominant identity it predicts.
    """
    if not alphas:
        raise ValueError("alpha sweep is empty")
    if any(a <= 0 for a in alphas):
        raise ValueError("every alpha must be > 0")
    budgets = sorted(set(int(e) for e in epoch_budgets))
    if not budgets or budgets[0] < 1:
        raise ValueError("epoch budgets must be ≥ 1")
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    num_classes = int(y.max()) + 1
    if prof is None:
        h, w = levels[0].shape[-2:]
        prof = ResolutionProfile(base_height=h, base_width=w, num_scales=1,
                                 seed_height=min(4, h), seed_width=min(2, w))
    g = rng["probe"]
    yn = y.numpy()
    fit_idx, val_idx = [], []
    for c in np.unique(yn):
        members = g.permutation(np.flatnonzero(yn == c))
        half = len(members) // 2
        fit_idx.extend(members[:half])
        val_idx.extend(members[half:])
    fit_idx, val_idx = np.sort(fit_idx), np.sort(val_idx)
    parts = {}
    for name, idx in (("fit", fit_idx), ("val", val_idx)):
        sub = [lv[torch.from_numpy(idx)] for lv in levels]
        perm = derangement(yn[idx], rng)
        parts[name] = (sub, y[torch.from_numpy(idx)], perm, g.random(len(idx)))
    init_seed = int(g.integers(2 ** 62))
    order_seed = int(g.integers(2 ** 62))
    rows = []
    for alpha in alphas:
        fit_x, fit_soft, _ = _mixed_set(parts["fit"][0], parts["fit"][1], parts["fit"][2],
                                        beta_quantile_lambdas(parts["fit"][3], alpha), num_classes)
        val_x, _, val_dom = _mixed_set(parts["val"][0], parts["val"][1], parts["val"][2],
                                       beta_quantile_lambdas(parts["val"][3], alpha), num_classes)
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            probe = TeacherNet(prof, num_classes, channels, feat_dim)
        opt = torch.optim.Adam(probe.parameters(), lr=lr)
        order_rng = np.random.default_rng(order_seed)
        n = len(fit_soft)
        bs = min(batch_size, n)
        for epoch in range(1, budgets[-1] + 1):
            probe.train()
            order = order_rng.permutation(n)
            for k in range(0, n - bs + 1, bs):
                idx = torch.from_numpy(order[k:k + bs])
                loss = sum(-(fit_soft[idx] * F.log_softmax(probe(x[idx]), 1)).sum(1).mean()
                           for x in fit_x)
                opt.zero_grad()
                loss.backward()
                opt.step()
            if epoch in budgets:
                probe.eval()
                with torch.no_grad():
                    acc = float(np.mean([float((probe(x).argmax(1) == val_dom).float().mean())
                                         for x in val_x]))
                rows.append({"alpha": float(alpha), "epochs": epoch, "accuracy": acc})
    return rows


def is_non_increasing(values: Sequence[float], tol: float = 0.0) -> bool:
    return all(b <= a + tol for a, b in zip(values, values[1:]))
