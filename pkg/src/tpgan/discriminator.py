"""Per-scale discriminators, adversarial losses and the input gradient penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .core import RandomStream, ResolutionProfile


def _down(cin: int, cout: int, norm: bool = True) -> list[nn.Module]:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 4, 2, 1, bias=not norm)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.LeakyReLU(0.2, inplace=True))
    return layers


class ScaleDiscriminator(nn.Module):
    """Discriminator for one scale of the pyramid.

    The trunk shrinks every scale by the same factor, bringing the lowest one to
    a 4 x 2 grid. Branch A is a (4, 2) convolution giving the patch score map,
    1 x 1 at the lowest scale and larger above it. Branch B keeps halving to
    4 x 2, appends the replicated text projection, fuses with a 1 x 1 conv and
    scores the pair with a (4, 2) convolution.
    """

    def __init__(self, scale: int, prof: ResolutionProfile, embed_dim: int, cond_dim: int = 128,
                 channels: int = 64, pair_channels: int = 512):
        super().__init__()
        self.scale = scale
        self.resolution = prof.resolution(scale)
        n_trunk = int(math.log2(prof.base_height // 4))
        if n_trunk < 1 or prof.base_height // 4 * 4 != prof.base_height:
            raise ValueError("discriminators need a base height of at least 8 (power of two)")
        layers, ch = [], 3
        for k in range(n_trunk):
            out = channels * 2 ** k
            layers += _down(ch, out, norm=k > 0)
            ch = out
        self.trunk = nn.Sequential(*layers)
        self.map_head = nn.Conv2d(ch, 1, (4, 2), 1, 0)
        extra = []
        for _ in range(scale - 1):
            out = min(ch * 2, pair_channels)
            extra += _down(ch, out)
            ch = out
        self.pair_down = nn.Sequential(*extra)
        self.text_proj = nn.Sequential(nn.Linear(embed_dim, cond_dim), nn.LeakyReLU(0.2, inplace=True))
        self.fuse = nn.Sequential(nn.Conv2d(ch + cond_dim, pair_channels, 1, 1, 0, bias=False),
                                  nn.BatchNorm2d(pair_channels), nn.LeakyReLU(0.2, inplace=True))
        self.pair_head = nn.Conv2d(pair_channels, 1, (4, 2), 1, 0)

    def _check(self, x: torch.Tensor) -> None:
        if tuple(x.shape[-2:]) != self.resolution:
            raise ValueError(
                f"discriminator for scale {self.scale} expects {self.resolution[0]}x"
                f"{self.resolution[1]} images, got {x.shape[-2]}x{x.shape[-1]}"
            )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.trunk(x)

    def score_map(self, feat: torch.Tensor) -> torch.Tensor:
        return self.map_head(feat)[:, 0]

    def pair_score(self, feat: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
        h = self.pair_down(feat)
        t = self.text_proj(phi)[:, :, None, None].expand(-1, -1, *h.shape[-2:])
        return self.pair_head(self.fuse(torch.cat([h, t], 1))).flatten(1)[:, 0]

    def discriminate(self, x: torch.Tensor, phi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(score map N x R_h x R_w, pair score N) for images ``x`` and text embeddings ``phi``."""
        feat = self.features(x)
        return self.score_map(feat), self.pair_score(feat, phi)

    forward = discriminate

    def image_score(self, x: torch.Tensor) -> torch.Tensor:
        """Text-free per-sample score: mean of the score map."""
        return self.score_map(self.features(x)).mean((1, 2))


def build_discriminators(prof: ResolutionProfile, embed_dim: int, cond_dim: int = 128,
                         channels: int = 64, pair_channels: int = 512) -> nn.ModuleList:
    return nn.ModuleList(
        ScaleDiscriminator(i, prof, embed_dim, cond_dim, channels, pair_channels)
        for i in range(1, prof.num_scales + 1)
    )


# -- losses -------------------------------------------------------------------

def _to_target(x: torch.Tensor, target: float, kind: str) -> torch.Tensor:
    if kind == "lsgan":
        return (x - target).pow(2).mean()
    if kind == "nonsaturating":
        return F.binary_cross_entropy_with_logits(x, torch.full_like(x, target))
    raise ValueError(f"unknown adversarial loss {kind!r}")


@dataclass
class AdversarialLosses:
    d_loss: torch.Tensor | None = None
    g_loss_adv: torch.Tensor | None = None
    per_scale: list[dict[str, float]] = field(default_factory=list)


def d_loss(d_nets: Sequence, reals: Sequence[torch.Tensor], fakes: Sequence[torch.Tensor],
           phi: torch.Tensor, phi_mis: torch.Tensor, kind: str = "lsgan") -> AdversarialLosses:
    """Image loss plus matching-aware pair loss, summed over scales.

    Reals (with matched text) target 1; fakes and real/mismatched pairs target 0.
    Fakes are detached, so no gradient reaches the generator.
    """
    if not (len(d_nets) == len(reals) == len(fakes)):
        raise ValueError(
            f"scale count mismatch: {len(d_nets)} discriminators, {len(reals)} real, {len(fakes)} fake"
        )
    total, rows = 0.0, []
    for d, real, fake in zip(d_nets, reals, fakes):
        feat_r = d.features(real)
        feat_f = d.features(fake.detach())
        terms = {
            "img_real": _to_target(d.score_map(feat_r), 1.0, kind),
            "img_fake": _to_target(d.score_map(feat_f), 0.0, kind),
            "pair_real": _to_target(d.pair_score(feat_r, phi), 1.0, kind),
            "pair_fake": _to_target(d.pair_score(feat_f, phi), 0.0, kind),
            "pair_mis": _to_target(d.pair_score(feat_r, phi_mis), 0.0, kind),
        }
        scale_total = sum(terms.values())
        total = total + scale_total
        rows.append({k: float(v.detach()) for k, v in terms.items()})
    return AdversarialLosses(d_loss=total, per_scale=rows)


def g_loss_adv(d_nets: Sequence, fakes: Sequence[torch.Tensor], phi: torch.Tensor,
               kind: str = "lsgan") -> AdversarialLosses:
    """Generator side: fake maps and fake/matched pairs pushed toward target 1."""
    if len(d_nets) != len(fakes):
        raise ValueError(f"scale count mismatch: {len(d_nets)} discriminators, {len(fakes)} fake")
    total, rows = 0.0, []
    for d, fake in zip(d_nets, fakes):
        feat = d.features(fake)
        img = _to_target(d.score_map(feat), 1.0, kind)
        pair = _to_target(d.pair_score(feat, phi), 1.0, kind)
        total = total + img + pair
        rows.append({"g_img": float(img.detach()), "g_pair": float(pair.detach())})
    return AdversarialLosses(g_loss_adv=total, per_scale=rows)


def input_gradient_norms(score_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                         create_graph: bool = False) -> torch.Tensor:
    """Per-sample ``||d score_fn(x)_n / d x_n||_2``."""
    x = x.detach().requires_grad_(True)
    out = score_fn(x)
    if not out.requires_grad:
        return torch.zeros(x.shape[0], dtype=x.dtype)
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=create_graph, allow_unused=True)
    if grad is None:
        return torch.zeros(x.shape[0], dtype=x.dtype)
    return grad.flatten(1).norm(2, dim=1)


def interpolate(reals: torch.Tensor, fakes: torch.Tensor, rng: RandomStream) -> torch.Tensor:
    if reals.shape != fakes.shape:
        raise ValueError(f"reals {tuple(reals.shape)} and fakes {tuple(fakes.shape)} differ in shape")
    u = rng.rand("gp", reals.shape[0]).to(reals.dtype).view(-1, *[1] * (reals.ndim - 1))
    return u * reals.detach() + (1 - u) * fakes.detach()


def gradient_penalty(d, reals: torch.Tensor, fakes: torch.Tensor, rng: RandomStream) -> torch.Tensor:
    """Mean over the batch of ``(||grad_xhat D(xhat)||_2 - 1)^2`` on random interpolates.

    ``d`` is a :class:`ScaleDiscriminator` (scored by its map mean) or any
    callable mapping an image batch to per-sample scalars.
    """
    score_fn = d.image_score if hasattr(d, "image_score") else d
    x_hat = interpolate(reals, fakes, rng)
    norms = input_gradient_norms(score_fn, x_hat, create_graph=True)
    return (norms - 1).pow(2).mean()
