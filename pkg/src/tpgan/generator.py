"""One-stream generator emitting side outputs at doubling resolutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import ResolutionProfile


@dataclass
class ImagePyramid:
    """Side outputs, lowest resolution first. Tensors are N x 3 x H x W in [-1, 1]."""

    levels: list[torch.Tensor]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    @property
    def batch_size(self) -> int:
        return self.levels[0].shape[0]

    def detach(self) -> "ImagePyramid":
        return ImagePyramid([x.detach() for x in self.levels])

    def select(self, index) -> "ImagePyramid":
        return ImagePyramid([x[index] for x in self.levels])

    def numpy(self) -> list[np.ndarray]:
        """Channel-last float arrays, N x H x W x 3."""
        return [x.detach().permute(0, 2, 3, 1).cpu().numpy() for x in self.levels]


def init_weights(module: nn.Module, gen: torch.Generator, std: float = 0.02) -> None:
    """DCGAN-style init: N(0, std) for conv/linear weights, N(1, std) for norm scales."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            with torch.no_grad():
                m.weight.normal_(1.0, std, generator=gen)
                m.bias.zero_()
        elif isinstance(m, (nn.Embedding, nn.EmbeddingBag)):
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0, generator=gen)


class ResBlock(nn.Module):
    # no activation after the skip addition
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.BatchNorm2d(ch), nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.BatchNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Stretch(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        )


class Compress(nn.Sequential):
    def __init__(self, cin: int):
        super().__init__(nn.Conv2d(cin, 3, 3, 1, 1), nn.Tanh())


class GeneratorNet(nn.Module):
    """Seed projection, ``B`` groups of ``K`` res-blocks joined by ``B-1`` stretching
    layers, and compression taps on the last ``num_scales`` groups.

    ``B`` follows from the profile: the seed grid is doubled until it reaches
    the top resolution. Channels halve at every stretch, floored at 8.
    """

    def __init__(self, prof: ResolutionProfile, cond_dim: int = 128, noise_dim: int = 100,
                 channels: int = 512, res_blocks: int = 1):
        super().__init__()
        self.profile = prof
        self.cond_dim, self.noise_dim = cond_dim, noise_dim
        groups = prof.num_stretch + 1
        self.channels = [max(channels // 2 ** b, 8) for b in range(groups)]
        c0 = self.channels[0]
        self.seed_shape = (c0, prof.seed_height, prof.seed_width)
        n_seed = c0 * prof.seed_height * prof.seed_width
        self.seed = nn.Sequential(nn.Linear(cond_dim + noise_dim, n_seed, bias=False),
                                  nn.BatchNorm1d(n_seed), nn.ReLU(inplace=True))
        self.groups = nn.ModuleList(
            nn.Sequential(*[ResBlock(ch) for _ in range(res_blocks)]) for ch in self.channels
        )
        self.stretch = nn.ModuleList(
            Stretch(a, b) for a, b in zip(self.channels[:-1], self.channels[1:])
        )
        self.tap_groups = list(range(groups - prof.num_scales, groups))
        self.compress = nn.ModuleList(Compress(self.channels[g]) for g in self.tap_groups)

    def forward(self, c: torch.Tensor, z: torch.Tensor) -> ImagePyramid:
        if c.ndim != 2 or c.shape[1] != self.cond_dim:
            raise ValueError(f"condition must be N x {self.cond_dim}, got {tuple(c.shape)}")
        if z.ndim != 2 or z.shape[1] != self.noise_dim or z.shape[0] != c.shape[0]:
            raise ValueError(f"noise must be {c.shape[0]} x {self.noise_dim}, got {tuple(z.shape)}")
        h = self.seed(torch.cat([c, z], 1)).view(-1, *self.seed_shape)
        outs = []
        for g, block in enumerate(self.groups):
            if g > 0:
                h = self.stretch[g - 1](h)
            h = block(h)
            if g in self.tap_groups:
                outs.append(self.compress[self.tap_groups.index(g)](h))
        return ImagePyramid(outs)

    generate = forward


def count_parameters(net: nn.Module) -> dict[str, int]:
    """Trainable parameter count per top-level layer (``groups.0``, ``seed`` ...), plus ``total``."""
    table: dict[str, int] = {}
    for name, p in net.named_parameters():
        if not p.requires_grad:
            continue
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("groups", "stretch", "compress") else parts[0]
        table[key] = table.get(key, 0) + p.numel()
    table["total"] = sum(v for k, v in table.items())
    return table


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((x + 1) * 127.5), 0, 255).astype(np.uint8)


def image_grid(images: np.ndarray, cols: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile N x H x W x 3 images in [-1, 1] into one uint8 grid."""
    n, h, w, _ = images.shape
    cols = cols or min(n, 8)
    rows = -(-n // cols)
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 255, np.uint8)
    for k, img in enumerate(_to_uint8(images)):
        r, c = divmod(k, cols)
        grid[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = img
    return grid


def export_pyramid(pyramid: ImagePyramid | list, out_dir, prefix: str = "sample") -> list:
    """One ``scale_<i>`` directory of PNGs per level, top-scale PNGs and a grid in ``out_dir``."""
    from pathlib import Path

    from PIL import Image

    out = Path(out_dir)
    levels = pyramid.numpy() if isinstance(pyramid, ImagePyramid) else [
        x.detach().permute(0, 2, 3, 1).cpu().numpy() if isinstance(x, torch.Tensor) else x for x in pyramid
    ]
    written = []
    for i, level in enumerate(levels, 1):
        d = out / f"scale_{i}"
        d.mkdir(parents=True, exist_ok=True)
        for k, img in enumerate(_to_uint8(level)):
            p = d / f"{prefix}_{k:03d}.png"
            Image.fromarray(img).save(p)
            written.append(p)
    for k, img in enumerate(_to_uint8(levels[-1])):
        p = out / f"{prefix}_{k:03d}.png"
        Image.fromarray(img).save(p)
        written.append(p)
    p = out / "grid.png"
    Image.fromarray(image_grid(levels[-1])).save(p)
    written.append(p)
    return written
