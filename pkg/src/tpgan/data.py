"""Captioned person corpora: procedural sprites, JSON-lines manifests, batching."""

from __future__ import annotations

import itertools
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .core import RandomStream, ResolutionProfile

SPLITS = ("train", "val", "test")

SHIRT_COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.10, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
    "orange": (0.95, 0.50, 0.05),
    "purple": (0.55, 0.10, 0.65),
}
PANTS_COLORS = {
    "blue": (0.10, 0.25, 0.90),
    "black": (0.05, 0.05, 0.05),
    "grey": (0.50, 0.50, 0.50),
    "white": (0.95, 0.95, 0.95),
    "brown": (0.50, 0.30, 0.10),
    "green": (0.10, 0.65, 0.15),
}
SHOE_COLORS = {
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
    "brown": (0.50, 0.30, 0.10),
    "red": (0.85, 0.10, 0.10),
}
BAG_COLOR = (0.75, 0.55, 0.25)
SKIN_COLOR = (0.90, 0.70, 0.55)

_SHIRTS = list(SHIRT_COLORS)
_PANTS = list(PANTS_COLORS)
_SHOES = list(SHOE_COLORS)
PALETTE_SIZE = len(_SHIRTS) * len(_PANTS) * len(_SHOES) * 2


class DataError(ValueError):
    pass


@dataclass
class CaptionedImage:
    image: np.ndarray  # H x W x 3, float32 in [-1, 1]
    identity_id: int
    captions: list[str]
    split: str = "train"
    image_path: str | None = None

    def __post_init__(self):
        if not self.captions:
            raise DataError(f"record for identity {self.identity_id} has no captions")
        if self.split not in SPLITS:
            raise DataError(f"unknown split label {self.split!r}")


@dataclass(frozen=True)
class SpriteSpec:
    shirt_color: int
    pants_color: int
    shoe_color: int
    has_bag: bool

    @property
    def identity_id(self) -> int:
        # mixed-radix code: bijective over the palette
        code = self.shirt_color
        code = code * len(_PANTS) + self.pants_color
        code = code * len(_SHOES) + self.shoe_color
        return code * 2 + int(self.has_bag)

    @classmethod
    def from_identity(cls, identity_id: int) -> "SpriteSpec":
        if not 0 <= identity_id < PALETTE_SIZE:
            raise DataError(f"identity {identity_id} outside the sprite palette")
        code, bag = divmod(identity_id, 2)
        code, shoe = divmod(code, len(_SHOES))
        shirt, pants = divmod(code, len(_PANTS))
        return cls(shirt, pants, shoe, bool(bag))

    @property
    def names(self) -> tuple[str, str, str]:
        return _SHIRTS[self.shirt_color], _PANTS[self.pants_color], _SHOES[self.shoe_color]

    def captions(self) -> list[str]:
        shirt, pants, shoes = self.names
        bag_a = "with a bag" if self.has_bag else "without a bag"
        bag_b = "a bag on the shoulder" if self.has_bag else "no bag"
        return [
            f"a person wearing a {shirt} shirt, {pants} pants and {shoes} shoes, {bag_a}",
            f"this person has a {shirt} top with {pants} trousers, {shoes} shoes and {bag_b}",
        ]


def render_sprite(spec: SpriteSpec, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one jittered sprite at ``height x width``; returns H x W x 3 in [-1, 1]."""
    shirt, pants, shoes = (np.array(c[n]) for c, n in
                           zip((SHIRT_COLORS, PANTS_COLORS, SHOE_COLORS), spec.names))
    bg = rng.uniform(0.25, 0.45)
    img = np.full((height, width, 3), bg) + rng.normal(0, 0.03, (height, width, 3))
    gain = rng.uniform(0.92, 1.08)
    dx = rng.integers(-1, 2) * width / 32
    dy = rng.integers(-1, 2) * height / 64
    ys = (np.arange(height) + 0.5) / height * 64 - dy * 64 / height
    xs = (np.arange(width) + 0.5) / width * 32 - dx * 32 / width
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    def box(y0, y1, x0, x1, color):
        m = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        img[m] = np.clip(np.asarray(color) * gain, 0, 1)

    box(3, 13, 12, 20, SKIN_COLOR)
    box(13, 32, 8, 24, shirt)
    box(32, 54, 9, 15.5, pants)
    box(32, 54, 16.5, 23, pants)
    box(54, 61, 7, 15.5, shoes)
    box(54, 61, 16.5, 25, shoes)
    if spec.has_bag:
        box(20, 36, 24, 30, BAG_COLOR)
    return (np.clip(img, 0, 1) * 2 - 1).astype(np.float32)


class Corpus:
    """Immutable list of :class:`CaptionedImage` with split and label helpers."""

    def __init__(self, records: Sequence[CaptionedImage], profile: ResolutionProfile):
        self.records = list(records)
        self.profile = profile
        ids = sorted({r.identity_id for r in self.records})
        self.identities = ids
        self._label = {i: k for k, i in enumerate(ids)}
        self._pyramids: dict[str, list[np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_identities(self) -> int:
        return len(self.identities)

    def label(self, identity_id: int) -> int:
        return self._label[identity_id]

    def labels(self, identity_ids) -> np.ndarray:
        return np.array([self._label[int(i)] for i in identity_ids], dtype=np.int64)

    def split(self, name: str) -> "Corpus":
        """Sub-corpus for ``name``; label space stays that of the parent corpus."""
        sub = Corpus([r for r in self.records if r.split == name], self.profile)
        sub.identities, sub._label = self.identities, self._label
        return sub

    def split_sizes(self) -> dict[str, int]:
        return dict(Counter(r.split for r in self.records))

    def split_identity_counts(self) -> dict[str, int]:
        out: dict[str, set] = {}
        for r in self.records:
            out.setdefault(r.split, set()).add(r.identity_id)
        return {k: len(v) for k, v in out.items()}

    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.records]) if self.records else np.zeros((0, 0, 0, 3))

    def pyramid(self) -> list[np.ndarray]:
        """Per-scale image arrays (lowest scale first), cached."""
        if "all" not in self._pyramids:
            self._pyramids["all"] = build_pyramid(self.images(), self.profile)
        return self._pyramids["all"]


def generate_sprite_corpus(
    num_identities: int,
    images_per_identity: int,
    prof: ResolutionProfile,
    rng: RandomStream,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> Corpus:
    """Procedural captioned-person corpus.

    Identities are distinct attribute tuples drawn without replacement from the
    palette. Within an identity, images are split train/val/test by the given
    fractions, so every identity appears in every split.
    """
    if num_identities > PALETTE_SIZE:
        raise DataError(
            f"num_identities={num_identities} exceeds the attribute space ({PALETTE_SIZE})"
        )
    if num_identities < 1 or images_per_identity < 1:
        raise DataError("need at least one identity and one image per identity")
    g = rng["corpus"]
    ids = np.sort(g.choice(PALETTE_SIZE, size=num_identities, replace=False))
    h, w = prof.top
    n_val = int(round(images_per_identity * split_fractions[1]))
    n_test = int(round(images_per_identity * split_fractions[2]))
    n_train = images_per_identity - n_val - n_test
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    records = []
    for ident in ids:
        spec = SpriteSpec.from_identity(int(ident))
        for k in range(images_per_identity):
            records.append(
                CaptionedImage(render_sprite(spec, h, w, g), int(ident), spec.captions(), splits[k])
            )
    return Corpus(records, prof)


# -- manifests ----------------------------------------------------------------

def export_corpus(corpus: Corpus, out_dir: str | os.PathLike, header: bool = True) -> Path:
    """Write PNGs plus ``manifest.jsonl`` readable by :func:`load_manifest`."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    if header:
        lines.append(json.dumps({"header": {
            "split_images": corpus.split_sizes(),
            "split_identities": corpus.split_identity_counts(),
        }}))
    for k, r in enumerate(corpus.records):
        rel = f"images/{r.identity_id:06d}_{k:06d}.png"
        Image.fromarray(to_uint8(r.image)).save(out / rel)
        lines.append(json.dumps({"image_path": rel, "identity_id": r.identity_id,
                                 "captions": r.captions, "split": r.split}))
    path = out / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((img + 1) * 127.5), 0, 255).astype(np.uint8)


def _read_image(path: Path, prof: ResolutionProfile) -> np.ndarray:
    from PIL import Image

    h, w = prof.top
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (w, h):
            im = im.resize((w, h), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.float32)
    return np.clip(arr / 127.5 - 1, -1, 1)


def load_manifest(path: str | os.PathLike, prof: ResolutionProfile) -> Corpus:
    """Load a JSON-lines manifest; image paths resolve relative to the manifest.

    An optional first line ``{"header": {...}}`` may declare ``split_images``
    and/or ``split_identities``; declared counts are checked against the records.
    """
    path = Path(path)
    root = path.parent
    records, header = [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if "header" in rec:
                header = rec["header"]
                continue
            missing = {"image_path", "identity_id", "captions", "split"} - set(rec)
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            if rec["split"] not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split label {rec['split']!r}")
            img_path = root / rec["image_path"]
            if not img_path.is_file():
                raise DataError(f"{path}:{lineno}: image file not found: {img_path}")
            records.append(CaptionedImage(_read_image(img_path, prof), int(rec["identity_id"]),
                                          list(rec["captions"]), rec["split"], str(img_path)))
    corpus = Corpus(records, prof)
    if header:
        for key, got in (("split_images", corpus.split_sizes()),
                         ("split_identities", corpus.split_identity_counts())):
            want = header.get(key)
            if want is not None and {k: v for k, v in want.items() if v} != got:
                raise DataError(f"{path}: header {key} {want} does not match records {got}")
    return corpus


# -- pyramids and batches -----------------------------------------------------

def area_downsample(images: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter downsample of N x H x W x C by an integer factor."""
    if factor == 1:
        return images
    n, h, w, c = images.shape
    return images.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))


def build_pyramid(images: np.ndarray, prof: ResolutionProfile) -> list[np.ndarray]:
    top_h = prof.top[0]
    return [area_downsample(images, top_h // h).astype(np.float32) for h, _ in prof.resolutions]


def to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


@dataclass
class Batch:
    pyramid: list[torch.Tensor]  # per scale, N x 3 x H x W, lowest first
    captions: list[str]
    identity_ids: np.ndarray
    labels: torch.Tensor
    mismatched: list[str]
    mismatched_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.captions)


def _mismatch(ids: np.ndarray, captions: list[str], pool_ids: np.ndarray,
              pool_caps: list[str], g: np.random.Generator, tries: int = 16):
    n = len(ids)
    for _ in range(tries):
        perm = g.permutation(n)
        if np.all(ids[perm] != ids):
            return [captions[j] for j in perm], ids[perm]
    # fall back to the epoch pool for colliding slots
    perm = g.permutation(n)
    out_caps, out_ids = [captions[j] for j in perm], ids[perm].copy()
    for i in np.flatnonzero(out_ids == ids):
        choices = np.flatnonzero(pool_ids != ids[i])
        if len(choices) == 0:
            raise DataError("cannot draw a mismatched caption: only one identity present")
        j = choices[g.integers(len(choices))]
        out_caps[i], out_ids[i] = pool_caps[j], pool_ids[j]
    return out_caps, out_ids


def make_batches(corpus: Corpus, batch_size: int, rng: RandomStream,
                 skip: int = 0) -> Iterator[Batch]:
    """One epoch of batches in a seed-deterministic order.

    Each image contributes one caption drawn uniformly for the epoch. The last
    partial batch is dropped. ``skip`` discards the first batches while
    consuming the same random draws, for mid-epoch resume.
    """
    n = len(corpus)
    if n == 0:
        raise DataError("corpus is empty")
    if batch_size > n:
        raise DataError(f"batch_size {batch_size} exceeds corpus size {n}")
    g = rng["data"]
    order = g.permutation(n)
    caps = [r.captions[g.integers(len(r.captions))] for r in corpus.records]
    all_ids = np.array([r.identity_id for r in corpus.records], dtype=np.int64)
    pyr = corpus.pyramid()
    for b in range(n // batch_size):
        idx = order[b * batch_size:(b + 1) * batch_size]
        ids = all_ids[idx]
        bcaps = [caps[i] for i in idx]
        mis, mis_ids = _mismatch(ids, bcaps, all_ids, caps, g)
        if b < skip:
            continue
        yield Batch(
            pyramid=[to_nchw(level[idx]) for level in pyr],
            captions=bcaps,
            identity_ids=ids,
            labels=torch.from_numpy(corpus.labels(ids)),
            mismatched=mis,
            mismatched_ids=mis_ids,
        )


def nearest_centroid_accuracy(train: np.ndarray, y_train: np.ndarray,
                              test: np.ndarray, y_test: np.ndarray) -> float:
    classes = np.unique(y_train)
    flat_tr = train.reshape(len(train), -1)
    cents = np.stack([flat_tr[y_train == c].mean(0) for c in classes])
    flat_te = test.reshape(len(test), -1)
    d = ((flat_te[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((classes[d.argmin(1)] == y_test).mean())


def palette_combinations() -> Iterator[SpriteSpec]:
    for s, p, sh, b in itertools.product(range(len(_SHIRTS)), range(len(_PANTS)),
                                         range(len(_SHOES)), (False, True)):
        yield SpriteSpec(s, p, sh, b)
