"""Shared types: resolution profiles, training config, random streams, checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

CHECKPOINT_MAGIC = b"TPGANCKPT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Raised when a config or profile fails validation."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class CheckpointError(RuntimeError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ResolutionProfile:
    """Image ladder of the generator.

    ``base_height x base_width`` is the lowest scale; scale ``i`` (1-based) has
    resolution ``base * 2**(i-1)``. The seed grid is where the generator starts.
    """

    base_height: int = 16
    base_width: int = 8
    num_scales: int = 3
    seed_height: int = 4
    seed_width: int = 2

    @classmethod
    def desk(cls) -> "ResolutionProfile":
        return cls()

    @classmethod
    def full(cls) -> "ResolutionProfile":
        # an 8 x 4 seed gives 6 groups and 5 stretches up to 256 x 128
        return cls(base_height=64, base_width=32, num_scales=3, seed_height=8, seed_width=4)

    def resolution(self, scale: int) -> tuple[int, int]:
        """(H, W) of 1-based ``scale``."""
        if not 1 <= scale <= self.num_scales:
            raise IndexError(f"scale {scale} outside 1..{self.num_scales}")
        f = 2 ** (scale - 1)
        return self.base_height * f, self.base_width * f

    @property
    def resolutions(self) -> list[tuple[int, int]]:
        return [self.resolution(i) for i in range(1, self.num_scales + 1)]

    @property
    def top(self) -> tuple[int, int]:
        return self.resolution(self.num_scales)

    @property
    def num_stretch(self) -> int:
        return int(round(math.log2(self.top[0] / self.seed_height)))

    def violations(self) -> list[str]:
        out = []
        if self.num_scales < 1:
            out.append("num_scales must be ≥ 1")
            return out
        if self.base_height != 2 * self.base_width:
            out.append(
                f"aspect: base_height ({self.base_height}) must equal 2·base_width ({self.base_width})"
            )
        if self.seed_height <= 0 or self.seed_width <= 0:
            out.append("seed dimensions must be positive")
            return out
        top_h, top_w = self.top
        rh, rw = top_h / self.seed_height, top_w / self.seed_width
        if not (rh.is_integer() and _is_pow2(int(rh))):
            out.append(f"seed_height {self.seed_height} times a power of two must reach {top_h}")
        elif rh != rw:
            out.append(
                f"seed {self.seed_height}x{self.seed_width} needs the same number of ×2 "
                f"stretches in both axes to reach {top_h}x{top_w}"
            )
        elif int(math.log2(rh)) + 1 < self.num_scales:
            out.append("too few stretching layers to tap num_scales side outputs")
        for name in ("base_height", "base_width"):
            v = getattr(self, name)
            seed = self.seed_height if name == "base_height" else self.seed_width
            if v % seed or not _is_pow2(v // seed):
                out.append(f"{name} ({v}) must be a power of two times the seed")
        return out


@dataclass
class TrainConfig:
    lambda1: float = 0.5
    lambda2: float = 0.1
    alpha: float = 0.2
    gp_weight: float = 10.0
    noise_dim: int = 100
    cond_dim: int = 128
    embed_dim: int = 64
    batch_size: int = 16
    epochs: int = 10
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_head: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    rng_seed: int = 0
    adv_loss: str = "lsgan"
    gen_channels: int = 512
    gen_res_blocks: int = 1
    disc_channels: int = 64
    disc_pair_channels: int = 512
    head_channels: int = 32
    feat_dim: int = 128
    teacher_channels: int = 32
    teacher_epochs: int = 8
    teacher_min_accuracy: float = 0.95
    head_real_weight: float = 1.0
    text_encoder: str = "bag_of_tokens"
    feature_extractor: str = "teacher"
    eval_interval: int = 1
    eval_captions: int = 64
    is_splits: int = 10
    deterministic: bool = True

    # α = 0.5 is the alternative value quoted for the mix-up prior.
    ALPHA_PRESETS = {"default": 0.2, "alt": 0.5}

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Narrow networks and a higher learning rate, sized for a few CPU minutes."""
        base = dict(gen_channels=256, disc_channels=16, disc_pair_channels=64, head_channels=16,
                    feat_dim=64, batch_size=32, epochs=16, lr_g=5e-4, lr_d=5e-4, lr_head=5e-4,
                    teacher_epochs=6, eval_interval=4)
        base.update(overrides)
        return cls(**base)

    def violations(self) -> list[str]:
        out = []
        for name in ("lambda1", "lambda2", "gp_weight"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be ≥ 0")
        if not self.alpha > 0:
            out.append("alpha must be > 0")
        for name in ("cond_dim", "noise_dim", "embed_dim", "batch_size", "feat_dim"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be > 0")
        if self.epochs < 0:
            out.append("epochs must be ≥ 0")
        for name in ("lr_g", "lr_d", "lr_head"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be > 0")
        if self.adv_loss not in ("lsgan", "nonsaturating"):
            out.append("adv_loss must be one of {lsgan, nonsaturating}")
        if self.gen_channels < 2 ** 3:
            out.append("gen_channels must be ≥ 8")
        if self.eval_interval < 1:
            out.append("eval_interval must be ≥ 1")
        return out


def validate_config(cfg: TrainConfig, prof: ResolutionProfile) -> list[str]:
    """Every violated invariant of ``cfg`` and ``prof``; empty when valid. Never raises."""
    return cfg.violations() + prof.violations()


# -- config files -------------------------------------------------------------

def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return json.dumps(str(v))


def dump_config(cfg: TrainConfig, prof: ResolutionProfile) -> str:
    lines = ["[train]"]
    lines += [f"{f.name} = {_toml_value(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    lines += ["", "[profile]"]
    lines += [f"{f.name} = {_toml_value(getattr(prof, f.name))}" for f in dataclasses.fields(prof)]
    return "\n".join(lines) + "\n"


def _from_table(cls, table: dict[str, Any], what: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(names))
    if unknown:
        raise ConfigError([f"unknown {what} key: {k}" for k in unknown])
    kwargs = {}
    for k, v in table.items():
        default = getattr(cls(), k)
        if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if type(v) is not type(default):
            raise ConfigError([f"{what}.{k}: expected {type(default).__name__}, got {type(v).__name__}"])
        kwargs[k] = v
    return cls(**kwargs)


def parse_config(text: str) -> tuple[TrainConfig, ResolutionProfile]:
    import tomli

    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError([f"config parse error: {e}"]) from e
    extra = sorted(set(doc) - {"train", "profile"})
    if extra:
        raise ConfigError([f"unknown table: [{t}]" for t in extra])
    cfg = _from_table(TrainConfig, doc.get("train", {}), "train")
    prof = _from_table(ResolutionProfile, doc.get("profile", {}), "profile")
    return cfg, prof


def load_config(path: str | os.PathLike) -> tuple[TrainConfig, ResolutionProfile]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# -- randomness ---------------------------------------------------------------

class RandomStream:
    """Seeded family of independent numpy generators keyed by name.

    Substreams are created lazily; each is derived from ``(seed, crc32(name))`` so
    adding a new consumer never perturbs existing ones.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & (2 ** 64 - 1)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))
            self._streams[name] = np.random.Generator(np.random.PCG64(ss))
        return self._streams[name]

    def randn(self, name: str, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self[name].standard_normal(shape, dtype=np.float32))

    def rand(self, name: str, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self[name].random(shape, dtype=np.float32))

    def torch_seed(self, name: str) -> int:
        return int(self[name].integers(0, 2 ** 62))

    def state_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "streams": {k: g.bit_generator.state for k, g in self._streams.items()},
        }

    @classmethod
    def from_state_dict(cls, state: dict[str, Any]) -> "RandomStream":
        rs = cls(state["seed"])
        for name, st in state["streams"].items():
            rs[name].bit_generator.state = st
        return rs


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag, warn_only=False)
    torch.backends.cudnn.deterministic = flag
    torch.backends.cudnn.benchmark = not flag


def deterministic_from_env(default: bool) -> bool:
    v = os.environ.get("TPGAN_DETERMINISTIC")
    if v is None:
        return default
    return v.strip() not in ("", "0", "false", "False")


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    manifest: dict[str, Any]
    sections: dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> TrainConfig:
        return _from_table(TrainConfig, self.manifest["config"], "train")

    @property
    def profile(self) -> ResolutionProfile:
        return _from_table(ResolutionProfile, self.manifest["profile"], "profile")


def save_checkpoint(
    path: str | os.PathLike,
    sections: dict[str, Any],
    cfg: TrainConfig,
    prof: ResolutionProfile,
    meta: dict[str, Any] | None = None,
) -> Path:
    """Write a single-file archive: header, JSON manifest, then one blob per section.

    Blobs are ``torch.save`` payloads. The manifest records offset, length and
    sha256 of each so a damaged file names exactly what is missing.
    """
    blobs = []
    for name, obj in sections.items():
        buf = io.BytesIO()
        torch.save(obj, buf)
        blobs.append((name, buf.getvalue()))
    entries, offset = [], 0
    for name, data in blobs:
        entries.append(
            {"name": name, "offset": offset, "length": len(data),
             "sha256": hashlib.sha256(data).hexdigest()}
        )
        offset += len(data)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "sections": entries,
        "config": dataclasses.asdict(cfg),
        "profile": dataclasses.asdict(prof),
        "meta": meta or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(mbytes)))
        fh.write(mbytes)
        for _, data in blobs:
            fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    raw = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC)
    if raw[:head] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a tpgan checkpoint (bad magic)")
    if len(raw) < head + 12:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<IQ", raw[head:head + 12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} != supported {CHECKPOINT_VERSION}"
        )
    start = head + 12
    if len(raw) < start + mlen:
        raise CheckpointError(f"{path}: truncated manifest section")
    manifest = json.loads(raw[start:start + mlen])
    body = raw[start + mlen:]
    ckpt = Checkpoint(manifest)
    for entry in manifest["sections"]:
        name = entry["name"]
        data = body[entry["offset"]:entry["offset"] + entry["length"]]
        if len(data) != entry["length"]:
            raise CheckpointError(
                f"{path}: section '{name}' truncated ({len(data)} of {entry['length']} bytes)"
            )
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: section '{name}' is corrupt (checksum mismatch)")
        ckpt.sections[name] = torch.load(io.BytesIO(data), weights_only=False)
    return ckpt
