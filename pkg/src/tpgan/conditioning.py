"""Text encoders and conditioning augmentation."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterable

import torch
import torch.nn.functional as F
from torch import nn

from .core import RandomStream

UNK = "<unk>"
_PUNCT = re.compile(r"[^\w\s]")


def tokenize(caption: str) -> list[str]:
    """Lowercased whitespace tokens, punctuation stripped."""
    return _PUNCT.sub(" ", caption.lower()).split()


def _features(tokens: list[str]) -> list[str]:
    # bigrams keep "red shirt, blue pants" apart from "blue shirt, red pants"
    return tokens + [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]


class BagOfTokensEncoder(nn.Module):
    """Mean of learned embeddings over unigrams and adjacent bigrams, layer-normalized.

    Unseen features share the ``<unk>`` row (index 0). The normalization keeps
    entries at unit scale whatever the caption length.
    """

    def __init__(self, vocab: Iterable[str], embed_dim: int = 64):
        super().__init__()
        words = sorted(set(vocab) - {UNK})
        self.vocab = [UNK] + words
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.embed_dim = embed_dim
        self.table = nn.EmbeddingBag(len(self.vocab), embed_dim, mode="mean")

    @classmethod
    def from_captions(cls, captions: Iterable[str], embed_dim: int = 64) -> "BagOfTokensEncoder":
        vocab = set()
        for cap in captions:
            vocab.update(_features(tokenize(cap)))
        return cls(vocab, embed_dim)

    def token_ids(self, caption: str) -> list[int]:
        toks = tokenize(caption)
        if not toks:
            raise ValueError("caption is empty")
        return [self.index.get(f, 0) for f in _features(toks)]

    def forward(self, captions: list[str]) -> torch.Tensor:
        ids, offsets = [], []
        for cap in captions:
            offsets.append(len(ids))
            ids.extend(self.token_ids(cap))
        pooled = self.table(torch.tensor(ids, dtype=torch.long),
                            torch.tensor(offsets, dtype=torch.long))
        return F.layer_norm(pooled, (self.embed_dim,))

    def encode_text(self, caption: str) -> torch.Tensor:
        return self([caption])[0]

    def extra_state(self) -> dict:
        return {"vocab": self.vocab, "embed_dim": self.embed_dim}


ENCODERS: dict[str, Callable[..., nn.Module]] = {"bag_of_tokens": BagOfTokensEncoder.from_captions}


def build_encoder(name: str, captions: Iterable[str], embed_dim: int) -> nn.Module:
    try:
        factory = ENCODERS[name]
    except KeyError:
        raise ValueError(f"unknown text encoder {name!r}; registered: {sorted(ENCODERS)}") from None
    return factory(captions, embed_dim)


@dataclass
class TextCondition:
    mu: torch.Tensor
    log_var: torch.Tensor
    c: torch.Tensor
    kl: torch.Tensor  # batch mean

    @property
    def kl_per_sample(self) -> torch.Tensor:
        return gaussian_kl(self.mu, self.log_var)


def gaussian_kl(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over the last axis."""
    return 0.5 * (mu.pow(2) + log_var.exp() - 1 - log_var).sum(-1)


class ConditioningAugmentation(nn.Module):
    """One affine map each for the mean and the log-variance of the condition."""

    def __init__(self, embed_dim: int, cond_dim: int = 128):
        super().__init__()
        self.cond_dim = cond_dim
        self.mu = nn.Linear(embed_dim, cond_dim)
        self.log_var = nn.Linear(embed_dim, cond_dim)

    def init_(self, gen: torch.Generator) -> None:
        """Unit-variance means for unit-scale inputs; log-variances start near 0.

        With the small DCGAN init the mean is swamped by the unit noise and the
        generator cannot see the text.
        """
        with torch.no_grad():
            self.mu.weight.normal_(0.0, self.mu.in_features ** -0.5, generator=gen)
            self.log_var.weight.normal_(0.0, 0.02, generator=gen)
            self.mu.bias.zero_()
            self.log_var.bias.zero_()

    def forward(self, phi: torch.Tensor, rng: RandomStream | None = None,
                eps: torch.Tensor | None = None) -> TextCondition:
        mu, log_var = self.mu(phi), self.log_var(phi)
        if eps is None:
            eps = rng.randn("ca", *mu.shape) if rng is not None else torch.zeros_like(mu)
        c = mu + torch.exp(0.5 * log_var) * eps
        return TextCondition(mu, log_var, c, gaussian_kl(mu, log_var).mean())


def condition_augment(mu: torch.Tensor, log_var: torch.Tensor, rng: RandomStream) -> TextCondition:
    """Reparameterized draw from given moments, for callers without a CA module."""
    eps = rng.randn("ca", *mu.shape)
    c = mu + torch.exp(0.5 * log_var) * eps
    return TextCondition(mu, log_var, c, gaussian_kl(mu, log_var).mean())
