"""FID, Inception Score, visual-semantic similarity, affinity matrices, evaluation protocol.

The desk default feature extractor is the frozen teacher trunk, not an
Inception network, so values here are comparable across runs of this package
only, never against published Inception-based numbers.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import RandomStream

COV_JITTER = 1e-6
EIG_TOL = 1e-6
VS_MARGIN = 0.2
VS_DIM = 512

FULL_FID_IMAGES = 12_000
FULL_IS_IMAGES = 3_000
FID_DRAWS_PER_CAPTION = 4
FULL_TEST_CAPTIONS = FULL_FID_IMAGES // FID_DRAWS_PER_CAPTION

EXTRACTOR_NOTE = ("features from the frozen teacher trunk (not Inception); "
                  "values are comparable only across runs of this toolkit")


class MetricError(ValueError):
    pass


# -- Frechet distance ---------------------------------------------------------

def _psd_eig(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    scale = max(1.0, float(np.abs(w).max())) if w.size else 1.0
    if w.size and w.min() < -EIG_TOL * scale:
        raise MetricError(f"{what} is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return np.clip(w, 0, None), v


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = _psd_eig(np.atleast_2d(m), "covariance")
    return (v * np.sqrt(w)) @ v.T


def trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """``Tr((s1 s2)^{1/2})`` via the symmetric form ``sqrt(s1) s2 sqrt(s1)``."""
    r = psd_sqrt(s1)
    w, _ = _psd_eig(r @ np.atleast_2d(s2) @ r, "covariance product")
    return float(np.sqrt(w).sum())


def fid_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, float)), np.atleast_2d(np.asarray(sigma2, float))
    diff = mu1 - mu2
    value = diff @ diff + np.trace(s1) + np.trace(s2) - 2 * trace_sqrt_product(s1, s2)
    return float(max(value, 0.0))


def feature_moments(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and unbiased covariance with diagonal jitter.

    With no more samples than dimensions the covariance is Ledoit-Wolf shrunk.
    """
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < 2:
        raise MetricError("need at least two feature vectors")
    mu = x.mean(0)
    if n <= d:
        from sklearn.covariance import ledoit_wolf

        cov = ledoit_wolf(x)[0] * n / (n - 1)
    else:
        cov = np.cov(x, rowvar=False, ddof=1).reshape(d, d)
    return mu, cov + COV_JITTER * np.eye(d)


def fid(feats_real, feats_fake) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    return fid_from_moments(*feature_moments(feats_real), *feature_moments(feats_fake))


# -- Inception Score ----------------------------------------------------------

def inception_score(probs, splits: int = 10) -> tuple[float, float]:
    """``exp(E_x KL(p(y|x) || p(y)))`` per split; mean and std over splits."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise MetricError("inception_score needs a non-empty N x C probability matrix")
    if not np.allclose(p.sum(1), 1.0, atol=1e-6) or (p < 0).any():
        raise MetricError("each row of probs must be a probability distribution")
    splits = max(1, min(splits, len(p)))
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0).sum(1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


# -- visual-semantic similarity ----------------------------------------------

def cosine(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity; rejects zero vectors."""
    nx, ny = x.norm(dim=-1), y.norm(dim=-1)
    if bool((nx == 0).any()) or bool((ny == 0).any()):
        raise MetricError("cosine similarity undefined for a zero-norm embedding")
    return (x * y).sum(-1) / (nx * ny)


def hinge(s_pos: torch.Tensor, s_neg: torch.Tensor, margin: float = VS_MARGIN) -> torch.Tensor:
    return torch.clamp(margin - s_pos + s_neg, min=0)


def bidirectional_ranking_loss(v: torch.Tensor, c: torch.Tensor, ids, margin: float = VS_MARGIN
                               ) -> torch.Tensor:
    """Hinge ranking loss in both directions; negatives are pairs of different identities."""
    ids = torch.as_tensor(np.asarray(ids))
    s = F.normalize(v, dim=1) @ F.normalize(c, dim=1).T  # s[i, j] = s(v_i, c_j)
    pos = s.diag()
    neg_mask = (ids[:, None] != ids[None, :]).to(s.dtype)
    img_to_txt = hinge(pos[:, None], s, margin) * neg_mask
    txt_to_img = hinge(pos[:, None], s.T, margin) * neg_mask
    return img_to_txt.sum() + txt_to_img.sum()


class VisualSemanticEmbedding(nn.Module):
    """``f_v`` for image features and ``f_c`` for text embeddings, into a shared space."""

    def __init__(self, image_dim: int, text_dim: int, dim: int = VS_DIM, hidden: int = 256):
        super().__init__()
        self.f_v = nn.Sequential(nn.Linear(image_dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))
        self.f_c = nn.Sequential(nn.Linear(text_dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    @torch.no_grad()
    def score(self, image_feats: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
        return vs_score(image_feats, text_emb, self.f_v, self.f_c)


def vs_score(image_feats, text_emb, f_v: Callable, f_c: Callable) -> torch.Tensor:
    """Cosine similarity of ``f_v(image_feats)`` and ``f_c(text_emb)``, in [-1, 1]."""
    return cosine(f_v(torch.as_tensor(image_feats)), f_c(torch.as_tensor(text_emb))).clamp(-1, 1)


def train_vs_embedders(image_feats: np.ndarray, text_emb: np.ndarray, ids, rng: RandomStream,
                       epochs: int = 40, batch_size: int = 64, lr: float = 1e-3,
                       margin: float = VS_MARGIN) -> VisualSemanticEmbedding:
    """Fit both mappings on matched (image feature, text embedding) pairs of the train split."""
    ids = np.asarray(ids)
    if len(np.unique(ids)) < 2:
        raise MetricError("visual-semantic training needs at least two identities")
    v_all = torch.as_tensor(image_feats, dtype=torch.float32)
    c_all = torch.as_tensor(text_emb, dtype=torch.float32)
    g = rng["vs"]
    with torch.random.fork_rng():
        torch.manual_seed(int(g.integers(2 ** 62)))
        model = VisualSemanticEmbedding(v_all.shape[1], c_all.shape[1])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = len(ids)
    bs = min(batch_size, n)
    for _ in range(epochs):
        order = g.permutation(n)
        for k in range(0, n - bs + 1, bs):
            idx = order[k:k + bs]
            if len(np.unique(ids[idx])) < 2:
                continue
            loss = bidirectional_ranking_loss(model.f_v(v_all[idx]), model.f_c(c_all[idx]),
                                              ids[idx], margin)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.eval()


# -- feature extractors and affinity -----------------------------------------

class FeatureExtractor:
    """Deterministic image -> feature adapter over a frozen network."""

    def __init__(self, name: str, fn: Callable[[torch.Tensor], torch.Tensor], feat_dim: int,
                 batch_size: int = 256):
        self.name, self.fn, self.feat_dim, self.batch_size = name, fn, feat_dim, batch_size

    @torch.no_grad()
    def __call__(self, images: torch.Tensor | np.ndarray) -> np.ndarray:
        x = torch.as_tensor(images)
        if x.ndim == 4 and x.shape[-1] == 3 and x.shape[1] != 3:
            x = x.permute(0, 3, 1, 2)
        out = [self.fn(x[k:k + self.batch_size]) for k in range(0, len(x), self.batch_size)]
        return torch.cat(out).double().numpy() if out else np.zeros((0, self.feat_dim))


def _teacher_extractor(teacher) -> FeatureExtractor:
    teacher.eval()
    return FeatureExtractor("teacher", teacher.features, teacher.feat_dim)


EXTRACTORS: dict[str, Callable[..., FeatureExtractor]] = {"teacher": _teacher_extractor}


def build_extractor(name: str, net) -> FeatureExtractor:
    try:
        return EXTRACTORS[name](net)
    except KeyError:
        raise ValueError(f"unknown feature extractor {name!r}; registered: {sorted(EXTRACTORS)}") from None


def affinity_matrix(images, extractor: Callable | None = None) -> np.ndarray:
    """Pairwise cosine similarity of image features (or of ``images`` if already features)."""
    feats = np.asarray(extractor(images) if extractor is not None else images, dtype=np.float64)
    if len(feats) < 2:
        raise MetricError("affinity matrix needs at least two images")
    norms = np.linalg.norm(feats, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise MetricError(f"image {int(zero[0])} has an all-zero feature vector")
    unit = feats / norms[:, None]
    a = unit @ unit.T
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, 1.0)
    return a


# -- evaluation protocol ------------------------------------------------------

@dataclass
class MetricReport:
    fid: float | None = None
    is_mean: float | None = None
    is_std: float | None = None
    vs_mean: float | None = None
    vs_std: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    resolutions: dict[str, list[int]] = field(default_factory=dict)
    extractor: str = "teacher"
    note: str = EXTRACTOR_NOTE

    def __post_init__(self):
        if self.fid is not None and self.fid < 0:
            raise MetricError("fid must be ≥ 0")
        if self.vs_mean is not None and not -1 <= self.vs_mean <= 1:
            raise MetricError("vs must lie in [-1, 1]")

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def protocol_counts(num_test_captions: int, full_scale: bool = False) -> dict[str, int]:
    """Sample counts for FID and IS; desk counts scale the full protocol by caption count."""
    if full_scale:
        return {"fid_images": FULL_FID_IMAGES, "is_images": FULL_IS_IMAGES,
                "fid_draws_per_caption": FID_DRAWS_PER_CAPTION}
    ratio = num_test_captions / FULL_TEST_CAPTIONS
    return {"fid_images": FID_DRAWS_PER_CAPTION * num_test_captions,
            "is_images": max(1, int(round(FULL_IS_IMAGES * ratio))),
            "fid_draws_per_caption": FID_DRAWS_PER_CAPTION}


class ImageSource(Protocol):
    def sample(self, captions: Sequence[str], rng: RandomStream) -> list[torch.Tensor]: ...

    def encode(self, captions: Sequence[str]) -> torch.Tensor: ...


def evaluate_protocol(source: ImageSource, test_corpus, extractor: FeatureExtractor,
                      rng: RandomStream, classifier: Callable | None = None,
                      vs_model: VisualSemanticEmbedding | None = None,
                      metrics: Sequence[str] = ("fid", "is", "vs"), is_splits: int = 10,
                      full_scale: bool = False, max_captions: int | None = None) -> MetricReport:
    """Run the sampling protocol for the requested metrics.

    FID: ``FID_DRAWS_PER_CAPTION`` generations per test caption at the lowest
    scale vs. the real test images at that scale. IS: top-scale generations
    scored by ``classifier`` (probabilities). VS: top-scale generation vs. its
    own caption.
    """
    unknown = set(metrics) - {"fid", "is", "vs"}
    if unknown:
        raise MetricError(f"unknown metrics: {sorted(unknown)}")
    if len(test_corpus) == 0:
        raise MetricError("test split is empty")
    captions = [c for r in test_corpus.records for c in r.captions]
    if max_captions is not None:
        captions = captions[:max_captions]
    counts = protocol_counts(len(captions), full_scale)
    prof = test_corpus.profile
    report = MetricReport(extractor=extractor.name, counts=dict(counts),
                          resolutions={"fid": list(prof.resolution(1)), "is": list(prof.top),
                                       "vs": list(prof.top)})
    if "fid" in metrics:
        low = []
        for _ in range(counts["fid_draws_per_caption"]):
            low.append(source.sample(captions, rng)[0])
        fake = extractor(torch.cat(low))
        real_low = test_corpus.pyramid()[0]
        report.fid = fid(extractor(real_low), fake)
        report.counts["fid_real_images"] = len(real_low)
    if "is" in metrics or "vs" in metrics:
        n_is = counts["is_images"]
        caps = [captions[k % len(captions)] for k in range(n_is)]
        top = source.sample(caps, rng)[-1]
    if "is" in metrics:
        if classifier is None:
            raise MetricError("IS requires a classifier")
        with torch.no_grad():
            probs = classifier(top).double().numpy()
        report.is_mean, report.is_std = inception_score(probs, is_splits)
    if "vs" in metrics:
        if vs_model is None:
            raise MetricError("VS requires trained visual-semantic embedders")
        with torch.no_grad():
            s = vs_model.score(torch.as_tensor(extractor(top), dtype=torch.float32),
                               source.encode(caps)).numpy()
        report.vs_mean, report.vs_std = float(s.mean()), float(s.std())
        report.counts["vs_pairs"] = len(s)
    return report
