import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tpgan import metrics as mt
from tpgan.core import RandomStream, TrainConfig


def denman_beavers_sqrt(a, iters=60):
    # iterative oracle, independent of any eigendecomposition
    y, z = a.astype(np.float64).copy(), np.eye(len(a))
    for _ in range(iters):
        y, z = 0.5 * (y + np.linalg.inv(z)), 0.5 * (z + np.linalg.inv(y))
    return y


def random_spd(n, rng, cond=1e3):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    w = np.geomspace(1.0, cond, n) / np.sqrt(cond)
    return (q * w) @ q.T


def test_fid_closed_form_1d():
    assert mt.fid_from_moments([0.0], [[1.0]], [3.0], [[1.0]]) == pytest.approx(9.0, rel=1e-5)
    # different variances: (mu diff)^2 + (s1 - s2)^2
    assert mt.fid_from_moments([1.0], [[4.0]], [0.0], [[1.0]]) == pytest.approx(2.0, rel=1e-5)


def test_fid_closed_form_diagonal():
    rng = np.random.default_rng(0)
    d = 16
    mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
    v1, v2 = rng.uniform(0.1, 3, d), rng.uniform(0.1, 3, d)
    expect = ((mu1 - mu2) ** 2).sum() + ((np.sqrt(v1) - np.sqrt(v2)) ** 2).sum()
    assert mt.fid_from_moments(mu1, np.diag(v1), mu2, np.diag(v2)) == pytest.approx(expect, rel=1e-5)


@pytest.mark.parametrize("n", [2, 8, 32, 64])
def test_trace_sqrt_matches_denman_beavers(n):
    rng = np.random.default_rng(n)
    s1, s2 = random_spd(n, rng), random_spd(n, rng)
    assert np.allclose(mt.psd_sqrt(s1), denman_beavers_sqrt(s1), rtol=1e-5, atol=1e-8)
    oracle = np.trace(denman_beavers_sqrt(s1 @ s2))
    assert mt.trace_sqrt_product(s1, s2) == pytest.approx(oracle, rel=1e-5)
    mu1, mu2 = rng.normal(size=n), rng.normal(size=n)
    full = (mu1 - mu2) @ (mu1 - mu2) + np.trace(s1 + s2) - 2 * oracle
    assert mt.fid_from_moments(mu1, s1, mu2, s2) == pytest.approx(full, rel=1e-5)


def test_fid_identity_symmetry_order():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(300, 8)), rng.normal(1, 2, size=(300, 8))
    assert mt.fid(a, a) == pytest.approx(0.0, abs=1e-6)
    assert mt.fid(a, b) == pytest.approx(mt.fid(b, a), rel=1e-9)
    assert mt.fid(a[::-1], b) == pytest.approx(mt.fid(a, b), rel=1e-9)


def test_fid_rejects_non_psd():
    with pytest.raises(mt.MetricError, match="min eigenvalue"):
        mt.fid_from_moments([0, 0], [[1, 0], [0, -1]], [0, 0], np.eye(2))


def test_fid_shrinkage_for_few_samples():
    x = np.random.default_rng(0).normal(size=(10, 32))
    mu, cov = mt.feature_moments(x)
    assert np.linalg.eigvalsh(cov).min() > 0
    with pytest.raises(mt.MetricError):
        mt.feature_moments(x[:1])


@pytest.mark.parametrize("c", [2, 5, 10])
def test_is_balanced_one_hot(c):
    p = np.eye(c)[np.arange(10 * c) % c]
    mean, std = mt.inception_score(p, splits=1)
    assert mean == pytest.approx(c, abs=1e-9)


def test_is_edge_cases():
    assert mt.inception_score(np.full((20, 4), 0.25), 2)[0] == pytest.approx(1.0)
    assert mt.inception_score(np.eye(4)[np.zeros(20, int)], 2)[0] == pytest.approx(1.0)
    with pytest.raises(mt.MetricError):
        mt.inception_score(np.zeros((0, 3)))
    with pytest.raises(mt.MetricError):
        mt.inception_score(np.full((2, 3), 0.5))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 1000))
def test_is_duplication_invariant_and_bounds(c, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(c), size=12)
    one = mt.inception_score(p, 1)[0]
    assert mt.inception_score(np.concatenate([p, p]), 1)[0] == pytest.approx(one, rel=1e-10)
    assert 1 - 1e-9 <= one <= c + 1e-9


def test_hinge_values():
    assert float(mt.hinge(torch.tensor(1.0), torch.tensor(0.0))) == 0.0
    assert float(mt.hinge(torch.tensor(0.3), torch.tensor(0.3))) == pytest.approx(0.2)
    g = torch.Generator().manual_seed(0)
    v, c = torch.randn(16, 8, generator=g), torch.randn(16, 8, generator=g)
    assert float(mt.bidirectional_ranking_loss(v, c, np.arange(16) % 4)) >= 0


def test_cosine_cases():
    x = torch.tensor([[1.0, 2.0]])
    assert float(mt.cosine(x, x)) == pytest.approx(1.0)
    assert float(mt.cosine(x, torch.tensor([[-2.0, 1.0]]))) == pytest.approx(0.0, abs=1e-7)
    assert float(mt.cosine(x, -x)) == pytest.approx(-1.0)
    assert float(mt.cosine(3 * x, x)) == pytest.approx(1.0)
    with pytest.raises(mt.MetricError):
        mt.cosine(x, torch.zeros(1, 2))


def test_vs_score_scale_invariance():
    f = torch.nn.Linear(4, 3)
    img, txt = torch.randn(5, 4), torch.randn(5, 4)
    s1 = mt.vs_score(img, txt, f, lambda t: t[:, :3])
    s2 = mt.vs_score(img, 2.5 * txt, f, lambda t: t[:, :3])
    assert torch.allclose(s1, s2, atol=1e-6)
    assert ((s1 >= -1) & (s1 <= 1)).all()


def test_vs_embedders_need_two_identities():
    with pytest.raises(Exception, match="identit"):
        mt.train_vs_embedders(np.ones((4, 3)), np.ones((4, 2)), [0, 0, 0, 0], RandomStream(0))


def test_vs_embedders_learn_pairing():
    rng = np.random.default_rng(0)
    ids = np.repeat(np.arange(5), 20)
    centers = rng.normal(size=(5, 6))
    img = centers[ids] + 0.1 * rng.normal(size=(100, 6))
    txt = centers[ids] @ rng.normal(size=(6, 4)) + 0.1 * rng.normal(size=(100, 4))
    model = mt.train_vs_embedders(img, txt, ids, RandomStream(0))
    with torch.no_grad():
        s = model.score(torch.as_tensor(img, dtype=torch.float32), torch.as_tensor(txt, dtype=torch.float32))
        s_mis = model.score(torch.as_tensor(img, dtype=torch.float32),
                            torch.as_tensor(np.roll(txt, 20, 0), dtype=torch.float32))
    assert float(s.mean()) > float(s_mis.mean()) + 0.2


def test_affinity_matrix():
    f = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    a = mt.affinity_matrix(f)
    assert a.shape == (4, 4)
    assert a[0, 1] == pytest.approx(1.0) and a[0, 2] == pytest.approx(0.0)
    assert np.array_equal(a, a.T) and np.all(np.diag(a) == 1)
    with pytest.raises(mt.MetricError, match="image 1"):
        mt.affinity_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(mt.MetricError):
        mt.affinity_matrix(f[:1])


def test_protocol_counts():
    full = mt.protocol_counts(0, full_scale=True)
    assert full["fid_images"] == 12_000 and full["is_images"] == 3_000
    assert mt.protocol_counts(100)["fid_images"] == 400


def test_metric_report_invariants():
    with pytest.raises(mt.MetricError):
        mt.MetricReport(fid=-1.0)
    with pytest.raises(mt.MetricError):
        mt.MetricReport(vs_mean=1.5)
    r = mt.MetricReport(fid=1.0)
    assert "Inception" in r.to_json()


class RealLoader:
    """Image source replaying real images instead of generating."""

    def __init__(self, levels):
        self.levels = [torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))) for x in levels]
        self.k = 0

    def sample(self, captions, rng):
        n = len(captions)
        idx = (torch.arange(n) + self.k) % len(self.levels[0])
        self.k += n
        return [lv[idx] for lv in self.levels]

    def encode(self, captions):
        return torch.ones(len(captions), 4)


@pytest.fixture(scope="module")
def desk_teacher():
    from tpgan.core import ResolutionProfile
    from tpgan.data import generate_sprite_corpus
    from tpgan.trainer import prepare_teacher

    prof = ResolutionProfile.desk()
    corpus = generate_sprite_corpus(20, 54, prof, RandomStream(0))
    teacher, acc = prepare_teacher(corpus, TrainConfig.desk(), prof, RandomStream(0))
    return corpus, teacher, acc


def test_real_vs_real_fid_floor(desk_teacher):
    corpus, teacher, acc = desk_teacher
    assert acc >= 0.95
    ext = mt.build_extractor("teacher", teacher)
    train = corpus.split("train")
    low = train.pyramid()[0]
    ids = np.array([r.identity_id for r in train.records])
    g = np.random.default_rng(0)
    a, b = [], []
    for i in np.unique(ids):
        m = g.permutation(np.flatnonzero(ids == i))
        a += list(m[:len(m) // 2])
        b += list(m[len(m) // 2:])
    assert mt.fid(ext(low[a]), ext(low[b])) < 1.0


def test_protocol_with_real_loader(desk_teacher):
    corpus, teacher, _ = desk_teacher
    test = corpus.split("test")
    ext = mt.build_extractor("teacher", teacher)
    rep = mt.evaluate_protocol(RealLoader(test.pyramid()), test, ext, RandomStream(0),
                               classifier=teacher.probs, metrics=("fid", "is"), is_splits=1)
    n_caps = sum(len(r.captions) for r in test.records)
    assert rep.counts["fid_images"] == 4 * n_caps
    # a confident teacher over real images approaches min(C, n) with one split
    assert rep.is_mean > 0.8 * min(20, rep.counts["is_images"])
    assert rep.fid < 1.0
    assert rep.vs_mean is None
    with pytest.raises(mt.MetricError, match="unknown"):
        mt.evaluate_protocol(RealLoader(test.pyramid()), test, ext, RandomStream(0), metrics=("lpips",))


def test_extractor_deterministic(desk_teacher):
    corpus, teacher, _ = desk_teacher
    ext = mt.build_extractor("teacher", teacher)
    x = corpus.split("test").images()[:5]
    assert np.array_equal(ext(x), ext(x))
    with pytest.raises(ValueError, match="teacher"):
        mt.build_extractor("inception", teacher)
