import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from tpgan.conditioning import (BagOfTokensEncoder, ConditioningAugmentation, build_encoder,
                                condition_augment, gaussian_kl, tokenize)
from tpgan.core import RandomStream

CAPS = ["a person in a red shirt, blue pants and black shoes, no bag",
        "someone wearing a blue shirt with red pants and white shoes, carrying a bag"]


def test_tokenize():
    assert tokenize("A Red-shirt, NO bag!") == ["a", "red", "shirt", "no", "bag"]


def test_unknown_tokens_share_unk_row():
    enc = BagOfTokensEncoder.from_captions(CAPS, 8)
    assert enc.token_ids("zebra quokka")[:2] == [0, 0]
    with pytest.raises(ValueError):
        enc.token_ids("  ,, ")


def test_encoder_layer_norm_and_order_sensitivity():
    enc = BagOfTokensEncoder.from_captions(CAPS, 16)
    e = enc(CAPS)
    assert e.shape == (2, 16)
    assert torch.allclose(e.mean(-1), torch.zeros(2), atol=1e-5)
    assert torch.allclose(e.var(-1, unbiased=False), torch.ones(2), atol=1e-3)
    # swapping colors must move the embedding, bigrams see the order
    a = enc.encode_text("red shirt blue pants")
    b = enc.encode_text("blue shirt red pants")
    assert not torch.allclose(a, b)


def test_unknown_encoder_name():
    with pytest.raises(ValueError, match="bag_of_tokens"):
        build_encoder("bert", CAPS, 8)


def _kl_oracle(mu, log_var):
    # independent: closed-form KL between 1-D normals via scipy entropies
    total = 0.0
    for m, lv in zip(mu, log_var):
        s2 = math.exp(lv)
        cross = 0.5 * math.log(2 * math.pi) + 0.5 * (s2 + m * m)
        total += cross - stats.norm(m, math.sqrt(s2)).entropy()
    return total


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=12))
def test_gaussian_kl_matches_entropy_oracle(pairs):
    mu = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    lv = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    got = float(gaussian_kl(mu, lv))
    assert got >= -1e-12
    assert got == pytest.approx(_kl_oracle(mu.tolist(), lv.tolist()), rel=1e-9, abs=1e-12)


def test_kl_zero_iff_standard():
    assert float(gaussian_kl(torch.zeros(5), torch.zeros(5))) == 0.0
    assert float(gaussian_kl(torch.zeros(5), torch.full((5,), 0.1))) > 0


def test_kl_monte_carlo():
    rng = np.random.default_rng(0)
    mu, lv = np.array([0.5, -1.0, 0.2]), np.array([0.3, -0.5, 0.0])
    sd = np.exp(0.5 * lv)
    x = rng.normal(mu, sd, (400_000, 3))
    mc = (stats.norm(mu, sd).logpdf(x) - stats.norm(0, 1).logpdf(x)).sum(1).mean()
    exact = float(gaussian_kl(torch.tensor(mu), torch.tensor(lv)))
    assert mc == pytest.approx(exact, abs=5e-3)


def test_reparameterization_law_of_large_numbers():
    mu = torch.tensor([[1.0, -2.0, 0.0]]).expand(200_000, 3)
    lv = torch.tensor([[0.0, math.log(4.0), math.log(0.25)]]).expand(200_000, 3)
    cond = condition_augment(mu, lv, RandomStream(0))
    assert torch.allclose(cond.c.mean(0), torch.tensor([1.0, -2.0, 0.0]), atol=0.02)
    assert torch.allclose(cond.c.std(0), torch.tensor([1.0, 2.0, 0.5]), atol=0.02)


def test_ca_deterministic_given_stream():
    ca = ConditioningAugmentation(8, 4)
    phi = torch.randn(3, 8)
    a = ca(phi, RandomStream(7)).c
    b = ca(phi, RandomStream(7)).c
    assert torch.equal(a, b)
    assert torch.equal(ca(phi).c, ca(phi).mu)  # no stream means the mean


def test_ca_init_scales():
    ca = ConditioningAugmentation(256, 128)
    ca.init_(torch.Generator().manual_seed(0))
    assert ca.mu.weight.std().item() == pytest.approx(256 ** -0.5, rel=0.05)
    assert ca.log_var.weight.std().item() == pytest.approx(0.02, rel=0.05)
    phi = torch.nn.functional.layer_norm(torch.randn(4096, 256), (256,))
    assert ca(phi).mu.std().item() == pytest.approx(1.0, rel=0.1)


def test_kl_gradient_finite_difference():
    torch.manual_seed(0)
    ca = ConditioningAugmentation(6, 4).double()
    phi = torch.randn(5, 6, dtype=torch.float64)
    eps = torch.randn(5, 4, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda w: ca(phi @ w, eps=eps).kl,
                                    (torch.eye(6, dtype=torch.float64, requires_grad=True),),
                                    rtol=1e-4, atol=1e-8)
    # analytic gradient wrt moments: d/dmu = mu, d/dlv = (exp(lv) - 1)/2
    mu = torch.randn(4, dtype=torch.float64, requires_grad=True)
    lv = torch.randn(4, dtype=torch.float64, requires_grad=True)
    gaussian_kl(mu, lv).backward()
    assert torch.allclose(mu.grad, mu.detach())
    assert torch.allclose(lv.grad, 0.5 * (lv.detach().exp() - 1))
