import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from _grad import directional_check
from poseanim.core import N_GARMENT_CLASSES
from poseanim.losses import (AffineExtractor, LossDivergence, LossWeights, PerceptualExtractor,
                             contextual_similarity_features, l_cadv, l_cx, l_gar, l_kl, l_kl_logvar, l_rec,
                             l_render_total, l_sil, l_vgg)
from poseanim.networks import NetConfig, build


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def small_extractor():
    return PerceptualExtractor(width=4).double().freeze()


def test_default_loss_weights():
    w = LossWeights()
    assert (w.vgg, w.cx, w.cadv, w.kl) == (0.5, 0.1, 0.01, 10.0)
    with pytest.raises(ValueError):
        LossWeights(kl=-1.0)


# ---------------------------------------------------------------- pixel losses


def test_l_sil_fixed_points():
    x = rand(2, 1, 8, 8)
    assert l_sil(x, x) == 0
    assert l_sil(torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4)) == 1
    brute = np.mean([abs(a - b) for a, b in zip(x.flatten().tolist(), rand(2, 1, 8, 8, seed=1).flatten().tolist())])
    assert math.isclose(float(l_sil(x, rand(2, 1, 8, 8, seed=1))), brute, rel_tol=1e-12)
    with pytest.raises(ValueError, match="shape"):
        l_sil(x, x[..., :4])


def test_l_gar_closed_forms():
    lab = torch.randint(N_GARMENT_CLASSES, (2, 8, 8), generator=torch.Generator().manual_seed(0))
    oh = torch.nn.functional.one_hot(lab, N_GARMENT_CLASSES).permute(0, 3, 1, 2).double()
    assert l_gar(oh, oh) == 0
    uniform = torch.full_like(oh, 1 / N_GARMENT_CLASSES)
    # per pixel: |1/C - 1| + (C - 1)/C = 2(C - 1)/C, averaged over C channels
    c = N_GARMENT_CLASSES
    assert math.isclose(float(l_gar(uniform, oh)), 2 * (c - 1) / c / c, rel_tol=1e-12)
    assert math.isclose(float(l_gar(uniform, oh)), 12 / 49, rel_tol=1e-12)


def test_l_rec_identity_and_bound():
    a, b = rand(2, 3, 8, 8), rand(2, 3, 8, 8, seed=1)
    assert l_rec(a, a) == 0 and 0 < l_rec(a, b) <= 1


@pytest.mark.parametrize("fn,shape", [(l_sil, (1, 1, 4, 4)), (l_gar, (1, N_GARMENT_CLASSES, 4, 4)),
                                      (l_rec, (1, 3, 4, 4))])
def test_pixel_loss_gradients(fn, shape):
    p, g = rand(*shape).requires_grad_(), rand(*shape, seed=1)
    assert directional_check(lambda: fn(p, g), [p]) <= 1e-4


# ---------------------------------------------------------------- perceptual


def test_l_vgg_identity_and_monotone():
    ext = AffineExtractor()
    x = rand(1, 3, 16, 16)
    delta = rand(1, 3, 16, 16, seed=1) - 0.5
    assert float(l_vgg(x, x, ext)) == 0
    vals = [float(l_vgg(x + t * delta, x, ext)) for t in np.linspace(0, 1, 6)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    # a linear extractor makes the loss exactly linear in the perturbation size
    assert math.isclose(vals[-1], 5 * vals[1], rel_tol=1e-9)


@pytest.mark.parametrize("size", [8, 16])
def test_l_vgg_gradient_small_extractor(size):
    ext = small_extractor()
    p, g = rand(1, 3, size, size).requires_grad_(), rand(1, 3, size, size, seed=1)
    assert float(l_vgg(g, g, ext)) == 0
    assert directional_check(lambda: l_vgg(p, g, ext), [p]) <= 1e-3


# ---------------------------------------------------------------- contextual


def cx_brute(x, y, h=0.5, eps=1e-5):
    """Textbook contextual similarity with explicit loops; x, y are lists of feature vectors."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    mu = y.mean(0)
    xn = [(a - mu) / np.linalg.norm(a - mu) for a in x]
    yn = [(b - mu) / np.linalg.norm(b - mu) for b in y]
    d = np.array([[max(0.0, 1 - float(a @ b)) for b in yn] for a in xn])
    cx = np.zeros_like(d)
    for i in range(len(x)):
        dmin = d[i].min()
        w = [math.exp((1 - d[i, j] / (dmin + eps)) / h) for j in range(len(y))]
        for j in range(len(y)):
            cx[i, j] = w[j] / sum(w)
    return float(np.mean([cx[:, j].max() for j in range(len(y))]))


@given(st.integers(0, 2 ** 31 - 1))
def test_cx_matches_brute_force_on_2x2_grids(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    got = float(contextual_similarity_features(torch.tensor(x), torch.tensor(y)))
    assert math.isclose(got, cx_brute(x, y), rel_tol=1e-9, abs_tol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_cx_target_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x, y = torch.tensor(rng.normal(size=(9, 4))), torch.tensor(rng.normal(size=(9, 4)))
    perm = torch.tensor(rng.permutation(9))
    assert contextual_similarity_features(x, y) == contextual_similarity_features(x, y[perm])


def test_cx_duplicates_are_a_multiset():
    rng = np.random.default_rng(0)
    x, y = torch.tensor(rng.normal(size=(6, 3))), torch.tensor(rng.normal(size=(5, 3)))
    a = contextual_similarity_features(x, y)
    b = contextual_similarity_features(x, torch.cat([y, y]))
    assert torch.allclose(a, b, rtol=1e-12)


def test_l_cx_identity_nonneg_and_gradient():
    ext = small_extractor()
    g = rand(1, 3, 32, 32, seed=3)
    assert abs(float(l_cx(g, g, ext))) <= 1e-6
    flat = torch.full((1, 3, 32, 32), 0.5, dtype=torch.float64)
    assert abs(float(l_cx(flat, flat, ext))) <= 1e-6
    p = rand(1, 3, 32, 32, seed=4).requires_grad_()
    v = float(l_cx(p, g, ext).detach())
    assert v >= 0 and math.isfinite(v)
    assert directional_check(lambda: l_cx(p, g, ext), [p]) <= 1e-3


# ---------------------------------------------------------------- adversarial / KL


def test_l_cadv_saturating_discriminator():
    real, fake = rand(1, 3, 8, 8), rand(1, 3, 8, 8, seed=1)
    g_oh = torch.zeros(1, N_GARMENT_CLASSES, 8, 8, dtype=torch.float64)

    def perfect(img, _g):
        return torch.ones(1, 1, 2, 2, dtype=img.dtype) if torch.equal(img, real) else torch.zeros(1, 1, 2, 2,
                                                                                                 dtype=img.dtype)

    g_term, d_term = l_cadv(perfect, fake, real, g_oh)
    assert d_term == 0 and g_term == 1
    g_term, d_term = l_cadv(perfect, real, fake, g_oh)  # roles swapped
    assert d_term == 1 and g_term == 0


def test_l_cadv_generator_gradient():
    disc = build("disc", NetConfig(width=4, depth=2, disc_depth=2), 0).double()
    real = rand(1, 3, 8, 8)
    fake = rand(1, 3, 8, 8, seed=1).requires_grad_()
    g_oh = torch.nn.functional.one_hot(torch.zeros(1, 8, 8, dtype=torch.long), N_GARMENT_CLASSES)
    g_oh = g_oh.permute(0, 3, 1, 2).double()
    g_term, _ = l_cadv(disc, fake, real, g_oh)
    (grad,) = torch.autograd.grad(g_term, fake)
    assert grad.abs().sum() > 0
    assert directional_check(lambda: l_cadv(disc, fake, real, g_oh)[0], [fake]) <= 1e-3


def test_l_kl_closed_forms():
    d = 8
    assert float(l_kl(torch.zeros(3, d), torch.ones(3, d))) == 0
    mu = torch.zeros(1, d)
    mu[0, 0] = 1
    assert math.isclose(float(l_kl(mu, torch.ones(1, d))), 0.5 / d, rel_tol=1e-12)
    with pytest.raises(ValueError):
        l_kl(torch.zeros(1, d), torch.zeros(1, d))


@given(st.integers(0, 2 ** 31 - 1))
def test_l_kl_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    mu, sig = rng.normal(size=(2, 5)), rng.uniform(0.2, 2.0, (2, 5))
    brute = np.mean([np.mean([0.5 * (m * m + s * s - math.log(s * s) - 1) for m, s in zip(mr, sr)])
                     for mr, sr in zip(mu, sig)])
    got = float(l_kl(torch.tensor(mu), torch.tensor(sig)))
    assert math.isclose(got, brute, rel_tol=1e-10, abs_tol=1e-14)
    assert math.isclose(float(l_kl_logvar(torch.tensor(mu), torch.tensor(np.log(sig ** 2)))), brute, rel_tol=1e-9)


def test_l_kl_gradient():
    mu = rand(2, 8).requires_grad_()
    sig = (rand(2, 8, seed=1) + 0.5).requires_grad_()
    assert directional_check(lambda: l_kl(mu, sig), [mu, sig]) <= 1e-3


# ---------------------------------------------------------------- total


def test_render_total_closed_forms():
    zeros = {k: torch.tensor(0.0) for k in ("l_rec", "l_vgg", "l_cx", "l_cadv", "l_kl")}
    ones = {k: 1.0 for k in zeros}
    assert float(l_render_total(zeros)) == 0
    assert l_render_total(ones) == 11.61


def test_zero_weights_leave_reconstruction():
    terms = {"l_rec": torch.tensor(0.37), **{k: torch.tensor(5.0) for k in ("l_vgg", "l_cx", "l_cadv", "l_kl")}}
    assert torch.equal(l_render_total(terms, LossWeights(0.0, 0.0, 0.0, 0.0)), terms["l_rec"])


def test_render_total_divergence_names_component():
    terms = {k: torch.tensor(1.0) for k in ("l_rec", "l_vgg", "l_cx", "l_cadv", "l_kl")}
    terms["l_cx"] = torch.tensor(float("nan"))
    with pytest.raises(LossDivergence, match="l_cx"):
        l_render_total(terms)
    terms["l_cx"] = torch.tensor(1.0)
    terms["l_kl"] = torch.tensor(float("inf"))
    with pytest.raises(LossDivergence, match="l_kl"):
        l_render_total(terms)
