import inspect

import numpy as np
import pytest

from distill3d import gradcore as gc
from distill3d.gradcore import ShapeMismatch, backward
from distill3d.optim import Adam
from distill3d.priors import (
    UNCONDITIONAL, AnalyticGaussianDenoiser, Condition, CosineSchedule,
    GaussianComponent, ToyDenoiser, ToyDenoiserSpec, add_noise,
    analytic_gaussian_denoiser, cfg_denoise, finetune_concept, lora_wrap,
    toy_denoiser_train,
)

from oracles import posterior_mean_quadrature


# -------------------------------------------------------------- schedule

def test_cosine_schedule_range_and_monotonicity():
    sch = CosineSchedule()
    assert abs(sch.alpha_bar(0.0) - 1.0) < 1e-9
    assert sch.alpha_bar(1.0) == pytest.approx(1e-4, rel=1e-9)
    grid = sch.alpha_bar(np.linspace(0, 1, 1000))
    assert np.all(np.diff(grid) < 0)
    assert np.all(grid > 0) and np.all(grid <= 1)


# ------------------------------------------------------------- add_noise

def test_add_noise_t0_identity(rng):
    img = rng.random((6, 6, 3))
    eps = rng.standard_normal(img.shape)
    assert np.array_equal(add_noise(img, eps, 0.0), img)


def test_add_noise_t1_destroys_signal(rng):
    img = rng.random((8, 8))
    corr = []
    for _ in range(1000):
        eps = rng.standard_normal(img.shape)
        noisy = add_noise(img, eps, 1.0)
        corr.append(np.corrcoef(noisy.ravel(), img.ravel())[0, 1])
    assert abs(np.mean(corr)) < 0.05


def test_add_noise_variance(rng):
    # Var(noisy) = ab * Var(img) + (1 - ab) for unit-variance inputs
    sch = CosineSchedule()
    img = rng.standard_normal(10_000)
    img = (img - img.mean()) / img.std()
    for t in (0.2, 0.5, 0.8):
        noisy = add_noise(img, rng.standard_normal(img.shape), t, sch)
        ab = sch.alpha_bar(t)
        assert abs(np.var(noisy) - (ab * 1.0 + (1 - ab))) / (ab + 1 - ab) < 0.05


def test_add_noise_shape_check(rng):
    with pytest.raises(ShapeMismatch):
        add_noise(np.zeros((2, 2)), np.zeros((3, 3)), 0.5)


# ------------------------------------------------------------------- cfg

def test_cfg_endpoints_exact(rng):
    d = AnalyticGaussianDenoiser({
        1: [GaussianComponent(np.full((4, 4), 0.2), 0.3)],
        2: [GaussianComponent(np.full((4, 4), 0.9), 0.3)],
    })
    x = rng.random((4, 4))
    cond = Condition.of(1)
    assert np.array_equal(cfg_denoise(d, x, 0.4, cond, 1.0),
                          d.denoise(x, 0.4, cond))
    assert np.array_equal(cfg_denoise(d, x, 0.4, cond, 0.0),
                          d.denoise(x, 0.4, UNCONDITIONAL))


def test_cfg_affine_in_w(rng):
    d = AnalyticGaussianDenoiser({
        1: [GaussianComponent(np.full((3, 3), 0.1), 0.4)],
        2: [GaussianComponent(np.full((3, 3), 0.8), 0.4)],
    })
    x = rng.random((3, 3))
    cond = Condition.of(2)
    o0 = cfg_denoise(d, x, 0.6, cond, 0.0)
    o1 = cfg_denoise(d, x, 0.6, cond, 1.0)
    for w in (0.3, 2.0, 7.5, 20.0):
        assert np.array_equal(cfg_denoise(d, x, 0.6, cond, w),
                              (1.0 - w) * o0 + w * o1)


def test_cfg_rejects_negative_weight(rng):
    d = analytic_gaussian_denoiser(np.zeros((2, 2)), 1.0)
    with pytest.raises(ValueError):
        cfg_denoise(d, np.zeros((2, 2)), 0.5, Condition.of(1), -1.0)


# ------------------------------------------------------- analytic oracle

def test_analytic_denoiser_limits(rng):
    mean = rng.random((5, 5))
    d = analytic_gaussian_denoiser(mean, 0.25)
    x = rng.random((5, 5))
    assert np.allclose(d.denoise(x, 0.0, Condition.of(1)), x, atol=1e-9)
    out = d.denoise(x, 1.0, Condition.of(1))  # alpha_bar = 1e-4
    assert np.max(np.abs(out - mean)) < 0.02


def test_analytic_denoiser_matches_quadrature():
    sch = CosineSchedule()
    mu, var = 0.4, 0.35
    d = analytic_gaussian_denoiser(np.array([[mu]]), var, sch)
    for t in (0.1, 0.35, 0.6, 0.9):
        for x in (-0.7, 0.0, 0.4, 1.4):
            got = float(d.denoise(np.array([[x]]), t, Condition.of(1)))
            want = posterior_mean_quadrature(x, sch.alpha_bar(t), mu, var)
            assert abs(got - want) < 1e-6


def test_analytic_denoiser_tweedie_shrinkage(rng):
    # E_eps[D(add_noise(x))] = shrink * x + (1 - shrink) * mean
    sch = CosineSchedule()
    mean = np.full((4, 4), 0.3)
    var = 0.5
    d = analytic_gaussian_denoiser(mean, var, sch)
    x = rng.random((4, 4))
    t = 0.5
    ab = sch.alpha_bar(t)
    shrink = ab * var / (ab * var + 1 - ab)
    acc = np.zeros_like(x)
    n = 20_000
    for _ in range(n):
        acc += d.denoise(add_noise(x, rng.standard_normal(x.shape), t, sch), t,
                         Condition.of(1))
    mc = acc / n
    want = shrink * x + (1 - shrink) * mean
    assert np.max(np.abs(mc - want)) < 0.01


def test_mixture_conditional_vs_unconditional(rng):
    mu1 = np.full((4, 4), 0.1)
    mu2 = np.full((4, 4), 0.9)
    d = AnalyticGaussianDenoiser({
        1: [GaussianComponent(mu1, 0.05)],
        2: [GaussianComponent(mu2, 0.05)],
    })
    x = np.full((4, 4), 0.5)
    t = 0.9
    c1 = d.denoise(x, t, Condition.of(1))
    c2 = d.denoise(x, t, Condition.of(2))
    u = d.denoise(x, t, UNCONDITIONAL)
    assert np.mean(c1) < np.mean(u) < np.mean(c2)
    # near a mode, the unconditional mixture posterior snaps to it
    near2 = d.denoise(mu2 * np.sqrt(d.schedule.alpha_bar(0.3)), 0.3, UNCONDITIONAL)
    assert abs(np.mean(near2) - 0.9) < 0.05


def test_analytic_denoiser_validation():
    with pytest.raises(ValueError):
        analytic_gaussian_denoiser(np.zeros((2, 2)), 0.0)
    with pytest.raises(ValueError, match="reserved"):
        AnalyticGaussianDenoiser({0: [GaussianComponent(np.zeros((2, 2)), 1.0)]})
    d = analytic_gaussian_denoiser(np.zeros((2, 2)), 1.0)
    with pytest.raises(KeyError):
        d.denoise(np.zeros((2, 2)), 0.5, Condition.of(9))


# ----------------------------------------------------------- toy classes

def two_class_images(n_per_class: int, res: int = 8, seed: int = 0):
    """Red round blobs (label 1) vs blue square patches (label 2)."""
    rng = np.random.default_rng(seed)
    pairs = []
    yy, xx = np.mgrid[0:res, 0:res]
    for k in range(n_per_class):
        cx, cy = rng.uniform(res * 0.3, res * 0.7, 2)
        r = rng.uniform(res * 0.2, res * 0.35)
        disk = ((xx - cx) ** 2 + (yy - cy) ** 2) < r ** 2
        img = np.full((res, res, 3), 0.08)
        img[disk] = [0.9, 0.15, 0.1]
        pairs.append((img + 0.02 * rng.standard_normal(img.shape), Condition.of(1)))
        x0, y0 = rng.integers(0, res // 2, 2)
        w = rng.integers(res // 4, res // 2)
        img = np.full((res, res, 3), 0.08)
        img[y0:y0 + w, x0:x0 + w] = [0.1, 0.2, 0.9]
        pairs.append((img + 0.02 * rng.standard_normal(img.shape), Condition.of(2)))
    return pairs


SPEC8 = ToyDenoiserSpec(image_shape=(8, 8, 3), hidden=(96, 96), emb_dim=6,
                        t_levels=3, n_labels=4, reserved_tokens=(3,))


@pytest.fixture(scope="module")
def trained_toy():
    pairs = two_class_images(24, seed=1)
    return toy_denoiser_train(pairs, SPEC8, steps=600, lr=2e-3, seed=0), pairs


def _mse_at(denoiser, pairs, t, seed=9, cond_override=None):
    rng = np.random.default_rng(seed)
    errs = []
    for img, cond in pairs:
        noisy = add_noise(img, rng.standard_normal(img.shape), t, denoiser.schedule)
        out = denoiser.denoise(noisy, t, cond_override or cond)
        errs.append(float(np.mean((out - img) ** 2)))
    return float(np.mean(errs))


def test_toy_denoiser_learns(trained_toy):
    den, _ = trained_toy
    held_out = two_class_images(8, seed=77)
    untrained = ToyDenoiser(SPEC8, seed=0)
    base = _mse_at(untrained, held_out, t=0.5)
    got = _mse_at(den, held_out, t=0.5)
    assert got < 0.7 * base  # >= 30% reduction


def test_wrong_class_conditioning_hurts(trained_toy):
    den, _ = trained_toy
    held_out = two_class_images(8, seed=78)
    right = _mse_at(den, held_out, t=0.7)
    swapped = [(img, Condition.of(2 if c.concept_id == 1 else 1))
               for img, c in held_out]
    wrong = _mse_at(den, swapped, t=0.7)
    assert wrong > right


def test_label_dropout_default():
    assert inspect.signature(toy_denoiser_train).parameters["p_uncond"].default == 0.1


def test_uncond_embedding_pinned_zero(trained_toy):
    den, _ = trained_toy
    assert np.all(den.params["emb"][0] == 0.0)
    assert den.embedding_of(UNCONDITIONAL).tolist() == [0.0] * SPEC8.emb_dim
    assert np.any(den.params["emb"][1] != 0.0)  # trained labels moved


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        toy_denoiser_train([], SPEC8, steps=1, lr=1e-3)


def test_denoiser_checkpoint_roundtrip(tmp_path, trained_toy):
    den, _ = trained_toy
    den.save(tmp_path / "d.d3df")
    back = ToyDenoiser.load(tmp_path / "d.d3df")
    assert back.spec == den.spec
    x = np.random.default_rng(0).random((8, 8, 3))
    assert np.array_equal(back.denoise(x, 0.4, Condition.of(1)),
                          den.denoise(x, 0.4, Condition.of(1)))


# --------------------------------------------------------------- finetune

def test_finetune_concept_requires_reserved_token(trained_toy):
    den, _ = trained_toy
    with pytest.raises(ValueError, match="reserved"):
        finetune_concept(den, [np.zeros((8, 8, 3))], Condition.of(1),
                         steps=1, lr=1e-4)


def test_finetune_concept_improves_new_modality(trained_toy):
    den, _ = trained_toy
    rng = np.random.default_rng(5)
    # "normal-map-like" images: smooth fields around (0.5, 0.5, 1)-ish
    views = []
    for _ in range(24):
        g = rng.normal(0, 0.15, (8, 8, 2))
        img = np.stack([0.5 + g[..., 0], 0.5 + g[..., 1],
                        0.85 + 0.1 * rng.random((8, 8))], axis=-1).clip(0, 1)
        views.append(img)
    w_token = Condition.of(3)
    tuned = finetune_concept(den, views, w_token, steps=400, lr=2e-3, seed=0)
    held = [(v, w_token) for v in views[-6:]]
    before = _mse_at(den, held, t=0.5)
    after = _mse_at(tuned, held, t=0.5)
    assert after < before
    # original stays frozen
    assert np.array_equal(den.params["emb"], trained_toy[0].params["emb"])


# ------------------------------------------------------------------- LoRA

def test_lora_default_rank():
    assert inspect.signature(lora_wrap).parameters["rank"].default == 4


def test_lora_identity_at_init_toy(trained_toy, rng):
    den, _ = trained_toy
    proxy = lora_wrap(den, rank=4)
    for _ in range(100):
        x = rng.random((8, 8, 3))
        t = float(rng.uniform(0, 1))
        cond = Condition.of(int(rng.integers(1, 3)))
        assert np.max(np.abs(proxy.denoise(x, t, cond)
                             - den.denoise(x, t, cond))) == 0.0


def test_lora_identity_at_init_analytic(rng):
    base = analytic_gaussian_denoiser(rng.random((6, 6)), 0.4)
    proxy = lora_wrap(base, rank=4)
    for _ in range(100):
        x = rng.random((6, 6)).astype(np.float32)
        t = float(rng.uniform(0, 1))
        assert np.max(np.abs(proxy.denoise(x, t, Condition.of(1))
                             - base.denoise(x, t, Condition.of(1)))) == 0.0


def test_lora_rank_validation(trained_toy):
    den, _ = trained_toy
    with pytest.raises(ValueError, match="rank"):
        lora_wrap(den, rank=5000)
    with pytest.raises(ValueError):
        lora_wrap(den, rank=0)


def test_lora_one_step_changes_output(trained_toy, rng):
    den, _ = trained_toy
    proxy = lora_wrap(den, rank=4)
    x = rng.random((8, 8, 3))
    cond = Condition.of(1)
    before = proxy.denoise(x, 0.5, cond).copy()
    target = gc.constant(rng.random((1, SPEC8.n_pixels)).astype(np.float32))
    loss = gc.mean(gc.square(proxy.denoise_node(x, 0.5, cond) - target))
    grads = backward(loss, proxy.adapters)
    Adam(1e-2).step(proxy.adapters, grads)
    after = proxy.denoise(x, 0.5, cond)
    assert np.max(np.abs(after - before)) > 0
    # base stayed frozen
    assert np.array_equal(den.denoise(x, 0.5, cond), before)
