import math

import numpy as np
import pytest
import torch

from degforge.checkpoint import save_generator
from degforge.conditioning import PromptFusion
from degforge.diffusion import Denoiser, DenoiserConfig, GenDeg, compute_ranges, make_schedule
from degforge.latentcodec import LatentCodec
from degforge.scm import (
    GtMode,
    SCMNet,
    SCMTrainConfig,
    apply_scm,
    evaluate_scm,
    load_scm,
    route_ground_truth,
    save_scm,
    scm_loss_weight,
    scm_training_loss,
    train_scm,
)
from degforge.toyworld import ALL_KINDS, make_corpus


def _frozen_generator(T=20):
    torch.manual_seed(0)
    cfg = DenoiserConfig(latent_channels=3, channels=(8, 16, 16), time_dim=16, context_dim=16, attn_dim=8, groups=4)
    m = GenDeg(make_schedule(T), LatentCodec.identity(), PromptFusion(generator=torch.Generator().manual_seed(0)), Denoiser(cfg))
    return m


@pytest.mark.parametrize("T", [3, 200, 1000])
def test_weight_curve_has_interior_maximum(T):
    s = make_schedule(T)
    w = np.array([scm_loss_weight(t, s) for t in range(1, T + 1)])
    assert (w >= 0).all()
    k = int(np.argmax(w))
    assert 0 < k < T - 1
    assert w[0] < w.max() and w[-1] < w.max()


def test_weight_matches_formula():
    s = make_schedule(50)
    for t in (1, 10, 50):
        expect = math.sqrt(s.alpha_bar(t - 1)) * math.sqrt(1 - s.alpha_bar(t))
        assert scm_loss_weight(t, s) == pytest.approx(expect, rel=1e-12)
    with pytest.raises(ValueError):
        scm_loss_weight(0, s)


def test_routing_table_is_exhaustive():
    expect = {
        "haze": GtMode.SCM_CORRECTED,
        "motion_blur": GtMode.SCM_CORRECTED,
        "raindrop": GtMode.SCM_CORRECTED,
        "rain": GtMode.VAE_ROUND_TRIP,
        "snow": GtMode.VAE_ROUND_TRIP,
        "low_light": GtMode.VAE_ROUND_TRIP,
    }
    assert {k.value: route_ground_truth(k).mode for k in ALL_KINDS} == expect


def test_fresh_scm_is_identity():
    x = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    c = np.random.default_rng(1).random((8, 8, 3)).astype(np.float32)
    np.testing.assert_allclose(apply_scm(x, c, SCMNet(8)), x, atol=1e-7)


def test_apply_scm_shape_mismatch():
    with pytest.raises(ValueError):
        apply_scm(np.zeros((8, 8, 3)), np.zeros((8, 4, 3)), SCMNet(8))


def test_loss_matches_manual_weighting():
    gen = _frozen_generator().freeze()
    pairs = make_corpus("haze", 3, seed=0, size=16)
    from degforge.latentcodec import to_batch

    x_in = to_batch([p.degraded for p in pairs])
    clean = to_batch([p.clean for p in pairs])
    prompt = torch.randn(3, 77, 768)
    t = torch.tensor([1, 7, 20])
    net = SCMNet(8)
    loss = scm_training_loss(gen, x_in, clean, prompt, net, rng=5, t=t)

    # Oracle: rebuild x_gen with the same noise, then weight by hand.
    g = torch.Generator().manual_seed(5)
    eps = torch.randn(x_in.shape, generator=g)
    s = gen.schedule
    manual = 0.0
    for i in range(3):
        ti = int(t[i])
        ab = s.alpha_bar(ti)
        z_t = math.sqrt(ab) * x_in[i : i + 1] + math.sqrt(1 - ab) * eps[i : i + 1]
        with torch.no_grad():
            e = gen.predict_eps(z_t, t[i : i + 1], clean[i : i + 1], prompt[i : i + 1])
        x_gen = ((z_t - math.sqrt(1 - ab) * e) / math.sqrt(ab)).clamp(0, 1)
        err = ((x_in[i : i + 1] - net(x_gen, clean[i : i + 1])) ** 2).mean().item()
        manual += scm_loss_weight(ti, s) * err
    assert loss.item() == pytest.approx(manual / 3, rel=1e-4)


def test_unfrozen_generator_rejected():
    gen = _frozen_generator()
    with pytest.raises(RuntimeError):
        train_scm(gen, make_corpus("haze", 2, seed=0, size=16), SCMNet(8), SCMTrainConfig(steps=1))


def test_only_routed_pairs_accepted():
    gen = _frozen_generator()
    pairs = make_corpus("rain", 2, seed=0, size=16)
    gen.ranges = compute_ranges(pairs)
    with pytest.raises(ValueError):
        train_scm(gen.freeze(), pairs, SCMNet(8), SCMTrainConfig(steps=1))


def test_training_reduces_error_and_round_trips(tmp_path):
    pairs = make_corpus("haze", 12, seed=0, size=16)
    gen = _frozen_generator()
    gen.ranges = compute_ranges(pairs)
    gen.freeze()
    net = SCMNet(8)
    train_scm(gen, pairs, net, SCMTrainConfig(steps=120, batch_size=6, lr=3e-3))
    held = make_corpus("haze", 6, seed=9, size=16)
    e_gen, e_s = evaluate_scm(gen, held, net)
    assert e_s < e_gen

    path = save_generator(gen, tmp_path / "g")
    assert load_scm(str(path)) is None
    save_scm(net, str(path), {"steps": 120})
    back = load_scm(str(path))
    x = held[0].degraded
    np.testing.assert_array_equal(apply_scm(x, held[0].clean, back), apply_scm(x, held[0].clean, net))
