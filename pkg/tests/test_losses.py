import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from audsr.diffcore import ParamStore, Tensor
from audsr.losses import (
    ALL_PAIRS,
    FULL_RECONSTRUCTION_PAIRS,
    AuTarget,
    LandmarkTarget,
    LossError,
    LossWeights,
    adversarial_domain_losses,
    adversarial_landmark_losses,
    au_class_weights,
    au_loss,
    contrastive_alignment_loss,
    landmark_feature_loss,
    landmark_loss,
    pair_alignment,
    total_loss,
)
from audsr.netblocks import SUPERVISOR_PAIRS, build_networks, full_graph_forward


def test_landmark_loss_hand_case():
    t = LandmarkTarget([[0.0, 0.0]], [1.0])
    assert landmark_loss(Tensor([[0.3, 0.4]]), t).item() == pytest.approx(0.125, abs=1e-12)
    assert landmark_loss(Tensor([[0.0, 0.0]]), t).item() == 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-1, 1)),
       arrays(np.float64, (3, 8), elements=st.floats(-1, 1)),
       st.floats(0.05, 2.0))
def test_landmark_loss_scale_law_and_sign(pred, coords, d):
    small = landmark_loss(Tensor(pred), LandmarkTarget(coords, np.full(3, d))).item()
    big = landmark_loss(Tensor(pred), LandmarkTarget(coords, np.full(3, 2 * d))).item()
    assert small >= 0.0
    assert small == pytest.approx(4 * big, rel=1e-12, abs=1e-15)


def test_landmark_target_rejects_bad_distance():
    with pytest.raises(LossError):
        LandmarkTarget([[0.1, 0.2]], [0.0])


def test_pair_alignment_hand_case():
    a = Tensor(np.full((1, 1, 2, 2), 1.5))
    b = Tensor(np.full((1, 1, 2, 2), 1.0))
    assert pair_alignment(a, b).item() == pytest.approx(0.5, abs=1e-12)


def _random_bundle(rng, shape=(2, 3, 4, 4)):
    names = [n for pair in SUPERVISOR_PAIRS for n in pair]
    return {n: Tensor(rng.normal(size=shape)) for n in names}


def test_contrastive_is_zero_under_perfect_reconstruction(rng):
    feats = _random_bundle(rng)
    for recon, orig in SUPERVISOR_PAIRS:
        feats[recon] = Tensor(feats[orig].data)
    assert contrastive_alignment_loss(feats).item() == 0.0


def test_contrastive_decomposes_over_pairs(rng):
    feats = _random_bundle(rng)
    total, terms = contrastive_alignment_loss(feats, return_terms=True)
    parts = [pair_alignment(feats[r], feats[o]).item() for r, o in SUPERVISOR_PAIRS]
    assert total.item() == pytest.approx(sum(parts), abs=1e-9)
    assert len(terms) == 6
    subset = contrastive_alignment_loss(feats, pairs=FULL_RECONSTRUCTION_PAIRS).item()
    assert subset == pytest.approx(parts[0] + parts[1], abs=1e-9)


def test_contrastive_missing_pair_is_named(rng):
    feats = _random_bundle(rng)
    del feats["F_tb_prime"]
    with pytest.raises(LossError, match="F_tb_prime"):
        contrastive_alignment_loss(feats, pairs=ALL_PAIRS)


def test_au_loss_hand_case():
    t = AuTarget([[1.0]], [1.0])
    assert au_loss(Tensor([[0.5]]), t).item() == pytest.approx(math.log(2), abs=1e-12)


def test_au_loss_confident_and_clamped():
    t = AuTarget([[1.0, 0.0]], [1.0, 1.0])
    assert au_loss(Tensor([[1.0, 0.0]]), t).item() < 1e-6
    wrong = au_loss(Tensor([[0.0, 1.0]]), t).item()
    assert math.isfinite(wrong) and wrong == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_au_loss_unit_weights_match_plain_bce(rng):
    p = rng.uniform(0.05, 0.95, (4, 3))
    y = (rng.random((4, 3)) < 0.5).astype(float)
    ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert au_loss(Tensor(p), AuTarget(y, np.ones(3))).item() == pytest.approx(ref, abs=1e-12)


def test_class_weights_inverse_frequency():
    w = au_class_weights([0.5, 0.25])
    np.testing.assert_allclose(w, [2 / 3, 4 / 3])
    with pytest.raises(LossError):
        au_class_weights([0.0, 0.5])


def test_total_loss_default_weights_sum():
    comps = {k: 1.0 for k in ("c", "l", "adl", "adf", "au", "fl")}
    assert total_loss(LossWeights(), comps).item() == pytest.approx(502.9, abs=1e-9)
    zero = LossWeights(c=0, l=0, adl=0, adf=0, au=0, fl=0)
    assert total_loss(zero, comps).item() == 0.0


def test_total_loss_rejects_non_finite_and_unknown():
    with pytest.raises(LossError, match="adf"):
        total_loss(LossWeights(), {"adf": float("nan")})
    with pytest.raises(LossError):
        total_loss(LossWeights(), {"bogus": 1.0})


def test_total_loss_gradient_is_linear(rng):
    ps = ParamStore()
    ps.add("x", rng.normal(size=4))
    w = LossWeights(c=3.0, au=0.5)

    def comps():
        x = ps["x"]
        return {"c": (x * x).sum(), "au": (x * 2.0).sum()}

    ps.zero_grad()
    total_loss(w, comps()).backward()
    g_total = ps["x"].grad.copy()
    expect = np.zeros(4)
    for name, weight in (("c", 3.0), ("au", 0.5)):
        ps.zero_grad()
        comps()[name].backward()
        expect += weight * ps["x"].grad
    np.testing.assert_allclose(g_total, expect, atol=1e-10)


@pytest.fixture(scope="module")
def graph(tiny_block):
    nets = build_networks(tiny_block, seed=3)
    r = np.random.default_rng(3)
    xs, xt = Tensor(r.random((2, 1, 32, 32))), Tensor(r.random((2, 1, 32, 32)))
    n = 2 * tiny_block.n_land
    src = LandmarkTarget(r.random((2, n)), [0.3, 0.3])
    tgt = LandmarkTarget(r.random((2, n)), [0.3, 0.3])
    return nets, xs, xt, src, tgt


def _grads_touched(stores):
    return {name for name, s in stores.items() for _, t in s.items()
            if t.grad is not None and np.any(t.grad != 0)}


def _zero(nets):
    for s in nets.stores().values():
        s.zero_grad()


def test_discriminator_members_do_not_reach_generators(graph):
    nets, xs, xt, src, tgt = graph
    _zero(nets)
    bundle = full_graph_forward(nets, xs, xt)
    d_adl, _ = adversarial_landmark_losses(nets.D_l, bundle.F_sb, bundle.F_tb, src, tgt,
                                           np.zeros(src.coords.shape[1]))
    d_adf, _ = adversarial_domain_losses(nets.D_d, bundle)
    (d_adl + d_adf).backward()
    assert _grads_touched(nets.stores()) == {"D_l", "D_d"}


def test_generator_domain_member_reaches_reconstruction_path(graph):
    nets, xs, xt, _, _ = graph
    _zero(nets)
    _, g_adf = adversarial_domain_losses(nets.D_d, full_graph_forward(nets, xs, xt))
    g_adf.backward()
    touched = _grads_touched(nets.stores())
    assert {"E_f", "E_l", "G_b", "G_st"} <= touched


def test_adversarial_members_non_negative_and_mean_face_fixed_point(graph):
    nets, xs, xt, src, tgt = graph
    bundle = full_graph_forward(nets, xs, xt)
    mean_face = nets.D_l(bundle.F_sb).data.mean(axis=0)
    d_m, g_m = adversarial_landmark_losses(nets.D_l, bundle.F_sb, bundle.F_sb, src, src, mean_face)
    assert d_m.item() >= 0 and g_m.item() >= 0
    with pytest.raises(LossError):
        adversarial_landmark_losses(nets.D_l, bundle.F_sb, bundle.F_tb, src, tgt, None)


def test_landmark_feature_loss_is_sum_of_two(graph):
    nets, xs, xt, src, tgt = graph
    bundle = full_graph_forward(nets, xs, xt)
    both = landmark_feature_loss(nets.D_l, bundle.F_sl, bundle.F_tl, src, tgt).item()
    ref = (landmark_loss(nets.D_l(bundle.F_sl), src).item()
           + landmark_loss(nets.D_l(bundle.F_tl), tgt).item())
    assert both == pytest.approx(ref, abs=1e-12)
    with pytest.raises(LossError):
        landmark_feature_loss(nets.D_l, bundle.F_sl, bundle.F_tl, src, None)
