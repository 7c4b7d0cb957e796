#!/usr/bin/env python3
"""
Coupling-tightening loss terms against closed forms and per-pixel loops
"""

import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from common.errors import ConfigError, LabelRangeError, NonFiniteError, ShapeMismatchError
from losses.ct_loss import (
    NEUTRAL_WEIGHT, PROB_FLOOR, SCG_VARIANTS, CouplingTighteningLoss, LossConfig, ct_total, cross_entropy_sum,
    dia_loss, dscc_loss, lr_consistency_weight, register_scg_variant, scg_loss, sm_loss,
)
from model.hds_decoder import BranchOutputs
from substrate.grad_check import grad_check
from worldgen.scene_generator import SceneSpec, generate_scene


def _probs(gen, b=1, c=3, h=4, w=4):
    return torch.softmax(torch.randn(b, c, h, w, generator=gen, dtype=torch.float64), dim=1)


def _labels(gen, b=1, c=3, h=4, w=4):
    return torch.randint(0, c, (b, h, w), generator=gen)


def _one_hot(labels, c):
    return F.one_hot(labels, c).permute(0, 3, 1, 2).to(torch.float64)


# consistency weight

def test_consistent_synthetic_pair_has_neutral_weight():
    sample = generate_scene(SceneSpec(width=48, height=32, num_objects=3, rng_seed=2))
    visible = torch.from_numpy(sample.valid_left & ~sample.occlusion_left)[None, None]
    weights = lr_consistency_weight(torch.from_numpy(sample.disp_left)[None, None],
                                    torch.from_numpy(sample.disp_right)[None, None], visible)
    assert (weights.raw[visible] == 0).all()
    assert torch.allclose(weights.normalized, torch.full_like(weights.normalized, 0.5))


def test_large_inconsistency_saturates_weight():
    d_left = torch.ones(1, 1, 4, 8, dtype=torch.float64)
    d_right = torch.full((1, 1, 4, 8), -1e3, dtype=torch.float64)
    weights = lr_consistency_weight(d_left, d_right)
    assert torch.allclose(weights.normalized[..., 1:], torch.ones(1, 1, 4, 7, dtype=torch.float64))
    assert (weights.normalized[..., 0] == 0.5).all()


def test_weight_matches_lookup_loop(gen):
    d_left = torch.randint(0, 4, (1, 1, 8, 8), generator=gen).to(torch.float64)
    d_right = torch.randint(0, 4, (1, 1, 8, 8), generator=gen).to(torch.float64)
    weights = lr_consistency_weight(d_left, d_right)
    for v in range(8):
        for u in range(8):
            d = int(d_left[0, 0, v, u])
            if u - d < 0:
                assert weights.raw[0, 0, v, u] == 0 and weights.normalized[0, 0, v, u] == 0.5
                assert not weights.mask[0, 0, v, u]
            else:
                w = d - d_right[0, 0, v, u - d].item()
                assert weights.raw[0, 0, v, u].item() == w
                assert weights.normalized[0, 0, v, u].item() == pytest.approx(1 / (1 + math.exp(-abs(w))))


def test_weight_range_is_half_to_one(gen):
    weights = lr_consistency_weight(5 * torch.rand(2, 1, 6, 10, generator=gen),
                                    20 * torch.randn(2, 1, 6, 10, generator=gen))
    assert weights.normalized.min() >= 0.5 and weights.normalized.max() < 1.0 + 1e-7


def test_weight_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        lr_consistency_weight(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


# DIA

def test_perfect_predictions_cost_nothing(gen):
    labels = _labels(gen)
    probs = _one_hot(labels, 3)
    assert dia_loss([probs, probs], labels, torch.rand(1, 1, 4, 4, generator=gen)).abs() < 1e-12


def test_neutral_weight_gives_scaled_cross_entropy(gen):
    probs, labels = _probs(gen), _labels(gen)
    ce = F.nll_loss(torch.log(probs), labels)
    loss = dia_loss([probs], labels, torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64), alpha=1.5)
    assert loss.item() == pytest.approx(0.5 * 1.5 * ce.item(), abs=1e-12)
    assert cross_entropy_sum([probs, probs], labels).item() == pytest.approx(2 * ce.item(), abs=1e-12)


def test_dia_matches_triple_loop(gen):
    branches = [_probs(gen), _probs(gen)]
    labels = _labels(gen)
    w_n = 0.5 + 0.5 * torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64)

    expected = 0.0
    for probs in branches:
        inner = 0.0
        for v in range(4):
            for u in range(4):
                for k in range(3):
                    y = 1.0 if labels[0, v, u] == k else 0.0
                    inner += w_n[0, 0, v, u].item() * y * math.log(probs[0, k, v, u].item())
        expected += -inner / 16
    expected *= 1.5

    assert dia_loss(branches, labels, w_n, alpha=1.5).item() == pytest.approx(expected, abs=1e-10)


def test_dia_skips_ignored_pixels(gen):
    probs, labels = _probs(gen), _labels(gen)
    masked = labels.clone()
    masked[0, :2] = 255
    w_n = torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64)
    expected = 0.5 * F.nll_loss(torch.log(probs[..., 2:, :]), labels[:, 2:]).item()
    assert dia_loss([probs], masked, w_n, alpha=1.0).item() == pytest.approx(expected, abs=1e-12)

    masked[:] = 255
    assert dia_loss([probs], masked, w_n).item() == 0.0


def test_dia_rejects_out_of_range_labels(gen):
    labels = _labels(gen)
    labels[0, 0, 0] = 7
    with pytest.raises(LabelRangeError):
        dia_loss([_probs(gen)], labels, torch.ones(1, 1, 4, 4))


def test_dia_gradient(gen):
    labels = _labels(gen)
    report = grad_check(
        lambda l1, l2, w: dia_loss([torch.softmax(l1, 1), torch.softmax(l2, 1)], labels, w, alpha=1.5),
        [torch.randn(1, 3, 4, 4, generator=gen), torch.randn(1, 3, 4, 4, generator=gen),
         0.5 + 0.5 * torch.rand(1, 1, 4, 4, generator=gen)],
        eps=1e-6,
    )
    assert report.passed, report.as_dict()


# DSCC

def test_identical_branches_have_no_divergence(gen):
    probs = _probs(gen)
    assert dscc_loss([probs, probs.clone(), probs.clone()]).abs() < 1e-12


def test_uniform_versus_one_hot_closed_form():
    c, beta = 4, 1.0
    uniform = torch.full((1, c, 2, 2), 1.0 / c, dtype=torch.float64)
    other = uniform.clone()
    other[0, :, 0, 0] = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)

    kl_u_delta = (1 / c) * math.log((1 / c) / 1.0) + (c - 1) * (1 / c) * math.log((1 / c) / PROB_FLOOR)
    kl_delta_u = math.log(c)
    expected = beta * (kl_u_delta + kl_delta_u) / 4
    assert dscc_loss([uniform, other], beta=beta).item() == pytest.approx(expected, rel=1e-9)


def test_dscc_is_positive_and_sign_flag_negates(gen):
    probs = _probs(gen)
    perturbed = torch.softmax(torch.log(probs) + 0.1 * torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64), 1)
    value = dscc_loss([probs, perturbed], beta=2.0)
    assert value > 0
    assert dscc_loss([probs, perturbed], beta=2.0, negate_dscc=True).item() == pytest.approx(-value.item())


@pytest.mark.parametrize("seed", range(5))
def test_dscc_nonnegative_on_random_maps(seed):
    g = torch.Generator().manual_seed(seed)
    assert dscc_loss([_probs(g, b=2), _probs(g, b=2), _probs(g, b=2)]) >= 0


def test_single_branch_has_zero_dscc(gen):
    assert dscc_loss([_probs(gen)]).item() == 0.0


def test_dscc_gradient(gen):
    report = grad_check(lambda a, b: dscc_loss([torch.softmax(a, 1), torch.softmax(b, 1)], beta=1.0),
                        [torch.randn(1, 3, 4, 4, generator=gen), torch.randn(1, 3, 4, 4, generator=gen)],
                        eps=1e-6)
    assert report.passed, report.as_dict()


# SCG

def test_scg_identical_views_give_half_cross_entropy(gen):
    probs, labels = _probs(gen), _labels(gen)
    image = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    loss = scg_loss(probs, labels, image, image.clone(), torch.zeros(1, 1, 4, 4, dtype=torch.float64))
    assert loss.item() == pytest.approx(0.5 * F.nll_loss(torch.log(probs), labels).item(), abs=1e-12)


def test_scg_perfect_predictions(gen):
    labels = _labels(gen)
    left, right = torch.rand(2, 1, 3, 4, 4, generator=gen, dtype=torch.float64)
    assert scg_loss(_one_hot(labels, 3), labels, left, right, torch.ones(1, 4, 4)).abs() < 1e-12


def test_scg_matches_pixel_loop(gen):
    probs, labels = _probs(gen, w=6), _labels(gen, w=6)
    left, right = torch.rand(2, 1, 3, 4, 6, generator=gen, dtype=torch.float64)
    disp = torch.randint(0, 3, (1, 1, 4, 6), generator=gen).to(torch.float64)

    expected = 0.0
    for v in range(4):
        for u in range(6):
            d = int(disp[0, 0, v, u])
            if u - d < 0:
                weight = 0.5
            else:
                err = sum(abs(left[0, c, v, u].item() - right[0, c, v, u - d].item()) for c in range(3)) / 3
                weight = 1 / (1 + math.exp(-err))
            expected -= weight * math.log(probs[0, labels[0, v, u], v, u].item())
    expected /= 24

    assert scg_loss(probs, labels, left, right, disp).item() == pytest.approx(expected, abs=1e-10)


def test_scg_variants_are_pluggable(gen):
    probs, labels = _probs(gen), _labels(gen)
    image = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    register_scg_variant('constant_test', lambda p, y, l, r, d, ignore_index=255: p.new_tensor(3.0))
    try:
        assert scg_loss(probs, labels, image, image, torch.zeros(1, 1, 4, 4), variant='constant_test') == 3.0
        with pytest.raises(ConfigError):
            scg_loss(probs, labels, image, image, torch.zeros(1, 1, 4, 4), variant='missing')
    finally:
        SCG_VARIANTS.pop('constant_test')


# SM

def test_sm_closed_forms(gen):
    gt = 10 * torch.rand(1, 1, 4, 4, generator=gen)
    valid = torch.ones(1, 1, 4, 4, dtype=torch.bool)
    assert sm_loss(gt, gt, valid) == 0
    assert sm_loss(gt + 1, gt, valid).item() == pytest.approx(0.5, abs=1e-5)


def test_sm_matches_pixel_loop(gen):
    gt = 10 * torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    pred = gt + 2 * torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    valid = torch.rand(1, 1, 4, 4, generator=gen) > 0.3
    valid[0, 0, 0, 0] = True

    terms = []
    for v in range(4):
        for u in range(4):
            if valid[0, 0, v, u]:
                e = abs(pred[0, 0, v, u].item() - gt[0, 0, v, u].item())
                terms.append(0.5 * e * e if e < 1 else e - 0.5)
    assert sm_loss(pred, gt, valid).item() == pytest.approx(float(np.mean(terms)), abs=1e-12)


def test_sm_with_no_valid_pixels_is_zero():
    assert sm_loss(torch.ones(1, 1, 2, 2), torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2, dtype=torch.bool)) == 0


# total

def test_total_is_additive():
    assert ct_total({}).total == 0
    parts = ct_total({'dia': 1.0, 'dscc': 2.0, 'scg': 3.0, 'sm': 4.0})
    assert parts.total.item() == 10.0
    assert parts.as_dict()['sm'] == 4.0 and parts.as_dict()['alpha'] == 1.5


def test_total_names_the_non_finite_term():
    with pytest.raises(NonFiniteError) as info:
        ct_total({'dia': torch.tensor(1.0), 'dscc': torch.tensor(float('nan'))})
    assert info.value.term == 'dscc'
    with pytest.raises(ConfigError):
        ct_total({'focal': 1.0})


def test_terms_do_not_interfere_in_gradients(gen):
    logits = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    disp = torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    labels = _labels(gen)
    gt = torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    valid = torch.ones(1, 1, 4, 4, dtype=torch.bool)

    def dia():
        return dia_loss([torch.softmax(logits, 1)], labels, torch.full((1, 1, 4, 4), 0.7, dtype=torch.float64))

    alone = torch.autograd.grad(dia(), logits)[0]
    total = ct_total({'dia': dia(), 'sm': sm_loss(disp, gt, valid)}).total
    together = torch.autograd.grad(total, logits)[0]
    assert torch.allclose(alone, together)


# module

def _fake_output(gen, b=1, h=4, w=8):
    logits = [torch.randn(b, 3, h, w, generator=gen, requires_grad=True) for _ in range(2)]
    return SimpleNamespace(
        branches=BranchOutputs(logits=logits, branch_roles=['main', 'side_2']),
        disp_left=torch.rand(b, 1, h, w, generator=gen) * 2,
        disp_right=torch.rand(b, 1, h, w, generator=gen) * 2,
    )


def _fake_batch(gen, b=1, h=4, w=8):
    return {
        'left': torch.rand(b, 3, h, w, generator=gen),
        'right': torch.rand(b, 3, h, w, generator=gen),
        'labels': torch.randint(0, 3, (b, h, w), generator=gen),
        'disp_left': torch.rand(b, 1, h, w, generator=gen) * 2,
        'disp_right': torch.rand(b, 1, h, w, generator=gen) * 2,
        'valid_left': torch.ones(b, 1, h, w, dtype=torch.bool),
        'valid_right': torch.ones(b, 1, h, w, dtype=torch.bool),
    }


def test_module_sums_enabled_terms(gen):
    output, batch = _fake_output(gen), _fake_batch(gen)
    parts = CouplingTighteningLoss(LossConfig())(output, batch)
    assert parts.total.item() == pytest.approx((parts.dia + parts.dscc + parts.scg + parts.sm).item(), rel=1e-6)
    assert parts.ce == 0
    assert 0.5 <= parts.extras['mean_weight'] < 1.0
    parts.total.backward()
    assert all(x.grad is not None for x in output.branches.logits)


def test_module_falls_back_to_cross_entropy_without_dia(gen):
    output, batch = _fake_output(gen), _fake_batch(gen)
    cfg = LossConfig(enable_dia=False, enable_dscc=False, enable_scg=False, enable_sm=False)
    parts = CouplingTighteningLoss(cfg)(output, batch)
    expected = cross_entropy_sum(output.branches.probs(), batch['labels'])
    assert parts.dia == 0 and parts.total.item() == pytest.approx(expected.item())


def test_module_can_use_ground_truth_right_disparity(gen):
    output, batch = _fake_output(gen), _fake_batch(gen)
    module = CouplingTighteningLoss(LossConfig(right_disparity_source='ground_truth'))
    disp_right, valid = module.right_disparity(output, batch)
    assert disp_right is batch['disp_right'] and valid is batch['valid_right']

    batch['valid_right'] = torch.zeros_like(batch['valid_right'])
    disp_right, valid = module.right_disparity(output, batch)
    assert disp_right is output.disp_right and valid is None


@pytest.mark.parametrize("kwargs", [dict(alpha=-1.0), dict(right_disparity_source='other'),
                                    dict(scg_variant='nope')])
def test_bad_loss_config(kwargs):
    with pytest.raises(ConfigError):
        LossConfig(**kwargs).validate()


# randomized cases against per-pixel loops

def _weight_by_hand(d_left, d_right):
    h, w = len(d_left), len(d_left[0])
    out = [[NEUTRAL_WEIGHT] * w for _ in range(h)]
    for v in range(h):
        for u in range(w):
            x = u - d_left[v][u]
            if x < 0:
                continue
            x0 = math.floor(x)
            frac = x - x0
            right = d_right[v][min(x0, w - 1)] * (1 - frac) + d_right[v][min(x0 + 1, w - 1)] * frac
            out[v][u] = 1 / (1 + math.exp(-abs(d_left[v][u] - right)))
    return out


def _dia_by_hand(branches, labels, weight, alpha):
    h, w = len(labels), len(labels[0])
    pixels = [(v, u) for v in range(h) for u in range(w) if labels[v][u] != 255]
    if not pixels:
        return 0.0
    total = 0.0
    for probs in branches:
        for v, u in pixels:
            total -= weight[v][u] * math.log(max(probs[labels[v][u]][v][u], PROB_FLOOR))
    return alpha * total / len(pixels)


def _dscc_by_hand(branches, beta):
    c, h, w = len(branches[0]), len(branches[0][0]), len(branches[0][0][0])
    total = 0.0
    for r, p in enumerate(branches):
        for s, q in enumerate(branches):
            if r == s:
                continue
            for v in range(h):
                for u in range(w):
                    total += sum(p[k][v][u] * (math.log(p[k][v][u]) - math.log(q[k][v][u])) for k in range(c))
    return beta * total / (h * w)


def _sm_by_hand(pred, gt, valid):
    errors = [abs(p - g) for p, g, keep in zip(pred, gt, valid) if keep]
    if not errors:
        return 0.0
    return sum(0.5 * e * e if e < 1 else e - 0.5 for e in errors) / len(errors)


def test_loss_terms_match_pixel_loops_on_random_cases(gen):
    for _ in range(100):
        c = int(torch.randint(2, 5, (1,), generator=gen))
        n_branches = int(torch.randint(1, 5, (1,), generator=gen))
        branches = [_probs(gen, c=c) for _ in range(n_branches)]
        labels = _labels(gen, c=c)
        labels[torch.rand(1, 4, 4, generator=gen) < 0.2] = 255
        d_left = 3.0 * torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64)
        d_right = 3.0 * torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64)
        alpha, beta = 2.0 * float(torch.rand(1, generator=gen)), 2.0 * float(torch.rand(1, generator=gen))

        weight = lr_consistency_weight(d_left, d_right).normalized
        expected_weight = _weight_by_hand(d_left[0, 0].tolist(), d_right[0, 0].tolist())
        assert torch.allclose(weight[0, 0], torch.tensor(expected_weight, dtype=torch.float64), rtol=0, atol=1e-10)

        as_lists = [p[0].tolist() for p in branches]
        dia = dia_loss(branches, labels, weight, alpha=alpha)
        assert float(dia) == pytest.approx(_dia_by_hand(as_lists, labels[0].tolist(), expected_weight, alpha),
                                           rel=0, abs=1e-10)
        if n_branches > 1:
            assert float(dscc_loss(branches, beta=beta)) == pytest.approx(_dscc_by_hand(as_lists, beta),
                                                                          rel=0, abs=1e-10)

        gt = 3.0 * torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64)
        pred = gt + 2.0 * torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
        valid = torch.rand(1, 1, 4, 4, generator=gen) > 0.3
        expected_sm = _sm_by_hand(pred.flatten().tolist(), gt.flatten().tolist(), valid.flatten().tolist())
        assert float(sm_loss(pred, gt, valid)) == pytest.approx(expected_sm, rel=0, abs=1e-10)


def test_dscc_is_zero_exactly_for_identical_branches(gen):
    for _ in range(1000):
        c = int(torch.randint(2, 6, (1,), generator=gen))
        p = _probs(gen, c=c)
        assert float(dscc_loss([p, p.clone()])) == 0.0

        logits = torch.log(p)
        v, u = torch.randint(0, 4, (2,), generator=gen).tolist()
        logits[0, :, v, u] += 0.5 * torch.randn(c, generator=gen, dtype=torch.float64)
        q = torch.softmax(logits, dim=1)
        assert float(dscc_loss([p, q])) > 0.0
