#!/usr/bin/env python3
"""
Finite-difference gradient suite
Every differentiable op, the gated encoder, the decoder pieces and every loss
term, checked in float64 on small random instances.
"""

import time
from typing import Callable, Dict, List, Sequence, Tuple

import torch
from loguru import logger

from common.errors import StereoSegError
from losses.ct_loss import dia_loss, dscc_loss, lr_consistency_weight, scg_loss, sm_loss
from model.encoder_tgf import EncoderConfig, Remap, SelectiveGate, TightlyCoupledEncoder, sig_combine
from model.hds_decoder import FDAChain, SideHead
from model.stereo_head import CostVolume, DisparityRefinement, StereoFeatureExtractor, build_cost_volume, soft_argmin
from substrate.grad_check import frozen_double, grad_check, module_param_fn
from substrate.ops import ConvBnAct, FeatureMap, upsample_bilinear, warp_horizontal

log = logger.bind(source="gradient_suite")

SUITE_EPS = 1e-4
SUITE_TOL = 1e-3

Check = Tuple[Callable[..., torch.Tensor], Sequence[torch.Tensor]]


def _rand(g: torch.Generator, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def _fractional_disparity(g: torch.Generator, shape: Tuple[int, ...], high: int) -> torch.Tensor:
    """Disparities kept away from integers so linear interpolation is smooth at each finite-difference step"""
    whole = torch.randint(0, high, shape, generator=g).to(torch.float64)
    return whole + 0.2 + 0.6 * torch.rand(shape, generator=g, dtype=torch.float64)


def _projection(g: torch.Generator, reference: torch.Tensor) -> torch.Tensor:
    return _rand(g, *reference.shape)


def build_checks(seed: int = 0) -> Dict[str, Check]:
    g = torch.Generator().manual_seed(seed)
    checks: Dict[str, Check] = {}

    conv = frozen_double(ConvBnAct(2, 3, 3, stride=2))
    x = _rand(g, 1, 2, 6, 6)
    w_out = _rand(g, 1, 3, 3, 3)
    checks['conv_bn_act'] = (lambda t: (conv(t) * w_out).sum(), [x])
    checks['conv_bn_act.weight'] = (
        module_param_fn(conv, ['conv.weight'], lambda out: (out * w_out).sum(), x),
        [conv.conv.weight.detach().clone()],
    )

    gate = frozen_double(SelectiveGate(3))
    checks['gate'] = (lambda t: gate(t).sum(), [_rand(g, 1, 3, 4, 4)])

    w_sig = _rand(g, 1, 3, 4, 4)
    checks['sig_combine'] = (
        lambda a, b, ga, gb: (sig_combine(a, b, ga, gb) * w_sig).sum(),
        [_rand(g, 1, 3, 4, 4), _rand(g, 1, 3, 4, 4),
         torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64),
         torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64)],
    )

    remap = frozen_double(Remap(3, 4, 0, 1))
    w_remap = _rand(g, 1, 4, 4, 4)
    checks['remap'] = (lambda t: (remap(t, (4, 4)) * w_remap).sum(), [_rand(g, 1, 3, 8, 8)])

    w_up = _rand(g, 1, 2, 8, 8)
    checks['upsample_bilinear'] = (lambda t: (upsample_bilinear(t, 2) * w_up).sum(), [_rand(g, 1, 2, 4, 4)])

    w_warp = _rand(g, 1, 3, 4, 8)
    checks['warp_horizontal'] = (
        lambda img, d: (warp_horizontal(img, d)[0] * w_warp).sum(),
        [_rand(g, 1, 3, 4, 8), _fractional_disparity(g, (1, 1, 4, 8), 3)],
    )

    w_disp = _rand(g, 1, 1, 4, 4)
    checks['soft_argmin'] = (
        lambda c: (soft_argmin(CostVolume(c, d_max=4.0, stride=1)) * w_disp).sum(),
        [0.3 * _rand(g, 1, 5, 4, 4)],
    )
    w_cost = _rand(g, 1, 4, 4, 6)
    checks['cost_volume'] = (
        lambda a, b: (build_cost_volume(FeatureMap(a, 0), FeatureMap(b, 0), 3).data.clamp_max(100.0) * w_cost).sum(),
        [_rand(g, 1, 3, 4, 6), _rand(g, 1, 3, 4, 6)],
    )

    labels = torch.randint(0, 3, (1, 4, 4), generator=g)
    checks['dia_loss'] = (
        lambda l1, l2, wn: dia_loss([torch.softmax(l1, 1), torch.softmax(l2, 1)], labels, wn, alpha=1.5),
        [_rand(g, 1, 3, 4, 4), _rand(g, 1, 3, 4, 4), 0.5 + 0.5 * torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64)],
    )
    checks['dscc_loss'] = (
        lambda l1, l2: dscc_loss([torch.softmax(l1, 1), torch.softmax(l2, 1)], beta=1.0),
        [_rand(g, 1, 3, 4, 4), _rand(g, 1, 3, 4, 4)],
    )
    left = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    right = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    checks['scg_loss'] = (
        lambda lg, d: scg_loss(torch.softmax(lg, 1), labels, left, right, d),
        [_rand(g, 1, 3, 4, 4), _fractional_disparity(g, (1, 1, 4, 4), 2)],
    )
    gt = 4.0 * torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64)
    valid = torch.rand(1, 1, 4, 4, generator=g) > 0.2
    offsets = torch.tensor([0.3, -0.4, 2.5, -3.0], dtype=torch.float64).repeat(4).view(1, 1, 4, 4)
    checks['sm_loss'] = (lambda d: sm_loss(d, gt, valid), [gt + offsets])
    checks['lr_consistency_weight'] = (
        lambda dl, dr: lr_consistency_weight(dl, dr).normalized.sum(),
        [_fractional_disparity(g, (1, 1, 4, 8), 3), _fractional_disparity(g, (1, 1, 4, 8), 3)],
    )

    head = frozen_double(SideHead(4, 4, 3))
    w_head = _rand(g, 1, 3, 8, 8)
    checks['side_head'] = (lambda a, b: (head(a, b, (8, 8)) * w_head).sum(), [_rand(g, 1, 4, 2, 2), _rand(g, 1, 4, 2, 2)])

    chain = frozen_double(FDAChain(3, [4, 4]))
    w_tap = _rand(g, 1, 4, 2, 2)
    checks['fda_chain'] = (lambda t: (chain(t)[-1] * w_tap).sum(), [_rand(g, 1, 3, 8, 8)])

    refinement = frozen_double(DisparityRefinement(8.0, 4))
    with torch.no_grad():
        refinement.residual.weight.copy_(0.01 * _rand(g, *refinement.residual.weight.shape))
    w_ref = _rand(g, 1, 1, 6, 6)
    checks['disparity_refinement'] = (
        lambda d, img: (refinement(d, img) * w_ref).sum(),
        [2.0 + 4.0 * torch.rand(1, 1, 6, 6, generator=g, dtype=torch.float64),
         torch.rand(1, 3, 6, 6, generator=g, dtype=torch.float64)],
    )

    enc_cfg = EncoderConfig(n_layers=2, channels=(4, 4))
    extractor = frozen_double(StereoFeatureExtractor(enc_cfg.channels))
    encoder = frozen_double(TightlyCoupledEncoder(enc_cfg))
    w_enc = _rand(g, 1, 4, 2, 2)

    def encoder_head(image: torch.Tensor, disparity: torch.Tensor) -> torch.Tensor:
        pyramid = encoder.encode(extractor(image), disparity, d_max=4.0)
        return (pyramid.fused[-1].data * w_enc).sum()

    checks['encoder_tgf'] = (encoder_head, [torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64),
                                            4.0 * torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64)])
    return checks


def run_gradient_suite(seed: int = 0, eps: float = SUITE_EPS, tol: float = SUITE_TOL,
                       only: Sequence[str] = ()) -> Dict[str, object]:
    """{'success', 'results': {name: report}, 'failed': [...], 'error', 'seconds'}"""
    start = time.time()
    results: Dict[str, Dict[str, object]] = {}
    failed: List[str] = []
    try:
        checks = build_checks(seed)
    except StereoSegError as e:
        return {'success': False, 'results': {}, 'failed': [], 'error': str(e), 'seconds': 0.0}

    for name, (fn, inputs) in checks.items():
        if only and name not in only:
            continue
        try:
            report = grad_check(fn, inputs, eps=eps, tol=tol)
            results[name] = report.as_dict()
            if not report.passed:
                failed.append(name)
            log.debug(f"{name}: max rel error {report.max_rel_error:.2e}")
        except StereoSegError as e:
            results[name] = {'passed': False, 'error': str(e)}
            failed.append(name)

    return {
        'success': not failed,
        'results': results,
        'failed': failed,
        'error': f"gradient check failed for: {', '.join(failed)}" if failed else None,
        'seconds': time.time() - start,
    }
