#!/usr/bin/env python3
"""
Gated duplex encoder: gates, selective inheritance, remap, full encode
"""

import pytest
import torch
import torch.nn.functional as F

from common.errors import ConfigError, ShapeMismatchError
from model.encoder_tgf import (
    EncoderConfig, Remap, SelectiveGate, TightlyCoupledEncoder, compute_gate, context_stage_level, sig_combine,
)
from model.stereo_head import StereoFeatureExtractor
from substrate.grad_check import frozen_double, grad_check


def _conv_norm_relu(block, x):
    y = F.conv2d(x, block.conv.weight, block.conv.bias, stride=block.stride,
                 padding=block.conv.padding)
    b, c, h, w = y.shape
    groups = block.norm.num_groups
    flat = y.reshape(b, groups, -1)
    mean = flat.mean(dim=-1, keepdim=True)
    var = flat.var(dim=-1, unbiased=False, keepdim=True)
    y = ((flat - mean) / torch.sqrt(var + block.norm.eps)).reshape(b, c, h, w)
    y = y * block.norm.weight.view(1, c, 1, 1) + block.norm.bias.view(1, c, 1, 1)
    return torch.relu(y)


def _gate(gate, x):
    return torch.sigmoid(F.conv2d(x, gate.proj.weight, gate.proj.bias))


def _remap(remap, x, hw):
    y = F.conv2d(x, remap.proj.weight)
    if remap.down is not None:
        y = F.conv2d(y, remap.down.weight, stride=2, padding=1)
    if tuple(y.shape[-2:]) != tuple(hw):
        y = F.interpolate(y, size=hw, mode='bilinear', align_corners=False)
    return y


def _inherit_loop(x_prev, x_cur, g_prev, g_cur):
    out = torch.empty_like(x_cur)
    _, c, h, w = x_cur.shape
    for k in range(c):
        for v in range(h):
            for u in range(w):
                gc = g_cur[0, 0, v, u].item()
                gp = g_prev[0, 0, v, u].item()
                out[0, k, v, u] = (1 + gc) * x_cur[0, k, v, u].item() + (1 - gc) * gp * x_prev[0, k, v, u].item()
    return out


def _tiny_encoder(fusion_mode='tgf'):
    cfg = EncoderConfig(n_layers=2, channels=(4, 4), fusion_mode=fusion_mode)
    extractor = frozen_double(StereoFeatureExtractor(cfg.channels))
    encoder = frozen_double(TightlyCoupledEncoder(cfg))
    return cfg, extractor, encoder


def _randomize_norm(module, gen):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, torch.nn.GroupNorm):
                m.weight.copy_(0.5 + torch.rand(m.weight.shape, generator=gen, dtype=torch.float64))
                m.bias.copy_(0.1 * torch.randn(m.bias.shape, generator=gen, dtype=torch.float64))


def test_zero_gate_is_one_half():
    gate = SelectiveGate(3)
    torch.nn.init.zeros_(gate.proj.weight)
    out = compute_gate(torch.randn(2, 3, 4, 4), gate)
    assert out.shape == (2, 1, 4, 4)
    assert torch.allclose(out, torch.full_like(out, 0.5))


def test_large_bias_saturates_gate():
    gate = SelectiveGate(3, bias_init=1e4)
    torch.nn.init.zeros_(gate.proj.weight)
    out = gate(torch.randn(1, 3, 4, 4))
    assert torch.allclose(out, torch.ones_like(out))


def test_gate_gradient(gen):
    gate = frozen_double(SelectiveGate(3))
    report = grad_check(lambda t: gate(t).sum(), [torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)])
    assert report.passed, report.as_dict()


def test_closed_gates_pass_current_features(gen):
    x_prev, x_cur = torch.randn(2, 1, 3, 4, 4, generator=gen)
    zeros = torch.zeros(1, 1, 4, 4)
    assert torch.equal(sig_combine(x_prev, x_cur, zeros, zeros), x_cur)


def test_open_current_gate_doubles_features(gen):
    x_prev, x_cur = torch.randn(2, 1, 3, 4, 4, generator=gen)
    g_prev = torch.rand(1, 1, 4, 4, generator=gen)
    assert torch.allclose(sig_combine(x_prev, x_cur, g_prev, torch.ones(1, 1, 4, 4)), 2 * x_cur)


def test_sig_combine_matches_per_element_loop(gen):
    x_prev, x_cur = torch.randn(2, 1, 3, 4, 4, generator=gen, dtype=torch.float64)
    g_prev, g_cur = torch.rand(2, 1, 1, 4, 4, generator=gen, dtype=torch.float64)
    assert torch.allclose(sig_combine(x_prev, x_cur, g_prev, g_cur), _inherit_loop(x_prev, x_cur, g_prev, g_cur))


def test_sig_combine_rejects_unaligned_inputs():
    with pytest.raises(ShapeMismatchError):
        sig_combine(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4))
    with pytest.raises(ShapeMismatchError):
        sig_combine(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 4, 4))


def test_remap_identity_and_shape_law(gen):
    remap = Remap(3, 3, 1, 1)
    with torch.no_grad():
        remap.proj.weight.copy_(torch.eye(3).view(3, 3, 1, 1))
    x = torch.randn(1, 3, 4, 4, generator=gen)
    assert torch.allclose(remap(x, (4, 4)), x)

    down = Remap(3, 5, 0, 1)
    assert down(torch.randn(1, 3, 8, 8, generator=gen), (4, 4)).shape == (1, 5, 4, 4)


def test_remap_gradient(gen):
    remap = frozen_double(Remap(3, 4, 0, 1))
    w = torch.randn(1, 4, 4, 4, generator=gen, dtype=torch.float64)
    report = grad_check(lambda t: (remap(t, (4, 4)) * w).sum(),
                        [torch.randn(1, 3, 8, 8, generator=gen, dtype=torch.float64)])
    assert report.passed, report.as_dict()


@pytest.mark.parametrize("kwargs", [dict(n_layers=1, channels=(4,)), dict(n_layers=3, channels=(4, 4)),
                                    dict(fusion_mode='max'), dict(context_index_mode='other')])
def test_bad_encoder_config(kwargs):
    with pytest.raises(ConfigError):
        EncoderConfig(**kwargs).validate()


def test_context_index_modes():
    cfg = EncoderConfig(n_layers=5, channels=(4,) * 5)
    assert cfg.context_layers() == [1, 2, 3]
    assert [cfg.context_index(i) for i in (1, 2, 3)] == [1, 3, 5]
    assert cfg.required_context_stages() == 5
    identity = EncoderConfig(n_layers=5, channels=(4,) * 5, context_index_mode='identity_i')
    assert identity.required_context_stages() == 3
    assert [context_stage_level(j) for j in range(1, 6)] == [1, 1, 2, 2, 3]


def test_default_encoder_shape_law(gen):
    cfg = EncoderConfig()
    extractor = StereoFeatureExtractor(cfg.channels).eval()
    encoder = TightlyCoupledEncoder(cfg).eval()
    image = torch.rand(1, 3, 32, 48, generator=gen)
    disp = 8 * torch.rand(1, 1, 32, 48, generator=gen)
    with torch.no_grad():
        pyramid = encoder(extractor(image), disp, d_max=16)

    assert pyramid.n == 4
    for i, (f_f, f_g) in enumerate(zip(pyramid.fused, pyramid.geometric), start=1):
        expected = (1, cfg.channels[i - 1], 32 // 2 ** i, 48 // 2 ** i)
        assert f_f.data.shape == expected and f_g.data.shape == expected
        assert f_f.stride_level == i
        f_f.validate((32, 48))
    assert len(pyramid.gates['geometric']) == 4 and len(pyramid.gates['fused']) == 4


def test_extra_context_stages_extend_pyramid(gen):
    cfg = EncoderConfig()
    extractor = StereoFeatureExtractor(cfg.channels).eval()
    encoder = TightlyCoupledEncoder(cfg, min_context_stages=5).eval()
    with torch.no_grad():
        contextual = encoder.extend_context(extractor(torch.rand(1, 3, 32, 32, generator=gen)))
    assert [f.stride_level for f in contextual] == [1, 1, 2, 2, 3]
    assert contextual[-1].data.shape == (1, cfg.channels[2], 4, 4)
    with pytest.raises(ShapeMismatchError):
        encoder.extend_context(contextual[:2])


def test_zero_network_propagates_zeros(gen):
    cfg = EncoderConfig(n_layers=2, channels=(4, 4))
    extractor = StereoFeatureExtractor(cfg.channels).eval()
    encoder = TightlyCoupledEncoder(cfg).eval()
    with torch.no_grad():
        for p in encoder.parameters():
            p.zero_()
        for gate in list(encoder.geo_gates) + list(encoder.fused_gates):
            gate.proj.bias.fill_(-1e4)
        pyramid = encoder(extractor(torch.rand(1, 3, 16, 16, generator=gen)),
                          torch.rand(1, 1, 16, 16, generator=gen), d_max=4)
    for f_f, f_g in zip(pyramid.fused, pyramid.geometric):
        assert not f_f.data.any() and not f_g.data.any()


@pytest.mark.parametrize("fusion_mode", ['tgf', 'sum'])
def test_two_layer_encoder_matches_scalar_oracle(gen, fusion_mode):
    cfg, extractor, encoder = _tiny_encoder(fusion_mode)
    _randomize_norm(encoder, gen)
    image = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    disp = 4 * torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64)

    with torch.no_grad():
        shared = extractor(image)
        pyramid = encoder.encode(shared, disp, d_max=4.0)

        f_g1 = _conv_norm_relu(encoder.geo_encoders[0], disp / 4.0)
        g_g1 = _gate(encoder.geo_gates[0], f_g1)
        x_f1 = _conv_norm_relu(encoder.fused_encoders['1'], shared[0].data)
        g_f1 = _gate(encoder.fused_gates[0], x_f1)
        f_f1 = x_f1 + f_g1

        x_g2 = _conv_norm_relu(encoder.geo_encoders[1], f_g1)
        x_f2 = _conv_norm_relu(encoder.fused_encoders['2'], f_f1)
        if fusion_mode == 'tgf':
            g_g2 = _gate(encoder.geo_gates[1], x_g2)
            g_f2 = _gate(encoder.fused_gates[1], x_f2)
            prev_g = F.interpolate(g_g1, size=(2, 2), mode='bilinear', align_corners=False)
            prev_f = F.interpolate(g_f1, size=(2, 2), mode='bilinear', align_corners=False)
            f_g2 = _inherit_loop(_remap(encoder.geo_remaps[0], f_g1, (2, 2)), x_g2, prev_g, g_g2)
            f_f2 = _inherit_loop(_remap(encoder.fused_remaps[0], f_f1, (2, 2)), x_f2, prev_f, g_f2) + f_g2
        else:
            f_g2 = x_g2
            f_f2 = x_f2 + f_g2

    assert torch.allclose(pyramid.geometric[0].data, f_g1)
    assert torch.allclose(pyramid.fused[0].data, f_f1)
    assert torch.allclose(pyramid.geometric[1].data, f_g2)
    assert torch.allclose(pyramid.fused[1].data, f_f2)


def test_encoder_gradient_wrt_disparity(gen):
    _, extractor, encoder = _tiny_encoder()
    w = torch.randn(1, 4, 2, 2, generator=gen, dtype=torch.float64)
    image = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    report = grad_check(lambda d: (encoder.encode(extractor(image), d, d_max=4.0).fused[-1].data * w).sum(),
                        [4 * torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64)], eps=1e-6)
    assert report.passed, report.as_dict()
