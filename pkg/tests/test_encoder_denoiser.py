import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sfxzip.denoiser import (
    Conditioning, DecoderConfig, Denoiser, EdmParams, ZeroNet, build_conditioning, denoise, gaussian_denoiser,
    loss_weight, precondition_coeffs,
)
from sfxzip.encoder import (
    EncoderConfig, LatentEncoder, decimated_positions, depth_for_framerate, encoder_forward,
)
from sfxzip.errors import InvalidArgument
from sfxzip.frontend import FrontendConfig, LatentTensor, frontend_encode, synth_clip
from sfxzip.nn import RopeTable, lora_apply, module_grad_check


def small_decoder(**kw):
    cfg = dict(channels=8, cond_dim=4, model_dim=8, heads=2, joint_blocks=1, audio_blocks=1,
               num_classes=3, noise_features=4, lora_rank=2, lora_alpha=4.0)
    cfg.update(kw)
    return Denoiser(DecoderConfig(**cfg), seed=1)


# -- encoder -------------------------------------------------------------------

@pytest.mark.parametrize("t,frames,rate", [(4, 25, 25), (100, 1, 1), (9, 11, Fraction(100, 9)), (20, 5, 5)])
def test_encoder_geometry(t, frames, rate):
    torch.manual_seed(0)
    enc = LatentEncoder(EncoderConfig(depth=1, c=2, t=t))
    x0 = frontend_encode(synth_clip("impact", 1.0, 7), FrontendConfig())
    z = encoder_forward(x0, enc)
    assert z.data.shape == (64, frames)
    assert z.frame_rate == rate


def test_encoder_identity_configuration():
    enc = LatentEncoder(EncoderConfig(depth=0, c=1, t=1, model_dim=128, channels=128))
    with torch.no_grad():
        enc.out.weight.copy_(torch.eye(128))
        enc.out.bias.zero_()
    x = torch.randn(128, 30)
    torch.testing.assert_close(enc(x), x)


def test_encoder_pool_equivariance():
    enc = LatentEncoder(EncoderConfig(depth=0, c=2, t=4, model_dim=8, heads=2, channels=8))
    x = torch.randn(8, 40, dtype=torch.float32)
    z = enc(x)
    z_shift = enc(torch.roll(x, 4, dims=-1))
    torch.testing.assert_close(z_shift[:, 1:], z[:, :-1])


@settings(max_examples=25, deadline=None)
@given(T=st.integers(1, 60), t=st.integers(1, 12), c=st.sampled_from([1, 2, 4]))
def test_encoder_shape_contract(T, t, c):
    enc = LatentEncoder(EncoderConfig(depth=0, c=c, t=t, model_dim=8, heads=2, channels=8))
    if T < t:
        with pytest.raises(InvalidArgument):
            enc(torch.zeros(8, T))
        return
    assert enc(torch.zeros(8, T)).shape == (8 // c, T // t)
    if T % t == 0:
        assert len(decimated_positions(T, t)) == T // t


def test_decimated_positions():
    assert decimated_positions(8, 4) == [1, 5]
    assert decimated_positions(7, 1) == list(range(7))
    assert decimated_positions(100, 100) == [49]
    assert decimated_positions(100, 4)[:3] == [1, 5, 9]
    assert decimated_positions(100, 4)[-1] == 97


def test_depth_for_framerate():
    assert depth_for_framerate(25) == 6
    assert depth_for_framerate(Fraction(100, 9)) == 10
    assert depth_for_framerate(11) == 10
    assert depth_for_framerate(5) == 12
    assert depth_for_framerate(1) == 12
    assert depth_for_framerate(20) == 6


def test_encoder_gradcheck():
    torch.manual_seed(3)
    enc = LatentEncoder(EncoderConfig(depth=2, c=2, t=2, model_dim=8, heads=2, channels=6))
    x = torch.randn(6, 6, dtype=torch.float64)
    assert module_grad_check(enc, [x]) <= 1e-3


# -- preconditioning -------------------------------------------------------------

def test_precondition_hand_values():
    c_skip, c_out, c_in, c_noise = precondition_coeffs(0.5)
    assert abs(c_skip - 0.5) <= 1e-12
    assert abs(c_in - 1 / math.sqrt(0.5)) <= 1e-12
    assert abs(c_out - 0.25 / math.sqrt(0.5)) <= 1e-12
    assert abs(c_noise - math.log(0.5) / 4) <= 1e-12
    assert abs(precondition_coeffs(10.0)[0] - 0.25 / 100.25) <= 1e-15
    c_skip, c_out, *_ = precondition_coeffs(1e-9)
    assert abs(c_skip - 1) < 1e-15 and c_out < 1e-8
    with pytest.raises(InvalidArgument):
        precondition_coeffs(0.0)


def test_loss_weight_cancels_output_scale():
    sig = torch.logspace(-3, 3, 200, dtype=torch.float64)
    _, c_out, _, _ = precondition_coeffs(sig)
    assert torch.max(torch.abs(loss_weight(sig) * c_out ** 2 - 1)) <= 1e-9
    assert abs(loss_weight(0.5) - 8.0) < 1e-12


# -- denoiser ----------------------------------------------------------------------

def test_zero_network_gives_skip_only():
    x = torch.randn(2, 8, 12, dtype=torch.float64)
    cond = Conditioning(None, [])
    for s in (0.01, 0.5, 7.0):
        out = denoise(x, s, cond, ZeroNet())
        c_skip = precondition_coeffs(s)[0]
        assert torch.equal(out, c_skip * x)


def test_gaussian_oracle_matches_closed_form():
    g = torch.Generator().manual_seed(0)
    D = gaussian_denoiser(0.5)
    for _ in range(20):
        sigma = float(torch.exp(torch.randn(1, generator=g) * 2))
        y = torch.randn(3, 8, 16, generator=g, dtype=torch.float64)
        got = denoise(y, sigma, Conditioning(None, []), ZeroNet())
        assert torch.max(torch.abs(got - D(y, sigma))) <= 1e-9


def test_conditioning_alignment_and_validation():
    model = small_decoder()
    z = torch.randn(4, 25)
    cond = build_conditioning(z, model.cond_proj, 4, 100)
    assert cond.audio_positions == list(range(1, 98, 4))
    assert cond.audio_tokens.shape == (25, 8)
    assert build_conditioning(torch.randn(4, 1), model.cond_proj, 100, 100).audio_positions == [49]
    with pytest.raises(InvalidArgument):
        build_conditioning(torch.randn(4, 24), model.cond_proj, 4, 100)
    # rotary tables agree at the decimated indices
    full = RopeTable(torch.arange(100), 4).angles()
    dec = RopeTable(cond.audio_positions, 4).angles()
    assert torch.equal(full[cond.audio_positions], dec)
    bad = Conditioning(cond.audio_tokens, [p + 1 for p in cond.audio_positions], stride=4)
    with pytest.raises(InvalidArgument):
        denoise(torch.zeros(1, 8, 100), 1.0, bad, model)


def test_zero_projection_gives_zero_tokens():
    model = small_decoder()
    with torch.no_grad():
        model.cond_proj.weight.zero_()
        model.cond_proj.bias.zero_()
    cond = build_conditioning(torch.randn(4, 5), model.cond_proj, 4, 20)
    assert torch.all(cond.audio_tokens == 0)


def test_unconditional_output_is_finite():
    model = small_decoder()
    cond = Conditioning(None, [], class_id=torch.tensor([1]), class_dropped=torch.tensor([True]))
    out = denoise(torch.randn(1, 8, 10), 2.0, cond, model)
    assert out.shape == (1, 8, 10) and torch.all(torch.isfinite(out))


def test_lora_zero_init_is_bit_identical():
    torch.manual_seed(0)
    model = small_decoder()
    for p in model.out_proj.parameters():
        torch.nn.init.normal_(p, std=0.3)
    x = torch.randn(2, 8, 20)
    cond = build_conditioning(torch.randn(2, 4, 5), model.cond_proj, 4, 20,
                              class_id=torch.tensor([0, 2]), class_dropped=torch.tensor([False, True]))
    with torch.no_grad():
        before = denoise(x, 0.7, cond, model)
        model.add_adapters()
        after = denoise(x, 0.7, cond, model)
    assert torch.equal(before, after)


def test_lora_apply_properties():
    g = torch.Generator().manual_seed(0)
    W = torch.randn(5, 4, generator=g, dtype=torch.float64)
    A = torch.randn(2, 4, generator=g, dtype=torch.float64)
    assert torch.equal(lora_apply(W, A, torch.zeros(5, 2, dtype=torch.float64), 4.0), W)
    assert torch.equal(lora_apply(W, A, torch.randn(5, 2, generator=g, dtype=torch.float64), 0.0), W)
    # full rank adapter reproduces an arbitrary perturbation: factor dW = B A via SVD
    dW = torch.randn(5, 4, generator=g, dtype=torch.float64)
    U, S, Vh = torch.linalg.svd(dW, full_matrices=False)
    r = 4
    B, A = U * S, Vh
    torch.testing.assert_close(lora_apply(W, A, B, alpha=r), W + dW, rtol=0, atol=1e-12)
    with pytest.raises(InvalidArgument):
        lora_apply(W, torch.zeros(2, 3), torch.zeros(5, 2), 1.0)


def test_denoiser_gradcheck():
    torch.manual_seed(4)
    model = small_decoder(model_dim=4, heads=1, noise_features=2, lora_rank=1)
    model.add_adapters()
    for n, p in model.named_parameters():
        if "lora_B" in n:
            torch.nn.init.normal_(p, std=0.2)
    torch.nn.init.normal_(model.out_proj.weight, std=0.3)
    x = torch.randn(1, 8, 4, dtype=torch.float64)
    z = torch.randn(1, 4, 2, dtype=torch.float64)

    def call(m, x, z):
        cond = build_conditioning(z, m.cond_proj, 2, 4, class_id=torch.tensor([1]))
        return denoise(x, 0.8, cond, m)

    assert module_grad_check(model, [x, z], call) <= 1e-3
