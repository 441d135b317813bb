import numpy as np
import pytest
import torch

from autoseg3d.decoder import DecoderConfig, MaskDecoder3D, predict_labels
from autoseg3d.encoder import FeaturePyramid
from autoseg3d.errors import NumericError, ShapeError
from autoseg3d.model import build_model, count_params

from oracles import check_gradient


def make_pyramid(grid=(4, 4, 4), stage_ch=32, final_ch=8, batch=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    return FeaturePyramid(
        stage_maps=[torch.randn(batch, stage_ch, *grid, generator=g) for _ in range(4)],
        final_map=torch.randn(batch, final_ch, *grid, generator=g),
    )


def default_decoder(**overrides):
    cfg = DecoderConfig(**overrides)
    return MaskDecoder3D(cfg), cfg


# --- fusion -----------------------------------------------------------------

def test_zero_projections_give_bias_constant():
    dec, cfg = default_decoder()
    with torch.no_grad():
        for module in [dec.final_proj, *dec.stage_projs, dec.prompt_fuse]:
            module.weight.zero_()
        dec.final_proj.bias.zero_()
        for proj in dec.stage_projs:
            proj.bias.zero_()
    pyramid = make_pyramid()
    prompt = torch.randn(1, cfg.prompt_channels, 4, 4, 4)
    fused = dec.fuse(pyramid, prompt)
    bias = dec.prompt_fuse.bias.detach()
    assert torch.allclose(fused, bias[None, :, None, None, None].expand_as(fused), atol=1e-6)


def test_ablations_ignore_disabled_branches():
    dec, cfg = default_decoder(mlam_enabled=False, apg_enabled=False)
    pyramid = make_pyramid(seed=1)
    fused = dec.fuse(pyramid, None)
    # perturbing stage maps must not change anything with aggregation off
    perturbed = FeaturePyramid(
        stage_maps=[s + torch.randn_like(s) for s in pyramid.stage_maps],
        final_map=pyramid.final_map,
    )
    assert torch.equal(dec.fuse(perturbed, None), fused)
    # but perturbing the final map does
    changed = FeaturePyramid(
        stage_maps=pyramid.stage_maps,
        final_map=pyramid.final_map + 1.0,
    )
    assert not torch.equal(dec.fuse(changed, None), fused)


def test_mlam_on_uses_stage_maps():
    dec, _ = default_decoder(apg_enabled=False)
    pyramid = make_pyramid(seed=2)
    fused = dec.fuse(pyramid, None)
    perturbed = FeaturePyramid(
        stage_maps=[s + 1.0 for s in pyramid.stage_maps],
        final_map=pyramid.final_map,
    )
    assert not torch.equal(dec.fuse(perturbed, None), fused)


def test_param_count_ordering(desk_cfg):
    counts = {}
    for apg_on, mlam_on in [(True, True), (False, True), (True, False), (False, False)]:
        model = build_model(
            desk_cfg, dec_cfg=DecoderConfig(apg_enabled=apg_on, mlam_enabled=mlam_on))
        counts[(apg_on, mlam_on)] = count_params(model)[0]
    assert counts[(True, True)] > counts[(False, True)] > counts[(False, False)]
    assert counts[(True, True)] > counts[(True, False)] > counts[(False, False)]


def test_spatial_mismatch_raises():
    dec, cfg = default_decoder()
    pyramid = make_pyramid()
    bad_prompt = torch.randn(1, cfg.prompt_channels, 2, 4, 4)
    with pytest.raises(ShapeError, match="prompt grid"):
        dec.fuse(pyramid, bad_prompt)


# --- decode -----------------------------------------------------------------

def test_output_matches_patch_resolution():
    dec, cfg = default_decoder()
    pyramid = make_pyramid()
    prompt = torch.randn(1, cfg.prompt_channels, 4, 4, 4)
    patch = torch.randn(1, 1, 32, 32, 32)
    logits = dec(pyramid, prompt, patch)
    assert logits.shape == (1, cfg.num_classes + 1, 32, 32, 32)


@pytest.mark.parametrize("k,stages", [(4, (2, 2)), (8, (4, 2)), (16, (4, 4))])
def test_upsample_stage_factors(k, stages):
    cfg = DecoderConfig(upsample_factor=k)
    assert cfg.upsample_stages() == stages


def test_non_power_of_two_uses_trilinear():
    dec, cfg = default_decoder(upsample_factor=6)
    assert cfg.upsample_stages() is None
    pyramid = make_pyramid()
    prompt = torch.randn(1, cfg.prompt_channels, 4, 4, 4)
    patch = torch.randn(1, 1, 24, 24, 24)
    assert dec(pyramid, prompt, patch).shape == (1, 2, 24, 24, 24)


def test_all_decoder_params_tunable(desk_cfg, desk_archive):
    model = build_model(desk_cfg, archive=desk_archive)
    for name, p in model.named_parameters():
        if name.startswith("decoder."):
            assert p.requires_grad, name


def test_decoder_gradient_matches_finite_differences():
    torch.manual_seed(7)
    dec, cfg = default_decoder(fusion_channels=4, prompt_channels=4, in_channels=4,
                               stage_channels=4, upsample_factor=2)
    dec = dec.double()
    pyramid = FeaturePyramid(
        stage_maps=[torch.randn(1, 4, 2, 2, 2, dtype=torch.float64) for _ in range(4)],
        final_map=torch.randn(1, 4, 2, 2, 2, dtype=torch.float64),
    )
    prompt = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64)
    patch = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)
    probe = torch.randn_like(dec(pyramid, prompt, patch))

    for name, p in dec.named_parameters():
        if p.numel() > 150:
            continue
        err = check_gradient(lambda: (dec(pyramid, prompt, patch) * probe).sum(), p)
        assert err < 1e-3, f"{name}: rel error {err}"


# --- label prediction ---------------------------------------------------------

def test_strictly_maximal_channel_wins():
    logits = np.zeros((4, 3, 3, 3), dtype=np.float32)
    logits[2] = 5.0
    lab = predict_labels(logits, num_classes=3, spacing_mm=(1, 1, 1))
    assert (lab.data == 2).all()


def test_ties_break_to_lowest_index():
    logits = np.zeros((4, 2, 2, 2), dtype=np.float32)
    logits[0] = 1.0
    logits[3] = 1.0   # exact tie with channel 0
    lab = predict_labels(logits, num_classes=3, spacing_mm=(1, 1, 1))
    assert (lab.data == 0).all()


def test_constant_shift_invariance():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(3, 4, 4, 4)).astype(np.float32)
    a = predict_labels(logits, 2, (1, 1, 1))
    b = predict_labels(logits + 7.5, 2, (1, 1, 1))
    np.testing.assert_array_equal(a.data, b.data)


def test_monotone_transform_invariance():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(3, 4, 4, 4)).astype(np.float64)
    a = predict_labels(logits, 2, (1, 1, 1))
    b = predict_labels(np.exp(logits), 2, (1, 1, 1))   # strictly increasing
    np.testing.assert_array_equal(a.data, b.data)


def test_nan_logits_rejected():
    logits = np.zeros((2, 2, 2, 2), dtype=np.float32)
    logits[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        predict_labels(logits, 1, (1, 1, 1))
