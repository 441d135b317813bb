import pytest
import torch

from autoseg3d.errors import ConfigError, ShapeError
from autoseg3d.model import build_model, count_params
from autoseg3d.prompts import APGConfig, AutoPromptGenerator

from oracles import check_gradient


def test_output_spatial_shape_matches_input():
    apg = AutoPromptGenerator(APGConfig(in_channels=8, out_channels=8))
    x = torch.randn(2, 8, 4, 4, 4)
    out = apg(x)
    assert out.shape == (2, 8, 4, 4, 4)


def test_rectangular_grids_supported():
    apg = AutoPromptGenerator(APGConfig(in_channels=4, out_channels=6))
    x = torch.randn(1, 4, 4, 8, 12)
    assert apg(x).shape == (1, 6, 4, 8, 12)


def test_divisibility_error_names_required_multiple():
    apg = AutoPromptGenerator(APGConfig(level_count=3, in_channels=4))
    with pytest.raises(ShapeError, match="divisible by 4"):
        apg(torch.randn(1, 4, 6, 8, 8))


def test_width_plan_doubles_then_caps():
    cfg = APGConfig(level_count=4, base_channels=4, max_channels=8)
    assert cfg.widths() == [4, 8, 8, 8]


def test_every_parameter_is_tunable_and_not_imported(desk_cfg, desk_archive):
    model = build_model(desk_cfg, archive=desk_archive)
    archive_names = set(desk_archive.names())
    apg_params = [(n, p) for n, p in model.named_parameters() if n.startswith("apg.")]
    assert apg_params
    for name, p in apg_params:
        assert p.requires_grad, name
        assert name not in archive_names


def test_disabling_apg_removes_exactly_its_parameters(desk_cfg):
    on = build_model(desk_cfg)
    from autoseg3d.decoder import DecoderConfig
    off = build_model(desk_cfg, dec_cfg=DecoderConfig(apg_enabled=False))
    apg_size = sum(p.numel() for n, p in on.named_parameters() if n.startswith("apg."))
    assert apg_size > 0
    t_on, f_on = count_params(on)
    t_off, f_off = count_params(off)
    assert t_on - t_off == apg_size
    assert f_on == f_off


def test_gradient_matches_finite_differences():
    torch.manual_seed(5)
    cfg = APGConfig(level_count=2, base_channels=4, max_channels=8,
                    in_channels=4, out_channels=4)
    apg = AutoPromptGenerator(cfg).double()
    x = torch.randn(1, 4, 4, 4, 4, dtype=torch.float64)
    probe = torch.randn_like(apg(x))

    checked = 0
    for name, p in apg.named_parameters():
        if p.numel() > 200:   # keep finite differences tractable
            continue
        err = check_gradient(lambda: (apg(x) * probe).sum(), p)
        assert err < 1e-3, f"{name}: rel error {err}"
        checked += 1
    assert checked >= 4


def test_inference_deterministic():
    apg = AutoPromptGenerator(APGConfig(in_channels=8))
    apg.eval()
    x = torch.randn(1, 8, 4, 4, 4)
    with torch.no_grad():
        assert torch.equal(apg(x), apg(x))


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        APGConfig(level_count=0)
