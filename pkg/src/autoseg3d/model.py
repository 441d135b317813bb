"""Full segmentation network: encoder + auto prompt generator + decoder.

Also home of the parameter partition (frozen inherited weights vs
tunable adaptation weights), the params report, and whole-model
checkpoints.  Checkpoints carry the three component configs and the
ablation flags in their metadata so a saved model rebuilds its exact
graph.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np
import torch
from torch import nn

from .archive import CheckpointArchive
from .decoder import DecoderConfig, MaskDecoder3D
from .encoder import (
    EncoderConfig,
    ImageEncoder3D,
    apply_encoder_freeze,
    encoder_param_is_frozen,
    load_2d_weights_,
)
from .errors import CheckpointImportError, ConfigError
from .prompts import APGConfig, AutoPromptGenerator


def derive_configs(
    enc_cfg: EncoderConfig, apg_cfg: APGConfig, dec_cfg: DecoderConfig
) -> tuple[APGConfig, DecoderConfig]:
    """Fill the fields that are determined by the encoder wiring."""
    apg_cfg = dataclasses.replace(apg_cfg, in_channels=enc_cfg.neck_channels)
    dec_cfg = dataclasses.replace(
        dec_cfg,
        in_channels=enc_cfg.neck_channels,
        stage_channels=enc_cfg.embed_dim,
        upsample_factor=enc_cfg.patch_kernel,
        prompt_channels=apg_cfg.out_channels,
    )
    return apg_cfg, dec_cfg


class Segmenter3D(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, apg_cfg: APGConfig, dec_cfg: DecoderConfig):
        super().__init__()
        apg_cfg, dec_cfg = derive_configs(enc_cfg, apg_cfg, dec_cfg)
        self.enc_cfg, self.apg_cfg, self.dec_cfg = enc_cfg, apg_cfg, dec_cfg
        self.encoder = ImageEncoder3D(enc_cfg)
        self.apg = AutoPromptGenerator(apg_cfg) if dec_cfg.apg_enabled else None
        self.decoder = MaskDecoder3D(dec_cfg)
        apply_encoder_freeze(self.encoder)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, 1, D, H, W) normalized patch -> (B, K+1, D, H, W) logits
        pyramid = self.encoder(x)
        prompt = self.apg(pyramid.final_map) if self.apg is not None else None
        return self.decoder(pyramid, prompt, x)


def build_model(
    enc_cfg: EncoderConfig,
    apg_cfg: APGConfig | None = None,
    dec_cfg: DecoderConfig | None = None,
    archive: CheckpointArchive | None = None,
) -> Segmenter3D:
    """Assemble the network, optionally importing 2D weights."""
    model = Segmenter3D(enc_cfg, apg_cfg or APGConfig(), dec_cfg or DecoderConfig())
    if archive is not None:
        load_2d_weights_(model.encoder, archive)
    return model


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------

def param_is_frozen(name: str) -> bool:
    """Full-model freeze policy; prompt generator and decoder are always
    tunable (trained from scratch)."""
    if name.startswith("encoder."):
        return encoder_param_is_frozen(name[len("encoder."):])
    return False


def param_partition(model: nn.Module) -> tuple[list[str], list[str]]:
    """(tunable names, frozen names) by requires_grad."""
    tunable, frozen = [], []
    for name, param in model.named_parameters():
        (tunable if param.requires_grad else frozen).append(name)
    return tunable, frozen


def count_params(model: nn.Module) -> tuple[int, int]:
    """(tunable scalar count, frozen scalar count)."""
    tunable = frozen = 0
    for _, param in model.named_parameters():
        if param.requires_grad:
            tunable += param.numel()
        else:
            frozen += param.numel()
    return tunable, frozen


def params_report(model: nn.Module) -> str:
    tunable, frozen = count_params(model)
    t_names, f_names = param_partition(model)
    lines = [
        f"tunable parameters: {tunable} ({len(t_names)} tensors)",
        f"frozen parameters:  {frozen} ({len(f_names)} tensors)",
        f"tunable fraction:   {tunable / max(tunable + frozen, 1):.4f}",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Whole-model checkpoints
# ---------------------------------------------------------------------------

def _config_blob(model: Segmenter3D) -> dict:
    return {
        "encoder": dataclasses.asdict(model.enc_cfg),
        "apg": dataclasses.asdict(model.apg_cfg),
        "decoder": dataclasses.asdict(model.dec_cfg),
    }


def config_hash(model: Segmenter3D) -> str:
    blob = json.dumps(_config_blob(model), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_model_checkpoint(model: Segmenter3D, path, extra_arrays=None, **meta) -> None:
    arc = CheckpointArchive()
    arc.meta["configs"] = _config_blob(model)
    arc.meta["config_hash"] = config_hash(model)
    arc.meta["apg_enabled"] = model.dec_cfg.apg_enabled
    arc.meta["mlam_enabled"] = model.dec_cfg.mlam_enabled
    for key, value in meta.items():
        arc.meta[key] = value
    for name, param in model.named_parameters():
        arc.add(name, param.detach().cpu().numpy().astype(np.float32),
                frozen=not param.requires_grad)
    for name, array in (extra_arrays or {}).items():
        arc.add(name, array)
    arc.save(path)


def load_model_checkpoint(path) -> tuple[Segmenter3D, dict]:
    model, meta, _ = load_model_checkpoint_with_arrays(path)
    return model, meta


def load_model_checkpoint_with_arrays(path) -> tuple[Segmenter3D, dict, CheckpointArchive]:
    arc = CheckpointArchive.load(path)
    if "configs" not in arc.meta:
        raise CheckpointImportError(f"{path}: checkpoint lacks 'configs' metadata")
    cfgs = arc.meta["configs"]
    try:
        enc_cfg = EncoderConfig(**cfgs["encoder"])
        apg_cfg = APGConfig(**cfgs["apg"])
        dec_cfg = DecoderConfig(**cfgs["decoder"])
    except (TypeError, KeyError) as exc:
        raise CheckpointImportError(f"{path}: bad config metadata ({exc})") from exc
    model = Segmenter3D(enc_cfg, apg_cfg, dec_cfg)
    params = dict(model.named_parameters())
    for name in params:
        if name not in arc:
            raise CheckpointImportError(f"{path}: missing tensor {name!r}")
        src = arc[name]
        if tuple(src.shape) != tuple(params[name].shape):
            raise CheckpointImportError(
                f"{path}: tensor {name!r} has shape {tuple(src.shape)}, "
                f"expected {tuple(params[name].shape)}"
            )
        with torch.no_grad():
            params[name].copy_(torch.from_numpy(np.ascontiguousarray(src)))
    return model, dict(arc.meta), arc


def check_ablation_flags(meta: dict, dec_cfg: DecoderConfig) -> None:
    """Refuse to evaluate a checkpoint under mismatched ablation flags."""
    for key, want in (("apg_enabled", dec_cfg.apg_enabled),
                      ("mlam_enabled", dec_cfg.mlam_enabled)):
        have = meta.get(key)
        if have is not None and bool(have) != bool(want):
            raise ConfigError(
                f"checkpoint was trained with {key}={have} but the run config "
                f"requests {key}={want}; pass matching ablation flags"
            )
