"""Volumetric transformer image encoder adapted from a 2D pretrained backbone.

The 2D weights (patch-embed kernel, positional table, attention and MLP
projections) are inherited and kept frozen; volumetric capacity is added
through a small set of tunable parts:

* a depth positional table, zero-initialized, added to the planar table;
* a depthwise depth convolution completing the factorized patch embed,
  initialized as a delta so the initial embedding is slice-wise 2D;
* per-block residual depth adapters with zero-initialized up-projection
  (identity at init);
* layer norms (imported values, but trained);
* a from-scratch two-conv 3D neck after the last block.

Attention runs on ``[B, DHW, C]`` tokens restricted to non-overlapping
3D windows; partial windows at the grid edge are padded with masked
tokens that receive zero attention weight.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .archive import CheckpointArchive
from .errors import CheckpointImportError, ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    embed_dim: int = 32
    num_blocks: int = 4
    num_heads: int = 4
    patch_kernel: int = 8
    window_size: int = 4                     # tokens per axis
    adapter_ratio: float = 0.25              # hidden width = round(ratio * embed_dim)
    stage_taps: tuple[int, ...] = (1, 2, 3, 4)  # 1-based block indices, last == num_blocks
    token_grid: tuple[int, int, int] = (4, 4, 4)  # (D', H', W')
    in_channels: int = 1
    mlp_ratio: float = 4.0
    neck_channels: int = 8
    adapter_activation: str = "gelu"

    def __post_init__(self):
        self.stage_taps = tuple(self.stage_taps)
        self.token_grid = tuple(self.token_grid)
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        taps = tuple(self.stage_taps)
        if len(taps) != 4 or any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigError(f"stage_taps must be 4 strictly increasing indices, got {taps}")
        if taps[-1] != self.num_blocks:
            raise ConfigError(f"last stage tap must equal num_blocks ({self.num_blocks})")
        if taps[0] < 1:
            raise ConfigError("stage taps are 1-based block indices")
        if self.adapter_hidden < 1:
            raise ConfigError(f"adapter_ratio {self.adapter_ratio} gives empty hidden width")
        if self.patch_kernel < 1 or self.window_size < 1:
            raise ConfigError("patch_kernel and window_size must be >= 1")
        if len(self.token_grid) != 3 or any(g < 1 for g in self.token_grid):
            raise ConfigError(f"bad token grid {self.token_grid}")

    @property
    def adapter_hidden(self) -> int:
        return int(round(self.adapter_ratio * self.embed_dim))

    @property
    def mlp_hidden(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        k = self.patch_kernel
        return tuple(g * k for g in self.token_grid)


def _activation(tag: str) -> nn.Module:
    table = {"gelu": nn.GELU, "relu": nn.ReLU, "identity": nn.Identity}
    if tag not in table:
        raise ConfigError(f"unknown activation tag {tag!r}")
    return table[tag]()


class LayerNorm3d(nn.Module):
    """Layer normalization over the channel axis of a (B, C, D, H, W) map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None, None] + self.bias[:, None, None, None]


class PositionalEncoding3D(nn.Module):
    """Planar lookup table (frozen, imported) plus a tunable depth table.

    The depth table starts at zero, so right after import the encoding is
    independent of the depth coordinate.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c = cfg.embed_dim
        dp, hp, wp = cfg.token_grid
        self.table_2d = nn.Parameter(torch.zeros(c, hp, wp), requires_grad=False)
        self.table_depth = nn.Parameter(torch.zeros(c, dp))

    def at(self, d: int, h: int, w: int) -> torch.Tensor:
        """Encoding vector for one token coordinate."""
        c, hp, wp = self.table_2d.shape
        dp = self.table_depth.shape[1]
        if not (0 <= d < dp and 0 <= h < hp and 0 <= w < wp):
            raise IndexError(f"token coordinate {(d, h, w)} outside grid {(dp, hp, wp)}")
        return self.table_2d[:, h, w] + self.table_depth[:, d]

    def forward(self, x):
        # x: (B, D', H', W', C)
        planar = self.table_2d.permute(1, 2, 0)          # (H', W', C)
        depth = self.table_depth.t()[:, None, None, :]   # (D', 1, 1, C)
        return x + planar + depth


class FactorizedPatchEmbed3D(nn.Module):
    """1xkxk planar convolution (frozen, from 2D) composed with a depthwise
    kx1x1 convolution (tunable, delta-initialized)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c, k = cfg.embed_dim, cfg.patch_kernel
        self.kernel = k
        self.planar = nn.Conv3d(cfg.in_channels, c, (1, k, k), stride=(1, k, k))
        self.depth = nn.Conv3d(c, c, (k, 1, 1), stride=(k, 1, 1), groups=c, bias=False)
        self.planar.weight.requires_grad_(False)
        self.planar.bias.requires_grad_(False)
        self.reset_depth_to_delta()

    def reset_depth_to_delta(self):
        with torch.no_grad():
            self.depth.weight.zero_()
            self.depth.weight[:, 0, self.kernel // 2, 0, 0] = 1.0

    def forward(self, x):
        # x: (B, in, D, H, W) with every spatial dim divisible by the kernel
        k = self.kernel
        bad = [n for n, s in zip("DHW", x.shape[2:]) if s % k != 0]
        if bad:
            raise ShapeError(
                f"input dims {tuple(x.shape[2:])} must be multiples of {k} (axis {','.join(bad)})"
            )
        return self.depth(self.planar(x))


class WindowedAttention(nn.Module):
    """Multi-head self-attention over non-overlapping 3D token windows.

    Weights are shape-identical to the 2D block's attention, so imported
    parameters drop in unchanged.  Windows never span each other; partial
    windows at the far edge are completed with padding tokens masked out
    of every softmax row.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int):
        super().__init__()
        self.num_heads = num_heads
        self.window_size = window_size
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def _window_shape(self, grid):
        ws = []
        for g in grid:
            if self.window_size > g:
                logger.info("window size %d exceeds grid %s; clamping", self.window_size, grid)
            ws.append(min(self.window_size, g))
        return tuple(ws)

    def forward(self, x):
        # x: (B, D, H, W, C)
        b, d, h, w, c = x.shape
        wd, wh, ww = self._window_shape((d, h, w))
        pd, ph, pw = (-d) % wd, (-h) % wh, (-w) % ww
        real = torch.ones(d + pd, h + ph, w + pw, dtype=torch.bool, device=x.device)
        if pd or ph or pw:
            x = nn.functional.pad(x, (0, 0, 0, pw, 0, ph, 0, pd))
            real[d:, :, :] = False
            real[:, h:, :] = False
            real[:, :, w:] = False
        nd, nh, nw = x.shape[1] // wd, x.shape[2] // wh, x.shape[3] // ww

        def to_windows(t, ch):
            t = t.view(b, nd, wd, nh, wh, nw, ww, ch)
            return t.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(b * nd * nh * nw, wd * wh * ww, ch)

        tokens = to_windows(x, c)
        keep = real.view(nd, wd, nh, wh, nw, ww).permute(0, 2, 4, 1, 3, 5)
        keep = keep.reshape(nd * nh * nw, wd * wh * ww).repeat(b, 1)

        qkv = self.qkv(tokens).reshape(tokens.shape[0], -1, 3, self.num_heads, c // self.num_heads)
        q, k_, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)   # (nW, heads, T, c/heads)
        attn = (q @ k_.transpose(-2, -1)) / math.sqrt(c // self.num_heads)
        mask = torch.where(keep[:, None, None, :], 0.0, float("-inf")).to(attn.dtype)
        attn = torch.softmax(attn + mask, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(tokens.shape[0], -1, c)
        out = self.proj(out)

        out = out.view(b, nd, nh, nw, wd, wh, ww, c).permute(0, 1, 4, 2, 5, 3, 6, 7)
        out = out.reshape(b, d + pd, h + ph, w + pw, c)
        return out[:, :d, :h, :w, :]


class DepthAdapter(nn.Module):
    """Residual bottleneck: down-project, activate, depthwise 3D conv,
    up-project.  The up-projection starts at zero, so the adapter is the
    identity until trained."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c, hidden = cfg.embed_dim, cfg.adapter_hidden
        self.down = nn.Linear(c, hidden, bias=False)
        self.conv = nn.Conv3d(hidden, hidden, 3, padding=1, groups=hidden, bias=False)
        self.up = nn.Linear(hidden, c, bias=False)
        self.act = _activation(cfg.adapter_activation)
        nn.init.zeros_(self.up.weight)

    def forward(self, x):
        # x: (B, D, H, W, C)
        y = self.act(self.down(x))
        y = self.conv(y.permute(0, 4, 1, 2, 3)).permute(0, 2, 3, 4, 1)
        return x + self.up(y)


class TransformerBlock3D(nn.Module):
    """Pre-norm attention + MLP with residuals, matching the 2D source block."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c = cfg.embed_dim
        self.norm1 = nn.LayerNorm(c)
        self.attn = WindowedAttention(c, cfg.num_heads, cfg.window_size)
        self.norm2 = nn.LayerNorm(c)
        self.mlp = nn.Sequential()
        self.mlp.add_module("fc1", nn.Linear(c, cfg.mlp_hidden))
        self.mlp.add_module("act", nn.GELU())
        self.mlp.add_module("fc2", nn.Linear(cfg.mlp_hidden, c))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class Neck3D(nn.Module):
    """Two from-scratch 3x3x3 convolutions closing the encoder."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c, f = cfg.embed_dim, cfg.neck_channels
        self.conv1 = nn.Conv3d(c, f, 3, padding=1)
        self.norm = LayerNorm3d(f)
        self.act = nn.GELU()
        self.conv2 = nn.Conv3d(f, f, 3, padding=1)

    def forward(self, x):
        return self.conv2(self.act(self.norm(self.conv1(x))))


@dataclass
class FeaturePyramid:
    """Four stage-tap maps plus the neck output, all on the token grid."""

    stage_maps: list[torch.Tensor] = field(default_factory=list)  # each (B, C, D', H', W')
    final_map: torch.Tensor | None = None                          # (B, F, D', H', W')


class ImageEncoder3D(nn.Module):
    """embed -> +positions -> blocks with depth adapters -> neck, with
    feature taps recorded at the configured block indices."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = FactorizedPatchEmbed3D(cfg)
        self.pos_enc = PositionalEncoding3D(cfg)
        self.blocks = nn.ModuleList(TransformerBlock3D(cfg) for _ in range(cfg.num_blocks))
        self.adapters = nn.ModuleList(DepthAdapter(cfg) for _ in range(cfg.num_blocks))
        self.neck = Neck3D(cfg)

    def forward(self, x) -> FeaturePyramid:
        # x: (B, in, D, H, W)
        tokens = self.patch_embed(x)                     # (B, C, D', H', W')
        grid = tuple(tokens.shape[2:])
        if grid != tuple(self.cfg.token_grid):
            raise ShapeError(
                f"token grid {grid} does not match configured {tuple(self.cfg.token_grid)}"
            )
        tokens = tokens.permute(0, 2, 3, 4, 1)           # (B, D', H', W', C)
        tokens = self.pos_enc(tokens)
        taps = set(self.cfg.stage_taps)
        pyramid = FeaturePyramid()
        for i, (block, adapter) in enumerate(zip(self.blocks, self.adapters), start=1):
            tokens = adapter(block(tokens))
            if i in taps:
                pyramid.stage_maps.append(tokens.permute(0, 4, 1, 2, 3))
        pyramid.final_map = self.neck(tokens.permute(0, 4, 1, 2, 3))
        return pyramid


# ---------------------------------------------------------------------------
# 2D checkpoint import
# ---------------------------------------------------------------------------

def expected_2d_entries(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every inheritable 2D parameter."""
    c, k = cfg.embed_dim, cfg.patch_kernel
    _, hp, wp = cfg.token_grid
    hidden = cfg.mlp_hidden
    entries: dict[str, tuple[int, ...]] = {
        "encoder.pos_embed": (c, hp, wp),
        "encoder.patch_embed.weight": (c, cfg.in_channels, k, k),
        "encoder.patch_embed.bias": (c,),
    }
    for i in range(cfg.num_blocks):
        p = f"encoder.blocks.{i}."
        entries[p + "norm1.weight"] = (c,)
        entries[p + "norm1.bias"] = (c,)
        entries[p + "attn.qkv.weight"] = (3 * c, c)
        entries[p + "attn.qkv.bias"] = (3 * c,)
        entries[p + "attn.proj.weight"] = (c, c)
        entries[p + "attn.proj.bias"] = (c,)
        entries[p + "norm2.weight"] = (c,)
        entries[p + "norm2.bias"] = (c,)
        entries[p + "mlp.fc1.weight"] = (hidden, c)
        entries[p + "mlp.fc1.bias"] = (hidden,)
        entries[p + "mlp.fc2.weight"] = (c, hidden)
        entries[p + "mlp.fc2.bias"] = (c,)
    return entries


def validate_2d_archive(archive: CheckpointArchive, cfg: EncoderConfig) -> None:
    for name, shape in expected_2d_entries(cfg).items():
        if name not in archive:
            raise CheckpointImportError(f"missing archive entry {name!r}")
        got = tuple(archive[name].shape)
        if got != shape:
            raise CheckpointImportError(
                f"archive entry {name!r} has shape {got}, expected {shape}"
            )


def load_2d_weights_(enc: ImageEncoder3D, archive: CheckpointArchive) -> None:
    """Copy inherited 2D weights into an existing encoder and re-apply the
    freeze policy.  New 3D parts keep their init: zero depth table, delta
    depth kernel, zero adapter up-projections, fresh neck."""
    validate_2d_archive(archive, enc.cfg)

    def tensor(name):
        return torch.from_numpy(np.ascontiguousarray(archive[name])).to(torch.float32)

    with torch.no_grad():
        enc.pos_enc.table_2d.copy_(tensor("encoder.pos_embed"))
        enc.patch_embed.planar.weight.copy_(tensor("encoder.patch_embed.weight").unsqueeze(2))
        enc.patch_embed.planar.bias.copy_(tensor("encoder.patch_embed.bias"))
        for i, block in enumerate(enc.blocks):
            p = f"encoder.blocks.{i}."
            block.norm1.weight.copy_(tensor(p + "norm1.weight"))
            block.norm1.bias.copy_(tensor(p + "norm1.bias"))
            block.attn.qkv.weight.copy_(tensor(p + "attn.qkv.weight"))
            block.attn.qkv.bias.copy_(tensor(p + "attn.qkv.bias"))
            block.attn.proj.weight.copy_(tensor(p + "attn.proj.weight"))
            block.attn.proj.bias.copy_(tensor(p + "attn.proj.bias"))
            block.norm2.weight.copy_(tensor(p + "norm2.weight"))
            block.norm2.bias.copy_(tensor(p + "norm2.bias"))
            block.mlp.fc1.weight.copy_(tensor(p + "mlp.fc1.weight"))
            block.mlp.fc1.bias.copy_(tensor(p + "mlp.fc1.bias"))
            block.mlp.fc2.weight.copy_(tensor(p + "mlp.fc2.weight"))
            block.mlp.fc2.bias.copy_(tensor(p + "mlp.fc2.bias"))
    apply_encoder_freeze(enc)


def import_2d_checkpoint(archive: CheckpointArchive, cfg: EncoderConfig) -> ImageEncoder3D:
    """Build the 3D encoder from a 2D archive: inherited weights frozen,
    layer norms imported but trainable, new 3D parts at their identities."""
    enc = ImageEncoder3D(cfg)
    load_2d_weights_(enc, archive)
    return enc


_FROZEN_ENCODER_PATTERNS = (
    "pos_enc.table_2d",
    "patch_embed.planar.",
    ".attn.qkv.",
    ".attn.proj.",
    ".mlp.fc1.",
    ".mlp.fc2.",
)


def encoder_param_is_frozen(name: str) -> bool:
    """Freeze policy: inherited 2D weights stay fixed; convolutions added
    for 3D, adapters, norms and the depth table train."""
    return any(pat in name for pat in _FROZEN_ENCODER_PATTERNS)


def apply_encoder_freeze(enc: ImageEncoder3D) -> None:
    for name, param in enc.named_parameters():
        param.requires_grad_(not encoder_param_is_frozen(name))
