"""Independent reference implementations used to check the library.

Nothing here calls the code paths under test: gradients come from central
finite differences, surface distances from exhaustive pairwise search,
resampling from the closed-form trilinear formula, and the 2D encoder
reference is built directly from archive arrays with full (unwindowed)
attention.
"""

from __future__ import annotations

import numpy as np
import torch


def fd_gradient(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar f() w.r.t. tensor x in place."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.detach(), b.detach()
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def check_gradient(build_loss, param: torch.Tensor, eps=1e-6) -> float:
    """Relative error between autograd and finite-difference gradients of
    the scalar produced by build_loss() w.r.t. param."""
    param.grad = None   # discard anything accumulated by earlier backwards
    loss = build_loss()
    loss.backward()
    analytic = param.grad.detach().clone()
    param.grad = None
    numeric = fd_gradient(lambda: build_loss().detach(), param.data, eps)
    return rel_error(analytic, numeric)


# ---------------------------------------------------------------------------
# Geometry / metrics oracles
# ---------------------------------------------------------------------------

def ball_voxel_count(grid, center, radius) -> int:
    """Exhaustive voxel-center membership test."""
    count = 0
    for z in range(grid[0]):
        for y in range(grid[1]):
            for x in range(grid[2]):
                dz, dy, dx = z - center[0], y - center[1], x - center[2]
                if dz * dz + dy * dy + dx * dx <= radius * radius:
                    count += 1
    return count


def brute_surface(mask: np.ndarray) -> list[tuple[int, int, int]]:
    """Foreground voxels with a face-adjacent background (or out-of-bounds)
    neighbor, by direct neighbor inspection."""
    pts = []
    d, h, w = mask.shape
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if not mask[z, y, x]:
                    continue
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    nz, ny, nx = z + dz, y + dy, x + dx
                    if not (0 <= nz < d and 0 <= ny < h and 0 <= nx < w) \
                            or not mask[nz, ny, nx]:
                        pts.append((z, y, x))
                        break
    return pts


def brute_nsd(pred_mask, gt_mask, tolerance_mm, spacing_mm) -> float:
    """Exhaustive all-pairs two-sided surface overlap, in percent."""
    sp = np.asarray(brute_surface(np.asarray(pred_mask, bool)), dtype=np.float64)
    sg = np.asarray(brute_surface(np.asarray(gt_mask, bool)), dtype=np.float64)
    if len(sp) == 0 and len(sg) == 0:
        return 100.0
    if len(sp) == 0 or len(sg) == 0:
        return 0.0
    s = np.asarray(spacing_mm, dtype=np.float64)
    diffs = (sp[:, None, :] - sg[None, :, :]) * s
    dists = np.sqrt((diffs ** 2).sum(axis=2))
    close_p = int((dists.min(axis=1) <= tolerance_mm).sum())
    close_g = int((dists.min(axis=0) <= tolerance_mm).sum())
    return 100.0 * (close_p + close_g) / (len(sp) + len(sg))


def brute_dice(pred_mask, gt_mask) -> float:
    """Direct evaluation of 2*|A&B| / (|A|+|B|) in percent."""
    p = np.asarray(pred_mask, bool)
    g = np.asarray(gt_mask, bool)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 200.0 * int((p & g).sum()) / total


def trilinear_at(data: np.ndarray, z: float, y: float, x: float) -> float:
    """Closed-form trilinear interpolation with edge clamping."""
    d, h, w = data.shape

    def clamp(v, n):
        return min(max(v, 0), n - 1)

    z0, y0, x0 = int(np.floor(z)), int(np.floor(y)), int(np.floor(x))
    fz, fy, fx = z - z0, y - y0, x - x0
    total = 0.0
    for dz, wz in ((0, 1 - fz), (1, fz)):
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                val = data[clamp(z0 + dz, d), clamp(y0 + dy, h), clamp(x0 + dx, w)]
                total += wz * wy * wx * float(val)
    return total


# ---------------------------------------------------------------------------
# Reference 2D transformer encoder (full attention, built from the archive)
# ---------------------------------------------------------------------------

class Reference2DEncoder:
    """Plain 2D ViT forward pass computed with explicit matmuls in float64.

    Input: (B, in, H, W) image whose dims are multiples of the patch
    kernel.  Returns the token map after the last block, (B, C, H', W').
    """

    def __init__(self, archive, cfg):
        self.cfg = cfg
        a = {name: torch.from_numpy(np.ascontiguousarray(archive[name])).double()
             for name in archive.names()}
        self.a = a

    @staticmethod
    def _layernorm(x, weight, bias, eps=1e-5):
        mu = x.mean(-1, keepdim=True)
        var = x.var(-1, keepdim=True, unbiased=False)
        return (x - mu) / torch.sqrt(var + eps) * weight + bias

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        cfg, a = self.cfg, self.a
        k, c, heads = cfg.patch_kernel, cfg.embed_dim, cfg.num_heads
        tokens = torch.nn.functional.conv2d(
            image.double(), a["encoder.patch_embed.weight"],
            a["encoder.patch_embed.bias"], stride=k,
        )                                               # (B, C, H', W')
        b, _, hp, wp = tokens.shape
        x = tokens.permute(0, 2, 3, 1).reshape(b, hp * wp, c)
        pos = a["encoder.pos_embed"].permute(1, 2, 0).reshape(1, hp * wp, c)
        x = x + pos
        for i in range(cfg.num_blocks):
            p = f"encoder.blocks.{i}."
            y = self._layernorm(x, a[p + "norm1.weight"], a[p + "norm1.bias"])
            qkv = y @ a[p + "attn.qkv.weight"].t() + a[p + "attn.qkv.bias"]
            qkv = qkv.reshape(b, -1, 3, heads, c // heads).permute(2, 0, 3, 1, 4)
            q, key, v = qkv[0], qkv[1], qkv[2]
            attn = torch.softmax(q @ key.transpose(-2, -1) / np.sqrt(c // heads), dim=-1)
            y = (attn @ v).transpose(1, 2).reshape(b, -1, c)
            y = y @ a[p + "attn.proj.weight"].t() + a[p + "attn.proj.bias"]
            x = x + y
            y = self._layernorm(x, a[p + "norm2.weight"], a[p + "norm2.bias"])
            y = y @ a[p + "mlp.fc1.weight"].t() + a[p + "mlp.fc1.bias"]
            y = torch.nn.functional.gelu(y)
            y = y @ a[p + "mlp.fc2.weight"].t() + a[p + "mlp.fc2.bias"]
            x = x + y
        return x.reshape(b, hp, wp, c).permute(0, 3, 1, 2)
