"""Training engine: combined Dice + cross-entropy loss, warmup/exponential
learning-rate schedule, freeze enforcement, the fit loop, and best-model
selection by validation Dice.

The fit loop is deterministic given its seed when ``deterministic=True``
(single-threaded math, seeded torch/numpy RNGs); rerunning it produces
hash-identical logs and checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .decoder import predict_labels
from .encoder import LayerNorm3d
from .errors import ConfigError, ContractError, NumericError
from .inference import SlidingWindowConfig, sliding_window_infer
from .metrics import dice_score
from .model import Segmenter3D, count_params, save_model_checkpoint
from .sampling import AugmentConfig, PatchSpec, augment, sample_patches
from .volumes import LabelMap, Volume


@dataclass
class LossConfig:
    dice_smooth: float = 1e-5
    include_background_in_dice: bool = False
    dice_weight: float = 1.0
    ce_weight: float = 1.0

    def __post_init__(self):
        if self.dice_smooth <= 0:
            raise ConfigError("dice_smooth must be positive")


def seg_loss(probs: torch.Tensor, labels: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Soft Dice loss plus mean voxel-wise cross-entropy.

    ``probs`` are softmax outputs (B, K+1, D, H, W); ``labels`` integer
    (B, D, H, W) in {0..K}.  Raises ContractError when per-voxel channel
    sums stray from 1 by more than 1e-4.
    """
    if probs.ndim != 5 or labels.ndim != 4:
        raise ContractError(
            f"expected probs (B,K+1,D,H,W) and labels (B,D,H,W), "
            f"got {tuple(probs.shape)} / {tuple(labels.shape)}"
        )
    sums = probs.sum(dim=1)
    if (sums - 1.0).abs().max().item() > 1e-4:
        raise ContractError("probs are not normalized per voxel (|sum - 1| > 1e-4)")
    num_classes = probs.shape[1]

    picked = probs.gather(1, labels.unsqueeze(1).long()).clamp_min(1e-30)
    ce = -(picked.log()).mean()

    first = 0 if cfg.include_background_in_dice else 1
    eps = cfg.dice_smooth
    dice_terms = []
    for c in range(first, num_classes):
        p = probs[:, c]
        g = (labels == c).to(probs.dtype)
        inter = (p * g).sum(dim=(1, 2, 3))
        denom = p.sum(dim=(1, 2, 3)) + g.sum(dim=(1, 2, 3))
        dice_terms.append((2.0 * inter + eps) / (denom + eps))
    dice = torch.stack(dice_terms, dim=1).mean()
    return cfg.ce_weight * ce + cfg.dice_weight * (1.0 - dice)


@dataclass
class OptimConfig:
    base_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    epochs: int = 200
    warmup_epochs: int = 5
    final_lr_fraction: float = 0.01
    batch_size: int = 1
    patch_size: tuple[int, int, int] = (32, 32, 32)   # (128,128,128) at full scale
    validate_every: int = 1

    def __post_init__(self):
        self.patch_size = tuple(self.patch_size)
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if not 0 < self.final_lr_fraction <= 1:
            raise ConfigError("final_lr_fraction must be in (0, 1]")


def lr_at(epoch: int, step_in_epoch: int, steps_per_epoch: int, cfg: OptimConfig) -> float:
    """Linear per-step warmup to base_lr, then per-epoch exponential decay
    reaching base_lr * final_lr_fraction at the start of the last epoch."""
    if epoch >= cfg.epochs:
        raise ConfigError(f"epoch {epoch} out of range (epochs={cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        done = epoch * steps_per_epoch + step_in_epoch
        return cfg.base_lr * done / (cfg.warmup_epochs * steps_per_epoch)
    decay_span = cfg.epochs - 1 - cfg.warmup_epochs
    if decay_span <= 0:
        return cfg.base_lr
    gamma = cfg.final_lr_fraction ** (1.0 / decay_span)
    return cfg.base_lr * gamma ** (epoch - cfg.warmup_epochs)


def apply_freeze_policy(
    params: dict[str, torch.nn.Parameter], grads: dict[str, torch.Tensor]
) -> dict[str, torch.Tensor]:
    """Zero the gradients of frozen parameters, in place."""
    for name, grad in grads.items():
        if name not in params:
            raise ContractError(f"gradient key {name!r} not found among parameters")
        if not params[name].requires_grad and grad is not None:
            grad.zero_()
    return grads


def select_best(checkpoint_ids: list, val_scores: list[float]):
    """Highest validation Dice wins; ties go to the later entry; with no
    scores the final checkpoint is selected."""
    if not checkpoint_ids:
        raise ConfigError("no checkpoints to select from")
    if not val_scores:
        return checkpoint_ids[-1]
    best = 0
    for i, score in enumerate(val_scores):
        if score >= val_scores[best]:
            best = i
    return checkpoint_ids[best]


# ---------------------------------------------------------------------------
# Fit loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    log_path: Path
    checkpoint_paths: list[Path] = field(default_factory=list)
    checkpoint_epochs: list[int] = field(default_factory=list)
    val_epochs: list[int] = field(default_factory=list)
    val_scores: list[float] = field(default_factory=list)
    best_path: Path | None = None
    final_path: Path | None = None


def no_decay_param_names(model: nn.Module) -> set[str]:
    """Normalization parameters and the depth positional table are exempt
    from weight decay."""
    names = set()
    for mod_name, module in model.named_modules():
        if isinstance(module, (nn.LayerNorm, LayerNorm3d)):
            for p_name, _ in module.named_parameters(recurse=False):
                names.add(f"{mod_name}.{p_name}" if mod_name else p_name)
    for name, _ in model.named_parameters():
        if name.endswith("pos_enc.table_depth"):
            names.add(name)
    return names


def build_optimizer(model: nn.Module, cfg: OptimConfig) -> torch.optim.AdamW:
    """AdamW over tunable parameters only; frozen parameters never enter
    the optimizer state."""
    no_decay = no_decay_param_names(model)
    decay_group, plain_group = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        (plain_group if name in no_decay else decay_group).append(param)
    groups = [
        {"params": decay_group, "weight_decay": cfg.weight_decay},
        {"params": plain_group, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2))


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def optimizer_state_arrays(
    optimizer: torch.optim.Optimizer, params: dict[str, torch.nn.Parameter]
) -> dict[str, np.ndarray]:
    """Adam moments and step counters as archive tensors (for resumption)."""
    name_of = {p: n for n, p in params.items()}
    out: dict[str, np.ndarray] = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = name_of[p]
            out[f"optim.{name}.step"] = np.asarray([float(state["step"])], dtype=np.float64)
            out[f"optim.{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy().astype(np.float32)
            out[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy().astype(np.float32)
    return out


def load_optimizer_state_(
    optimizer: torch.optim.Optimizer, model: nn.Module, arrays
) -> None:
    """Restore Adam state saved by optimizer_state_arrays."""
    for name, param in model.named_parameters():
        key = f"optim.{name}.exp_avg"
        if key not in arrays:
            continue
        state = optimizer.state[param]
        state["step"] = torch.tensor(float(arrays[f"optim.{name}.step"][0]))
        state["exp_avg"] = torch.from_numpy(np.ascontiguousarray(arrays[key]))
        state["exp_avg_sq"] = torch.from_numpy(
            np.ascontiguousarray(arrays[f"optim.{name}.exp_avg_sq"])
        )


def validation_dice(
    model, cases: list[tuple[Volume, LabelMap]], sw_cfg: SlidingWindowConfig
) -> float:
    """Mean Dice over cases and foreground classes."""
    scores = []
    for vol, lab in cases:
        logits = sliding_window_infer(vol, model, sw_cfg)
        pred = predict_labels(logits, lab.num_classes, vol.spacing_mm)
        per_class = [dice_score(pred, lab, c) for c in range(1, lab.num_classes + 1)]
        scores.append(float(np.mean(per_class)) / 100.0)
    return float(np.mean(scores)) if scores else float("nan")


def fit(
    model: Segmenter3D,
    train_cases: list[tuple[Volume, LabelMap]],
    val_cases: list[tuple[Volume, LabelMap]],
    optim_cfg: OptimConfig,
    loss_cfg: LossConfig,
    patch_spec: PatchSpec,
    out_dir,
    seed: int = 0,
    deterministic: bool = True,
    augment_cfg: AugmentConfig | None = None,
    sw_cfg: SlidingWindowConfig | None = None,
    start_epoch: int = 0,
    stop_after_epoch: int | None = None,
    optimizer_state=None,
) -> FitResult:
    """Train, log line-delimited records, and checkpoint on validation
    improvement plus at the final epoch.

    ``start_epoch``/``optimizer_state`` resume an interrupted run; since
    patch sampling is a pure function of (seed, epoch, case), a resumed
    deterministic run retraces the original loss trajectory exactly.
    """
    if not train_cases:
        raise ConfigError("training set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if deterministic:
        set_deterministic(seed)
    else:
        torch.manual_seed(seed)
    sw_cfg = sw_cfg or SlidingWindowConfig(patch_size=optim_cfg.patch_size)

    params = dict(model.named_parameters())
    optimizer = build_optimizer(model, optim_cfg)
    if optimizer_state is not None:
        load_optimizer_state_(optimizer, model, optimizer_state)
    steps_per_epoch = math.ceil(len(train_cases) * patch_spec.count / optim_cfg.batch_size)
    last_epoch = optim_cfg.epochs - 1 if stop_after_epoch is None \
        else min(stop_after_epoch, optim_cfg.epochs - 1)

    result = FitResult(log_path=out_dir / "training_log.jsonl")
    best_score = -1.0
    log = open(result.log_path, "w")

    def emit(record: dict):
        log.write(json.dumps(record, sort_keys=True) + "\n")
        log.flush()

    try:
        for epoch in range(start_epoch, last_epoch + 1):
            model.train()
            batch_imgs: list[np.ndarray] = []
            batch_labs: list[np.ndarray] = []
            step = 0
            epoch_losses = []

            def run_step(step_idx: int) -> None:
                lr = lr_at(epoch, step_idx, steps_per_epoch, optim_cfg)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                img = torch.from_numpy(np.stack(batch_imgs)[:, None]).float()
                lab = torch.from_numpy(np.stack(batch_labs)).long()
                optimizer.zero_grad(set_to_none=True)
                logits = model(img)
                probs = torch.softmax(logits, dim=1)
                loss = seg_loss(probs, lab, loss_cfg)
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step_idx} lr {lr:.3e}"
                    )
                loss.backward()
                grads = {n: p.grad for n, p in params.items() if p.grad is not None}
                apply_freeze_policy(params, grads)
                optimizer.step()
                value = float(loss.detach())
                epoch_losses.append(value)
                emit({"type": "step", "epoch": epoch, "step": step_idx,
                      "lr": lr, "loss": value})

            for case_idx, (vol, lab) in enumerate(train_cases):
                case_seed = seed * 1_000_003 + epoch * 1009 + case_idx
                patches = sample_patches(vol, lab, patch_spec, seed=case_seed)
                aug_rng = np.random.default_rng(np.random.SeedSequence(case_seed + 1))
                for sample in patches:
                    img, lab_patch = sample.image, sample.labels
                    if augment_cfg is not None:
                        img, lab_patch = augment(img, lab_patch, augment_cfg, aug_rng)
                    batch_imgs.append(np.ascontiguousarray(img, dtype=np.float32))
                    batch_labs.append(np.ascontiguousarray(lab_patch, dtype=np.int64))
                    if len(batch_imgs) == optim_cfg.batch_size:
                        run_step(step)
                        step += 1
                        batch_imgs, batch_labs = [], []
            if batch_imgs:
                run_step(step)
                step += 1
                batch_imgs, batch_labs = [], []

            record = {"type": "epoch", "epoch": epoch,
                      "mean_loss": float(np.mean(epoch_losses))}
            is_last = epoch == last_epoch
            if val_cases and (epoch % optim_cfg.validate_every == 0 or is_last):
                score = validation_dice(model, val_cases, sw_cfg)
                record["val_dice"] = score
                result.val_epochs.append(epoch)
                result.val_scores.append(score)
                if score > best_score:
                    best_score = score
                    path = out_dir / f"checkpoint_epoch{epoch:04d}.ckpt"
                    save_model_checkpoint(
                        model, path, epoch=epoch, val_dice=score, next_epoch=epoch + 1,
                        extra_arrays=optimizer_state_arrays(optimizer, params),
                    )
                    result.checkpoint_paths.append(path)
                    result.checkpoint_epochs.append(epoch)
            emit(record)
    finally:
        log.close()

    final_path = out_dir / "checkpoint_final.ckpt"
    save_model_checkpoint(
        model, final_path, epoch=last_epoch, next_epoch=last_epoch + 1,
        val_dice=result.val_scores[-1] if result.val_scores else None,
        extra_arrays=optimizer_state_arrays(optimizer, params),
    )
    result.final_path = final_path

    if result.checkpoint_paths:
        saved_scores = [result.val_scores[result.val_epochs.index(e)]
                        for e in result.checkpoint_epochs]
        best = select_best(result.checkpoint_paths, saved_scores)
    else:
        best = final_path
    best_path = out_dir / "checkpoint_best.ckpt"
    shutil.copyfile(best, best_path)
    result.best_path = best_path
    return result
