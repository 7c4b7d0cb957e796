#!/usr/bin/env python3
"""
Coupling-Tightening Loss
Disparity-inconsistency-aware cross-entropy (DIA), deep-supervision consistency
constraint (DSCC), a photometric stand-in for semantic-consistency guidance (SCG)
and smooth-L1 stereo supervision (SM).

All functions take batched tensors: probabilities B x C x H x W, labels B x H x W,
disparities B x 1 x H x W.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from common.errors import ConfigError, LabelRangeError, NonFiniteError, ShapeMismatchError
from substrate.ops import warp_horizontal

log = logger.bind(source="ct_loss")

PROB_FLOOR = 1e-12
NEUTRAL_WEIGHT = 0.5
TERMS = ('dia', 'dscc', 'scg', 'sm', 'ce')


@dataclass
class LossConfig:
    alpha: float = 1.5
    beta: float = 1.0
    enable_dia: bool = True
    enable_dscc: bool = True
    enable_scg: bool = True
    enable_sm: bool = True
    negate_dscc: bool = False
    ignore_index: int = 255
    detach_weight: bool = False
    scg_variant: str = 'photometric'
    right_disparity_source: str = 'predicted'
    supervise_right: bool = False

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss weights must be nonnegative (alpha={self.alpha}, beta={self.beta})")
        if self.right_disparity_source not in ('predicted', 'ground_truth'):
            raise ConfigError("loss.right_disparity_source must be 'predicted' or 'ground_truth'")
        if self.scg_variant not in SCG_VARIANTS:
            raise ConfigError(f"unknown SCG variant '{self.scg_variant}', registered: {sorted(SCG_VARIANTS)}")


@dataclass
class WeightMap:
    raw: torch.Tensor           # W, zero where no valid correspondence
    normalized: torch.Tensor    # W^N = sigmoid(|W|), neutral elsewhere
    mask: torch.Tensor          # pixels with a valid in-frame correspondence


@dataclass
class LossBreakdown:
    dia: torch.Tensor
    dscc: torch.Tensor
    scg: torch.Tensor
    sm: torch.Tensor
    ce: torch.Tensor
    total: torch.Tensor
    alpha: float = 1.5
    beta: float = 1.0
    extras: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, float]:
        out = {name: float(getattr(self, name).detach()) for name in TERMS}
        out['total'] = float(self.total.detach())
        out['alpha'] = self.alpha
        out['beta'] = self.beta
        out.update(self.extras)
        return out


def _as_4d(disp: torch.Tensor) -> torch.Tensor:
    return disp.unsqueeze(1) if disp.dim() == 3 else disp


def labeled_pixels(labels: torch.Tensor, num_classes: int, ignore_index: int = 255):
    """(mask of supervised pixels, labels with ignored pixels mapped to 0)"""
    mask = labels != ignore_index
    bad = mask & ((labels < 0) | (labels >= num_classes))
    if bool(bad.any()):
        value = int(labels[bad][0])
        raise LabelRangeError(f"label {value} outside [0, {num_classes}) and not ignore_index {ignore_index}")
    return mask, torch.where(mask, labels, torch.zeros_like(labels))


def _label_log_prob(probs: torch.Tensor, safe_labels: torch.Tensor) -> torch.Tensor:
    p_y = torch.gather(probs, 1, safe_labels.unsqueeze(1)).squeeze(1)
    return torch.log(p_y.clamp_min(PROB_FLOOR))


def lr_consistency_weight(disp_left: torch.Tensor, disp_right: torch.Tensor,
                          valid: Optional[torch.Tensor] = None) -> WeightMap:
    """W(p) = D^L(p) - D^R(p - (D^L(p), 0)) and W^N = sigmoid(|W|).

    Pixels whose correspondence leaves the frame or is not `valid` get W^N = 0.5.
    """
    disp_left = _as_4d(disp_left)
    disp_right = _as_4d(disp_right)
    if disp_left.shape != disp_right.shape:
        raise ShapeMismatchError(f"D^L {tuple(disp_left.shape)} and D^R {tuple(disp_right.shape)} differ")
    warped, in_frame = warp_horizontal(disp_right, disp_left)
    mask = in_frame
    if valid is not None:
        mask = mask & _as_4d(valid).bool()
    raw = torch.where(mask, disp_left - warped, torch.zeros_like(disp_left))
    normalized = torch.where(mask, torch.sigmoid(raw.abs()), torch.full_like(raw, NEUTRAL_WEIGHT))
    return WeightMap(raw=raw, normalized=normalized, mask=mask)


def dia_loss(branch_probs: Sequence[torch.Tensor], labels: torch.Tensor, weight_n: torch.Tensor,
             alpha: float = 1.5, ignore_index: int = 255) -> torch.Tensor:
    """alpha * sum over branches of -(1/N) sum_p W^N(p) log p_y(p)"""
    num_classes = branch_probs[0].shape[1]
    mask, safe = labeled_pixels(labels, num_classes, ignore_index)
    n = mask.sum()
    zero = branch_probs[0].new_zeros(())
    if int(n) == 0:
        return zero
    w = _as_4d(weight_n).squeeze(1)
    total = zero
    for probs in branch_probs:
        total = total - (w * _label_log_prob(probs, safe) * mask).sum() / n
    return alpha * total


def cross_entropy_sum(branch_probs: Sequence[torch.Tensor], labels: torch.Tensor,
                      ignore_index: int = 255) -> torch.Tensor:
    """Unweighted cross-entropy summed over branches"""
    ones = torch.ones_like(labels, dtype=branch_probs[0].dtype)
    return dia_loss(branch_probs, labels, ones, alpha=1.0, ignore_index=ignore_index)


def dscc_loss(branch_probs: Sequence[torch.Tensor], beta: float = 1.0,
              negate_dscc: bool = False) -> torch.Tensor:
    """beta * sum over ordered branch pairs r != s of (1/N) sum_p KL(p^r || p^s)"""
    if len(branch_probs) < 2:
        return branch_probs[0].new_zeros(()) if branch_probs else torch.zeros(())
    b, _, h, w = branch_probs[0].shape
    n = b * h * w
    logs = [torch.log(p.clamp_min(PROB_FLOOR)) for p in branch_probs]
    total = branch_probs[0].new_zeros(())
    for r, p_r in enumerate(branch_probs):
        for s in range(len(branch_probs)):
            if s == r:
                continue
            total = total + (p_r * (logs[r] - logs[s])).sum() / n
    sign = -1.0 if negate_dscc else 1.0
    return sign * beta * total


ScgFn = Callable[..., torch.Tensor]
SCG_VARIANTS: Dict[str, ScgFn] = {}


def register_scg_variant(name: str, fn: ScgFn) -> None:
    """Make an SCG implementation selectable through loss.scg_variant"""
    if name in SCG_VARIANTS:
        log.warning(f"replacing SCG variant '{name}'")
    SCG_VARIANTS[name] = fn


def photometric_scg(probs: torch.Tensor, labels: torch.Tensor, left_img: torch.Tensor,
                    right_img: torch.Tensor, disp_left: torch.Tensor,
                    ignore_index: int = 255) -> torch.Tensor:
    """Cross-entropy weighted by sigmoid(mean_c |left - warp(right, D^L)|)"""
    warped, in_frame = warp_horizontal(right_img, disp_left)
    err = (left_img - warped).abs().mean(dim=1, keepdim=True)
    weight = torch.where(in_frame, torch.sigmoid(err), torch.full_like(err, NEUTRAL_WEIGHT))
    return dia_loss([probs], labels, weight, alpha=1.0, ignore_index=ignore_index)


register_scg_variant('photometric', photometric_scg)


def scg_loss(probs: torch.Tensor, labels: torch.Tensor, left_img: torch.Tensor, right_img: torch.Tensor,
             disp_left: torch.Tensor, variant: str = 'photometric', ignore_index: int = 255) -> torch.Tensor:
    try:
        fn = SCG_VARIANTS[variant]
    except KeyError:
        raise ConfigError(f"unknown SCG variant '{variant}'") from None
    return fn(probs, labels, left_img, right_img, _as_4d(disp_left), ignore_index=ignore_index)


def sm_loss(disp_pred: torch.Tensor, disp_gt: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean smooth-L1 over valid pixels"""
    disp_pred, disp_gt, valid = _as_4d(disp_pred), _as_4d(disp_gt), _as_4d(valid).bool()
    if disp_pred.shape != disp_gt.shape:
        raise ShapeMismatchError(f"predicted {tuple(disp_pred.shape)} vs ground truth {tuple(disp_gt.shape)}")
    if not bool(valid.any()):
        log.warning("no valid disparity pixels, stereo loss set to 0")
        return disp_pred.new_zeros(())
    return F.smooth_l1_loss(disp_pred[valid], disp_gt[valid], reduction='mean', beta=1.0)


def ct_total(parts: Dict[str, Union[torch.Tensor, float]], alpha: float = 1.5,
             beta: float = 1.0) -> LossBreakdown:
    """Sum the terms; a non-finite term aborts with its name"""
    unknown = set(parts) - set(TERMS)
    if unknown:
        raise ConfigError(f"unknown loss terms: {sorted(unknown)}")
    ref = next((v for v in parts.values() if isinstance(v, torch.Tensor)), None)
    device = ref.device if ref is not None else None
    dtype = ref.dtype if ref is not None else torch.get_default_dtype()
    values = {}
    for name in TERMS:
        v = parts.get(name, 0.0)
        values[name] = v.reshape(()) if isinstance(v, torch.Tensor) else torch.tensor(float(v), device=device, dtype=dtype)
    for name, v in values.items():
        if not bool(torch.isfinite(v).all()):
            raise NonFiniteError(name, f"loss term '{name}' is not finite",
                                 breakdown={k: float(t.detach()) for k, t in values.items()})
    total = sum(values[name] for name in TERMS)
    return LossBreakdown(total=total, alpha=alpha, beta=beta, **values)


class CouplingTighteningLoss(nn.Module):
    """Total coupling-tightening loss of a JointOutput against a batch dict"""

    def __init__(self, cfg: LossConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg

    def right_disparity(self, output, batch: Dict[str, torch.Tensor]):
        """(D^R used for the consistency weight, validity mask or None)"""
        if self.cfg.right_disparity_source == 'ground_truth' and bool(batch['valid_right'].any()):
            return batch['disp_right'], batch['valid_right']
        return output.disp_right, None

    def forward(self, output, batch: Dict[str, torch.Tensor]) -> LossBreakdown:
        cfg = self.cfg
        probs: List[torch.Tensor] = output.branches.probs()
        labels = batch['labels']
        parts: Dict[str, torch.Tensor] = {}
        extras: Dict[str, float] = {}

        if cfg.enable_dia:
            disp_right, valid_right = self.right_disparity(output, batch)
            valid = None
            if valid_right is not None:
                warped_valid, _ = warp_horizontal(valid_right.float(), output.disp_left.detach())
                valid = warped_valid > 0.5
            weights = lr_consistency_weight(output.disp_left, disp_right, valid)
            w_n = weights.normalized.detach() if cfg.detach_weight else weights.normalized
            parts['dia'] = dia_loss(probs, labels, w_n, cfg.alpha, cfg.ignore_index)
            extras['mean_weight'] = float(weights.normalized.detach().mean())
        else:
            parts['ce'] = cross_entropy_sum(probs, labels, cfg.ignore_index)

        if cfg.enable_dscc:
            parts['dscc'] = dscc_loss(probs, cfg.beta, cfg.negate_dscc)
        if cfg.enable_scg:
            parts['scg'] = scg_loss(probs[0], labels, batch['left'], batch['right'], output.disp_left,
                                    cfg.scg_variant, cfg.ignore_index)
        if cfg.enable_sm:
            sm = sm_loss(output.disp_left, batch['disp_left'], batch['valid_left'])
            if cfg.supervise_right and bool(batch['valid_right'].any()):
                sm = sm + sm_loss(output.disp_right, batch['disp_right'], batch['valid_right'])
            parts['sm'] = sm

        breakdown = ct_total(parts, cfg.alpha, cfg.beta)
        breakdown.extras = extras
        return breakdown
