"""Every scalar training objective, plus the differentiable boundary derivation.

All functions are pure and operate on (B, C, H, W) tensors (boundary maps are
(B, 1, H, W)). Sums over pixels are normalized to means so the loss weights
stay resolution independent. Natural logarithm throughout; probabilities are
clamped at 1e-7 before any log.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

PROB_EPS = 1e-7

# names accepted by total_loss, with their weight source
_COMPONENT_WEIGHTS = ("sem_seg", "lovasz", "sem_adv", "eg_seg", "eg_adv", "eg_con", "uasl")


@dataclass
class LossWeights:
    lambda1: float = 1e-3  # semantic adversarial
    lambda2: float = 20.0  # edge BCE
    lambda3: float = 1e-3  # edge adversarial
    alpha: float = 10.0  # entropy reweighting factor
    tau: float = 1.0  # gumbel temperature
    theta: float = 0.5  # boundary threshold for the consistency mask
    sigma: float = 1.0  # gaussian filter width for boundary derivation
    nplus: str = "union"  # consistency mask: union or intersection

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must be in (0, 1), got {self.theta}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.nplus not in ("union", "intersection"):
            raise ValueError(f"nplus must be union or intersection, got {self.nplus!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in vars(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        w = cls(**d)
        w.validate()
        return w


class EntropyMap(NamedTuple):
    map: torch.Tensor  # (B, H, W), values in [0, 1]
    image_mean: torch.Tensor  # (B,), per-image mean entropy


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(min=PROB_EPS))


def _check_prob_map(p: torch.Tensor, name: str = "P") -> None:
    if p.dim() != 4:
        raise ValueError(f"{name} must be (B, C, H, W), got shape {tuple(p.shape)}")
    if not torch.isfinite(p).all():
        raise ValueError(f"{name} contains non-finite values")
    if p.min() < -1e-6:
        raise ValueError(f"{name} has negative entries")
    dev = float((p.sum(dim=1) - 1.0).abs().max().detach())
    if dev > 1e-5:
        raise ValueError(f"{name} channel sums deviate from 1 by {dev:.2e}")


def softmax_prob(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the channel dimension."""
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain NaN or Inf")
    return torch.softmax(logits, dim=1)


def cross_entropy_seg(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -sum_c y * log p against one-hot targets."""
    _check_prob_map(p)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch: P {tuple(p.shape)} vs Y {tuple(y.shape)}")
    if not (((y == 0) | (y == 1)).all() and (y.sum(dim=1) == 1).all()):
        raise ValueError("Y must be exactly one-hot per pixel")
    return -(y * _safe_log(p)).sum(dim=1).mean()


def _lovasz_grad(fg_sorted: torch.Tensor) -> torch.Tensor:
    gts = fg_sorted.sum()
    intersection = gts - fg_sorted.cumsum(0)
    union = gts + (1.0 - fg_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if fg_sorted.numel() > 1:
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def lovasz_softmax(p: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Lovasz extension of the Jaccard loss, averaged over classes present in `label`."""
    _check_prob_map(p)
    b, c, h, w = p.shape
    if label.shape != (b, h, w):
        raise ValueError(f"label shape {tuple(label.shape)} incompatible with P {tuple(p.shape)}")
    if label.min() < 0 or label.max() >= c:
        raise ValueError(f"label values must be in [0, {c})")
    probs = p.permute(0, 2, 3, 1).reshape(-1, c)
    flat = label.reshape(-1)
    losses = []
    for cls in flat.unique():
        fg = (flat == cls).to(p.dtype)
        errors = (fg - probs[:, cls]).abs()
        errors_sorted, perm = torch.sort(errors, dim=0, descending=True)
        losses.append(torch.dot(errors_sorted, _lovasz_grad(fg[perm])))
    return torch.stack(losses).mean()


def self_information(p: torch.Tensor) -> torch.Tensor:
    """Elementwise -p * log p with 0 log 0 := 0 (weighted self-information map)."""
    _check_prob_map(p)
    return -p * _safe_log(p)


def entropy(p: torch.Tensor) -> EntropyMap:
    """Per-pixel entropy normalized by log C, plus per-image means."""
    c = p.shape[1]
    emap = self_information(p).sum(dim=1) / math.log(c)
    return EntropyMap(map=emap, image_mean=emap.mean(dim=(1, 2)))


def _as_weight(eps_t, alpha: float, device, dtype) -> torch.Tensor:
    eps = torch.as_tensor(eps_t, device=device, dtype=dtype).detach()
    if eps.dim() > 1:
        raise ValueError(f"eps_t must be a scalar or per-image vector, got shape {tuple(eps.shape)}")
    return 1.0 + (alpha * eps) ** 2


def _per_image_mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=tuple(range(1, x.dim())))


def adv_sem(scores_src, scores_tgt, eps_t, alpha: float, mode: str) -> torch.Tensor:
    """Entropy-reweighted adversarial loss on raw discriminator scores.

    Domain convention: source -> 0, target -> 1. The target term is scaled by
    w = 1 + (alpha * eps_t)^2 with eps_t gradient-detached; alpha = 0 recovers
    the standard adversarial loss. mode="gen" pushes target scores toward the
    source label and involves only the target scores.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    w = _as_weight(eps_t, alpha, scores_tgt.device, scores_tgt.dtype)
    if mode == "disc":
        src_term = F.softplus(scores_src).mean()
        tgt_term = (w * _per_image_mean(F.softplus(-scores_tgt))).mean()
        return src_term + tgt_term
    if mode == "gen":
        return (w * _per_image_mean(F.softplus(scores_tgt))).mean()
    raise ValueError(f"mode must be 'disc' or 'gen', got {mode!r}")


def adv_edge(scores_src, scores_tgt, mode: str) -> torch.Tensor:
    """Unweighted adversarial loss on edge-feature discriminator scores."""
    return adv_sem(scores_src, scores_tgt, 0.0, 0.0, mode)


def edge_bce(pred: torch.Tensor, gt: torch.Tensor, balanced: bool = True) -> torch.Tensor:
    """Binary cross-entropy on boundary maps, positive class weighted by #neg/#pos."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if not ((gt == 0) | (gt == 1)).all():
        raise ValueError("gt must be binary")
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    pos = gt.sum()
    neg = gt.numel() - pos
    if balanced and (pos == 0 or neg == 0):
        log.info("edge_bce: degenerate boundary map (all %s), using unweighted BCE",
                 "ones" if neg == 0 else "zeros")
        balanced = False
    w_pos = (neg / pos) if balanced else 1.0
    return (-(w_pos * gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p))).mean()


def _gaussian_kernel(sigma: float, radius: int, dtype, device) -> torch.Tensor:
    xs = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    k1 = torch.exp(-(xs**2) / (2.0 * sigma * sigma))
    k1 = k1 / k1.sum()
    return torch.outer(k1, k1)


def gaussian_blur(x: torch.Tensor, sigma: float, radius: int = 2) -> torch.Tensor:
    """Depthwise 5x5 (truncated) gaussian with reflect padding."""
    if sigma <= 0:
        return x
    c = x.shape[1]
    k = _gaussian_kernel(sigma, radius, x.dtype, x.device)
    k = k.expand(c, 1, *k.shape)
    xp = F.pad(x, (radius, radius, radius, radius), mode="reflect")
    return F.conv2d(xp, k, groups=c)


def _central_gradients(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    xp = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = (xp[..., 1:-1, 2:] - xp[..., 1:-1, :-2]) / 2.0
    gy = (xp[..., 2:, 1:-1] - xp[..., :-2, 1:-1]) / 2.0
    return gx, gy


def pred_to_boundary(
    logits: torch.Tensor,
    tau: float = 1.0,
    sigma: float = 1.0,
    generator: torch.Generator | None = None,
    hard: bool = True,
) -> torch.Tensor:
    """Differentiable boundary map derived from segmentation logits.

    Forward: gumbel-softmax sample (straight-through one-hot when `hard`),
    gaussian-filter each class channel, per-channel gradient magnitude from
    central differences, summed over channels, scaled by 1/sqrt(2), clamped
    to [0, 1]. Backward flows through the soft relaxation.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain NaN or Inf")
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
    gumbel = -torch.log(-torch.log(u + 1e-20) + 1e-20)
    y_soft = torch.softmax((logits + gumbel) / tau, dim=1)
    if hard:
        idx = y_soft.argmax(dim=1, keepdim=True)
        y_hard = torch.zeros_like(y_soft).scatter_(1, idx, 1.0)
        y = y_hard + y_soft - y_soft.detach()
    else:
        y = y_soft
    blurred = gaussian_blur(y, sigma)
    gx, gy = _central_gradients(blurred)
    sq = gx * gx + gy * gy
    # smoothed magnitude that is exactly 0 (with finite gradient) on flat fields
    eps = torch.finfo(logits.dtype).eps
    mag = torch.where(sq > 0, torch.sqrt(sq + eps * eps) - eps, sq)
    bnd = mag.sum(dim=1, keepdim=True) / math.sqrt(2.0)
    return bnd.clamp(0.0, 1.0)


def edge_consistency(
    p_bnd: torch.Tensor, b_t: torch.Tensor, theta: float = 0.5, nplus: str = "union"
) -> torch.Tensor:
    """Mean absolute mismatch over the active boundary pixel set.

    The edge-stream map `b_t` acts as a constant target; gradients reach only
    `p_bnd`. An empty active set yields 0.
    """
    if p_bnd.shape != b_t.shape:
        raise ValueError(f"shape mismatch: {tuple(p_bnd.shape)} vs {tuple(b_t.shape)}")
    b_t = b_t.detach()
    with torch.no_grad():
        if nplus == "union":
            mask = (p_bnd > theta) | (b_t > theta)
        elif nplus == "intersection":
            mask = (p_bnd > theta) & (b_t > theta)
        else:
            raise ValueError(f"nplus must be union or intersection, got {nplus!r}")
    if not mask.any():
        return p_bnd.new_zeros(())
    return (p_bnd - b_t).abs()[mask].mean()


def uasl(p: torch.Tensor, y_pseudo: torch.Tensor, e_map: torch.Tensor) -> torch.Tensor:
    """Self-training cross-entropy with per-pixel confidence weight (1 - E)^2."""
    _check_prob_map(p)
    if y_pseudo.shape != p.shape:
        raise ValueError(f"pseudo-label shape {tuple(y_pseudo.shape)} != P {tuple(p.shape)}")
    if e_map.shape != (p.shape[0], p.shape[2], p.shape[3]):
        raise ValueError(f"entropy map shape {tuple(e_map.shape)} incompatible with P")
    w = (1.0 - e_map.detach()) ** 2
    ce = -(y_pseudo.detach() * _safe_log(p)).sum(dim=1)
    return (w * ce).mean()


def total_loss(components: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the active loss terms; aborts on NaN naming the term."""
    scale = {
        "sem_seg": 1.0,
        "lovasz": 1.0,
        "sem_adv": weights.lambda1,
        "eg_seg": weights.lambda2,
        "eg_adv": weights.lambda3,
        "eg_con": 1.0,
        "uasl": 1.0,
    }
    total = None
    for name, value in components.items():
        if name not in scale:
            raise ValueError(f"unknown loss component {name!r}, expected {_COMPONENT_WEIGHTS}")
        v = torch.as_tensor(value)
        if torch.isnan(v).any():
            raise FloatingPointError(f"loss component {name!r} is NaN")
        term = scale[name] * v
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss components given")
    return total


class PseudoLabelBundle:
    """Frozen per-image pseudo-labels and entropy maps from a source checkpoint.

    Persisted as one palette PNG (argmax labels) plus one 16-bit grayscale PNG
    (entropy, fixed point /65535) per image, with a JSON index.
    """

    def __init__(self, num_classes: int, checkpoint_id: str, spec_hash: str):
        self.num_classes = num_classes
        self.checkpoint_id = checkpoint_id
        self.spec_hash = spec_hash
        self._labels: dict[str, np.ndarray] = {}
        self._entropy: dict[str, np.ndarray] = {}

    @property
    def ids(self) -> list[str]:
        return sorted(self._labels)

    def add(self, sample_id: str, label: np.ndarray, e_map: np.ndarray) -> None:
        if label.shape != e_map.shape:
            raise ValueError("label and entropy map shapes differ")
        if e_map.min() < 0 or e_map.max() > 1:
            raise ValueError("entropy map must lie in [0, 1]")
        self._labels[sample_id] = label.astype(np.int64)
        self._entropy[sample_id] = e_map.astype(np.float64)

    def tensors_for(self, ids: list[str], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Stacked (one-hot labels (B,C,H,W), entropy maps (B,H,W)) for a batch."""
        labs = np.stack([self._labels[i] for i in ids])
        ents = np.stack([self._entropy[i] for i in ids])
        y = F.one_hot(torch.from_numpy(labs), self.num_classes)
        y = y.permute(0, 3, 1, 2).to(dtype)
        return y, torch.from_numpy(ents).to(dtype)

    def save(self, out_dir: str | Path) -> Path:
        root = Path(out_dir)
        (root / "labels").mkdir(parents=True, exist_ok=True)
        (root / "entropy").mkdir(parents=True, exist_ok=True)
        identity_palette = [v for i in range(256) for v in (i, i, i)]
        for sid in self.ids:
            im = Image.fromarray(self._labels[sid].astype(np.uint8), mode="P")
            im.putpalette(identity_palette)  # without a palette PIL collapses indices
            im.save(root / "labels" / f"{sid}.png", format="PNG")
            q = np.round(self._entropy[sid] * 65535.0).astype(np.uint16)
            Image.fromarray(q).save(root / "entropy" / f"{sid}.png", format="PNG")
        index = {
            "num_classes": self.num_classes,
            "checkpoint_id": self.checkpoint_id,
            "spec_hash": self.spec_hash,
            "ids": self.ids,
        }
        (root / "index.json").write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")
        return root

    @classmethod
    def load(cls, path: str | Path) -> "PseudoLabelBundle":
        root = Path(path)
        index = json.loads((root / "index.json").read_text())
        bundle = cls(index["num_classes"], index["checkpoint_id"], index["spec_hash"])
        for sid in index["ids"]:
            lab = np.asarray(Image.open(root / "labels" / f"{sid}.png"), dtype=np.int64)
            q = np.asarray(Image.open(root / "entropy" / f"{sid}.png"), dtype=np.float64)
            bundle.add(sid, lab, q / 65535.0)
        return bundle
