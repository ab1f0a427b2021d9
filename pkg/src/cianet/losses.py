"""Per-pixel robust loss family, soft Dice, the deep-supervised total
loss, and the sorted cumulative loss-share analysis.

All per-pixel losses take probability arrays and binary targets and
return ``(loss, dloss_dp)`` elementwise, so the training loop can seed
the recorded graph directly with analytic gradients.

Conventions: ``p_t`` is the probability assigned to the true class
(``p`` when the label is 1, ``1 - p`` otherwise). The truncation
threshold ``gamma`` lives in [0, 0.5]; gamma = 0 degenerates to plain
binary cross-entropy.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError

NUCLEI_LOSSES = ("bce", "bootstrapped", "truncated", "smooth_truncated")


@dataclass
class LossConfig:
    gamma: float = 0.2
    lam: float = 0.42
    nuclei_loss: str = "smooth_truncated"
    bootstrap_beta: float = 0.95
    level_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0])

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 0.5:
            raise DomainError(f"gamma must be in [0, 0.5], got {self.gamma}")
        if self.lam < 0:
            raise DomainError(f"lambda must be >= 0, got {self.lam}")
        if self.nuclei_loss not in NUCLEI_LOSSES:
            raise DomainError(f"nuclei_loss must be one of {NUCLEI_LOSSES}, got {self.nuclei_loss!r}")
        if not 0.0 < self.bootstrap_beta <= 1.0:
            raise DomainError(f"bootstrap_beta must be in (0, 1], got {self.bootstrap_beta}")
        if any(w < 0 for w in self.level_weights):
            raise DomainError("level_weights must be non-negative")

    def to_dict(self):
        return {
            "gamma": self.gamma,
            "lam": self.lam,
            "nuclei_loss": self.nuclei_loss,
            "bootstrap_beta": self.bootstrap_beta,
            "level_weights": list(self.level_weights),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _check_probs(p):
    p = np.asarray(p, dtype=np.float64 if np.asarray(p).dtype == np.float64 else np.float32)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise DomainError(f"probabilities outside [0, 1]: range [{p.min()}, {p.max()}]")
    return p


def _p_true(p, t):
    t = np.asarray(t)
    return np.where(t > 0.5, p, 1.0 - p), np.where(t > 0.5, 1.0, -1.0).astype(p.dtype)


def _safe_log(x):
    tiny = np.finfo(x.dtype).tiny
    return np.log(np.maximum(x, tiny))


def bce(p, t):
    """Negative log-likelihood of the true class, with d/dp."""
    p = _check_probs(p)
    pt, dpt = _p_true(p, t)
    loss = -_safe_log(pt)
    grad = -dpt / np.maximum(pt, np.finfo(p.dtype).tiny)
    return loss, grad


def truncated(p, t, gamma):
    """Cross-entropy clipped at -log(gamma): min(-log p_t, -log gamma).

    Non-smooth at p_t = gamma; the subgradient on the clipped side (0)
    is used at the kink.
    """
    if not 0.0 < gamma <= 0.5:
        raise DomainError(f"truncated loss needs gamma in (0, 0.5], got {gamma}")
    p = _check_probs(p)
    pt, dpt = _p_true(p, t)
    loss = -_safe_log(np.maximum(pt, gamma))
    grad = np.where(pt > gamma, -dpt / np.maximum(pt, np.finfo(p.dtype).tiny), 0.0)
    return loss, grad.astype(p.dtype)


def smooth_truncated(p, t, gamma):
    """Cross-entropy below -log(gamma), quadratically modulated under it.

    For p_t < gamma the loss is -log(gamma) + (1 - p_t^2/gamma^2)/2, which
    matches -log(p_t) in value and first derivative at p_t = gamma. With
    gamma = 0 this is exactly bce.
    """
    if gamma == 0.0:
        return bce(p, t)
    if not 0.0 < gamma <= 0.5:
        raise DomainError(f"smooth truncated loss needs gamma in (0, 0.5], got {gamma}")
    p = _check_probs(p)
    pt, dpt = _p_true(p, t)
    below = pt < gamma
    loss = np.where(below, -np.log(gamma) + 0.5 * (1.0 - pt * pt / (gamma * gamma)), -_safe_log(np.maximum(pt, gamma)))
    dldpt = np.where(below, -pt / (gamma * gamma), -1.0 / np.maximum(pt, gamma))
    return loss.astype(p.dtype), (dldpt * dpt).astype(p.dtype)


def bootstrapped_soft(p, t, beta):
    """Cross-entropy against a beta-blend of the label and the prediction."""
    if not 0.0 < beta <= 1.0:
        raise DomainError(f"bootstrap beta must be in (0, 1], got {beta}")
    p = _check_probs(p)
    t = np.asarray(t, dtype=p.dtype)
    a = beta * t + (1.0 - beta) * p
    b = beta * (1.0 - t) + (1.0 - beta) * (1.0 - p)
    logp = _safe_log(p)
    log1p = _safe_log(1.0 - p)
    loss = -a * logp - b * log1p
    tiny = np.finfo(p.dtype).tiny
    grad = (
        -(1.0 - beta) * logp
        - a / np.maximum(p, tiny)
        + (1.0 - beta) * log1p
        + b / np.maximum(1.0 - p, tiny)
    )
    return loss, grad


def nuclei_loss(p, t, cfg: LossConfig):
    """Dispatch the configured per-pixel nuclei loss."""
    if cfg.nuclei_loss == "bce":
        return bce(p, t)
    if cfg.nuclei_loss == "bootstrapped":
        return bootstrapped_soft(p, t, cfg.bootstrap_beta)
    if cfg.nuclei_loss == "truncated":
        return truncated(p, t, cfg.gamma)
    return smooth_truncated(p, t, cfg.gamma)


def soft_dice(p, q):
    """1 - 2*sum(pq)/(sum(p^2)+sum(q^2)) over all pixels, with d/dp.

    Zero by convention when both maps are empty.
    """
    p = _check_probs(p)
    q = np.asarray(q, dtype=p.dtype)
    if p.shape != q.shape:
        raise ContractError(f"soft_dice shape mismatch {p.shape} vs {q.shape}")
    num = 2.0 * float((p * q).sum())
    den = float((p * p).sum() + (q * q).sum())
    if den == 0.0:
        return 0.0, np.zeros_like(p)
    loss = 1.0 - num / den
    grad = -(2.0 * q * den - num * 2.0 * p) / (den * den)
    return float(loss), grad.astype(p.dtype)


class TotalLoss:
    """Scalar deep-supervised loss plus the gradient seed per score map."""

    def __init__(self, value, nuclei_seeds, contour_seeds, nuclei_term, dice_term):
        self.value = value
        self.nuclei_seeds = nuclei_seeds
        self.contour_seeds = contour_seeds
        self.nuclei_term = nuclei_term
        self.dice_term = dice_term


def total_loss(nuclei_maps, contour_maps, nuclei_targets, contour_targets, cfg: LossConfig):
    """Weighted mean over supervision levels of
    ``mean_pixels(nuclei_loss) + lambda * mean_images(soft_dice(contour))``.

    Maps are numpy probability arrays (N,1,H,W), coarse to fine; targets
    are binary arrays of the same shapes. Weight decay is not part of
    this scalar; the optimizer applies it in decoupled form.
    """
    levels = len(nuclei_maps)
    if not (len(contour_maps) == len(nuclei_targets) == len(contour_targets) == levels):
        raise ContractError("level count mismatch in total_loss")
    weights = list(cfg.level_weights)
    if len(weights) != levels:
        raise ContractError(f"{len(weights)} level weights for {levels} levels")
    wsum = float(sum(weights))
    if wsum <= 0:
        raise DomainError("level weights sum to zero")

    value = 0.0
    nuc_term = 0.0
    dice_term = 0.0
    nuclei_seeds, contour_seeds = [], []
    for w, pn, pc, tn, tc in zip(weights, nuclei_maps, contour_maps, nuclei_targets, contour_targets):
        scale = w / wsum
        loss_px, grad_px = nuclei_loss(pn, tn, cfg)
        nuc = float(loss_px.mean())
        nuclei_seeds.append((scale / loss_px.size) * grad_px)
        nuc_term += scale * nuc

        batch = pc.shape[0]
        dice_sum = 0.0
        grad_c = np.zeros_like(pc)
        for i in range(batch):
            d, g = soft_dice(pc[i], tc[i])
            dice_sum += d
            grad_c[i] = g
        dice = dice_sum / batch
        contour_seeds.append((scale * cfg.lam / batch) * grad_c)
        dice_term += scale * dice

        value += scale * (nuc + cfg.lam * dice)

    return TotalLoss(float(value), nuclei_seeds, contour_seeds, float(nuc_term), float(dice_term))


def loss_cdf(per_pixel_losses):
    """Sorted (descending) cumulative share of total loss.

    Returns ``(points, degenerate)`` where points is a list of
    ``(sample_fraction, cumulative_normalized_loss)`` pairs ending at
    exactly 1.0. An all-zero input yields a flagged degenerate flat
    curve that still ends at 1.0.
    """
    losses = np.asarray(per_pixel_losses, dtype=np.float64).reshape(-1)
    if losses.size == 0:
        raise ContractError("loss_cdf needs at least one loss value")
    if losses.min() < 0:
        raise DomainError("loss_cdf expects non-negative losses")
    order = np.sort(losses)[::-1]
    total = float(order.sum())
    n = order.size
    fractions = np.arange(1, n + 1, dtype=np.float64) / n
    if total == 0.0:
        cum = np.zeros(n)
        cum[-1] = 1.0
        return list(zip(fractions.tolist(), cum.tolist())), True
    cum = np.cumsum(order) / total
    cum[-1] = 1.0
    return list(zip(fractions.tolist(), cum.tolist())), False


def top_share(points, fraction=0.1):
    """Cumulative loss share carried by the top ``fraction`` of samples."""
    n = len(points)
    k = max(1, int(round(fraction * n)))
    return points[min(k, n) - 1][1]


def write_loss_cdf_csv(path, points):
    with open(path, "w") as f:
        f.write("fraction,cumulative_loss\n")
        for frac, cum in points:
            f.write(f"{frac:.10g},{cum:.10g}\n")
