"""Loss terms: classification, domain confusion, soft-label mixup, RBF-MMD,
their weighted combination, the smooth-max total and the eta schedule."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch

from .adaptation import Strategy

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda1: float = 5.0  # mmd
    lambda2: float = 5.0  # domain confusion
    lambda3: float = 1.2  # mixup
    eta: float = 0.1
    zeta: float = 1.0
    gamma: float = 1.0
    aggregator: str = "lse"

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "eta", "zeta"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.aggregator not in ("lse", "sum"):
            raise ValueError(f"aggregator must be 'lse' or 'sum', got {self.aggregator!r}")


@dataclass
class ScheduleConfig:
    s: float = 0.1
    f: float = 0.9
    N_e: int = 100
    e: int = 0

    def __post_init__(self):
        if not 0 < self.s <= self.f:
            raise ValueError(f"need 0 < s <= f, got s={self.s}, f={self.f}")
        if not 0 <= self.e <= self.N_e:
            raise ValueError(f"need 0 <= e <= N_e, got e={self.e}, N_e={self.N_e}")


@dataclass
class MMDConfig:
    bandwidths: tuple | None = None
    median_factors: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    estimator: str = "biased"

    def __post_init__(self):
        if self.bandwidths is not None:
            self.bandwidths = tuple(float(b) for b in self.bandwidths)
            if not self.bandwidths or min(self.bandwidths) <= 0:
                raise ValueError("bandwidths must be positive")
        if self.estimator != "biased":
            raise ValueError("only the biased (V-statistic) estimator is provided")


@dataclass
class LossBreakdown:
    cls: float = 0.0
    dc: float = 0.0
    mmd: float = 0.0
    mixup: float = 0.0
    adv: float = 0.0
    total: float = 0.0
    eta: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def ce_class_per_sample(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and int(labels.max()) >= probs.shape[-1]:
        raise ValueError(f"label {int(labels.max())} out of range for K={probs.shape[-1]}")
    p = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -torch.log(p.clamp_min(PROB_FLOOR))


def ce_class(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class."""
    return ce_class_per_sample(probs, labels).mean()


def soft_bce_domain(score, soft_label) -> torch.Tensor:
    """Soft-target binary cross-entropy, averaged over rows."""
    p = torch.as_tensor(score).clamp(PROB_FLOOR, 1 - PROB_FLOOR)
    y = torch.as_tensor(soft_label, dtype=p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def soft_ce(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against a target distribution over the last axis."""
    target = torch.as_tensor(target, dtype=probs.dtype).expand_as(probs)
    return -(target * torch.log(probs.clamp_min(PROB_FLOOR))).sum(-1).mean()


def _sq_dists(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    # explicit differences keep d(a, b) == d(b, a) bitwise
    return ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)


def median_bandwidths(X: torch.Tensor, Y: torch.Tensor, factors=(0.25, 0.5, 1.0, 2.0, 4.0)) -> list:
    """Median pairwise distance of the pooled sample, scaled by ``factors``.

    The median stays in the autograd graph, which makes the loss invariant to
    a global rescaling of the features; a detached median rewards shrinking
    all features towards one point.
    """
    Z = torch.cat([X, Y])
    sq = _sq_dists(Z, Z)
    off = sq[~torch.eye(len(Z), dtype=torch.bool)]
    med_sq = off.median() if off.numel() else Z.new_zeros(())
    if not float(med_sq.detach()) > 0:
        return [f * 1.0 for f in factors]
    med = med_sq.sqrt()
    return [med * f for f in factors]


def rbf_mmd(X: torch.Tensor, Y: torch.Tensor, cfg: MMDConfig | None = None) -> torch.Tensor:
    """Biased MMD^2 summed over Gaussian bandwidths, clamped at 0."""
    cfg = cfg or MMDConfig()
    if len(X) < 2 or len(Y) < 2:
        raise ValueError(f"rbf_mmd needs at least 2 rows per set, got {len(X)} and {len(Y)}")
    if not (torch.isfinite(X).all() and torch.isfinite(Y).all()):
        raise ValueError("rbf_mmd inputs must be finite")
    sigmas = cfg.bandwidths or median_bandwidths(X, Y, cfg.median_factors)
    dxx, dyy, dxy = _sq_dists(X, X), _sq_dists(Y, Y), _sq_dists(X, Y)
    total = X.new_zeros(())
    for s in sigmas:
        c = 1.0 / (2.0 * s * s)
        total = total + torch.exp(-c * dxx).mean() + torch.exp(-c * dyy).mean() - 2 * torch.exp(-c * dxy).mean()
    return total.clamp_min(0.0)


def mmd_over_targets(F_s: torch.Tensor, targets: Sequence[torch.Tensor], cfg: MMDConfig | None = None):
    return torch.stack([rbf_mmd(F_s, F_t, cfg) for F_t in targets]).mean()


def domain_confusion_loss(source_scores: torch.Tensor, target_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """Source rows labelled 1, each target labelled 0; targets averaged."""
    if len(target_scores) == 0:
        raise ValueError("domain_confusion_loss needs at least one target")
    src = soft_bce_domain(source_scores, 1.0)
    tgt = torch.stack([soft_bce_domain(s, 0.0) for s in target_scores]).mean()
    return src + tgt


def mixup_loss(mixed_scores: Sequence[torch.Tensor], soft_labels: Sequence[torch.Tensor],
               strategy: Strategy | str = Strategy.MENSA) -> torch.Tensor:
    """Soft-label cross-entropy of the domain head on mixed features.

    One entry per mixed batch (Sep has one per target and is averaged).
    Concat scores are slot distributions and use the (n+1)-way soft CE.
    """
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.NONE or len(mixed_scores) == 0:
        return torch.zeros(())
    if strategy is Strategy.CONCAT:
        terms = [soft_ce(s, y) for s, y in zip(mixed_scores, soft_labels)]
    else:
        terms = [soft_bce_domain(s, y) for s, y in zip(mixed_scores, soft_labels)]
    return torch.stack(terms).mean()


def adv_loss(mmd, dc, mixup, w: LossWeights):
    return w.lambda1 * mmd + w.lambda2 * dc + w.lambda3 * mixup


def total_loss(per_sample_cls: torch.Tensor, dc, adv, w: LossWeights, eta: float | None = None) -> torch.Tensor:
    """Smooth maximum over the batch of cls_b + eta*dc + zeta*adv.

    ``aggregator='sum'`` replaces the log-sum-exp by the batch mean.
    """
    eta = w.eta if eta is None else eta
    for name, value in (("cls", per_sample_cls), ("dc", dc), ("adv", adv)):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise ValueError(f"non-finite loss term '{name}'")
    v = per_sample_cls + eta * dc + w.zeta * adv
    if w.aggregator == "sum":
        return v.mean()
    return torch.logsumexp(w.gamma * v, dim=0) / w.gamma


def eta_schedule(cfg: ScheduleConfig) -> float:
    """Geometric ramp from s at epoch 0 to f at epoch N_e."""
    if cfg.N_e == 0:
        return cfg.s
    return cfg.s * math.exp(math.log(cfg.f / cfg.s) / cfg.N_e * cfg.e)
