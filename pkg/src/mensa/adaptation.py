"""Gradient-reversal domain head, object head and latent mixup strategies."""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn


class Strategy(str, enum.Enum):
    NONE = "None"
    SEP = "Sep"
    MENSA = "MEnsA"
    FACTOR = "Factor"
    CONCAT = "Concat"
    INTER = "Inter"

    @classmethod
    def parse(cls, name) -> "Strategy":
        if isinstance(name, cls):
            return name
        for s in cls:
            if s.value.lower() == str(name).lower():
                return s
        raise ValueError(f"unknown mixup strategy {name!r}; choose from {[s.value for s in cls]}")

    def __str__(self):
        return self.value


@dataclass
class MixupConfig:
    strategy: Strategy = Strategy.MENSA
    alpha: float = 2.0
    n_targets: int = 1

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy)
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.n_targets < 1:
            raise ValueError("n_targets must be >= 1")
        if self.strategy is Strategy.INTER and self.n_targets < 2:
            raise ValueError("Inter mixup needs at least two target domains")


@dataclass
class MixedBatch:
    features: torch.Tensor
    # scalar soft label, or the (n+1)-slot distribution for Concat
    soft_labels: torch.Tensor
    lam: float | list


def _check_shapes(arrays):
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"feature arrays must share one shape, got {sorted(shapes)}")


def sample_lambda(cfg: MixupConfig, rng: np.random.Generator) -> float:
    """One Beta(alpha, alpha) draw."""
    return float(rng.beta(cfg.alpha, cfg.alpha))


def mix_pair(F_s: torch.Tensor, F_t: torch.Tensor, lam: float):
    """Source/target interpolation and its soft domain label (source = 1)."""
    _check_shapes([F_s, F_t])
    return lam * F_s + (1.0 - lam) * F_t, lam


def mensa_mix(pair_mixes: Sequence[torch.Tensor], lam: float | None = None) -> MixedBatch:
    """Ensemble average of the per-target pair mixes."""
    if len(pair_mixes) == 0:
        raise ValueError("mensa_mix needs at least one pair mix")
    _check_shapes(pair_mixes)
    feats = torch.stack(list(pair_mixes)).mean(dim=0)
    label = torch.tensor(float("nan") if lam is None else lam, dtype=feats.dtype)
    return MixedBatch(feats, label, lam)


def factor_mix(F_s: torch.Tensor, targets: Sequence[torch.Tensor], lam: float) -> MixedBatch:
    if len(targets) == 0:
        raise ValueError("factor_mix needs at least one target")
    _check_shapes([F_s, *targets])
    n = len(targets)
    feats = lam * F_s
    for F_t in targets:
        feats = feats + ((1.0 - lam) / n) * F_t
    return MixedBatch(feats, torch.tensor(lam, dtype=F_s.dtype), lam)


def concat_labels(lam: float, n: int) -> np.ndarray:
    """Index-weighted slot labels [lam, 2(1-lam)/n, 4(1-lam)/n, ..., 2n(1-lam)/n],
    L1-normalized into a distribution over the n+1 slots."""
    raw = np.array([lam] + [2 * i * (1.0 - lam) / n for i in range(1, n + 1)], dtype=np.float64)
    return raw / raw.sum()


def concat_mix(F_s: torch.Tensor, targets: Sequence[torch.Tensor], lam: float) -> MixedBatch:
    if len(targets) == 0:
        raise ValueError("concat_mix needs at least one target")
    _check_shapes([F_s, *targets])
    n = len(targets)
    parts = [lam * F_s] + [((1.0 - lam) / n) * F_t for F_t in targets]
    labels = torch.as_tensor(concat_labels(lam, n), dtype=F_s.dtype)
    return MixedBatch(torch.cat(parts, dim=-1), labels, lam)


def inter_mix(targets: Sequence[torch.Tensor], lam) -> MixedBatch:
    """Target/target interpolation; all targets carry label 0.

    With more than two targets the pairwise mixture is averaged over all
    unordered pairs (i < j); ``lam`` is then either one value or one value
    per pair.
    """
    n = len(targets)
    if n < 2:
        raise ValueError(f"inter_mix needs at least two targets, got {n}")
    _check_shapes(targets)
    pairs = list(itertools.combinations(range(n), 2))
    lams = [float(lam)] * len(pairs) if np.isscalar(lam) else [float(v) for v in lam]
    if len(lams) != len(pairs):
        raise ValueError(f"expected {len(pairs)} lambda values, got {len(lams)}")
    mixes = [l * targets[i] + (1.0 - l) * targets[j] for l, (i, j) in zip(lams, pairs)]
    feats = mixes[0] if len(mixes) == 1 else torch.stack(mixes).mean(dim=0)
    return MixedBatch(feats, torch.tensor(0.0, dtype=targets[0].dtype), lams[0] if n == 2 else lams)


def build_mixed(strategy: Strategy, F_s, targets, lam, inter_lams=None) -> list[MixedBatch]:
    """Mixed batches fed to the domain head for one step (Sep gives one per target)."""
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.NONE:
        return []
    if strategy is Strategy.SEP:
        out = []
        for F_t in targets:
            feats, label = mix_pair(F_s, F_t, lam)
            out.append(MixedBatch(feats, torch.tensor(label, dtype=F_s.dtype), lam))
        return out
    if strategy is Strategy.MENSA:
        return [mensa_mix([mix_pair(F_s, F_t, lam)[0] for F_t in targets], lam)]
    if strategy is Strategy.FACTOR:
        return [factor_mix(F_s, targets, lam)]
    if strategy is Strategy.CONCAT:
        return [concat_mix(F_s, targets, lam)]
    return [inter_mix(targets, lam if inter_lams is None else inter_lams)]


# ---------------------------------------------------------------------------
# gradient reversal and heads


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, mu):
        ctx.mu = mu
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.mu * grad, None


def grl_apply(x: torch.Tensor, mu: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by -mu."""
    if mu < 0:
        raise ValueError(f"reversal coefficient must be >= 0, got {mu}")
    return _GradReverse.apply(x, mu)


class Heads(nn.Module):
    """Object classifier C and domain classifier D, one linear layer each.

    Concat mode adds a separate (n+1)d -> (n+1) domain layer for the slot
    distribution.
    """

    def __init__(self, embed_dim: int, num_classes: int, n_targets: int = 1, concat: bool = False):
        super().__init__()
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        self.object_classifier = nn.Linear(embed_dim, num_classes)
        self.domain_classifier = nn.Linear(embed_dim, 1)
        self.concat_classifier = nn.Linear((n_targets + 1) * embed_dim, n_targets + 1) if concat else None

    def object_logits(self, F: torch.Tensor) -> torch.Tensor:
        if F.shape[-1] != self.embed_dim:
            raise ValueError(f"object head expects width {self.embed_dim}, got {F.shape[-1]}")
        return self.object_classifier(F)

    def domain_logits(self, F: torch.Tensor, mu: float = 1.0) -> torch.Tensor:
        x = grl_apply(F, mu)
        if self.concat_classifier is not None and F.shape[-1] == self.concat_classifier.in_features:
            return self.concat_classifier(x)
        if F.shape[-1] != self.embed_dim:
            raise ValueError(f"domain head expects width {self.embed_dim}, got {F.shape[-1]}")
        return self.domain_classifier(x).squeeze(-1)


def classify_object(F: torch.Tensor, heads: Heads) -> torch.Tensor:
    """Class probabilities per row."""
    return torch.softmax(heads.object_logits(F), dim=-1)


def classify_domain(F: torch.Tensor, heads: Heads, mu: float = 1.0) -> torch.Tensor:
    """Source score in (0, 1) per row; Concat-width input gives slot probabilities."""
    logits = heads.domain_logits(F, mu)
    if logits.dim() == F.dim():
        return torch.softmax(logits, dim=-1)
    return torch.sigmoid(logits)
