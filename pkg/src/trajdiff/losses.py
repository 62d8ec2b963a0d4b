"""Training objectives: denoising reconstruction, output-norm regularizer,
and the softened listwise ranking likelihood.

The listwise term treats the k trajectory positions as ranks of a single
list drawn without replacement from the full item vocabulary. At rank r the
candidate pool drops the ground-truth items of earlier ranks; gamma softens
that exclusion by re-admitting the dropped items with weight gamma, so
gamma=0 recovers the sequential (Plackett-Luce style) likelihood and
gamma=1 flattens into a plain sum of per-position cross-entropies.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .exceptions import ConfigError, VocabularyError
from .validation import check_non_negative, check_unit_interval


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights of the composite objective.

    lam scales the reconstruction term, (1 - lam) the listwise term, and
    reg_weight the output-norm regularizer.
    """

    lam: float = 0.1
    gamma: float = 0.0
    reg_weight: float = 1.0

    def __post_init__(self):
        check_unit_interval(self.lam, "lam")
        check_unit_interval(self.gamma, "gamma")
        check_non_negative(self.reg_weight, "reg_weight")


def _masked_mean_of_squares(values: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return values.pow(2).mean()
    if mask.shape != values.shape[: mask.ndim]:
        raise ConfigError(
            f"mask shape {tuple(mask.shape)} does not prefix value shape "
            f"{tuple(values.shape)}"
        )
    keep = mask
    while keep.ndim < values.ndim:
        keep = keep.unsqueeze(-1)
    total = (values.pow(2) * keep).sum()
    count = keep.expand_as(values).sum()
    if count.item() == 0:
        raise ConfigError("mask removes every position; mean undefined")
    return total / count


def simple_loss(x0_hat: torch.Tensor, x0: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared reconstruction error of the clean latent.

    mask (broadcast over the feature axis) selects which positions count;
    padding slots are normally excluded.
    """
    if x0_hat.shape != x0.shape:
        raise ConfigError(
            f"x0_hat shape {tuple(x0_hat.shape)} != x0 shape {tuple(x0.shape)}"
        )
    return _masked_mean_of_squares(x0_hat - x0, mask)


def reg_loss(outputs: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared norm of the denoiser outputs (single-step Monte-Carlo
    stand-in for the summed-output penalty)."""
    return _masked_mean_of_squares(outputs, mask)


def _weighted_log_denominator(scores: torch.Tensor, excluded: torch.Tensor, gamma: float) -> torch.Tensor:
    """log of (sum over kept items + gamma * sum over excluded items) of
    exp(score), computed stably along the last axis."""
    m = scores.max(dim=-1, keepdim=True).values
    shifted = (scores - m).exp()
    weights = torch.where(excluded, shifted.new_tensor(gamma), shifted.new_tensor(1.0))
    return (weights * shifted).sum(dim=-1).log() + m.squeeze(-1)


def soft_listmle(scores: torch.Tensor, ranking, gamma: float = 0.0) -> torch.Tensor:
    """Negative log-likelihood of one observed ranking over a candidate set.

    scores is 1-D over the candidates; ranking lists candidate indices from
    best to worse. Items already placed leave the rank-r denominator except
    for a gamma-weighted echo of the full pool.
    """
    check_unit_interval(gamma, "gamma")
    if scores.ndim != 1:
        raise ConfigError(f"scores must be 1-D, got shape {tuple(scores.shape)}")
    idx = list(int(i) for i in ranking)
    n = scores.shape[0]
    if len(idx) == 0 or len(idx) > n:
        raise ConfigError(f"ranking length must lie in [1, {n}], got {len(idx)}")
    if len(set(idx)) != len(idx):
        raise ConfigError("ranking repeats a candidate index")
    if min(idx) < 0 or max(idx) >= n:
        raise ConfigError(f"ranking index outside [0, {n - 1}]")

    excluded = torch.zeros(len(idx), n, dtype=torch.bool, device=scores.device)
    for r in range(1, len(idx)):
        excluded[r] = excluded[r - 1]
        excluded[r, idx[r - 1]] = True
    tiled = scores.unsqueeze(0).expand(len(idx), n)
    log_den = _weighted_log_denominator(tiled, excluded, float(gamma))
    picked = scores[idx]
    return (log_den - picked).sum()


def listwise_preference_loss(
    scores: torch.Tensor,
    targets: torch.Tensor,
    gamma: float = 0.0,
    reduction: str = "mean",
) -> torch.Tensor:
    """Softened listwise likelihood of each trajectory's target items.

    scores: [B, k, M] with column i scoring item id i + 1; targets: [B, k]
    item ids. Position j supplies both the rank-j score vector and the
    rank-j exclusion, so earlier ground-truth items leave later denominators
    (set-wise: a repeated id is excluded at most once).
    """
    check_unit_interval(gamma, "gamma")
    if reduction not in ("mean", "none"):
        raise ConfigError(f"reduction must be 'mean' or 'none', got {reduction!r}")
    if scores.ndim != 3:
        raise ConfigError(f"scores must be [B, k, M], got shape {tuple(scores.shape)}")
    if targets.shape != scores.shape[:2]:
        raise ConfigError(
            f"targets shape {tuple(targets.shape)} != scores batch shape "
            f"{tuple(scores.shape[:2])}"
        )
    batch, k, n_items = scores.shape
    if targets.numel() and (int(targets.min()) < 1 or int(targets.max()) > n_items):
        raise VocabularyError(
            f"targets must hold item ids in [1, {n_items}]; observed range "
            f"[{int(targets.min())}, {int(targets.max())}]"
        )

    cols = (targets - 1).long()
    excluded = torch.zeros(batch, k, n_items, dtype=torch.bool, device=scores.device)
    rows = torch.arange(batch, device=scores.device)
    for j in range(1, k):
        excluded[:, j] = excluded[:, j - 1]
        excluded[rows, j, cols[:, j - 1]] = True

    log_den = _weighted_log_denominator(scores, excluded, float(gamma))
    picked = scores.gather(-1, cols.unsqueeze(-1)).squeeze(-1)
    per_example = (log_den - picked).sum(dim=-1)
    if reduction == "none":
        return per_example
    return per_example.mean()


def total_loss(
    simple: torch.Tensor,
    list_pref: torch.Tensor,
    reg: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """lam-weighted blend of reconstruction and listwise terms plus the
    regularizer."""
    return weights.lam * simple + (1.0 - weights.lam) * list_pref + weights.reg_weight * reg
