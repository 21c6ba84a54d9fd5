"""Training losses and evaluation metrics for censored survival bags.

The survival term is the negative Breslow partial log-likelihood of a
proportional-hazards model; it only sees risk *differences*, so it is
invariant to adding a constant to every risk. The reconstruction term is
a soft-target cross-entropy between the decoded adjacency and the input
adjacency, averaged over all n^2 entries. Both are differentiable nodes;
the blend is convex in the two and degenerates to the pure survival or
pure reconstruction graph at the endpoints so endpoint gradients match
the single-term gradients bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffNode
from .errors import SurvivalDataError

RECON_CLAMP = 1e-7


@dataclass
class SurvivalLabel:
    """Observed follow-up time and whether the event was observed."""

    time: float
    event: bool

    def __post_init__(self):
        self.time = float(self.time)
        self.event = bool(self.event)
        if not self.time > 0.0:
            raise ValueError(f"survival time must be positive, got {self.time}")


@dataclass
class LossBlendConfig:
    beta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


def cox_loss(risks: DiffNode | Sequence[DiffNode], labels: Sequence[SurvivalLabel]) -> DiffNode:
    """Negative mean Breslow partial log-likelihood.

    For each observed event i the contribution is
    r_i - log(sum over j with t_j >= t_i of exp(r_j)); the loss is minus
    the mean over events. Risk sets are built with >= so tied event times
    share one risk set. A max-shift keeps the exponentials bounded.
    """
    if not isinstance(risks, DiffNode):
        risks = ad.stack_scalars(list(risks))
    n = risks.shape[0]
    if risks.shape != (n, 1) or len(labels) != n:
        raise ValueError(f"risks {risks.shape} incompatible with {len(labels)} labels")
    times = np.array([lab.time for lab in labels])
    events = np.flatnonzero([lab.event for lab in labels])
    if events.size == 0:
        raise SurvivalDataError("batch has no observed events; partial likelihood undefined")

    at_risk = (times[None, :] >= times[events][:, None]).astype(np.float64)
    pick_events = np.zeros((events.size, n))
    pick_events[np.arange(events.size), events] = 1.0

    shift = float(risks.value.max())
    shifted = ad.sub(risks, ad.constant(np.full((n, 1), shift)))
    log_denom = ad.log(ad.matmul(ad.constant(at_risk), ad.exp(shifted)))
    numer = ad.matmul(ad.constant(pick_events), shifted)
    return ad.scale(ad.sum_all(ad.sub(numer, log_denom)), -1.0 / events.size)


def car_loss(a_hat: DiffNode, a: np.ndarray) -> DiffNode:
    """Soft-target cross-entropy between reconstruction and adjacency.

    Targets are the adjacency weights in [0, 1] used as-is; predictions
    are clamped to [1e-7, 1 - 1e-7] before the logarithms. Nonnegative,
    and approaches zero only for perfectly reproduced hard targets.
    """
    target = np.ascontiguousarray(a, dtype=np.float64)
    if a_hat.shape != target.shape:
        raise ValueError(f"shape mismatch: reconstruction {a_hat.shape} vs adjacency {target.shape}")
    if np.any(target < 0.0) or np.any(target > 1.0):
        raise ValueError("adjacency targets must lie in [0, 1]")
    if np.any(a_hat.value < 0.0) or np.any(a_hat.value > 1.0):
        raise ValueError("reconstruction entries must lie in [0, 1] before clamping")
    n2 = target.size
    p = ad.clip(a_hat, RECON_CLAMP, 1.0 - RECON_CLAMP)
    one_minus_p = ad.sub(ad.constant(np.ones_like(target)), p)
    ll = ad.add(
        ad.hadamard(ad.constant(target), ad.log(p)),
        ad.hadamard(ad.constant(1.0 - target), ad.log(one_minus_p)),
    )
    return ad.scale(ad.sum_all(ll), -1.0 / n2)


def total_loss(mil_loss: DiffNode, recon_loss: DiffNode | None, cfg: LossBlendConfig | float) -> DiffNode:
    """Convex blend (1 - beta) * survival + beta * reconstruction.

    At beta = 0 the survival node itself is returned (and symmetrically at
    beta = 1), so endpoint gradients are exactly the single-term gradients.
    """
    beta = cfg.beta if isinstance(cfg, LossBlendConfig) else float(cfg)
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if beta == 0.0:
        return mil_loss
    if recon_loss is None:
        raise ValueError("beta > 0 requires a reconstruction loss")
    if beta == 1.0:
        return recon_loss
    return ad.add(ad.scale(mil_loss, 1.0 - beta), ad.scale(recon_loss, beta))


def concordance_index(risks, labels: Sequence[SurvivalLabel]) -> float:
    """Censored concordance: P(higher risk fails first) over comparable pairs.

    Pair (i, j) is comparable when t_i < t_j and subject i had an event.
    Concordant means r_i > r_j; tied risks count half.
    """
    r = np.asarray(risks, dtype=np.float64).reshape(-1)
    if r.size != len(labels):
        raise ValueError("risks and labels length mismatch")
    times = np.array([lab.time for lab in labels])
    events = np.array([lab.event for lab in labels], dtype=bool)

    comparable = (times[:, None] < times[None, :]) & events[:, None]
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise SurvivalDataError("no comparable survival pairs")
    concordant = int((comparable & (r[:, None] > r[None, :])).sum())
    tied = int((comparable & (r[:, None] == r[None, :])).sum())
    return (concordant + 0.5 * tied) / n_comp


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def edge_auc(a_hat: np.ndarray, a: np.ndarray) -> float:
    """Probability a random true edge outscores a random non-edge.

    The target adjacency is binarized at > 0; only off-diagonal entries
    participate. Ties count half (Mann-Whitney with tie correction).
    """
    a_hat = np.asarray(a_hat, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a_hat.shape != a.shape or a_hat.ndim != 2:
        raise ValueError("matrices must share a square shape")
    mask = ~np.eye(a.shape[0], dtype=bool)
    scores = a_hat[mask]
    truth = a[mask] > 0.0
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate adjacency: needs both edges and non-edges")
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[truth].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
