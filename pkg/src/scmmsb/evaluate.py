"""Fit scores and change-point extraction, plus label alignment against ground truth."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .model import PROB_FLOOR
from .network import DynamicNetwork
from .sgld import PosteriorSummary

DEFAULT_KAPPA = 3.0
# L1 change between simplex rows ranges over [0, 2]; below this a node is never flagged
DEFAULT_LOCAL_FLOOR = 0.5


@dataclass
class ChangeReport:
    global_distances: list[float]
    global_change_points: set[int]
    local_scores: np.ndarray          # [T-1, N]; row t-1 scores the step t-1 -> t
    flagged_nodes: dict[int, list[int]]
    threshold_used: float
    local_threshold: float = 0.0
    beta_scores: np.ndarray | None = None

    def to_json(self) -> str:
        doc = {
            "convention": "0-based; change point t is the first time index of the new regime; "
                          "local_scores row t-1 compares t-1 and t",
            "flagged_nodes": {str(t): list(v) for t, v in sorted(self.flagged_nodes.items())},
            "global_change_points": sorted(self.global_change_points),
            "global_distances": list(self.global_distances),
            "local_scores": np.asarray(self.local_scores).tolist(),
            "local_threshold": self.local_threshold,
            "threshold_used": self.threshold_used,
        }
        if self.beta_scores is not None:
            doc["beta_scores"] = np.asarray(self.beta_scores).tolist()
        return json.dumps(doc, sort_keys=True, indent=1)


@dataclass
class Alignment:
    """``permutation[k]`` is the learned community matched to true community ``k``."""

    permutation: tuple[int, ...]
    cost: float = field(default=0.0)

    def apply_pi(self, learned_pi: np.ndarray) -> np.ndarray:
        return np.asarray(learned_pi)[..., list(self.permutation)]

    def apply_B(self, learned_B: np.ndarray) -> np.ndarray:
        perm = list(self.permutation)
        return np.asarray(learned_B)[..., perm, :][..., :, perm]


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


def _predictive(net: DynamicNetwork, pi: np.ndarray, B: np.ndarray, rho: float) -> np.ndarray:
    iu, ju = net.pair_index
    prob = (1.0 - rho) * np.einsum("tdk,tkl,tdl->td", pi[:, iu], B, pi[:, ju])
    return np.clip(prob, PROB_FLOOR, 1.0 - PROB_FLOOR)


def dyad_log_predictive(net: DynamicNetwork, summary: PosteriorSummary) -> np.ndarray:
    """``[T, num_pairs]`` log predictive probability of every observed dyad."""
    if summary.mean_pi.shape[:2] != (net.num_steps, net.num_nodes):
        raise ValueError("posterior summary does not cover the network")
    prob = _predictive(net, summary.mean_pi, summary.mean_B, summary.final_params.rho)
    return np.where(net.labels == 1, np.log(prob), np.log1p(-prob))


def perplexity_from_logprobs(logp: np.ndarray) -> float:
    return float(np.exp(-np.mean(logp)))


def perplexity(net: DynamicNetwork, summary: PosteriorSummary, per_step: bool = False):
    """``exp(-mean log p(y_d))`` over all dyads of all snapshots (or per snapshot)."""
    logp = dyad_log_predictive(net, summary)
    if per_step:
        return np.exp(-logp.mean(axis=1))
    return perplexity_from_logprobs(logp)


def param_count(num_nodes: int, num_communities: int, num_steps: int) -> int:
    """Free parameters counted by :func:`aic`: membership dims, symmetric
    affinities and influence weights per step, plus ``eta`` and ``gamma``."""
    N, K, T = num_nodes, num_communities, num_steps
    return T * N * (K - 1) + T * K * (K + 1) // 2 + T * N + K + 1


def aic(loglik: float, param_count: int) -> float:
    if param_count < 1:
        raise ValueError("param_count must be >= 1")
    return 2.0 * param_count - 2.0 * loglik


def aic_per_step(net: DynamicNetwork, summary: PosteriorSummary) -> np.ndarray:
    loglik = dyad_log_predictive(net, summary).sum(axis=1)
    k = param_count(net.num_nodes, summary.mean_pi.shape[2], 1)
    return np.array([aic(ll, k) for ll in loglik])


# ---------------------------------------------------------------------------
# Change points
# ---------------------------------------------------------------------------


def affinity_distance_series(affinities: np.ndarray, probabilities: bool = False) -> np.ndarray:
    """Frobenius distance between consecutive affinity matrices on the
    probability scale. ``affinities`` is ``phi`` (logits) unless
    ``probabilities`` is set, in which case it is already ``sigmoid(phi)``."""
    a = np.asarray(affinities, dtype=float)
    if a.ndim != 3:
        raise ValueError("expected a [T, K, K] sequence")
    B = a if probabilities else expit(a)
    if len(B) < 2:
        return np.zeros(0)
    return np.sqrt(np.sum((B[1:] - B[:-1]) ** 2, axis=(1, 2)))


def detect_global_changes(series, kappa: float = DEFAULT_KAPPA) -> set[int]:
    """Flag step ``t-1 -> t`` (reported as ``t``) when ``series[t-1] > kappa * median``."""
    series = np.asarray(series, dtype=float)
    if series.size == 0:
        return set()
    threshold = kappa * float(np.median(series))
    return {int(i) + 1 for i in np.flatnonzero(series > threshold)}


def local_change_scores(mean_pi: np.ndarray) -> np.ndarray:
    """L1 distance between consecutive membership rows, ``[T-1, N]``."""
    pi = np.asarray(mean_pi, dtype=float)
    return np.abs(pi[1:] - pi[:-1]).sum(axis=-1)


def flag_local_changes(scores: np.ndarray, kappa: float = DEFAULT_KAPPA,
                       floor: float = DEFAULT_LOCAL_FLOOR) -> tuple[dict[int, list[int]], float]:
    """Nodes whose score exceeds ``max(kappa * median(scores), floor)``,
    keyed by the time they arrive at and ranked by score."""
    scores = np.asarray(scores)
    if scores.size == 0:
        return {}, float(floor)
    threshold = max(kappa * float(np.median(scores)), floor)
    flagged = {}
    for row in range(scores.shape[0]):
        hits = np.flatnonzero(scores[row] > threshold)
        if hits.size:
            order = hits[np.argsort(-scores[row][hits], kind="stable")]
            flagged[row + 1] = [int(p) for p in order]
    return flagged, threshold


def change_report(summary: PosteriorSummary, kappa: float = DEFAULT_KAPPA,
                  local_floor: float = DEFAULT_LOCAL_FLOOR) -> ChangeReport:
    dist = affinity_distance_series(summary.mean_B, probabilities=True)
    scores = local_change_scores(summary.mean_pi)
    flagged, local_thr = flag_local_changes(scores, kappa, local_floor)
    threshold = kappa * float(np.median(dist)) if dist.size else 0.0
    return ChangeReport(
        global_distances=[float(x) for x in dist],
        global_change_points=detect_global_changes(dist, kappa),
        local_scores=scores,
        flagged_nodes=flagged,
        threshold_used=threshold,
        local_threshold=local_thr,
        beta_scores=np.asarray(summary.mean_beta)[1:],
    )


# ---------------------------------------------------------------------------
# Label alignment
# ---------------------------------------------------------------------------


def _alignment_costs(learned_pi, true_pi) -> np.ndarray:
    learned = np.asarray(learned_pi, dtype=float)
    true = np.asarray(true_pi, dtype=float)
    if learned.shape != true.shape:
        raise ValueError(f"shape mismatch {learned.shape} vs {true.shape}")
    K = learned.shape[-1]
    L = learned.reshape(-1, K)
    R = true.reshape(-1, K)
    # cost[j, k]: learned column j standing in for true column k
    return np.abs(L[:, :, None] - R[:, None, :]).sum(axis=0)


def align_labels(learned_pi, true_pi) -> Alignment:
    """Community permutation minimizing the total L1 membership mismatch."""
    cost = _alignment_costs(learned_pi, true_pi)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=int)
    perm[cols] = rows
    return Alignment(tuple(int(j) for j in perm), float(cost[perm, np.arange(len(perm))].sum()))


def align_labels_exhaustive(learned_pi, true_pi) -> Alignment:
    """Brute force over all ``K!`` permutations; for checking and tiny ``K``."""
    cost = _alignment_costs(learned_pi, true_pi)
    K = cost.shape[0]
    best = min(itertools.permutations(range(K)), key=lambda pm: cost[list(pm), np.arange(K)].sum())
    return Alignment(tuple(best), float(cost[list(best), np.arange(K)].sum()))


def recovery_error(learned_pi, true_pi, alignment: Alignment) -> float:
    """Mean over ``(t, p)`` of the L1 distance between aligned and true rows."""
    aligned = alignment.apply_pi(learned_pi)
    return float(np.abs(aligned - np.asarray(true_pi)).sum(axis=-1).mean())
