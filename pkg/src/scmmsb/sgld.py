"""Stochastic-gradient Langevin inference.

Each iteration runs, in order: per-snapshot minibatch selection and one Gibbs
sweep over the interaction indicators of the selected dyads; sufficient
statistic accumulation; a Langevin step on every ``mu[t, p]``; a Langevin step
on every ``phi[t, k, l]`` with ``k <= l``; and, every ``param_update_every``
iterations, closed-form updates of ``beta`` and of the noise scales.

Randomness is drawn from streams keyed by ``(seed, iteration, slot)``, so a
run is reproducible bit for bit regardless of the worker count, and a
checkpoint only needs the iteration counter to resume the random streams.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Literal, NamedTuple

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .model import (
    PROB_FLOOR,
    DomainError,
    LatentState,
    ModelParams,
    all_transition_means,
    membership_simplex,
    neighbor_influence,
    neighbor_means,
    neighbor_snapshot,
    sample_categorical,
    transition_mean,
)
from .network import DyadIndex, DynamicNetwork

log = logging.getLogger(__name__)

# floor of the bare maximum-likelihood variance estimates
NOISE_FLOOR = 1e-6
# the sampler's floor: eta^2 and gamma^2 below the step size make the explicit
# Langevin step unstable
VARIANCE_FLOOR = 1e-2


class NumericalError(FloatingPointError):
    """Raised when the sampler produces a non-finite quantity."""


@dataclass
class SgldConfig:
    """Sampler settings.

    The step size at iteration ``i`` is ``step_a * (step_b + i) ** -step_c``.
    ``minibatch_fraction`` is the share of non-link dyads sampled per
    snapshot; ``link_fraction`` the share of linked dyads (1.0 keeps every
    link). ``sparse_mode=False`` drops the Laplace prior on ``beta``.
    """

    K: int = 3
    step_a: float = 0.1
    step_b: float = 100.0
    step_c: float = 0.55
    minibatch_fraction: float = 0.2
    link_fraction: float = 1.0
    num_iterations: int = 3000
    burn_in: int = 1500
    seed: int = 0
    sparse_mode: bool = True
    param_update_every: int = 10
    learn_params: bool = True
    neighbor_backcoupling: bool = True
    indicator_likelihood: Literal["bernoulli", "exp"] = "bernoulli"
    langevin_noise: bool = True
    init_method: Literal["spectral", "random"] = "spectral"
    init_scale: float = 1.0
    init_jitter: float = 0.1
    variance_floor: float = VARIANCE_FLOOR
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.step_a > 0 or self.step_b < 0 or self.step_c < 0:
            raise ValueError("step schedule needs step_a > 0, step_b >= 0, step_c >= 0")
        for name in ("minibatch_fraction", "link_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.num_iterations < 1 or not 0 <= self.burn_in < self.num_iterations:
            raise ValueError("need num_iterations >= 1 and 0 <= burn_in < num_iterations")
        if self.param_update_every < 1:
            raise ValueError("param_update_every must be >= 1")
        if self.indicator_likelihood not in ("bernoulli", "exp"):
            raise ValueError(f"unknown indicator_likelihood {self.indicator_likelihood!r}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.init_method not in ("spectral", "random"):
            raise ValueError(f"unknown init_method {self.init_method!r}")
        if self.init_scale < 0 or self.init_jitter < 0:
            raise ValueError("initialization scales must be non-negative")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be positive")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class SufficientStats:
    """Weighted indicator counts for every snapshot.

    ``c_pk[t, p, k]`` counts indicators drawn from ``pi[t, p]`` that landed on
    ``k`` and ``m_p[t, p]`` their total. ``c1[t]`` and ``c01[t]`` count
    linked and all sampled dyads by unordered indicator pair, stored in the
    upper triangle. Non-link (and, when subsampled, link) counts carry the
    minibatch inflation weights; ``scale`` records the non-link weight.
    """

    c_pk: np.ndarray
    m_p: np.ndarray
    c1: np.ndarray
    c01: np.ndarray
    scale: np.ndarray

    @classmethod
    def zeros(cls, T: int, N: int, K: int) -> "SufficientStats":
        return cls(np.zeros((T, N, K)), np.zeros((T, N)), np.zeros((T, K, K)),
                   np.zeros((T, K, K)), np.ones(T))


class Minibatch(NamedTuple):
    t: int
    pairs: np.ndarray     # indices into net.pair_index
    weights: np.ndarray   # inverse inclusion probabilities
    scale: float          # non-link weight


@dataclass
class PosteriorSummary:
    mean_pi: np.ndarray
    mean_B: np.ndarray
    mean_beta: np.ndarray
    loglik_trace: list[float]
    final_params: ModelParams
    num_samples: int
    sparse_mode: bool = True

    def to_dict(self) -> dict:
        return {
            "final_params": self.final_params.to_dict(),
            "loglik_trace": list(self.loglik_trace),
            "mean_B": self.mean_B.tolist(),
            "mean_beta": self.mean_beta.tolist(),
            "mean_pi": self.mean_pi.tolist(),
            "num_communities": int(self.mean_pi.shape[2]),
            "num_nodes": int(self.mean_pi.shape[1]),
            "num_samples": self.num_samples,
            "num_steps": int(self.mean_pi.shape[0]),
            "sparse_mode": self.sparse_mode,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PosteriorSummary":
        d = json.loads(text)
        return cls(
            mean_pi=np.array(d["mean_pi"], dtype=float),
            mean_B=np.array(d["mean_B"], dtype=float),
            mean_beta=np.array(d["mean_beta"], dtype=float),
            loglik_trace=list(d["loglik_trace"]),
            final_params=ModelParams.from_dict(d["final_params"]),
            num_samples=int(d["num_samples"]),
            sparse_mode=bool(d.get("sparse_mode", True)),
        )


# ---------------------------------------------------------------------------
# Step schedule and randomness
# ---------------------------------------------------------------------------


def step_size(i: int, cfg: SgldConfig) -> float:
    if i < 0:
        raise ValueError("iteration index must be >= 0")
    if cfg.step_b + i == 0 and cfg.step_c > 0:
        raise ValueError("step size is infinite at step_b + i = 0")
    return cfg.step_a * (cfg.step_b + i) ** (-cfg.step_c)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


# ---------------------------------------------------------------------------
# Minibatches, indicators, statistics
# ---------------------------------------------------------------------------


def _subsample(idx: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    n = len(idx)
    if fraction >= 1.0 or n == 0:
        return idx, 1.0
    m = math.ceil(fraction * n)
    chosen = np.sort(rng.choice(n, size=m, replace=False))
    return idx[chosen], n / m


def select_minibatch(net: DynamicNetwork, t: int, cfg: SgldConfig, rng: np.random.Generator) -> Minibatch:
    """Stratified dyad sample for snapshot ``t``.

    Links are kept at rate ``link_fraction`` and non-links at rate
    ``minibatch_fraction``, each without replacement; every sampled dyad is
    weighted by the inverse of its stratum's sampling rate.
    """
    y = net.labels[t]
    links = np.flatnonzero(y == 1)
    nonlinks = np.flatnonzero(y == 0)
    links, link_w = _subsample(links, cfg.link_fraction, rng)
    nonlinks, scale = _subsample(nonlinks, cfg.minibatch_fraction, rng)
    pairs = np.concatenate([links, nonlinks])
    weights = np.concatenate([np.full(len(links), link_w), np.full(len(nonlinks), scale)])
    order = np.argsort(pairs, kind="stable")
    return Minibatch(t, pairs[order], weights[order], scale)


def full_batch(net: DynamicNetwork, t: int) -> Minibatch:
    pairs = np.arange(net.num_pairs)
    return Minibatch(t, pairs, np.ones(net.num_pairs), 1.0)


def _link_factor(phi_t: np.ndarray, y: np.ndarray, rho: float, variant: str) -> np.ndarray:
    """Per-dyad ``[D, K, K]`` factor multiplying ``pi`` in the indicator conditional."""
    B = expit(phi_t)
    on = B if variant == "bernoulli" else np.exp(phi_t - phi_t.max())
    off = np.maximum(1.0 - (1.0 - rho) * B, PROB_FLOOR)
    on = np.maximum(on, PROB_FLOOR)
    return np.where(y[:, None, None] == 1, on[None], off[None])


def gibbs_indicators(pi_t: np.ndarray, phi_t: np.ndarray, p: np.ndarray, q: np.ndarray,
                     y: np.ndarray, z_in: np.ndarray, rho: float, rng: np.random.Generator,
                     variant: str = "bernoulli") -> tuple[np.ndarray, np.ndarray]:
    """One Gibbs sweep over a batch of dyads: resample ``z_out`` given the
    current ``z_in``, then ``z_in`` given the new ``z_out``. O(K) per draw."""
    if len(p) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    F = _link_factor(phi_t, y, rho, variant)
    rows = np.arange(len(p))
    w_out = pi_t[p] * F[rows, :, z_in]
    z_out = sample_categorical(w_out, rng)
    w_in = pi_t[q] * F[rows, z_out, :]
    z_in = sample_categorical(w_in, rng)
    return z_out, z_in


def sample_indicators(dyad: DyadIndex, y: int, state: LatentState, rho: float,
                      rng: np.random.Generator, variant: str = "bernoulli") -> tuple[int, int]:
    """Gibbs-resample the indicator pair of one dyad.

    The opposite-direction indicator is read from ``state``; if the state
    has no indicators yet, it is drawn from the prior first. The state is
    not modified.
    """
    t, p, q = dyad
    if not 0 <= p < q < state.num_nodes:
        raise DomainError(f"dyad ({p}, {q}) must satisfy 0 <= p < q < N")
    pi_t = state.pi[t]
    if state.z_in is not None:
        N = state.num_nodes
        idx = p * N - p * (p + 1) // 2 + (q - p - 1)
        current_in = int(state.z_in[t, idx])
    else:
        current_in = int(sample_categorical(pi_t[[q]], rng)[0])
    zo, zi = gibbs_indicators(pi_t, state.phi[t], np.array([p]), np.array([q]), np.array([y]),
                              np.array([current_in]), rho, rng, variant)
    return int(zo[0]), int(zi[0])


def accumulate_stats(z_out: np.ndarray, z_in: np.ndarray, net: DynamicNetwork,
                     batch: Minibatch, K: int, stats: SufficientStats | None = None) -> SufficientStats:
    """Add the weighted counts of one snapshot's minibatch to ``stats``.

    ``z_out``/``z_in`` are the indicators of the minibatch dyads, aligned with
    ``batch.pairs``.
    """
    N, T = net.num_nodes, net.num_steps
    if stats is None:
        stats = SufficientStats.zeros(T, N, K)
    t = batch.t
    iu, ju = net.pair_index
    p, q = iu[batch.pairs], ju[batch.pairs]
    w = batch.weights
    y = net.labels[t][batch.pairs]
    stats.c_pk[t] += (np.bincount(p * K + z_out, weights=w, minlength=N * K)
                      + np.bincount(q * K + z_in, weights=w, minlength=N * K)).reshape(N, K)
    stats.m_p[t] = stats.c_pk[t].sum(axis=1)
    lo, hi = np.minimum(z_out, z_in), np.maximum(z_out, z_in)
    cell = lo * K + hi
    stats.c01[t] += np.bincount(cell, weights=w, minlength=K * K).reshape(K, K)
    stats.c1[t] += np.bincount(cell, weights=w * y, minlength=K * K).reshape(K, K)
    stats.scale[t] = batch.scale
    return stats


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def mu_gradient(p: int, t: int, state: LatentState, params: ModelParams, stats: SufficientStats,
                net: DynamicNetwork, backcoupling: bool = True) -> np.ndarray:
    """Gradient of the log conditional density of ``mu[t, p]``.

    Terms: the transition into ``t`` (or the initial prior), the node's own
    transition into ``t+1``, the transitions of every node whose neighbor
    mean at ``t`` includes ``p`` (``backcoupling``), and the indicator
    log-likelihood ``C[t, p] - M[t, p] * softmax(mu[t, p])``.
    """
    mu, beta = state.mu, params.beta
    T = state.num_steps
    mode = params.influence_snapshot
    eta2 = params.eta ** 2
    if t == 0:
        g = -(mu[0, p] - params.alpha0) / params.a0_var
    else:
        f = transition_mean(mu[t - 1, p], neighbor_influence(net, mu[t - 1], p, t, mode), beta[t, p])
        g = -(mu[t, p] - f) / eta2
    if t < T - 1:
        s = neighbor_snapshot(t + 1, mode)
        nbrs = sorted(net.neighbors(p, s))
        f_next = transition_mean(mu[t, p], neighbor_influence(net, mu[t], p, t + 1, mode), beta[t + 1, p])
        own_weight = 1.0 - beta[t + 1, p] if nbrs else 1.0
        g = g + own_weight * (mu[t + 1, p] - f_next) / eta2
        if backcoupling:
            for q in nbrs:
                n_q = len(net.neighbors(q, s))
                f_q = transition_mean(mu[t, q], neighbor_influence(net, mu[t], q, t + 1, mode), beta[t + 1, q])
                g = g + (beta[t + 1, q] / n_q) * (mu[t + 1, q] - f_q) / eta2
    pi = membership_simplex(mu[t, p])
    return g + stats.c_pk[t, p] - stats.m_p[t, p] * pi


def mu_gradient_all(state: LatentState, params: ModelParams, stats: SufficientStats,
                    net: DynamicNetwork, backcoupling: bool = True) -> np.ndarray:
    """:func:`mu_gradient` for every ``(t, p)`` at once, against a frozen state."""
    mu, beta = state.mu, params.beta
    T = mu.shape[0]
    mode = params.influence_snapshot
    eta2 = params.eta ** 2
    g = np.empty_like(mu)
    g[0] = -(mu[0] - params.alpha0) / params.a0_var
    if T > 1:
        _, f = all_transition_means(net, mu, beta, mode)
        resid = (mu[1:] - f[1:]) / eta2          # resid[t-1] belongs to the transition into t
        g[1:] = -resid
        for t in range(T - 1):
            s = neighbor_snapshot(t + 1, mode)
            isolated = net.degrees[s] == 0
            own = np.where(isolated, 1.0, 1.0 - beta[t + 1])
            g[t] += own[:, None] * resid[t]
            if backcoupling:
                W = net.mean_operator(s)
                g[t] += W.T @ (beta[t + 1][:, None] * resid[t])
    return g + stats.c_pk - stats.m_p[..., None] * membership_simplex(mu)


def phi_likelihood_gradient(phi: np.ndarray, c1: np.ndarray, c01: np.ndarray, rho: float) -> np.ndarray:
    """Derivative of the Bernoulli link log-likelihood with respect to ``phi``.

    With ``s = sigmoid(phi)`` and link probability ``(1 - rho) s``:
    ``(1 - s) * (C1 - (1 - rho) s C01) / (1 - (1 - rho) s)``.
    """
    s = expit(phi)
    return (1.0 - s) * (c1 - (1.0 - rho) * s * c01) / (1.0 - (1.0 - rho) * s)


def phi_gradient(k: int, l: int, t: int, state: LatentState, params: ModelParams,
                 stats: SufficientStats) -> float:
    """Gradient of the log conditional density of ``phi[t, k, l]`` (``k <= l``)."""
    if k > l:
        raise DomainError("phi_gradient expects k <= l")
    phi = state.phi
    T = state.num_steps
    v = params.gamma ** 2
    x = phi[t, k, l]
    if t == 0:
        g = -(x - params.iota) / params.sigma2
    else:
        g = -(x - phi[t - 1, k, l]) / v
    if t < T - 1:
        g += (phi[t + 1, k, l] - x) / v
    g += phi_likelihood_gradient(x, stats.c1[t, k, l], stats.c01[t, k, l], params.rho)
    return float(g)


def phi_gradient_all(state: LatentState, params: ModelParams, stats: SufficientStats) -> np.ndarray:
    """Upper-triangle gradients for every ``t``, returned as symmetric ``[T, K, K]``."""
    phi = state.phi
    T, K, _ = phi.shape
    iu, ju = np.triu_indices(K)
    x = phi[:, iu, ju]
    v = params.gamma ** 2
    g = np.empty_like(x)
    g[0] = -(x[0] - params.iota) / params.sigma2
    g[1:] = -(x[1:] - x[:-1]) / v
    g[:-1] += (x[1:] - x[:-1]) / v
    g += phi_likelihood_gradient(x, stats.c1[:, iu, ju], stats.c01[:, iu, ju], params.rho)
    out = np.zeros_like(phi)
    out[:, iu, ju] = g
    out[:, ju, iu] = g
    return out


# ---------------------------------------------------------------------------
# Langevin steps
# ---------------------------------------------------------------------------


def langevin_step(x, grad, eps: float, rng: np.random.Generator | None):
    """``x + eps/2 * grad + N(0, eps)``; ``rng=None`` disables the noise."""
    out = x + 0.5 * eps * grad
    if rng is not None:
        out = out + math.sqrt(eps) * rng.standard_normal(np.shape(x))
    return out


def sgld_update_mu(p: int, t: int, state: LatentState, params: ModelParams, stats: SufficientStats,
                   eps: float, rng: np.random.Generator | None, net: DynamicNetwork,
                   backcoupling: bool = True) -> np.ndarray:
    """Langevin step on ``mu[t, p]``, written into ``state`` and returned."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    g = mu_gradient(p, t, state, params, stats, net, backcoupling)
    state.mu[t, p] = langevin_step(state.mu[t, p], g, eps, rng)
    return state.mu[t, p]


def sgld_update_phi(k: int, l: int, t: int, state: LatentState, params: ModelParams,
                    stats: SufficientStats, eps: float, rng: np.random.Generator | None) -> float:
    """Langevin step on ``phi[t, k, l]``, mirrored to ``(l, k)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    k, l = min(k, l), max(k, l)
    g = phi_gradient(k, l, t, state, params, stats)
    value = float(langevin_step(state.phi[t, k, l], g, eps, rng))
    state.set_phi(t, k, l, value)
    return value


# ---------------------------------------------------------------------------
# Closed-form parameter updates
# ---------------------------------------------------------------------------


def beta_formula(A: float, B: float, laplace_scale: float, sparse: bool = True) -> float:
    """Sub-gradient solution for one influence weight, clamped to [0, 1].

    ``(A - 1/b) / B`` when ``A > 1/b`` and 0 otherwise; the non-sparse mode
    takes ``1/b = 0``. ``B = 0`` (no neighbor signal) gives 0.
    """
    inv_b = 1.0 / laplace_scale if sparse else 0.0
    if not A > inv_b or B <= 0:
        return 0.0
    return min(1.0, (A - inv_b) / B)


def _beta_moments(mu_t, mu_prev, c_prev, eta2):
    d = mu_prev - c_prev
    A = -np.sum((mu_t - mu_prev) * d / eta2, axis=-1)
    B = np.sum(d * d / eta2, axis=-1)
    return A, B


def update_beta(p: int, t: int, state: LatentState, params: ModelParams, net: DynamicNetwork,
                sparse: bool = True) -> float:
    if t < 1:
        raise DomainError("beta is only updated for t >= 1")
    mu = state.mu
    c = neighbor_influence(net, mu[t - 1], p, t, params.influence_snapshot)
    A, B = _beta_moments(mu[t, p], mu[t - 1, p], c, params.eta ** 2)
    return beta_formula(float(A), float(B), params.laplace_scale, sparse)


def update_beta_all(state: LatentState, params: ModelParams, net: DynamicNetwork,
                    sparse: bool = True) -> np.ndarray:
    """All ``beta[t, p]`` for ``t >= 1`` against a frozen state; row 0 is zero."""
    mu = state.mu
    T, N, _ = mu.shape
    out = np.zeros((T, N))
    inv_b = 1.0 / params.laplace_scale if sparse else 0.0
    for t in range(1, T):
        c = neighbor_means(net, mu[t - 1], neighbor_snapshot(t, params.influence_snapshot))
        A, B = _beta_moments(mu[t], mu[t - 1], c, params.eta ** 2)
        ok = (A > inv_b) & (B > 0)
        out[t] = np.where(ok, np.minimum(1.0, (A - inv_b) / np.where(B > 0, B, 1.0)), 0.0)
    return out


def update_noise_params(state: LatentState, params: ModelParams, net: DynamicNetwork,
                        floor: float = NOISE_FLOOR) -> tuple[np.ndarray, float]:
    """Maximum-likelihood transition std-devs ``(eta, gamma)``, variances floored."""
    mu, phi = state.mu, state.phi
    T, _, K = mu.shape
    if T < 2:
        raise DomainError("noise parameters need at least two time steps")
    _, f = all_transition_means(net, mu, params.beta, params.influence_snapshot)
    eta2 = np.mean((mu[1:] - f[1:]) ** 2, axis=(0, 1))
    iu, ju = np.triu_indices(K)
    gamma2 = float(np.mean((phi[1:, iu, ju] - phi[:-1, iu, ju]) ** 2))
    return np.sqrt(np.maximum(eta2, floor)), math.sqrt(max(gamma2, floor))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def minibatch_loglik(pi_t: np.ndarray, B_t: np.ndarray, rho: float, p: np.ndarray, q: np.ndarray,
                     y: np.ndarray, w: np.ndarray) -> float:
    """Weighted marginal link log-likelihood of a minibatch."""
    prob = (1.0 - rho) * np.einsum("dk,kl,dl->d", pi_t[p], B_t, pi_t[q])
    prob = np.clip(prob, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(np.sum(w * np.where(y == 1, np.log(prob), np.log1p(-prob))))


# log-likelihood ratio a snapshot must show before overriding the aggregate label
REFINE_MARGIN = math.log(1e4)


def _spectral_cluster(adj: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    # regularized normalized-adjacency embedding, unit rows, then k-means
    N = len(adj)
    adj = adj + max(adj.sum() / N, 1e-3) / N
    d = 1.0 / np.sqrt(adj.sum(axis=1))
    _, vecs = np.linalg.eigh(d[:, None] * adj * d[None, :])
    X = vecs[:, -K:]
    X = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    _, labels = kmeans2(X, K, minit="++", seed=rng)
    return labels


def spectral_labels(net: DynamicNetwork, K: int, rng: np.random.Generator) -> np.ndarray:
    """Hard community guess for every node from the time-aggregated graph."""
    agg = sum(net.adjacency(t) for t in range(net.num_steps)).toarray()
    return _spectral_cluster(agg, K, rng)


def refine_labels(net: DynamicNetwork, labels: np.ndarray, K: int, rng: np.random.Generator,
                  margin: float = REFINE_MARGIN) -> np.ndarray:
    """Per-snapshot relabeling of a static guess, ``[T, N]``.

    Each snapshot is clustered on its own and matched to ``labels``. A node
    takes its snapshot label only when, under a blockmodel fit to that
    snapshot, the label beats its static one by more than ``margin`` nats.
    Members of communities that the snapshot merges into one cluster keep
    their static label.
    """
    N = len(labels)
    rows = np.arange(N)
    out = np.tile(labels, (net.num_steps, 1))
    for t in range(net.num_steps):
        A = net.adjacency(t)
        local = _spectral_cluster(A.toarray(), K, rng)
        overlap = np.zeros((K, K))
        np.add.at(overlap, (local, labels), 1)
        r, c = linear_sum_assignment(-overlap)
        local = c[np.argsort(r)][local]
        onehot = np.eye(K)[local]
        size = onehot.sum(axis=0)
        nb = np.asarray(A @ onehot)                              # [N, K] links into each community
        pairs = np.outer(size, size) - np.diag(size)
        B = (onehot.T @ nb + 0.5) / (pairs + 1.0)
        others = size[None, :] - onehot
        score = nb @ np.log(B).T + (others - nb) @ np.log1p(-B).T
        gain = score[rows, local] - score[rows, labels]
        # static community s is merged when another one has the same majority cluster
        counts = np.zeros((K, K))
        np.add.at(counts, (labels, local), 1)
        held = counts.max(axis=1) > counts.sum(axis=1) / 2
        home = np.where(held, counts.argmax(axis=1), -1 - np.arange(K))
        merged = np.array([np.sum(home == home[k]) > 1 for k in range(K)])
        ok = (gain > margin) & ~merged[labels]
        out[t] = np.where(ok, local, labels)
    return out


class SgldSampler:
    """Stateful SGLD run over one network; see the module docstring."""

    def __init__(self, net: DynamicNetwork, cfg: SgldConfig, params: ModelParams | None = None,
                 init: LatentState | None = None):
        cfg.validate()
        if cfg.step_b == 0 and cfg.step_c > 0:
            raise ValueError("the sampler starts at i = 0 and needs step_b > 0 when step_c > 0")
        self.net = net
        self.cfg = cfg
        T, N, K = net.num_steps, net.num_nodes, cfg.K
        self.params = (params.copy() if params is not None else ModelParams.default(N, T, K))
        self.params.validate(strict=True)
        if self.params.beta.shape != (T, N) or self.params.num_communities != K:
            raise DomainError("model parameters do not match the network / K")
        if init is not None:
            if init.mu.shape != (T, N, K):
                raise DomainError(f"initial state has shape {init.mu.shape}, expected {(T, N, K)}")
            self.state = init.copy()
        else:
            # spectral guess refined per snapshot, or one random membership per node
            rng = _stream(cfg.seed)
            if cfg.init_method == "spectral" and 1 < K < N:
                guess = refine_labels(net, spectral_labels(net, K, rng), K, rng)
                base = 2.0 * cfg.init_scale * np.eye(K)[guess]
            else:
                base = np.broadcast_to(cfg.init_scale * rng.standard_normal((N, K)), (T, N, K))
            mu = base + cfg.init_jitter * rng.standard_normal((T, N, K))
            phi = np.zeros((T, K, K))
            iu, ju = np.triu_indices(K)
            upper = cfg.init_jitter * rng.standard_normal((T, len(iu)))
            phi[:, iu, ju] = upper
            phi[:, ju, iu] = upper
            self.state = LatentState(mu, phi)
        if self.state.z_out is None:
            rng = _stream(cfg.seed, 2**31)
            iu, ju = net.pair_index
            pi = self.state.pi
            self.state.z_out = np.stack([sample_categorical(pi[t][iu], rng) for t in range(T)])
            self.state.z_in = np.stack([sample_categorical(pi[t][ju], rng) for t in range(T)])
        self.iteration = 0
        self.loglik_trace: list[float] = []
        self.dyads_touched: list[int] = []
        self._sum_pi = np.zeros((T, N, K))
        self._sum_B = np.zeros((T, K, K))
        self._sum_beta = np.zeros((T, N))
        self._num_samples = 0
        self._pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    # -- one iteration ---------------------------------------------------

    def _indicator_phase(self, t: int, pi: np.ndarray, i: int):
        cfg, net, state = self.cfg, self.net, self.state
        rng = _stream(cfg.seed, i + 1, t)
        batch = select_minibatch(net, t, cfg, rng)
        iu, ju = net.pair_index
        p, q = iu[batch.pairs], ju[batch.pairs]
        y = net.labels[t][batch.pairs]
        zo, zi = gibbs_indicators(pi[t], state.phi[t], p, q, y, state.z_in[t, batch.pairs],
                                  self.params.rho, rng, cfg.indicator_likelihood)
        state.z_out[t, batch.pairs] = zo
        state.z_in[t, batch.pairs] = zi
        ll = minibatch_loglik(pi[t], expit(state.phi[t]), self.params.rho, p, q, y, batch.weights)
        return batch, zo, zi, ll

    def step(self):
        cfg, net, state, params = self.cfg, self.net, self.state, self.params
        i = self.iteration
        T, N, K = state.mu.shape
        pi = state.pi
        ts = range(T)
        if self._pool is not None:
            results = list(self._pool.map(lambda t: self._indicator_phase(t, pi, i), ts))
        else:
            results = [self._indicator_phase(t, pi, i) for t in ts]

        stats = SufficientStats.zeros(T, N, K)
        loglik = 0.0
        touched = 0
        for batch, zo, zi, ll in results:
            accumulate_stats(zo, zi, net, batch, K, stats)
            loglik += ll
            touched += len(batch.pairs)
        if not math.isfinite(loglik):
            raise NumericalError(f"iteration {i}: non-finite link log-likelihood")
        self.loglik_trace.append(loglik)
        self.dyads_touched.append(touched)

        eps = step_size(i, cfg)
        noise_rng = _stream(cfg.seed, i + 1, T) if cfg.langevin_noise else None
        g_mu = mu_gradient_all(state, params, stats, net, cfg.neighbor_backcoupling)
        new_mu = langevin_step(state.mu, g_mu, eps, noise_rng)
        if not np.all(np.isfinite(new_mu)):
            bad = tuple(int(x) for x in np.argwhere(~np.isfinite(new_mu))[0])
            raise NumericalError(f"iteration {i}: non-finite mu at (t, p, k) = {bad}; "
                                 f"step size {eps:.3g}, eta = {params.eta}")
        state.mu = new_mu

        g_phi = phi_gradient_all(state, params, stats)
        iu, ju = np.triu_indices(K)
        upper = langevin_step(state.phi[:, iu, ju], g_phi[:, iu, ju], eps, noise_rng)
        if not np.all(np.isfinite(upper)):
            raise NumericalError(f"iteration {i}: non-finite phi; step size {eps:.3g}, gamma = {params.gamma}")
        state.phi[:, iu, ju] = upper
        state.phi[:, ju, iu] = upper

        if cfg.learn_params and T > 1 and (i + 1) % cfg.param_update_every == 0:
            params.beta = update_beta_all(state, params, net, cfg.sparse_mode)
            params.eta, params.gamma = update_noise_params(state, params, net, cfg.variance_floor)

        if i >= cfg.burn_in:
            self._sum_pi += state.pi
            self._sum_B += expit(state.phi)
            self._sum_beta += params.beta
            self._num_samples += 1
        self.iteration += 1

    def run(self, until: int | None = None) -> "SgldSampler":
        """Iterate up to ``until`` (default ``cfg.num_iterations``)."""
        stop = self.cfg.num_iterations if until is None else min(until, self.cfg.num_iterations)
        while self.iteration < stop:
            self.step()
            if self.iteration % 500 == 0:
                log.info("iteration %d: loglik %.3f", self.iteration, self.loglik_trace[-1])
        return self

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -- results ---------------------------------------------------------

    def summary(self) -> PosteriorSummary:
        """Posterior means over post-burn-in iterations (the current sample if none yet)."""
        if self._num_samples:
            n = self._num_samples
            mean_pi, mean_B, mean_beta = self._sum_pi / n, self._sum_B / n, self._sum_beta / n
        else:
            mean_pi, mean_B, mean_beta = self.state.pi, expit(self.state.phi), self.params.beta.copy()
        return PosteriorSummary(mean_pi, mean_B, mean_beta, list(self.loglik_trace),
                                self.params.copy(), self._num_samples, self.cfg.sparse_mode)

    def checkpoint(self) -> dict:
        return {
            "accumulators": {
                "num_samples": self._num_samples,
                "sum_B": self._sum_B.tolist(),
                "sum_beta": self._sum_beta.tolist(),
                "sum_pi": self._sum_pi.tolist(),
            },
            "config": asdict(self.cfg),
            "dyads_touched": list(self.dyads_touched),
            "iteration": self.iteration,
            "loglik_trace": list(self.loglik_trace),
            "params": self.params.to_dict(),
            "rng": {"scheme": "SeedSequence(seed, spawn_key=(iteration + 1, slot))",
                    "seed": self.cfg.seed, "next_iteration": self.iteration},
            "state": self.state.to_dict(),
        }

    @classmethod
    def from_checkpoint(cls, net: DynamicNetwork, doc: dict, **cfg_overrides) -> "SgldSampler":
        cfg_doc = dict(doc["config"])
        cfg_doc.update(cfg_overrides)
        cfg = SgldConfig(**cfg_doc)
        state = LatentState.from_dict(doc["state"])
        params = ModelParams.from_dict(doc["params"])
        sampler = cls(net, cfg, params, state)
        acc = doc["accumulators"]
        sampler._sum_pi = np.array(acc["sum_pi"], dtype=float)
        sampler._sum_B = np.array(acc["sum_B"], dtype=float)
        sampler._sum_beta = np.array(acc["sum_beta"], dtype=float)
        sampler._num_samples = int(acc["num_samples"])
        sampler.iteration = int(doc["iteration"])
        sampler.loglik_trace = [float(x) for x in doc["loglik_trace"]]
        sampler.dyads_touched = [int(x) for x in doc.get("dyads_touched", [])]
        return sampler


def run_inference(net: DynamicNetwork, cfg: SgldConfig, init: LatentState | None = None,
                  params: ModelParams | None = None) -> PosteriorSummary:
    sampler = SgldSampler(net, cfg, params, init)
    try:
        sampler.run()
    finally:
        sampler.close()
    return sampler.summary()
