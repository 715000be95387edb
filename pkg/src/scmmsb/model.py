"""Generative machinery for sparse co-evolving mixed-membership blockmodels.

Memberships evolve as a Gaussian state-space model whose mean blends a node's
previous (unnormalized) membership with the average of its neighbors; the
community affinity matrix follows a Gaussian random walk in logit space.
Links are drawn as in the static MMSB, down-weighted by a global sparsity
factor ``rho``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy.special import expit, logsumexp

from .network import DynamicNetwork

PROB_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)

InfluenceSnapshot = Literal["current", "previous"]


class DomainError(ValueError):
    """An argument lies outside the domain of a model function."""


# ---------------------------------------------------------------------------
# State containers
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    """Model parameters and priors.

    ``eta`` and ``gamma`` are standard deviations. ``laplace_scale`` is the
    scale of the truncated Laplace prior on ``beta`` (location fixed at 0);
    ``math.inf`` gives a flat prior. ``influence_snapshot`` selects which
    snapshot's neighbor sets feed the transition into time ``t``:
    ``"current"`` uses the neighbors at ``t``, ``"previous"`` those at ``t-1``.
    """

    beta: np.ndarray
    eta: np.ndarray
    gamma: float
    rho: float = 0.01
    laplace_scale: float = 0.1
    alpha0: np.ndarray | None = None
    a0_var: np.ndarray | None = None
    iota: float = 0.0
    sigma2: float = 4.0
    influence_snapshot: InfluenceSnapshot = "current"

    def __post_init__(self):
        self.beta = np.array(self.beta, dtype=float)
        self.eta = np.atleast_1d(np.array(self.eta, dtype=float))
        K = self.eta.shape[0]
        self.alpha0 = np.zeros(K) if self.alpha0 is None else np.array(self.alpha0, dtype=float)
        self.a0_var = np.ones(K) if self.a0_var is None else np.array(self.a0_var, dtype=float)
        self.gamma = float(self.gamma)
        self.validate(strict=False)

    @property
    def num_communities(self) -> int:
        return self.eta.shape[0]

    @classmethod
    def default(cls, num_nodes: int, num_steps: int, num_communities: int, **overrides) -> "ModelParams":
        """Inference defaults: beta = 0, eta = 0.1, gamma = 0.1, rho = 0.01."""
        kw = dict(
            beta=np.zeros((num_steps, num_nodes)),
            eta=np.full(num_communities, 0.1),
            gamma=0.1,
        )
        kw.update(overrides)
        return cls(**kw)

    def validate(self, strict: bool = True):
        """Check invariants; ``strict`` additionally requires eta, gamma > 0.

        Generation accepts zero noise (a deterministic trajectory); inference
        and density evaluation do not.
        """
        K = self.num_communities
        if self.beta.ndim != 2:
            raise DomainError("beta must be a [T, N] array")
        if np.any(~np.isfinite(self.beta)) or np.any(self.beta < 0) or np.any(self.beta > 1):
            raise DomainError("beta entries must lie in [0, 1]")
        if self.alpha0.shape != (K,) or self.a0_var.shape != (K,):
            raise DomainError("alpha0 and a0_var must have length K")
        if np.any(self.a0_var <= 0) or self.sigma2 <= 0:
            raise DomainError("prior variances must be positive")
        if not 0.0 <= self.rho < 1.0:
            raise DomainError("rho must lie in [0, 1)")
        if not self.laplace_scale > 0:
            raise DomainError("laplace_scale must be positive")
        if self.influence_snapshot not in ("current", "previous"):
            raise DomainError(f"unknown influence_snapshot {self.influence_snapshot!r}")
        lower_ok = (lambda x: x > 0) if strict else (lambda x: x >= 0)
        if not np.all(lower_ok(self.eta)) or not lower_ok(self.gamma):
            raise DomainError("eta and gamma must be positive" if strict else "eta and gamma must be non-negative")

    def copy(self) -> "ModelParams":
        return replace(self, beta=self.beta.copy(), eta=self.eta.copy(),
                       alpha0=self.alpha0.copy(), a0_var=self.a0_var.copy())

    def to_dict(self) -> dict:
        return {
            "alpha0": self.alpha0.tolist(),
            "a0_var": self.a0_var.tolist(),
            "beta": self.beta.tolist(),
            "eta": self.eta.tolist(),
            "gamma": self.gamma,
            "influence_snapshot": self.influence_snapshot,
            "iota": self.iota,
            "laplace_scale": _encode_float(self.laplace_scale),
            "rho": self.rho,
            "sigma2": self.sigma2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        d = dict(d)
        d["laplace_scale"] = _decode_float(d["laplace_scale"])
        return cls(**d)


def _encode_float(x: float):
    return "inf" if math.isinf(x) else x


def _decode_float(x) -> float:
    return math.inf if x == "inf" else float(x)


@dataclass
class LatentState:
    """Unnormalized memberships ``mu[t, p, k]``, affinities ``phi[t, k, l]``
    and optional interaction indicators.

    Indicators are stored per unordered pair in the network's
    ``pair_index`` order: ``z_out[t, i]`` is the community drawn from the
    lower-indexed endpoint ``p``, ``z_in[t, i]`` the one drawn from ``q``.
    """

    mu: np.ndarray
    phi: np.ndarray
    z_out: np.ndarray | None = None
    z_in: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=float)
        self.phi = np.array(self.phi, dtype=float)
        if self.mu.ndim != 3 or self.phi.ndim != 3:
            raise DomainError("mu must be [T, N, K] and phi [T, K, K]")
        T, _, K = self.mu.shape
        if self.phi.shape != (T, K, K):
            raise DomainError(f"phi shape {self.phi.shape} does not match mu shape {self.mu.shape}")
        if not np.allclose(self.phi, self.phi.transpose(0, 2, 1), rtol=0, atol=0):
            raise DomainError("phi[t] must be symmetric")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.phi))):
            raise DomainError("latent state must be finite")
        if (self.z_out is None) != (self.z_in is None):
            raise DomainError("z_out and z_in must be given together")
        if self.z_out is not None:
            self.z_out = np.array(self.z_out, dtype=np.int64)
            self.z_in = np.array(self.z_in, dtype=np.int64)

    @property
    def num_steps(self) -> int:
        return self.mu.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.mu.shape[1]

    @property
    def num_communities(self) -> int:
        return self.mu.shape[2]

    @property
    def pi(self) -> np.ndarray:
        return membership_simplex(self.mu)

    @property
    def B(self) -> np.ndarray:
        return expit(self.phi)

    def set_phi(self, t: int, k: int, l: int, value: float):
        self.phi[t, k, l] = value
        self.phi[t, l, k] = value

    def copy(self) -> "LatentState":
        return LatentState(
            self.mu.copy(), self.phi.copy(),
            None if self.z_out is None else self.z_out.copy(),
            None if self.z_in is None else self.z_in.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "phi": self.phi.tolist(),
            "z_in": None if self.z_in is None else self.z_in.tolist(),
            "z_out": None if self.z_out is None else self.z_out.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentState":
        return cls(d["mu"], d["phi"], d.get("z_out"), d.get("z_in"))


@dataclass
class GroundTruth:
    true_pi: np.ndarray
    true_B: np.ndarray
    global_change_times: set[int] = field(default_factory=set)
    locally_changed_nodes: dict[int, set[int]] = field(default_factory=dict)
    variant: int | None = None

    def to_json(self) -> str:
        doc = {
            "convention": "all indices are 0-based; a change point is the first time index of the new regime",
            "global_change_times": sorted(self.global_change_times),
            "locally_changed_nodes": {str(t): sorted(v) for t, v in sorted(self.locally_changed_nodes.items())},
            "num_communities": int(self.true_pi.shape[2]),
            "num_nodes": int(self.true_pi.shape[1]),
            "num_steps": int(self.true_pi.shape[0]),
            "true_B": self.true_B.tolist(),
            "true_pi": self.true_pi.tolist(),
            "variant": self.variant,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        doc = json.loads(text)
        return cls(
            true_pi=np.array(doc["true_pi"], dtype=float),
            true_B=np.array(doc["true_B"], dtype=float),
            global_change_times=set(doc["global_change_times"]),
            locally_changed_nodes={int(t): set(v) for t, v in doc["locally_changed_nodes"].items()},
            variant=doc.get("variant"),
        )


# ---------------------------------------------------------------------------
# Deterministic building blocks
# ---------------------------------------------------------------------------


def membership_simplex(mu: np.ndarray) -> np.ndarray:
    """Softmax over the last axis: ``pi_k = exp(mu_k - logsumexp(mu))``."""
    mu = np.asarray(mu, dtype=float)
    if not np.all(np.isfinite(mu)):
        raise DomainError("membership vector must be finite")
    shifted = mu - mu.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def neighbor_snapshot(t: int, mode: InfluenceSnapshot) -> int:
    """Snapshot whose neighbor sets define the influence feeding time ``t``."""
    return t if mode == "current" else t - 1


def neighbor_influence(net: DynamicNetwork, mu_prev: np.ndarray, p: int, t: int,
                       mode: InfluenceSnapshot = "current") -> np.ndarray:
    """Mean of ``mu_prev[q]`` over the neighbors of ``p``; ``mu_prev[p]`` if isolated."""
    if t < 1:
        raise DomainError("influence is defined for t >= 1")
    nbrs = net.neighbors(p, neighbor_snapshot(t, mode))
    if not nbrs:
        return np.array(mu_prev[p], dtype=float)
    return np.asarray(mu_prev)[sorted(nbrs)].mean(axis=0)


def neighbor_means(net: DynamicNetwork, mu: np.ndarray, s: int) -> np.ndarray:
    """Row ``p`` is the mean of ``mu`` over the neighbors of ``p`` in snapshot
    ``s``, or ``mu[p]`` itself when ``p`` is isolated."""
    isolated = net.degrees[s] == 0
    return net.mean_operator(s) @ mu + isolated[:, None] * mu


def transition_mean(mu_prev_row, c_row, beta: float) -> np.ndarray:
    """``(1 - beta) * mu_prev + beta * c``."""
    if not 0.0 <= beta <= 1.0:
        raise DomainError(f"beta={beta} outside [0, 1]")
    mu_prev_row = np.asarray(mu_prev_row, dtype=float)
    return (1.0 - beta) * mu_prev_row + beta * np.asarray(c_row, dtype=float)


def all_transition_means(net: DynamicNetwork, mu: np.ndarray, beta: np.ndarray,
                         mode: InfluenceSnapshot = "current") -> tuple[np.ndarray, np.ndarray]:
    """Neighbor means ``c[t]`` (built from ``mu[t-1]``) and transition means
    ``f[t]`` for every ``t >= 1``. Row 0 of both outputs is NaN."""
    T = mu.shape[0]
    c = np.full_like(mu, np.nan)
    f = np.full_like(mu, np.nan)
    for t in range(1, T):
        c[t] = neighbor_means(net, mu[t - 1], neighbor_snapshot(t, mode))
        f[t] = (1.0 - beta[t])[:, None] * mu[t - 1] + beta[t][:, None] * c[t]
    return c, f


def link_probability(pi_p, pi_q, B, rho: float) -> float:
    """Marginal link probability ``(1 - rho) * pi_p^T B pi_q``."""
    return float((1.0 - rho) * np.asarray(pi_p) @ np.asarray(B) @ np.asarray(pi_q))


def link_probability_matrix(pi: np.ndarray, B: np.ndarray, rho: float) -> np.ndarray:
    """All-pairs version of :func:`link_probability` for one snapshot."""
    return (1.0 - rho) * pi @ B @ pi.T


def truncated_laplace_logpdf(beta, scale: float) -> np.ndarray:
    """Log density on [0, 1] of a Laplace(0, scale) truncated to [0, 1].

    An infinite scale is the uniform density (log density 0).
    """
    beta = np.asarray(beta, dtype=float)
    if math.isinf(scale):
        return np.zeros_like(beta)
    # normalizer: integral_0^1 exp(-x/b)/b dx = 1 - exp(-1/b)
    return -beta / scale - math.log(scale) - math.log(-math.expm1(-1.0 / scale))


def _gauss_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_categorical(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of a non-negative ``[D, K]`` weight array."""
    cdf = np.cumsum(weights, axis=1)
    total = cdf[:, -1]
    if np.any(~(total > 0)) or np.any(~np.isfinite(total)):
        raise FloatingPointError("categorical weights must have a positive finite sum")
    u = rng.random(len(weights)) * total
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, weights.shape[1] - 1)


def sample_snapshot(pi: np.ndarray, phi: np.ndarray, rho: float, net_pairs, rng: np.random.Generator):
    """Draw indicators and links for every unordered pair of one snapshot."""
    iu, ju = net_pairs
    z_out = sample_categorical(pi[iu], rng)
    z_in = sample_categorical(pi[ju], rng)
    prob = (1.0 - rho) * expit(phi[z_out, z_in])
    y = rng.random(len(iu)) < prob
    return z_out, z_in, y


def sample_network(state: LatentState, params: ModelParams, rng: np.random.Generator):
    """Draw a network from a fixed latent trajectory.

    Returns ``(net, (z_out, z_in))`` where each indicator array is
    ``[T, num_pairs]`` in ``pair_index`` order.
    """
    T, N, K = state.mu.shape
    pairs = np.triu_indices(N, 1)
    pi = state.pi
    z_out = np.empty((T, len(pairs[0])), dtype=np.int64)
    z_in = np.empty_like(z_out)
    snaps = []
    for t in range(T):
        z_out[t], z_in[t], y = sample_snapshot(pi[t], state.phi[t], params.rho, pairs, rng)
        snaps.append(frozenset(zip(pairs[0][y].tolist(), pairs[1][y].tolist())))
    return DynamicNetwork(N, tuple(snaps)), (z_out, z_in)


def sample_trajectory(params: ModelParams, num_nodes: int, num_steps: int,
                      rng: np.random.Generator) -> tuple[LatentState, DynamicNetwork]:
    """Forward-simulate the latent trajectories together with the networks.

    Simulation is sequential in ``t``: snapshot ``t`` is drawn right after
    ``mu[t]`` and ``phi[t]``, and the influence feeding ``mu[t]`` uses the
    neighbor sets of the already-drawn snapshot ``t-1`` (the only causal
    choice). The returned state carries the drawn indicators.
    """
    params.validate(strict=False)
    K = params.num_communities
    T, N = num_steps, num_nodes
    if params.beta.shape != (T, N):
        raise DomainError(f"beta has shape {params.beta.shape}, expected {(T, N)}")
    pairs = np.triu_indices(N, 1)
    iu_k, ju_k = np.triu_indices(K)

    mu = np.empty((T, N, K))
    phi = np.empty((T, K, K))
    z_out = np.empty((T, len(pairs[0])), dtype=np.int64)
    z_in = np.empty_like(z_out)
    snaps: list[frozenset] = []

    mu[0] = params.alpha0 + np.sqrt(params.a0_var) * rng.standard_normal((N, K))
    upper = params.iota + math.sqrt(params.sigma2) * rng.standard_normal(len(iu_k))
    phi[0][iu_k, ju_k] = upper
    phi[0][ju_k, iu_k] = upper
    for t in range(T):
        if t > 0:
            prev_net = DynamicNetwork(N, (snaps[-1],))
            c = neighbor_means(prev_net, mu[t - 1], 0)
            b = params.beta[t][:, None]
            mean = (1.0 - b) * mu[t - 1] + b * c
            mu[t] = mean + params.eta * rng.standard_normal((N, K))
            step = params.gamma * rng.standard_normal(len(iu_k))
            phi[t] = phi[t - 1]
            phi[t][iu_k, ju_k] += step
            phi[t][ju_k, iu_k] = phi[t][iu_k, ju_k]
        pi_t = membership_simplex(mu[t])
        z_out[t], z_in[t], y = sample_snapshot(pi_t, phi[t], params.rho, pairs, rng)
        snaps.append(frozenset(zip(pairs[0][y].tolist(), pairs[1][y].tolist())))
    return LatentState(mu, phi, z_out, z_in), DynamicNetwork(N, tuple(snaps))


# ---------------------------------------------------------------------------
# Synthetic scenarios
# ---------------------------------------------------------------------------

SYNTH_NODES = 30
SYNTH_COMMUNITIES = 3
LOCAL_NODES = (13, 14, 15, 16, 17)
LOCAL_TIME = 5


def _affinity_pattern(major_cells, major: float, minor: float) -> np.ndarray:
    B = np.full((SYNTH_COMMUNITIES, SYNTH_COMMUNITIES), minor)
    for k, l in major_cells:
        B[k, l] = B[l, k] = major
    return B


def _global_regimes(T: int, major: float, minor: float) -> np.ndarray:
    first = _affinity_pattern([(0, 0), (0, 1), (1, 1)], major, minor)
    second = _affinity_pattern([(1, 1), (1, 2), (2, 2)], major, minor)
    third = _affinity_pattern([(0, 0), (1, 1), (2, 2)], major, minor)
    B = np.empty((T, SYNTH_COMMUNITIES, SYNTH_COMMUNITIES))
    B[:4] = first
    B[4:7] = second
    B[7:] = third
    return B


def generate_synthetic(variant: int, rng: np.random.Generator, major: float = 0.8,
                       minor: float = 0.05, rho: float = 0.0,
                       flip_to: int | None = None) -> tuple[DynamicNetwork, GroundTruth]:
    """Synthetic scenarios with 30 nodes in three blocks of ten.

    1. Global changes only: the affinity pattern switches at t = 4 and t = 7.
    2. Local changes only: nodes 13-17 switch community at t = 5 under a fixed
       diagonal affinity.
    3. Both, over 12 steps (last regime extended).

    ``flip_to`` is the community the local-change nodes move to. The default
    is 2 for variant 2 and 0 for variant 3, where communities 1 and 2 are
    indistinguishable during the second global regime.
    """
    if variant not in (1, 2, 3):
        raise DomainError(f"unknown synthetic variant {variant}")
    T = 12 if variant == 3 else 9
    N, K = SYNTH_NODES, SYNTH_COMMUNITIES
    blocks = np.repeat(np.arange(K), N // K)
    labels = np.tile(blocks, (T, 1))
    local: dict[int, set[int]] = {}
    if variant in (2, 3):
        target = flip_to if flip_to is not None else (2 if variant == 2 else 0)
        labels[LOCAL_TIME:, list(LOCAL_NODES)] = target
        local = {LOCAL_TIME: set(LOCAL_NODES)}
    if variant == 2:
        B = np.tile(_affinity_pattern([(0, 0), (1, 1), (2, 2)], major, minor), (T, 1, 1))
        global_times: set[int] = set()
    else:
        B = _global_regimes(T, major, minor)
        global_times = {4, 7}
    true_pi = np.eye(K)[labels]

    iu, ju = np.triu_indices(N, 1)
    snaps = []
    for t in range(T):
        prob = (1.0 - rho) * B[t][labels[t][iu], labels[t][ju]]
        y = rng.random(len(iu)) < prob
        snaps.append(frozenset(zip(iu[y].tolist(), ju[y].tolist())))
    net = DynamicNetwork(N, tuple(snaps))
    truth = GroundTruth(true_pi, B, global_times, local, variant)
    return net, truth


# ---------------------------------------------------------------------------
# Joint density
# ---------------------------------------------------------------------------


def log_joint(net: DynamicNetwork, state: LatentState, params: ModelParams, *,
              sparse: bool = True, components: bool = False):
    """Log joint density of the links and every latent variable, ``beta`` included.

    With ``components=True`` returns a dict with keys ``mu_prior``,
    ``phi_prior``, ``indicators``, ``links`` and ``beta_prior`` whose values
    sum to the total. ``sparse=False`` drops the beta prior (flat on [0, 1]).
    The beta prior covers ``t >= 1`` only; ``beta[0]`` never enters the model.
    """
    params.validate(strict=True)
    if state.z_out is None:
        raise DomainError("log_joint needs indicators in the state")
    T, N, K = state.mu.shape
    if net.num_steps != T or net.num_nodes != N or params.num_communities != K:
        raise DomainError("network dimensions do not match the state or params")

    mu, phi = state.mu, state.phi
    eta2 = params.eta ** 2
    mu_prior = float(np.sum(_gauss_logpdf(mu[0], params.alpha0, params.a0_var)))
    if T > 1:
        _, f = all_transition_means(net, mu, params.beta, params.influence_snapshot)
        mu_prior += float(np.sum(_gauss_logpdf(mu[1:], f[1:], eta2)))

    iu_k, ju_k = np.triu_indices(K)
    phi_prior = float(np.sum(_gauss_logpdf(phi[0][iu_k, ju_k], params.iota, params.sigma2)))
    if T > 1:
        phi_prior += float(np.sum(_gauss_logpdf(phi[1:, iu_k, ju_k], phi[:-1, iu_k, ju_k], params.gamma ** 2)))

    iu, ju = net.pair_index
    log_pi = mu - logsumexp(mu, axis=2, keepdims=True)
    t_idx = np.arange(T)[:, None]
    indicators = float(np.sum(log_pi[t_idx, iu[None, :], state.z_out])
                       + np.sum(log_pi[t_idx, ju[None, :], state.z_in]))

    prob = (1.0 - params.rho) * expit(phi[t_idx, state.z_out, state.z_in])
    prob = np.clip(prob, PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = net.labels
    links = float(np.sum(np.where(y == 1, np.log(prob), np.log1p(-prob))))

    beta_prior = 0.0
    if sparse and T > 1:
        beta_prior = float(np.sum(truncated_laplace_logpdf(params.beta[1:], params.laplace_scale)))

    parts = dict(mu_prior=mu_prior, phi_prior=phi_prior, indicators=indicators,
                 links=links, beta_prior=beta_prior)
    if components:
        return parts
    return sum(parts.values())


def marginal_loglik(net: DynamicNetwork, pi: np.ndarray, B: np.ndarray, rho: float,
                    per_step: bool = False):
    """Link log-likelihood with indicators summed out, under point estimates
    ``pi[t]`` and ``B[t]``. Probabilities are floored at ``PROB_FLOOR``."""
    iu, ju = net.pair_index
    out = np.empty(net.num_steps)
    for t in range(net.num_steps):
        prob = (1.0 - rho) * np.einsum("dk,kl,dl->d", pi[t][iu], B[t], pi[t][ju])
        prob = np.clip(prob, PROB_FLOOR, 1.0 - PROB_FLOOR)
        y = net.labels[t]
        out[t] = np.sum(np.where(y == 1, np.log(prob), np.log1p(-prob)))
    return out if per_step else float(out.sum())

