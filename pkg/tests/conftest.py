import numpy as np
import pytest

from scmmsb.model import LatentState, ModelParams
from scmmsb.network import DynamicNetwork

# acceptance outcome lines, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_instance(rng, N, K, T, beta_max=0.9, with_indicators=True):
    """Random network with a matching latent state and parameters."""
    adj = rng.random((T, N, N)) < 0.5
    net = DynamicNetwork.from_adjacency(np.triu(adj, 1).astype(int))
    mu = rng.normal(0, 1, (T, N, K))
    upper = rng.normal(0, 1, (T, K, K))
    phi = np.triu(upper) + np.triu(upper, 1).transpose(0, 2, 1)
    params = ModelParams(
        beta=rng.uniform(0, beta_max, (T, N)),
        eta=rng.uniform(0.5, 1.5, K),
        gamma=rng.uniform(0.5, 1.5),
        rho=rng.uniform(0, 0.3),
        alpha0=rng.normal(0, 0.5, K),
        a0_var=rng.uniform(0.5, 2, K),
        iota=rng.normal(),
        sigma2=rng.uniform(1, 3),
    )
    z_out = z_in = None
    if with_indicators:
        z_out = rng.integers(0, K, (T, net.num_pairs))
        z_in = rng.integers(0, K, (T, net.num_pairs))
    return net, LatentState(mu, phi, z_out, z_in), params


def full_stats(net, state, K):
    """Unweighted sufficient statistics of the indicators stored in ``state``."""
    from scmmsb.sgld import SufficientStats, accumulate_stats, full_batch

    stats = SufficientStats.zeros(net.num_steps, net.num_nodes, K)
    for t in range(net.num_steps):
        accumulate_stats(state.z_out[t], state.z_in[t], net, full_batch(net, t), K, stats)
    return stats


def fd_mu_gradient(net, state, params, t, p, h=1e-5):
    """Central differences of the log joint in ``mu[t, p]``."""
    from scmmsb.model import log_joint

    K = state.num_communities
    out = np.empty(K)
    for k in range(K):
        hi, lo = state.copy(), state.copy()
        hi.mu[t, p, k] += h
        lo.mu[t, p, k] -= h
        out[k] = (log_joint(net, hi, params) - log_joint(net, lo, params)) / (2 * h)
    return out


def fd_phi_gradient(net, state, params, t, k, l, h=1e-5):
    """Central difference of the log joint in the symmetric entry ``phi[t, k, l]``."""
    from scmmsb.model import log_joint

    hi, lo = state.copy(), state.copy()
    hi.set_phi(t, k, l, state.phi[t, k, l] + h)
    lo.set_phi(t, k, l, state.phi[t, k, l] - h)
    return (log_joint(net, hi, params) - log_joint(net, lo, params)) / (2 * h)


def rel_err(analytic, numeric):
    analytic, numeric = np.atleast_1d(analytic), np.atleast_1d(numeric)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-300))
