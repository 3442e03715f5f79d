"""MINE: Donsker-Varadhan mutual-information estimation between feature sets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ContractError,
    DomainError,
    Tensor,
    backward,
    elu,
    logsumexp_mean,
    no_grad,
    reset_tape,
)
from .nn import AdamState, ParamStore, adam_step, affine, init_params


@dataclass
class MineConfig:
    hidden: tuple = (128, 128)
    steps: int = 2000
    batch: int = 512
    lr: float = 1e-3
    restarts: int = 3
    standardize: bool = True

    @classmethod
    def wide(cls, **kw):
        """Statistics network with two hidden layers of 512."""
        return cls(hidden=(512, 512), **kw)


class StatisticsNetwork:
    """T(a, b): MLP on the concatenated pair with ELU activations and a scalar output."""

    def __init__(self, d_a: int, d_b: int, hidden=(128, 128), seed: int = 0):
        self.d_a, self.d_b = int(d_a), int(d_b)
        self.widths = [self.d_a + self.d_b, *[int(h) for h in hidden], 1]
        self.store: ParamStore = init_params(self.widths, seed, prefix="T")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> Tensor:
        return self.scores(np.concatenate([a, b], axis=1))

    def scores(self, pairs: np.ndarray) -> Tensor:
        h = Tensor(pairs)
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            h = affine(h, self.store[f"T{i}.weight"], self.store[f"T{i}.bias"])
            if i < n_layers - 1:
                h = elu(h)
        return h


def dv_bound_scores(t_joint: Tensor, t_marginal: Tensor) -> Tensor:
    """mean(T_joint) - log mean(exp(T_marginal))."""
    if t_joint.size == 0 or t_marginal.size == 0:
        raise ContractError("dv_bound needs non-empty joint and marginal samples")
    return t_joint.mean() - logsumexp_mean(t_marginal)


def dv_bound(T, joint, marginal) -> Tensor:
    """Donsker-Varadhan bound for statistic ``T`` on (a, b) joint and marginal pairs."""
    (ja, jb), (ma, mb) = joint, marginal
    if len(ja) == 0 or len(ma) == 0:
        raise ContractError("dv_bound needs non-empty joint and marginal samples")
    tj, tm = T(np.asarray(ja, float), np.asarray(jb, float)), T(np.asarray(ma, float), np.asarray(mb, float))
    tj = tj if isinstance(tj, Tensor) else Tensor(tj)
    tm = tm if isinstance(tm, Tensor) else Tensor(tm)
    return dv_bound_scores(tj, tm)


@dataclass
class SampleBuffer:
    a: np.ndarray
    b: np.ndarray
    domains: np.ndarray | None = None

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64).T).T
        self.b = np.atleast_2d(np.asarray(self.b, dtype=np.float64).T).T
        if len(self.a) != len(self.b):
            raise ContractError(f"row counts differ: {len(self.a)} vs {len(self.b)}")

    def __len__(self):
        return len(self.a)


def global_average_pool(features: np.ndarray) -> np.ndarray:
    """Average over spatial axes; a no-op for [n×d] vector features."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim <= 2:
        return features
    return features.reshape(features.shape[0], features.shape[1], -1).mean(axis=2)


def collect_by_domain(features_a, features_b, domains, per_domain: int, seed: int) -> SampleBuffer:
    """Equal number of paired rows from each domain."""
    domains = np.asarray(domains)
    rng = np.random.default_rng(seed)
    picks = []
    for d in np.unique(domains):
        idx = np.flatnonzero(domains == d)
        if len(idx) < per_domain:
            raise ContractError(f"domain {d} has {len(idx)} rows, need {per_domain}")
        picks.append(np.sort(rng.choice(idx, per_domain, replace=False)))
    sel = np.concatenate(picks)
    return SampleBuffer(global_average_pool(features_a)[sel], global_average_pool(features_b)[sel], domains[sel])


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return (x - x.mean(axis=0)) / sd


def train_mine(buffer: SampleBuffer, net: StatisticsNetwork | None = None, steps: int = 2000,
               lr: float = 1e-3, seed: int = 0, batch: int = 512, hidden=(128, 128)):
    """Maximize the DV bound by Adam; returns (net, estimate averaged over the last 10% of steps)."""
    n = len(buffer)
    batch = min(batch, n // 2)
    if batch < 1:
        raise ContractError("buffer too small for a MINE batch")
    rng = np.random.default_rng(seed)
    if net is None:
        net = StatisticsNetwork(buffer.a.shape[1], buffer.b.shape[1], hidden, seed=int(rng.integers(2**31)))
    state = AdamState(lr=lr)
    tail = max(1, steps // 10)
    history = []
    for step in range(steps):
        idx = rng.choice(n, batch, replace=False)
        a, b = buffer.a[idx], buffer.b[idx]
        perm = rng.permutation(batch)
        reset_tape()
        net.store.zero_grad()
        bound = dv_bound(net, (a, b), (a, b[perm]))
        backward(bound * -1.0)
        adam_step(state, net.store, net.store.grads())
        if step >= steps - tail:
            history.append(bound.item())
    return net, float(np.mean(history))


def evaluate_bound(net: StatisticsNetwork, buffer: SampleBuffer, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    with no_grad():
        perm = rng.permutation(len(buffer))
        return dv_bound(net, (buffer.a, buffer.b), (buffer.a, buffer.b[perm])).item()


def gaussian_mi_closed_form(rho, dims: int | None = None) -> float:
    """MI in nats of coordinate-wise correlated Gaussian pairs: -1/2 sum log(1 - rho_j^2)."""
    rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    if dims is not None and rho.size == 1:
        rho = np.full(int(dims), rho[0])
    if np.any(np.abs(rho) >= 1):
        raise DomainError("|rho| must be < 1")
    return float(-0.5 * np.sum(np.log1p(-rho * rho)))


def gaussian_pairs(rho: float, n: int, seed: int, dims: int = 1):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, dims))
    b = rho * a + np.sqrt(1.0 - rho * rho) * rng.standard_normal((n, dims))
    return a, b


@dataclass
class MIEstimate:
    estimate: float
    stderr: float
    restarts: list = field(default_factory=list)
    n: int = 0


def estimate_pair_mi(features_a, features_b, config: MineConfig | None = None, seed: int = 0) -> MIEstimate:
    """Fresh statistics network per restart; estimate = mean, stderr over restarts."""
    config = config or MineConfig()
    a = global_average_pool(features_a)
    b = global_average_pool(features_b)
    if len(a) != len(b):
        raise ContractError(f"row counts differ: {len(a)} vs {len(b)}")
    if config.standardize:
        a, b = _standardize(a), _standardize(b)
    buffer = SampleBuffer(a, b)
    seeds = np.random.SeedSequence(seed).generate_state(config.restarts)
    values = []
    for s in seeds:
        _, est = train_mine(buffer, steps=config.steps, lr=config.lr, seed=int(s),
                            batch=config.batch, hidden=config.hidden)
        values.append(est)
    values_arr = np.array(values)
    stderr = float(values_arr.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else float("nan")
    return MIEstimate(float(values_arr.mean()), stderr, values, len(buffer))
