"""Dynamical hierarchical market model.

Returns are r[i,t] = eps[i,t] * x[t] * Y[i,t]: correlated Gaussian noise, a
common lognormal volatility with log-correlated memory, and a multiplicative
risk term Y[i,t] = exp(sum of active Bernoulli risks along leaf i's
dendrogram path). Activating risks heterogeneously across the tree perturbs
every pair correlation by a closed-form factor F <= 1 that depends only on
the non-shared path nodes; this module provides both the simulator and that
closed form so they can be checked against each other.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from hiermf.dependence import CorrelationMatrix
from hiermf.hierarchy import Dendrogram, leaf_path, parse_dendrogram
from hiermf.market_data import ReturnsPanel
from hiermf.scaling import _circulant_sample
from hiermf.util import derived_rng

__all__ = [
    "RiskTree",
    "LogVolSpec",
    "Regime",
    "DhmSpec",
    "Activations",
    "SimulationOutput",
    "zeta1",
    "zeta2",
    "xi_covariance",
    "simulate_xi",
    "xi_embedding_report",
    "simulate_x",
    "sample_activations",
    "hierarchical_factor",
    "simulate_returns",
    "perturbation_factor",
    "theoretical_correlation",
    "draw_probabilities",
    "load_dhm_config",
    "load_dhm_config_dict",
]

MAX_CLIPPED_EIGENVALUE_MASS = 0.01


@dataclass(frozen=True)
class RiskTree:
    """Dendrogram whose every internal node carries an activation probability."""

    tree: Dendrogram

    def __post_init__(self):
        missing = [n.id for n in self.tree.nodes if n.p is None]
        if missing:
            raise ValueError(f"risk tree nodes without probabilities: {missing}")

    @property
    def leaves(self) -> tuple[str, ...]:
        return self.tree.leaves

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.tree.nodes)

    def probability(self, node_id: int) -> float:
        return self.tree.node(node_id).p

    def path_ids(self, leaf: str) -> frozenset[int]:
        return frozenset(leaf_path(self.tree, leaf).node_ids)


def draw_probabilities(
    tree: Dendrogram,
    low: float,
    high: float,
    rng: np.random.Generator,
    inherit: Mapping[int, float] | None = None,
) -> RiskTree:
    """Assign node probabilities uniformly in [low, high].

    Nodes whose id appears in `inherit` keep that value, so a risk persisting
    across regimes keeps its probability while new risks draw fresh ones.
    """
    if not 0.0 <= low <= high <= 1.0:
        raise ValueError(f"probability range [{low}, {high}] outside [0, 1]")
    inherit = inherit or {}
    probs = {}
    for node in tree.nodes:
        if node.id in inherit:
            probs[node.id] = float(inherit[node.id])
        else:
            probs[node.id] = float(rng.uniform(low, high))
    return RiskTree(tree.with_probabilities(probs))


@dataclass(frozen=True)
class LogVolSpec:
    """Common volatility x = exp(xi): lam sets intermittency, horizon the memory span."""

    lam: float = 0.2
    horizon: int = 800

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.horizon < 2:
            raise ValueError("horizon must be > 1")


def xi_covariance(spec: LogVolSpec, lags: np.ndarray | int) -> np.ndarray:
    """Cov(xi_t, xi_{t+h}) = lam^2 log(horizon / (1+h)), zero from h = horizon-1 on."""
    h = np.atleast_1d(np.asarray(lags, dtype=float))
    cov = spec.lam**2 * np.log(spec.horizon / (1.0 + h))
    return np.where(h >= spec.horizon - 1, 0.0, cov)


def _xi_sample(spec: LogVolSpec, length: int, rng: np.random.Generator):
    cov = xi_covariance(spec, np.arange(length + 1))
    return _circulant_sample(cov, rng, clip_negative=True)


def simulate_xi(spec: LogVolSpec, length: int, seed: int) -> np.ndarray:
    """Stationary mean-zero Gaussian path with the log-correlated covariance.

    Circulant embedding; negative embedding eigenvalues are clipped to zero
    and the lost mass redistributed, erroring when it exceeds
    MAX_CLIPPED_EIGENVALUE_MASS of the total.
    """
    if length < 2:
        raise ValueError("length must be >= 2")
    sample, clipped = _xi_sample(spec, length, np.random.default_rng(seed))
    if clipped > MAX_CLIPPED_EIGENVALUE_MASS:
        raise ValueError(
            f"embedding clipped {clipped:.2%} of eigenvalue mass; use a longer path"
        )
    return sample


def xi_embedding_report(spec: LogVolSpec, length: int) -> dict:
    """Achieved-vs-target covariance deviation of the clipped embedding."""
    target = xi_covariance(spec, np.arange(length + 1))
    n = length
    first_row = np.concatenate((target, target[-2:0:-1]))
    eig = np.fft.fft(first_row).real
    clipped_mass = float(-eig[eig < 0].sum() / np.abs(eig).sum())
    eig_pos = np.where(eig < 0, 0.0, eig)
    eig_pos *= first_row[0] * (2 * n) / eig_pos.sum()
    achieved = np.fft.ifft(eig_pos).real[: length + 1]
    return {
        "clipped_eigenvalue_mass": clipped_mass,
        "max_abs_covariance_error": float(np.max(np.abs(achieved - target))),
    }


def simulate_x(xi: np.ndarray) -> np.ndarray:
    """Common volatility path x = exp(xi)."""
    return np.exp(np.asarray(xi, dtype=float))


@dataclass(frozen=True)
class Activations:
    """Bernoulli risk draws K[m, t]; one row per tree node, shared by all leaves under it."""

    node_ids: tuple[int, ...]
    values: np.ndarray  # (n_nodes, length) of {0, 1}

    def row(self, node_id: int) -> np.ndarray:
        return self.values[self.node_ids.index(node_id)]


def sample_activations(tree: RiskTree, length: int, seed_or_rng) -> Activations:
    """Independent K[m, t] ~ Bernoulli(p_m) across nodes and times."""
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    ids = tree.node_ids
    probs = np.array([tree.probability(i) for i in ids])
    draws = (rng.random((len(ids), length)) < probs[:, None]).astype(np.uint8)
    return Activations(node_ids=ids, values=draws)


def hierarchical_factor(tree: RiskTree, activations: Activations, leaf: str, t: int) -> float:
    """Y[leaf, t] = exp(number of active path risks at t)."""
    rows = [activations.node_ids.index(i) for i in leaf_path(tree.tree, leaf).node_ids]
    return float(np.exp(activations.values[rows, t].sum()))


def _leaf_factors(tree: RiskTree, activations: Activations, leaves: Sequence[str]) -> np.ndarray:
    """Y as a (length, n_leaves) array; exp of per-time active-ancestor counts."""
    index = {node_id: k for k, node_id in enumerate(activations.node_ids)}
    length = activations.values.shape[1]
    counts = np.zeros((len(leaves), length), dtype=np.int64)
    for j, leaf in enumerate(leaves):
        for node_id in leaf_path(tree.tree, leaf).node_ids:
            counts[j] += activations.values[index[node_id]]
    return np.exp(counts.T.astype(float))


@dataclass(frozen=True)
class Regime:
    """One tranche of the simulation: a risk tree held for `duration` days."""

    tree: RiskTree
    duration: int

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError("regime duration must be >= 1")


@dataclass(frozen=True)
class DhmSpec:
    """Full generative specification; identical specs yield identical output.

    `logvol=None` switches the common volatility off (x identically 1),
    leaving only noise and risk activations. The model works on the noise
    *correlation*; when a covariance was supplied, its diagonal is kept in
    `noise_variances` for the record but never enters the simulation.
    """

    noise: CorrelationMatrix
    regimes: tuple[Regime, ...]
    logvol: LogVolSpec | None
    length: int
    seed: int
    noise_variances: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "regimes", tuple(self.regimes))
        if not self.regimes:
            raise ValueError("need at least one regime")
        total = sum(r.duration for r in self.regimes)
        if total != self.length:
            raise ValueError(f"regime durations sum to {total}, expected length {self.length}")
        asset_set = set(self.noise.assets)
        for k, regime in enumerate(self.regimes):
            if set(regime.tree.leaves) != asset_set:
                raise ValueError(f"regime {k} leaves do not match the noise correlation assets")


@dataclass(frozen=True)
class SimulationOutput:
    """Simulated panel plus every latent path needed to reconstruct it."""

    returns: ReturnsPanel
    activations: tuple[Activations, ...]
    x: np.ndarray
    xi: np.ndarray
    epsilon: np.ndarray
    regime_starts: tuple[int, ...]


def _noise_transform(noise: CorrelationMatrix) -> np.ndarray:
    """Symmetric square root with tiny negative eigenvalues clipped, unit variances."""
    w, v = np.linalg.eigh(noise.values)
    w = np.clip(w, 0.0, None)
    a = (v * np.sqrt(w)) @ v.T
    scale = np.sqrt(np.einsum("ij,ij->i", a, a))
    return a / scale[:, None]


def simulate_returns(spec: DhmSpec) -> SimulationOutput:
    """Sample the model: r = eps * x * Y with eps and x continued across regimes.

    The tree (and so Y) switches per regime; eps and x are single stationary
    paths over the whole length, so only the risk layout changes at a
    boundary.
    """
    assets = spec.noise.assets
    eps_rng = derived_rng(spec.seed, 0)
    z = eps_rng.standard_normal((spec.length, len(assets)))
    epsilon = z @ _noise_transform(spec.noise)

    if spec.logvol is None:
        xi = np.zeros(spec.length)
    else:
        xi, clipped = _xi_sample(spec.logvol, spec.length, derived_rng(spec.seed, 1))
        if clipped > MAX_CLIPPED_EIGENVALUE_MASS:
            raise ValueError(
                f"embedding clipped {clipped:.2%} of eigenvalue mass; use a longer path"
            )
    x = np.exp(xi)

    values = epsilon * x[:, None]
    activations = []
    starts = []
    t0 = 0
    for k, regime in enumerate(spec.regimes):
        acts = sample_activations(regime.tree, regime.duration, derived_rng(spec.seed, 2, k))
        activations.append(acts)
        starts.append(t0)
        values[t0 : t0 + regime.duration] *= _leaf_factors(regime.tree, acts, assets)
        t0 += regime.duration

    panel = ReturnsPanel(assets=assets, times=tuple(range(spec.length)), values=values, scale=1)
    return SimulationOutput(
        returns=panel,
        activations=tuple(activations),
        x=x,
        xi=xi,
        epsilon=epsilon,
        regime_starts=tuple(starts),
    )


E1 = math.e - 1.0
E2 = math.e**2 - 1.0


def zeta1(p):
    """First moment of exp(K) for K ~ Bernoulli(p): p(e-1) + 1."""
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p must lie in [0, 1]")
    out = p * E1 + 1.0
    return float(out) if out.ndim == 0 else out


def zeta2(p):
    """Second moment of exp(K) for K ~ Bernoulli(p): p(e^2-1) + 1."""
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p must lie in [0, 1]")
    out = p * E2 + 1.0
    return float(out) if out.ndim == 0 else out


def perturbation_factor(tree: RiskTree, leaf_i: str, leaf_j: str) -> float:
    """Correlation shrinkage from non-shared path risks.

    Product of zeta1 over the symmetric difference of the two leaf paths,
    divided by the square root of the product of zeta2 over the same nodes.
    Shared ancestors cancel exactly; all-zero or all-one probabilities give 1.
    """
    if leaf_i == leaf_j:
        raise ValueError("perturbation factor is defined for distinct leaves")
    diff = tree.path_ids(leaf_i) ^ tree.path_ids(leaf_j)
    if not diff:
        return 1.0
    p = np.array([tree.probability(m) for m in sorted(diff)])
    return float(np.prod(zeta1(p)) / math.sqrt(np.prod(zeta2(p))))


def _noise_from_config(noise_cfg, leaves: tuple[str, ...], base_dir):
    """Noise correlation plus per-asset variances when a covariance file is given.

    Files may hold either a correlation or a covariance matrix; covariances
    are normalized to unit diagonal and the variances kept separately.
    """
    if noise_cfg is None or noise_cfg.get("identity"):
        return CorrelationMatrix(assets=leaves, values=np.eye(len(leaves))), None
    if "constant" in noise_cfg:
        c = float(noise_cfg["constant"])
        values = np.full((len(leaves), len(leaves)), c)
        np.fill_diagonal(values, 1.0)
        return CorrelationMatrix(assets=leaves, values=values), None
    if "file" in noise_cfg:
        import csv

        with open(base_dir / noise_cfg["file"], newline="") as fh:
            rows = list(csv.reader(fh))
        assets = tuple(rows[0][1:])
        values = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
        diag = np.diag(values).copy()
        if np.allclose(diag, 1.0, atol=1e-12):
            return CorrelationMatrix(assets=assets, values=values), None
        scale = np.sqrt(diag)
        corr = values / np.outer(scale, scale)
        corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
        np.fill_diagonal(corr, 1.0)
        return CorrelationMatrix(assets=assets, values=corr), diag
    raise ValueError(f"unrecognized noise specification {noise_cfg!r}")


def _risk_tree_from_config(
    tree: Dendrogram,
    p_range: tuple[float, float] | None,
    inherit: Mapping[int, float] | None,
    rng: np.random.Generator,
) -> RiskTree:
    """Probabilities: explicit file value, then inherited, then drawn from p_range."""
    probs: dict[int, float] = {}
    for node in tree.nodes:
        if node.p is not None:
            probs[node.id] = node.p
        elif inherit and node.id in inherit:
            probs[node.id] = inherit[node.id]
        elif p_range is not None:
            probs[node.id] = float(rng.uniform(p_range[0], p_range[1]))
        else:
            raise ValueError(
                f"node {node.id} has no probability; set 'p' in the tree file or "
                "'p_range' on the regime"
            )
    return RiskTree(tree.with_probabilities(probs))


def load_dhm_config_dict(config: Mapping, base_dir, seed_override: int | None = None) -> DhmSpec:
    """Build a DhmSpec from a parsed config mapping (see README for the schema).

    Tree and correlation files resolve relative to `base_dir`. Missing node
    probabilities draw from the regime's p_range with a stream derived from
    the seed; by default a node id seen in the previous regime keeps its value.
    """
    base_dir = Path(base_dir)
    for key in ("length", "regimes"):
        if key not in config:
            raise ValueError(f"model config missing key {key!r}")
    seed = seed_override if seed_override is not None else config.get("seed")
    if seed is None:
        raise ValueError("model config needs a seed")
    length = int(config["length"])

    logvol_cfg = config.get("logvol", {})
    if logvol_cfg is None:
        logvol = None
    else:
        logvol = LogVolSpec(
            lam=float(logvol_cfg.get("lambda", 0.2)),
            horizon=int(logvol_cfg.get("horizon", 800)),
        )

    regimes = []
    previous: dict[int, float] | None = None
    for k, regime_cfg in enumerate(config["regimes"]):
        if "tree" not in regime_cfg or "duration" not in regime_cfg:
            raise ValueError(f"regime {k} needs 'tree' and 'duration'")
        tree = parse_dendrogram(base_dir / regime_cfg["tree"])
        p_range = regime_cfg.get("p_range")
        if p_range is not None:
            p_range = (float(p_range[0]), float(p_range[1]))
        inherit = previous if regime_cfg.get("inherit_previous", True) else None
        risk_tree = _risk_tree_from_config(
            tree, p_range, inherit, derived_rng(int(seed), 3, k)
        )
        previous = {i: risk_tree.probability(i) for i in risk_tree.node_ids}
        regimes.append(Regime(tree=risk_tree, duration=int(regime_cfg["duration"])))

    leaves = tuple(sorted(regimes[0].tree.leaves))
    noise, variances = _noise_from_config(config.get("noise"), leaves, base_dir)
    return DhmSpec(
        noise=noise,
        regimes=tuple(regimes),
        logvol=logvol,
        length=length,
        seed=int(seed),
        noise_variances=variances,
    )


def load_dhm_config(path) -> DhmSpec:
    """Read a model spec JSON file; relative paths resolve against its directory."""
    path = Path(path)
    with open(path) as fh:
        config = json.load(fh)
    return load_dhm_config_dict(config, path.parent)


def theoretical_correlation(noise: CorrelationMatrix, tree: RiskTree) -> CorrelationMatrix:
    """Model correlation: entrywise noise correlation times the perturbation factor."""
    if set(noise.assets) != set(tree.leaves):
        raise ValueError("correlation assets do not match tree leaves")
    assets = noise.assets
    paths = {leaf: tree.path_ids(leaf) for leaf in assets}
    probs = {node_id: tree.probability(node_id) for node_id in tree.node_ids}
    n = len(assets)
    values = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            diff = paths[assets[i]] ^ paths[assets[j]]
            f = 1.0
            for m in diff:
                p = probs[m]
                f *= (p * E1 + 1.0) / math.sqrt(p * E2 + 1.0)
            values[i, j] = values[j, i] = noise.values[i, j] * f
    return CorrelationMatrix(assets=assets, values=values, scheme=noise.scheme)
