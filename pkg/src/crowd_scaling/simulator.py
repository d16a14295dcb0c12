"""Monte-Carlo asset selection, the price-fluctuation entropy experiment and a
synthetic universe generator.

Randomness
----------
Every fund draws from its own Philox stream.  The key comes from the run
seed and the counter's third word is the fund index, so streams are disjoint
and a fund's draws do not depend on which worker simulates it or in what
order.  Serial and parallel runs are therefore bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .metrics import BinModel, SelectionModel, scaled_entropy_of_weights
from .universe import UniverseSnapshot

_SEED_MAX = 2**64


def _check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed < _SEED_MAX:
        raise ValueError("seed must be a non-negative 64-bit integer")
    return seed


def fund_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for substream ``index`` of run ``seed``."""
    key = np.random.SeedSequence(_check_seed(seed)).generate_state(2, np.uint64)
    counter = np.array([0, 0, index, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class SimConfig:
    seed: int
    model: SelectionModel
    fund_sizes: Sequence[int]
    security_caps: Sequence[float]
    max_retries: int = 1000
    security_ids: Sequence[str] | None = None

    def __post_init__(self):
        self.seed = _check_seed(self.seed)
        self.fund_sizes = np.asarray(self.fund_sizes, dtype=np.int64)
        self.security_caps = np.asarray(self.security_caps, dtype=float)
        if self.fund_sizes.size == 0:
            raise ValueError("fund_sizes is empty")
        if np.any(self.fund_sizes < 1):
            raise ValueError("every fund size must be >= 1")
        if self.security_caps.size == 0 or np.any(~(self.security_caps > 0)):
            raise ValueError("security caps must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.security_ids is not None and len(self.security_ids) != self.security_caps.size:
            raise ValueError("security_ids and security_caps differ in length")

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "fund_sizes": self.fund_sizes.tolist(),
            "security_caps": self.security_caps.tolist(),
            "max_retries": self.max_retries,
        }
        if self.security_ids is not None:
            out["security_ids"] = list(self.security_ids)
        return out

    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class VolatilityConfig:
    """Per-asset annualised volatility ~ lognormal(median, log_sd); zero-drift daily log steps."""

    horizon: int = 63
    sigma_median: float = 0.4
    sigma_log_sd: float = 0.4
    trading_days: int = 252

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.sigma_median < 0 or self.sigma_log_sd < 0 or self.trading_days < 1:
            raise ValueError("volatility parameters must be non-negative")

    @classmethod
    def from_json(cls, path) -> "VolatilityConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


@dataclass
class SimulatedUniverse:
    snapshot: UniverseSnapshot | None
    seed: int
    config_sha256: str
    failures: list[dict] = field(default_factory=list)
    ground_truth: dict | None = None

    @property
    def failure_rate(self) -> float:
        total = len(self.failures) + (self.snapshot.n_funds if self.snapshot is not None else 0)
        return len(self.failures) / total if total else 0.0

    def provenance(self) -> dict:
        return {"config_sha256": self.config_sha256, "seed": self.seed, "failures": self.failures}


# ---------------------------------------------------------------------------
# Asset selection


def weighted_sample_without_replacement(weights, k, rng) -> np.ndarray:
    """k distinct indices drawn one after another with probability proportional
    to the weights of the indices not yet drawn.

    Uses exponential races: the k smallest ``E_j / w_j`` (``E_j ~ Exp(1)``) are
    distributed exactly as the successive draws.  Returned in draw order.
    """
    w = np.asarray(weights, dtype=float)
    keys = rng.standard_exponential(w.size) / w
    if k >= w.size:
        return np.argsort(keys, kind="stable")
    idx = np.argpartition(keys, k - 1)[:k]
    return idx[np.argsort(keys[idx], kind="stable")]


class SelectionFailure(RuntimeError):
    pass


def beta_rank_selection(a, b, n, M, rng, max_retries) -> np.ndarray:
    """n distinct ranks (1-based) drawn by rho ~ Beta(a, b), rank = ceil(rho*M).

    A draw that repeats an already chosen rank is rejected and redrawn; more
    than ``max_retries`` consecutive rejections for one slot is a failure.
    Draws are consumed in batches but accepted strictly in stream order.
    """
    if n > M:
        raise SelectionFailure(f"n_i={n} exceeds the number of securities M={M}")
    chosen = np.zeros(M + 1, dtype=bool)
    picked = []
    have = 0
    run = 0  # rejections since the last acceptance
    while have < n:
        batch = max(64, 2 * (n - have))
        ranks = np.clip(np.ceil(rng.beta(a, b, size=batch) * M).astype(np.int64), 1, M)
        _, first = np.unique(ranks, return_index=True)
        first.sort()
        accepted = first[~chosen[ranks[first]]]
        accepted = accepted[: n - have]
        prev = -1
        for pos in accepted:
            run += pos - prev - 1
            if run > max_retries:
                raise SelectionFailure(f"duplicate-rejection limit {max_retries} exceeded")
            run = 0
            prev = pos
        if have + accepted.size < n:
            run += batch - prev - 1
            if run > max_retries:
                raise SelectionFailure(f"duplicate-rejection limit {max_retries} exceeded")
        new = ranks[accepted]
        chosen[new] = True
        picked.append(new)
        have += new.size
    return np.concatenate(picked)


def _simulate_fund(i, n, seed, model_bins, n_star, intercept, mu_below, caps, rank_order, max_retries):
    """Return (security indices, position values) or raise SelectionFailure."""
    M = caps.size
    if n > M:
        raise SelectionFailure(f"n_i={n} exceeds the number of securities M={M}")
    rng = fund_rng(seed, i)
    if n < n_star:
        total = 10.0**intercept * float(n) ** mu_below
        idx = weighted_sample_without_replacement(caps, n, rng)
        return idx, np.full(n, total / n)
    k = None
    for j, (lo, hi, *_rest) in enumerate(model_bins):
        if lo <= n < hi:
            k = j
            break
    if k is None:
        raise SelectionFailure(f"n_i={n} falls outside every bin")
    _, _, a, b, f, calibrated = model_bins[k]
    if not calibrated:
        raise SelectionFailure(f"bin [{model_bins[k][0]}, {model_bins[k][1]}) is uncalibrated")
    ranks = beta_rank_selection(a, b, n, M, rng, max_retries)
    idx = rank_order[ranks - 1]
    return idx, f * caps[idx]


def _simulate_chunk(args):
    indices, sizes, seed, model_bins, n_star, intercept, mu_below, caps, rank_order, max_retries = args
    out = []
    for i, n in zip(indices, sizes):
        try:
            idx, vals = _simulate_fund(
                i, n, seed, model_bins, n_star, intercept, mu_below, caps, rank_order, max_retries
            )
            out.append((i, idx, vals, None))
        except SelectionFailure as exc:
            out.append((i, None, None, str(exc)))
    return out


def _rank_order(caps, ids) -> np.ndarray:
    return np.lexsort((np.asarray(ids, dtype=str), -caps))


def simulate_universe(config: SimConfig, workers: int = 1, chunk_size: int = 256) -> SimulatedUniverse:
    """Simulate one portfolio per requested fund size.

    Funds with n_i < n* hold n_i securities drawn without replacement with
    probability proportional to capitalization, each position worth
    ``10**intercept * n_i**mu_below / n_i``.  Larger funds draw scaled ranks
    from their bin's Beta kernel and hold ``median_fmax * C`` of each chosen
    security.  Failed funds are listed in ``failures``, never dropped silently.
    """
    model = config.model
    caps = config.security_caps
    M = caps.size
    ids = (
        list(config.security_ids)
        if config.security_ids is not None
        else [f"S{k:0{max(5, len(str(M)))}d}" for k in range(M)]
    )
    rank_order = _rank_order(caps, ids)
    model_bins = [
        (b.lo, b.hi, b.a, b.b, b.median_fmax, b.calibrated) for b in model.bins
    ]
    sizes = config.fund_sizes
    n_funds = sizes.size
    common = (config.seed, model_bins, model.n_star, model.intercept, model.mu_below, caps, rank_order, config.max_retries)
    jobs = [
        (np.arange(s, min(s + chunk_size, n_funds)), sizes[s : s + chunk_size], *common)
        for s in range(0, n_funds, chunk_size)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for chunk in pool.map(_simulate_chunk, jobs) for r in chunk]
    else:
        results = [r for job in jobs for r in _simulate_chunk(job)]

    width = max(6, len(str(n_funds)))
    fund_ids, ef, es, ev, failures = [], [], [], [], []
    for i, idx, vals, err in results:
        fid = f"F{i:0{width}d}"
        if err is not None:
            failures.append({"fund_index": int(i), "fund_id": fid, "n_i": int(sizes[i]), "reason": err})
            continue
        order = np.argsort(idx)
        ef.append(np.full(idx.size, len(fund_ids)))
        es.append(idx[order])
        ev.append(vals[order])
        fund_ids.append(fid)

    snapshot = None
    if fund_ids:
        snapshot = UniverseSnapshot.from_arrays(
            fund_ids=fund_ids,
            security_ids=ids,
            capitalization=caps,
            edge_fund=np.concatenate(ef),
            edge_security=np.concatenate(es),
            edge_value=np.concatenate(ev),
        )
    return SimulatedUniverse(snapshot, config.seed, config.sha256(), failures)


# ---------------------------------------------------------------------------
# Entropy under price fluctuations


@dataclass(frozen=True)
class EntropyCurve:
    n: np.ndarray
    mean_entropy: np.ndarray
    stderr: np.ndarray
    replicas: int

    def __call__(self, n):
        """Interpolate in log n; constant beyond the grid ends."""
        return np.interp(np.log(np.asarray(n, dtype=float)), np.log(self.n), self.mean_entropy)

    def rows(self):
        return zip(self.n.tolist(), self.mean_entropy.tolist(), self.stderr.tolist(), [self.replicas] * self.n.size)


def _gaussian_log_growth(rng, replicas, n, vol: VolatilityConfig) -> np.ndarray:
    # a sum of `horizon` i.i.d. Gaussian daily log steps is Gaussian, so the
    # terminal log growth is drawn in one shot
    if vol.sigma_median == 0:
        return np.zeros((replicas, n))
    sigma = rng.lognormal(math.log(vol.sigma_median), vol.sigma_log_sd, size=(replicas, n))
    daily_var = sigma**2 / vol.trading_days
    return rng.normal(-0.5 * vol.horizon * daily_var, np.sqrt(vol.horizon * daily_var))


def _scaled_entropy_rows(log_growth: np.ndarray) -> np.ndarray:
    n = log_growth.shape[1]
    if n == 1:
        return np.ones(log_growth.shape[0])
    z = log_growth - log_growth.max(axis=1, keepdims=True)
    w = np.exp(z)
    p = w / w.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p), 0.0)
    return np.clip(-terms.sum(axis=1) / math.log2(n), 0.0, 1.0)


def entropy_under_volatility(
    n_values: Sequence[int],
    vol: VolatilityConfig | None = None,
    replicas: int = 1000,
    seed: int = 0,
    step_sampler: Callable | None = None,
) -> EntropyCurve:
    """Mean scaled entropy of initially equal-weight portfolios after ``vol.horizon`` days.

    ``step_sampler(rng, replicas, n, horizon)`` may supply daily log returns of
    shape (replicas, n, horizon); by default each asset gets a lognormal
    annualised volatility and zero-drift Gaussian daily log steps.
    """
    vol = vol or VolatilityConfig()
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    n_arr = np.asarray(n_values, dtype=np.int64)
    if n_arr.size == 0 or np.any(n_arr < 1):
        raise ValueError("n_values must be positive")
    means, errs = [], []
    for j, n in enumerate(n_arr):
        rng = fund_rng(seed, j)
        if step_sampler is None:
            growth = _gaussian_log_growth(rng, replicas, int(n), vol)
        else:
            steps = np.asarray(step_sampler(rng, replicas, int(n), vol.horizon), dtype=float)
            growth = steps.sum(axis=2)
        s = _scaled_entropy_rows(growth)
        means.append(s.mean())
        errs.append(s.std(ddof=1) / math.sqrt(replicas) if replicas > 1 else 0.0)
    return EntropyCurve(n_arr, np.asarray(means), np.asarray(errs), replicas)


# ---------------------------------------------------------------------------
# Synthetic universes


def pareto_caps(M, exponent, scale, rng) -> np.ndarray:
    """Capitalizations with P(C > c) = (scale / c) ** exponent."""
    return scale * (1.0 - rng.random(M)) ** (-1.0 / exponent)


def sample_fund_sizes(sampler: dict, n_funds: int, rng) -> np.ndarray:
    """Fund sizes from a sampler description:

    ``{"kind": "loguniform", "low": 5, "high": 2000}``,
    ``{"kind": "lognormal", "median": 60, "log_sd": 1.2, "low": 5, "high": 3000}`` or
    ``{"kind": "values", "values": [...]}`` (cycled to ``n_funds``).
    """
    kind = sampler.get("kind", "loguniform")
    if kind == "values":
        vals = np.asarray(sampler["values"], dtype=np.int64)
        return np.resize(vals, n_funds)
    low, high = sampler.get("low", 5), sampler.get("high", 2000)
    if kind == "loguniform":
        n = np.exp(rng.uniform(math.log(low), math.log(high + 1), n_funds))
    elif kind == "lognormal":
        n = rng.lognormal(math.log(sampler["median"]), sampler["log_sd"], n_funds)
    else:
        raise ValueError(f"unknown sampler kind {kind!r}")
    return np.clip(np.floor(n), low, high).astype(np.int64)


@dataclass
class SyntheticParams:
    M: int
    n_funds: int
    model: SelectionModel | None = None
    cap_pareto_exponent: float = 1.0
    cap_scale: float = 1e8
    n_sampler: dict = field(default_factory=lambda: {"kind": "loguniform", "low": 5, "high": 2000})
    seed: int = 0
    max_retries: int = 1000
    paper_shape: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = None if self.model is None else self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticParams":
        data = dict(data)
        if data.get("model") is not None:
            data["model"] = SelectionModel.from_dict(data["model"])
        return cls(**data)


def generate_synthetic_universe(params: SyntheticParams, workers: int = 1) -> SimulatedUniverse:
    """Pareto capitalizations, sampled fund sizes, holdings from the simulator.

    Without an explicit ``model``, :func:`paper_shaped_model` is built on the
    drawn capitalizations using the ``paper_shape`` keyword overrides.  The
    returned object carries the generating parameters in ``ground_truth``.
    """
    if params.M < 1 or params.n_funds < 1:
        raise ValueError("M and n_funds must be positive")
    seed = _check_seed(params.seed)
    root = np.random.SeedSequence(seed)
    cap_seq, size_seq, sim_seq = root.spawn(3)
    caps = pareto_caps(params.M, params.cap_pareto_exponent, params.cap_scale, np.random.default_rng(cap_seq))
    sizes = sample_fund_sizes(params.n_sampler, params.n_funds, np.random.default_rng(size_seq))
    sim_seed = int(sim_seq.generate_state(1, np.uint64)[0])
    model = params.model
    if model is None:
        model = paper_shaped_model(caps, **(params.paper_shape or {}))
    config = SimConfig(sim_seed, model, sizes, caps, params.max_retries)
    sim = simulate_universe(config, workers=workers)
    sim.seed = seed
    truth = params.to_dict()
    truth["model"] = model.to_dict()
    sim.ground_truth = truth
    return sim


def expected_selected_cap(caps, a, b) -> float:
    """Mean capitalization picked by one Beta(a, b) rank draw (with replacement)."""
    sorted_caps = np.sort(np.asarray(caps, dtype=float))[::-1]
    M = sorted_caps.size
    cdf = special.betainc(a, b, np.arange(M + 1) / M)
    return float(np.diff(cdf) @ sorted_caps)


def paper_shaped_model(
    caps,
    *,
    n_star: float = 70.0,
    mu_below: float = 2.1,
    mu_above: float = 0.3,
    intercept: float = 3.0,
    n_max: int = 4096,
    min_positions: int = 5,
    kernel: Callable[[float], tuple[float, float]] | None = None,
) -> SelectionModel:
    """A selection model shaped like the published regime.

    Above n* each bin's median f_max is set so that the mean total value at the
    bin's geometric centre follows ``W(n*) * (n / n*)**mu_above``; the Beta
    kernel flattens towards uniform as diversification grows unless a
    ``kernel(n) -> (a, b)`` is supplied.
    """
    from .metrics import log2_bin_edges

    if kernel is None:

        def kernel(n):
            x = math.log10(max(n, n_star) / n_star)
            return 0.7 + 0.15 * x, max(1.2, 3.0 - 1.2 * x)

    edges = log2_bin_edges([min_positions, n_max], min_positions)
    w_star = 10.0**intercept * n_star**mu_below
    bins = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        bm = BinModel(int(lo), int(hi))
        if hi > n_star:
            centre = math.sqrt(max(lo, n_star) * hi)
            a, b = kernel(centre)
            target = w_star * (centre / n_star) ** mu_above
            bm.a, bm.b = float(a), float(b)
            bm.median_fmax = target / (centre * expected_selected_cap(caps, a, b))
            bm.calibrated = True
        bins.append(bm)
    return SelectionModel(n_star=n_star, mu_below=mu_below, intercept=intercept, bins=bins)
