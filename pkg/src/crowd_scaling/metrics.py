"""Per-fund diagnostics and calibration of the asset-selection model.

Scaled entropy, maximal investment ratio, rank-selection densities, the Beta
selection kernel and the per-bin :class:`SelectionModel` consumed by the
simulator.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_1d
from .estimators import SegmentedFit
from .universe import FundRecord, UniverseSnapshot, scaled_rank_array

# ---------------------------------------------------------------------------
# Entropy


@dataclass(frozen=True)
class EntropyRecord:
    fund_id: str
    n_i: int
    scaled_entropy: float


def scaled_entropy_of_weights(values) -> float:
    """Shannon entropy (bits) of the normalised weights divided by log2(n).

    A single weight has entropy 1 by convention; zero weights contribute 0.
    Identical weights give exactly 1 rather than 1 up to rounding.
    """
    v = np.asarray(values, dtype=float)
    v = v[v > 0]
    n = v.size
    if n == 0:
        raise ValueError("no positive weights")
    if n == 1 or v.min() == v.max():
        return 1.0
    p = v / v.sum()
    return float(-(p * np.log2(p)).sum() / math.log2(n))


def scaled_entropy(fund: FundRecord) -> EntropyRecord:
    values = list(fund.holdings.values())
    return EntropyRecord(fund.fund_id, len(values), scaled_entropy_of_weights(values))


def scaled_entropies(snapshot: UniverseSnapshot) -> np.ndarray:
    """Scaled entropy of every fund, aligned with ``snapshot.fund_ids``."""
    W = snapshot.fund_value
    n = snapshot.fund_positions
    p = snapshot.edge_value / W[snapshot.edge_fund]
    H = -np.bincount(snapshot.edge_fund, weights=p * np.log2(p), minlength=snapshot.n_funds)
    out = np.ones(snapshot.n_funds)
    lo = np.minimum.reduceat(snapshot.edge_value, snapshot.fund_offsets[:-1])
    hi = np.maximum.reduceat(snapshot.edge_value, snapshot.fund_offsets[:-1])
    multi = (n > 1) & (lo != hi)
    out[multi] = H[multi] / np.log2(n[multi])
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Maximal investment ratio


@dataclass(frozen=True)
class FmaxRecord:
    fund_id: str
    n_i: int
    f_max: float


def fmax(fund: FundRecord, snapshot: UniverseSnapshot) -> FmaxRecord:
    """Largest held fraction W_i,alpha / C_alpha across the fund's positions."""
    index = snapshot.security_index()
    best = max(v / snapshot.capitalization[index[s]] for s, v in fund.holdings.items())
    return FmaxRecord(fund.fund_id, fund.n_positions, float(best))


def fmax_array(snapshot: UniverseSnapshot) -> np.ndarray:
    """f_max of every fund, aligned with ``snapshot.fund_ids``."""
    frac = snapshot.edge_value / snapshot.capitalization[snapshot.edge_security]
    out = np.full(snapshot.n_funds, -np.inf)
    np.maximum.at(out, snapshot.edge_fund, frac)
    return out


# ---------------------------------------------------------------------------
# Bins over diversification


def log2_bin_edges(n_values, min_positions: int = 5) -> np.ndarray:
    """Contiguous base-2 bins ``[first, 2^k), [2^k, 2^(k+1)), ...`` covering ``n_values``.

    The first edge is ``min_positions`` (or the smallest observed n if lower);
    the remaining edges are the powers of two above it.
    """
    n = np.asarray(n_values)
    if n.size == 0:
        raise ValueError("no diversification values")
    first = int(min(min_positions, n.min()))
    first = max(first, 1)
    edges = [first]
    k = int(math.floor(math.log2(first))) + 1
    while edges[-1] <= n.max():
        edges.append(2**k)
        k += 1
    return np.asarray(edges, dtype=np.int64)


# ---------------------------------------------------------------------------
# Selection densities over scaled rank


@dataclass(frozen=True)
class SelectionDensity:
    samples: np.ndarray
    edges: np.ndarray
    density: np.ndarray
    n_funds: int


def edge_scaled_ranks(snapshot: UniverseSnapshot) -> np.ndarray:
    """Scaled rank of the security at every holdings edge."""
    return scaled_rank_array(snapshot)[snapshot.edge_security]


def selection_density(
    snapshot: UniverseSnapshot, bin: tuple[float, float], n_hist: int = 20, fund_mask=None
) -> SelectionDensity:
    """Histogram density of rho over every position of the funds with lo <= n_i < hi.

    ``fund_mask`` optionally narrows the funds further.
    """
    lo, hi = bin
    n = snapshot.fund_positions
    in_bin = (n >= lo) & (n < hi)
    if fund_mask is not None:
        in_bin &= np.asarray(fund_mask, dtype=bool)
    if not in_bin.any():
        raise ValueError(f"no fund in bin [{lo}, {hi})")
    edge_mask = in_bin[snapshot.edge_fund]
    samples = edge_scaled_ranks(snapshot)[edge_mask]
    edges = np.linspace(0.0, 1.0, n_hist + 1)
    # right-closed bins so that rho = 1 lands in the last bin and rho = 1/M in the first
    idx = np.clip(np.ceil(samples * n_hist).astype(np.int64) - 1, 0, n_hist - 1)
    counts = np.bincount(idx, minlength=n_hist)
    density = counts / (samples.size * np.diff(edges))
    return SelectionDensity(samples, edges, density, int(in_bin.sum()))


# ---------------------------------------------------------------------------
# Beta kernel


class DegenerateSampleError(ValueError):
    pass


def beta_pdf(x, a, b):
    """Beta density x**(a-1) (1-x)**(b-1) / B(a, b)."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        logpdf = (a - 1) * np.log(x) + (b - 1) * np.log1p(-x) - special.betaln(a, b)
    return np.where((x > 0) & (x < 1), np.exp(logpdf), 0.0)


@dataclass(frozen=True)
class BetaFit:
    a: float
    b: float
    converged: bool
    n_samples: int

    def __iter__(self):
        # unpacks as (a, b)
        return iter((self.a, self.b))


def beta_moments(samples) -> tuple[float, float]:
    x = np.asarray(samples, dtype=float)
    m = x.mean()
    v = x.var()
    if v <= 0 or np.ptp(x) == 0:
        raise DegenerateSampleError("degenerate sample: zero variance")
    common = m * (1 - m) / v - 1
    return m * common, (1 - m) * common


def _beta_mle(log_x_mean, log_1mx_mean, a, b, tol=1e-8, max_iter=200):
    """Newton iterations on the digamma score equations.

    Returns (a, b, converged).
    """
    theta = np.array([a, b], dtype=float)
    target = np.array([log_x_mean, log_1mx_mean])
    for _ in range(max_iter):
        a, b = theta
        psi_ab = special.digamma(a + b)
        F = np.array([special.digamma(a) - psi_ab, special.digamma(b) - psi_ab]) - target
        t_ab = special.polygamma(1, a + b)
        J = np.array(
            [
                [special.polygamma(1, a) - t_ab, -t_ab],
                [-t_ab, special.polygamma(1, b) - t_ab],
            ]
        )
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            return theta[0], theta[1], False
        scale = 1.0
        while np.any(theta - scale * step <= 0):
            scale *= 0.5
            if scale < 1e-12:
                return theta[0], theta[1], False
        theta = theta - scale * step
        if not np.all(np.isfinite(theta)):
            return a, b, False
        if np.max(np.abs(scale * step)) < tol * max(1.0, float(np.max(np.abs(theta)))):
            return theta[0], theta[1], True
    return theta[0], theta[1], False


def prepare_beta_samples(samples, n_securities=None) -> np.ndarray:
    x = as_1d(samples, "samples")
    if np.any(x <= 0) or np.any(x > 1):
        raise ValueError("samples must lie in (0, 1]")
    M = x.size if n_securities is None else n_securities
    return np.where(x >= 1.0, 1.0 - 1.0 / (2.0 * M), x)


def fit_beta(samples, n_securities=None, min_samples=30) -> BetaFit:
    """Fit Beta(a, b) to samples in (0, 1].

    Samples equal to 1 are moved to ``1 - 1/(2M)`` (half a rank spacing);
    ``M`` defaults to the sample size when ``n_securities`` is not given.
    Method-of-moments estimates seed a Newton solve of the likelihood
    equations.  If Newton fails the moment estimates come back with
    ``converged=False``.
    """
    x = prepare_beta_samples(samples, n_securities)
    if x.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {x.size}")
    a0, b0 = beta_moments(x)
    moments_ok = a0 > 0 and b0 > 0
    start = (a0, b0) if moments_ok else (1.0, 1.0)
    a, b, ok = _beta_mle(np.log(x).mean(), np.log1p(-x).mean(), *start)
    if not ok:
        warnings.warn("Beta MLE did not converge; returning moment estimates", RuntimeWarning)
        if not moments_ok:
            raise DegenerateSampleError("moment estimates are not positive")
        return BetaFit(float(a0), float(b0), False, x.size)
    return BetaFit(float(a), float(b), True, x.size)


class BetaKernel(BaseEstimator):
    """Beta density over scaled rank, fitted by maximum likelihood.

    ``fit(X)`` takes rank samples in (0, 1]; ``score_samples`` returns the log
    density and ``sample`` draws new ranks.
    """

    def __init__(self, n_securities=None):
        self.n_securities = n_securities

    def fit(self, X, y=None):
        res = fit_beta(X, self.n_securities)
        self.a_, self.b_, self.converged_ = res.a, res.b, res.converged
        self.n_features_in_ = 1
        return self

    def score_samples(self, X):
        check_is_fitted(self, "a_")
        with np.errstate(divide="ignore"):
            return np.log(beta_pdf(as_1d(X), self.a_, self.b_))

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "a_")
        rng = np.random.default_rng(random_state)
        return rng.beta(self.a_, self.b_, size=n_samples)


# ---------------------------------------------------------------------------
# Selection model


@dataclass
class BinModel:
    lo: int
    hi: int
    a: float | None = None
    b: float | None = None
    median_fmax: float | None = None
    count: int = 0
    calibrated: bool = False

    def to_dict(self) -> dict:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "a": self.a,
            "b": self.b,
            "median_fmax": self.median_fmax,
            "count": self.count,
            "calibrated": self.calibrated,
        }


@dataclass
class SelectionModel:
    """Per-bin Beta kernels and median f_max plus the broken-power-law fit.

    Funds with ``n < n_star`` are modelled as equal-weight with total value
    ``10**intercept * n**mu_below``; larger funds use their bin's kernel.
    """

    n_star: float
    mu_below: float
    intercept: float
    bins: list[BinModel] = field(default_factory=list)
    segmented: SegmentedFit | None = None

    @property
    def edges(self) -> np.ndarray:
        if not self.bins:
            return np.empty(0, dtype=np.int64)
        return np.asarray([b.lo for b in self.bins] + [self.bins[-1].hi])

    def bin_index(self, n: int) -> int | None:
        for k, b in enumerate(self.bins):
            if b.lo <= n < b.hi:
                return k
        return None

    @property
    def n_calibrated(self) -> int:
        return sum(b.calibrated for b in self.bins)

    def optimal_value(self, n) -> np.ndarray:
        return 10.0**self.intercept * np.asarray(n, dtype=float) ** self.mu_below

    def to_dict(self) -> dict:
        return {
            "n_star": self.n_star,
            "mu_below": self.mu_below,
            "intercept": self.intercept,
            "bins": [b.to_dict() for b in self.bins],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SelectionModel":
        bins = [
            BinModel(
                lo=int(b["lo"]),
                hi=int(b["hi"]),
                a=None if b.get("a") is None else float(b["a"]),
                b=None if b.get("b") is None else float(b["b"]),
                median_fmax=None if b.get("median_fmax") is None else float(b["median_fmax"]),
                count=int(b.get("count", 0)),
                calibrated=bool(b.get("calibrated", False)),
            )
            for b in data.get("bins", [])
        ]
        return cls(float(data["n_star"]), float(data["mu_below"]), float(data["intercept"]), bins)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "SelectionModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def calibrate(
    snapshot: UniverseSnapshot,
    segmented: SegmentedFit,
    min_positions: int = 5,
    min_edges: int = 30,
) -> SelectionModel:
    """Build the per-bin selection model from an observed snapshot.

    Every bin gets its fund count and median f_max.  Bins holding funds with
    n_i >= n* also get a Beta fit of the scaled ranks those funds hold; only
    those funds enter the fit, so a bin straddling n* is calibrated on its
    upper part.  Bins with fewer than ``min_edges`` positions, or whose sample
    is degenerate, stay uncalibrated.
    """
    if not segmented.converged:
        raise ValueError("segmented fit did not converge")
    n = snapshot.fund_positions
    f = fmax_array(snapshot)
    rho = edge_scaled_ranks(snapshot)
    edges = log2_bin_edges(n, min_positions)
    n_star = segmented.n_star
    bins = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        in_bin = (n >= lo) & (n < hi)
        upper = in_bin & (n >= n_star)
        bm = BinModel(int(lo), int(hi))
        if upper.any():
            bm.count = int(upper.sum())
            bm.median_fmax = float(np.median(f[upper]))
            samples = rho[upper[snapshot.edge_fund]]
            if samples.size >= min_edges:
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        fit = fit_beta(samples, n_securities=snapshot.M, min_samples=min_edges)
                except DegenerateSampleError:
                    fit = None
                if fit is not None:
                    bm.a, bm.b, bm.calibrated = fit.a, fit.b, True
        else:
            bm.count = int(in_bin.sum())
            if bm.count:
                bm.median_fmax = float(np.median(f[in_bin]))
        bins.append(bm)
    return SelectionModel(
        n_star=n_star,
        mu_below=segmented.mu_below,
        intercept=segmented.intercept,
        bins=bins,
        segmented=segmented,
    )


# ---------------------------------------------------------------------------
# Entropy restricted to unchanged positions


@dataclass(frozen=True)
class RestrictedEntropyRecord:
    fund_id: str
    n_i: int
    n_restricted: int
    full_entropy: float
    restricted_entropy: float
    value: float


def restricted_entropy(
    snapshot_t: UniverseSnapshot,
    snapshot_next: UniverseSnapshot,
    s_mc: Callable[[np.ndarray], np.ndarray],
) -> tuple[list[RestrictedEntropyRecord], list[str]]:
    """Entropy over the positions a fund holds in both snapshots.

    Weights are the later snapshot's values on the common securities.  The
    restricted scaled entropy is multiplied by ``s_mc(n_i) / s_mc(n_restricted)``
    to remove the trivial dependence on the number of positions.  Funds present
    in both snapshots with fewer than two common positions are returned in the
    second list.
    """
    earlier = snapshot_t.fund_index()
    records, skipped = [], []
    for i, fund_id in enumerate(snapshot_next.fund_ids):
        j = earlier.get(fund_id)
        if j is None:
            continue
        now = snapshot_next.fund(i)
        before = snapshot_t.fund(j).holdings
        common = [v for s, v in now.holdings.items() if s in before]
        if len(common) < 2:
            skipped.append(fund_id)
            continue
        n_i, n_r = now.n_positions, len(common)
        raw = scaled_entropy_of_weights(common)
        ratio = float(np.asarray(s_mc(n_i)) / np.asarray(s_mc(n_r)))
        records.append(
            RestrictedEntropyRecord(
                fund_id,
                n_i,
                n_r,
                scaled_entropy_of_weights(list(now.holdings.values())),
                raw,
                raw * ratio,
            )
        )
    return records, skipped


def metric_table(snapshot: UniverseSnapshot, values: Sequence[float]):
    """Rows ``(fund_id, n_i, value)`` for the entropy / f_max CSV tables."""
    return zip(snapshot.fund_ids.tolist(), snapshot.fund_positions.tolist(), list(values))
