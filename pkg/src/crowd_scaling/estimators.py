"""Scaling estimators: robust LOESS, log-log power laws and the broken power law.

All three follow the scikit-learn estimator protocol (``fit`` returns ``self``,
learned state ends with an underscore, hyper-parameters are constructor
arguments) so they can sit in pipelines and be cloned.  The functional entry
points :func:`loess_fit`, :func:`fit_power_law` and :func:`fit_segmented`
return plain result records for scripts and serialization.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_1d, check_fraction, check_positive, check_xy, split_points

# ---------------------------------------------------------------------------
# LOESS


@dataclass(frozen=True)
class LoessCurve:
    x: np.ndarray
    y: np.ndarray
    span: float
    robustness_iters: int

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError("abscissae and ordinates differ in length")
        if self.x.size > 1 and not np.all(np.diff(self.x) > 0):
            raise ValueError("abscissae must be strictly increasing")

    def __call__(self, x):
        """Linear interpolation of the curve (no extrapolation beyond the ends)."""
        return np.interp(x, self.x, self.y)


def tricube(u):
    u = np.abs(u)
    return np.where(u < 1.0, (1.0 - u**3) ** 3, 0.0)


def bisquare(u):
    u = np.abs(u)
    return np.where(u < 1.0, (1.0 - u**2) ** 2, 0.0)


def _neighbour_count(span: float, n: int) -> int:
    return min(n, max(1, int(math.ceil(span * n))))


def _window_starts(xs, xe, k):
    """Start of the k-nearest window in sorted ``xs`` for each evaluation point.

    The k nearest neighbours of a point form a contiguous run of the sorted
    data; its start is the smallest l with ``xe - xs[l] <= xs[l + k] - xe``.
    """
    n = xs.size
    lo = np.zeros(xe.size, dtype=np.int64)
    hi = np.full(xe.size, n - k, dtype=np.int64)
    if k == n:
        return lo
    active = lo < hi
    while active.any():
        mid = (lo + hi) // 2
        probe = np.minimum(mid, n - k - 1)
        go_left = (xe - xs[probe]) <= (xs[probe + k] - xe)
        hi = np.where(active & go_left, mid, hi)
        lo = np.where(active & ~go_left, mid + 1, lo)
        active = lo < hi
    return lo


def _local_linear(x, y, robustness, x_eval, k, chunk_elems=2_000_000):
    """Degree-1 tricube-weighted local regression evaluated at ``x_eval``.

    The bandwidth at each evaluation point is the distance to its k-th nearest
    data point; only points closer than that get weight.  Windows with fewer
    than three positively weighted points, or with no spread in x, return the
    weighted mean.
    """
    order = np.argsort(x, kind="stable")
    xs, ys, rs = x[order], y[order], robustness[order]
    n = xs.size
    out = np.empty(x_eval.size)
    step = max(1, chunk_elems // k)
    x_scale = float(xs[-1] - xs[0]) or 1.0
    for start in range(0, x_eval.size, step):
        xe = x_eval[start : start + step]
        idx = _window_starts(xs, xe, k)[:, None] + np.arange(k)[None, :]
        xw, yw = xs[idx], ys[idx]
        d = np.abs(xw - xe[:, None])
        h = d.max(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            kernel = tricube(d / h[:, None])
        zero_h = h <= 0
        if zero_h.any():
            # every neighbour sits on the evaluation point: use all exact ties
            for r in np.flatnonzero(zero_h):
                a, b = np.searchsorted(xs, xe[r], "left"), np.searchsorted(xs, xe[r], "right")
                rw = rs[a:b]
                sw = rw.sum()
                kernel[r] = 0.0
                out[start + r] = (rw @ ys[a:b]) / sw if sw > 0 else ys[a:b].mean()
        w = kernel * rs[idx]
        sw = w.sum(axis=1)
        # whole window robust-weighted to zero: fall back to the kernel alone
        dead = (sw <= 0) & ~zero_h
        if dead.any():
            w[dead] = kernel[dead]
            sw[dead] = w[dead].sum(axis=1)
        sw_safe = np.where(sw > 0, sw, 1.0)
        xbar = np.einsum("ij,ij->i", w, xw) / sw_safe
        ybar = np.einsum("ij,ij->i", w, yw) / sw_safe
        dx = xw - xbar[:, None]
        sxx = np.einsum("ij,ij->i", w, dx * dx)
        sxy = np.einsum("ij,ij->i", w, dx * (yw - ybar[:, None]))
        n_eff = np.count_nonzero(w > 0, axis=1)
        ok = (n_eff >= 3) & (sxx > 1e-14 * sw_safe * x_scale**2)
        slope = np.where(ok, sxy / np.where(ok, sxx, 1.0), 0.0)
        fitted = ybar + slope * (xe - xbar)
        out[start : start + step] = np.where(zero_h, out[start : start + step], fitted)
    return out


def _local_linear_at_data(x, y, robustness, k):
    # the local fit depends only on the evaluation abscissa, so repeated x
    # values (integer counts in log space) are fitted once
    ux, inverse = np.unique(x, return_inverse=True)
    return _local_linear(x, y, robustness, ux, k)[inverse]


def robustness_scale_floor(y) -> float:
    """Lower bound on the residual scale used by the bisquare step.

    Keeps residuals at rounding level from being treated as outliers when the
    data sit exactly on a line.
    """
    return 1e-12 * max(1.0, float(np.max(np.abs(y))))


class LoessRegressor(RegressorMixin, BaseEstimator):
    """Robust locally weighted linear regression (LOWESS).

    Parameters
    ----------
    span : float
        Fraction of points in each local window.
    robustness_iters : int
        Number of bisquare reweighting passes after the initial fit.
    """

    def __init__(self, span=0.3, robustness_iters=3):
        self.span = span
        self.robustness_iters = robustness_iters

    def fit(self, X, y):
        x, y = check_xy(X, y, min_samples=10)
        check_fraction(self.span, "span")
        if self.robustness_iters < 0:
            raise ValueError("robustness_iters must be >= 0")
        k = _neighbour_count(self.span, x.size)
        delta = np.ones_like(x)
        floor = robustness_scale_floor(y)
        for _ in range(self.robustness_iters):
            resid = y - _local_linear_at_data(x, y, delta, k)
            s = max(float(np.median(np.abs(resid))), floor)
            delta = bisquare(resid / (6.0 * s))
        self.x_ = x
        self.y_ = y
        self.n_neighbours_ = k
        self.robustness_weights_ = delta
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "robustness_weights_")
        xe = as_1d(X)
        return _local_linear(self.x_, self.y_, self.robustness_weights_, xe, self.n_neighbours_)

    def curve(self, eval_at=None, n_eval=100) -> LoessCurve:
        check_is_fitted(self, "robustness_weights_")
        if eval_at is None:
            xe = np.linspace(self.x_.min(), self.x_.max(), n_eval)
        else:
            xe = np.unique(as_1d(eval_at, "eval_at"))
        return LoessCurve(xe, self.predict(xe), self.span, self.robustness_iters)


def loess_fit(points, span=0.3, robustness_iters=3, eval_at=None, n_eval=100) -> LoessCurve:
    """Robust LOESS of (x, y) points, evaluated on ``eval_at``.

    Points and abscissae are expected in log10 units.  Without ``eval_at`` the
    curve is evaluated on ``n_eval`` equispaced abscissae over the data range.
    """
    x, y = split_points(points)
    est = LoessRegressor(span=span, robustness_iters=robustness_iters).fit(x, y)
    return est.curve(eval_at, n_eval=n_eval)


# ---------------------------------------------------------------------------
# Power law


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    intercept: float
    exponent_stderr: float
    residual_variance: float
    n_points: int
    x_min: float = 0.0

    def to_dict(self) -> dict:
        return {
            "exponent": self.exponent,
            "intercept": self.intercept,
            "stderr": self.exponent_stderr,
            "n_points": self.n_points,
            "x_min": self.x_min,
        }


class PowerLawRegressor(RegressorMixin, BaseEstimator):
    """Ordinary least squares of log10 y on log10 x, for x >= ``x_min``.

    ``predict`` returns values in raw units, ``10**intercept * x**exponent``.
    """

    def __init__(self, x_min=0.0):
        self.x_min = x_min

    def fit(self, X, y):
        x, y = check_xy(X, y)
        check_positive(x, "x")
        check_positive(y, "y")
        keep = x >= self.x_min
        if keep.sum() < 3:
            raise ValueError(
                f"power-law fit needs at least 3 points with x >= {self.x_min}, got {int(keep.sum())}"
            )
        u, v = np.log10(x[keep]), np.log10(y[keep])
        n = u.size
        ubar, vbar = u.mean(), v.mean()
        du = u - ubar
        sxx = float(du @ du)
        if sxx <= 0:
            raise ValueError("all x values are equal; exponent is undefined")
        slope = float(du @ (v - vbar)) / sxx
        intercept = vbar - slope * ubar
        resid = v - (intercept + slope * u)
        resvar = float(resid @ resid) / (n - 2)
        self.exponent_ = slope
        self.intercept_ = float(intercept)
        self.exponent_stderr_ = math.sqrt(resvar / sxx)
        self.residual_variance_ = resvar
        self.n_points_ = n
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "exponent_")
        x = as_1d(X)
        return 10.0**self.intercept_ * x**self.exponent_

    def result(self) -> PowerLawFit:
        check_is_fitted(self, "exponent_")
        return PowerLawFit(
            self.exponent_,
            self.intercept_,
            self.exponent_stderr_,
            self.residual_variance_,
            self.n_points_,
            float(self.x_min),
        )


def fit_power_law(points, x_min=0.0) -> PowerLawFit:
    """Fit ``log10 y = exponent * log10 x + intercept`` on points with x >= x_min."""
    x, y = split_points(points)
    return PowerLawRegressor(x_min=x_min).fit(x, y).result()


# ---------------------------------------------------------------------------
# Segmented (broken) power law


class NoBreakError(ValueError):
    """The two fitted slopes coincide, so the break point is not identified."""


@dataclass(frozen=True)
class SegmentedFit:
    mu_below: float
    mu_above: float
    log_break: float
    intercept: float
    log_likelihood: float
    converged: bool
    iterations: int
    n_points: int = 0
    residual_variance: float = float("nan")

    @property
    def n_star(self) -> float:
        return 10.0**self.log_break

    def predict_log(self, u):
        """log10 W at log10 n = u under the fitted broken line."""
        u = np.asarray(u, dtype=float)
        return (
            self.intercept
            + self.mu_below * u
            + (self.mu_above - self.mu_below) * np.maximum(u - self.log_break, 0.0)
        )

    def to_dict(self) -> dict:
        return {
            "mu_below": self.mu_below,
            "mu_above": self.mu_above,
            "n_star": self.n_star,
            "intercept": self.intercept,
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SegmentedFit":
        return cls(
            mu_below=float(data["mu_below"]),
            mu_above=float(data["mu_above"]),
            log_break=math.log10(float(data["n_star"])),
            intercept=float(data["intercept"]),
            log_likelihood=float(data["log_likelihood"]),
            converged=bool(data["converged"]),
            iterations=int(data["iterations"]),
        )


def _gaussian_loglik(resid) -> float:
    n = resid.size
    var = max(float(resid @ resid) / n, np.finfo(float).tiny)
    return -0.5 * n * (math.log(2 * math.pi * var) + 1.0)


def _broken_line_ols(u, y, b):
    A = np.column_stack([np.ones_like(u), u, np.maximum(u - b, 0.0)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef, y - A @ coef


def _muggeo(u, y, b0, tol, max_iter):
    """Iterate the linearised break-point update from ``b0``.

    Returns (break, iterations, converged).
    """
    us = np.sort(u)
    lo, hi = us[1], us[-2]
    b = float(np.clip(b0, lo, hi))
    ones = np.ones_like(u)
    pinned = 0
    for it in range(1, max_iter + 1):
        right = u > b
        A = np.column_stack([ones, u, np.where(right, u - b, 0.0), right.astype(float)])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        slope_diff, gap = coef[2], coef[3]
        if abs(slope_diff) < 1e-8:
            raise NoBreakError("no detectable break: slopes on both sides coincide")
        # regressor is +theta(u - b), whose coefficient is -slope_diff * (b_true - b)
        b_new = b - gap / slope_diff
        if b_new <= lo or b_new >= hi:
            b_new = float(np.clip(b_new, lo, hi))
            pinned += 1
            if pinned >= 2:
                return b_new, it, False
        else:
            pinned = 0
        if abs(b_new - b) < tol:
            return b_new, it, True
        b = b_new
    return b, max_iter, False


class SegmentedRegressor(RegressorMixin, BaseEstimator):
    """Continuous two-slope line in log-log space with an estimated break.

    Model: ``y = c + mu_below*u + (mu_above - mu_below)*(u - b)*[u > b]`` with
    ``u = log10 n`` and ``y = log10 W``.  The break is found by Muggeo's
    iterative linearisation.

    Parameters
    ----------
    init_break : float or None
        Starting break in log10 units; the median of ``u`` when None.
    n_init : int
        When > 1, also start from that many quantiles of ``u`` (10%..90%) and
        keep the converged fit with the highest likelihood.
    tol, max_iter : convergence controls on the break update.
    """

    def __init__(self, init_break=None, n_init=1, tol=1e-6, max_iter=50):
        self.init_break = init_break
        self.n_init = n_init
        self.tol = tol
        self.max_iter = max_iter

    def _starts(self, u):
        starts = [float(np.median(u)) if self.init_break is None else float(self.init_break)]
        if self.n_init > 1:
            starts += np.quantile(u, np.linspace(0.1, 0.9, self.n_init)).tolist()
        return starts

    def fit(self, X, y):
        u, y = check_xy(X, y, min_samples=20)
        if np.unique(u).size < 4:
            raise ValueError("need at least 4 distinct abscissae")
        best = None
        no_break = None
        for start in self._starts(u):
            try:
                b, iters, converged = _muggeo(u, y, start, self.tol, self.max_iter)
            except NoBreakError as exc:
                no_break = exc
                continue
            coef, resid = _broken_line_ols(u, y, b)
            cand = SegmentedFit(
                mu_below=float(coef[1]),
                mu_above=float(coef[1] + coef[2]),
                log_break=float(b),
                intercept=float(coef[0]),
                log_likelihood=_gaussian_loglik(resid),
                converged=converged,
                iterations=iters,
                n_points=u.size,
                residual_variance=float(resid @ resid) / u.size,
            )
            if best is None or (cand.converged, cand.log_likelihood) > (
                best.converged,
                best.log_likelihood,
            ):
                best = cand
        if best is None:
            raise no_break
        self.fit_ = best
        self.mu_below_ = best.mu_below
        self.mu_above_ = best.mu_above
        self.break_point_ = best.n_star
        self.intercept_ = best.intercept
        self.converged_ = best.converged
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.predict_log(as_1d(X))


def fit_segmented(points, init_break=None, n_init=1) -> SegmentedFit:
    """Fit the broken power law to (log10 n, log10 W) points."""
    u, y = split_points(points)
    return SegmentedRegressor(init_break=init_break, n_init=n_init).fit(u, y).fit_
