"""Independent reference implementations used only by the tests."""

import math

import numpy as np

from crowd_scaling.universe import SecurityRecord


def loess_direct(x, y, x_eval, span, robustness_iters):
    """Point-by-point LOWESS: full sort for the bandwidth, lstsq for each local line."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n = len(x)
    k = min(n, max(1, math.ceil(span * n)))

    def fit_at(x0, rob):
        d = np.abs(x - x0)
        h = np.sort(d)[k - 1]
        if h == 0:
            sel = d == 0
            w = rob[sel]
            return float(w @ y[sel] / w.sum()) if w.sum() > 0 else float(y[sel].mean())
        u = d / h
        kern = np.where(u < 1, (1 - u**3) ** 3, 0.0)
        w = kern * rob
        if w.sum() <= 0:
            w = kern
        if np.count_nonzero(w) < 3 or np.ptp(x[w > 0]) == 0:
            return float(w @ y / w.sum())
        sw = np.sqrt(w)
        A = np.column_stack([np.ones(n), x - x0]) * sw[:, None]
        coef, *_ = np.linalg.lstsq(A, y * sw, rcond=None)
        return float(coef[0])

    rob = np.ones(n)
    floor = 1e-12 * max(1.0, float(np.max(np.abs(y))))
    for _ in range(robustness_iters):
        fitted = np.array([fit_at(xi, rob) for xi in x])
        r = y - fitted
        s = max(float(np.median(np.abs(r))), floor)
        u = np.abs(r / (6 * s))
        rob = np.where(u < 1, (1 - u**2) ** 2, 0.0)
    return np.array([fit_at(x0, rob) for x0 in np.asarray(x_eval, float)])


def grid_search_break(u, y, grid):
    """Break minimising the residual sum of squares of the continuous broken line."""
    best = None
    for b in grid:
        A = np.column_stack([np.ones_like(u), u, np.maximum(u - b, 0.0)])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        ssr = float(np.sum((y - A @ coef) ** 2))
        if best is None or ssr < best[0]:
            best = (ssr, b, coef)
    return best


def broken_line(u, intercept, mu_below, mu_above, log_break):
    return intercept + mu_below * u + (mu_above - mu_below) * np.maximum(u - log_break, 0.0)


def successive_inclusion_probs(weights, k):
    """Exact inclusion probabilities of k successive draws proportional to remaining weight."""
    w = np.asarray(weights, float)
    M = w.size
    incl = np.zeros(M)

    def rec(taken, prob, depth):
        if depth == k:
            for t in taken:
                incl[t] += prob
            return
        rest = w.sum() - sum(w[t] for t in taken)
        for j in range(M):
            if j in taken:
                continue
            rec(taken + (j,), prob * w[j] / rest, depth + 1)

    rec((), 1.0, 0)
    return incl


def naive_filter(securities, rows, cfg):
    """Brute-force fixed point over plain dicts, one rule at a time."""
    secs = {s.security_id: s for s in securities}
    hold = {}
    for f, s, v in rows:
        hold.setdefault(f, {})
        hold[f][s] = hold[f].get(s, 0.0) + v
    while True:
        changed = False
        m = {s: 0 for s in secs}
        for f, h in hold.items():
            for s in h:
                m[s] += 1
        for sid, rec in list(secs.items()):
            bad = rec.capitalization < cfg.min_capitalization
            bad |= rec.price is not None and rec.price < cfg.min_price
            bad |= cfg.require_listed and rec.is_exchange_listed is False
            bad |= cfg.us_only and rec.is_us is False
            bad |= m[sid] < cfg.min_investors
            if bad:
                del secs[sid]
                changed = True
        for f in list(hold):
            hold[f] = {s: v for s, v in hold[f].items() if s in secs}
            if not hold[f]:
                del hold[f]
        for f in list(hold):
            if sum(hold[f].values()) < cfg.min_fund_value or len(hold[f]) < cfg.min_positions:
                del hold[f]
                changed = True
        if not changed:
            return secs, hold


def cascade_universe():
    """Holdings where each removal round exposes another violation."""
    secs = [SecurityRecord(s, 1e9, 20.0, True, True) for s in ["X", "Y"] + [f"P{k}" for k in range(10)]]
    P = [f"P{k}" for k in range(10)]
    rows = [("F0", s, 100.0) for s in ["X"] + P[:5]]
    rows += [("F1", s, 1e6) for s in ["X", "Y", "P0", "P1", "P2"]]
    for i in range(2, 10):
        rows += [(f"F{i}", s, 1e6) for s in ["X", "Y"] + P]
    rows += [("F10", s, 1e6) for s in ["Y"] + P]
    rows += [("F11", s, 1e6) for s in P]
    return secs, rows
