"""In-memory model of one fund/security ownership snapshot.

The snapshot is a sparse bipartite graph: funds on one side, securities on the
other, and an edge (i, alpha) carrying the mark-to-market position value
``W_i,alpha`` whenever fund ``i`` holds security ``alpha``.  Edges are stored in
coordinate form (fund index, security index, value) sorted by fund then
security, which keeps every derived aggregate a single ``np.bincount`` away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np


class EmptyInputError(ValueError):
    """Raised when a snapshot would contain no securities or no positions."""


@dataclass(frozen=True)
class SecurityRecord:
    security_id: str
    capitalization: float
    price: float | None = None
    is_us: bool | None = None
    is_exchange_listed: bool | None = None

    def __post_init__(self):
        if not (self.capitalization > 0 and math.isfinite(self.capitalization)):
            raise ValueError(
                f"capitalization must be positive and finite, got {self.capitalization!r} "
                f"for {self.security_id!r}"
            )
        if self.price is not None and not self.price > 0:
            raise ValueError(f"price must be positive, got {self.price!r} for {self.security_id!r}")


@dataclass(frozen=True)
class FundRecord:
    fund_id: str
    holdings: Mapping[str, float]

    @property
    def n_positions(self) -> int:
        return len(self.holdings)

    @property
    def total_value(self) -> float:
        return float(math.fsum(self.holdings.values()))

    def weights(self) -> np.ndarray:
        values = np.fromiter(self.holdings.values(), dtype=float, count=len(self.holdings))
        return values / values.sum()


@dataclass(frozen=True)
class RejectedRow:
    row: int
    reason: str


def _optional_bool_code(value: bool | None) -> int:
    if value is None:
        return -1
    return int(bool(value))


@dataclass(frozen=True, eq=False)
class UniverseSnapshot:
    """Immutable snapshot with cached aggregates.

    Use :func:`build_snapshot` (records) or :meth:`from_arrays` (already-indexed
    edges) rather than calling the constructor directly.

    Attributes
    ----------
    fund_ids, security_ids : ndarray of str
    capitalization, price : ndarray of float
        ``price`` is NaN where unknown.
    is_us, is_listed : ndarray of int8
        1 true, 0 false, -1 unknown.
    edge_fund, edge_security, edge_value : ndarray
        Coordinate-form holdings, sorted by (fund, security), values > 0.
    """

    fund_ids: np.ndarray
    security_ids: np.ndarray
    capitalization: np.ndarray
    price: np.ndarray
    is_us: np.ndarray
    is_listed: np.ndarray
    edge_fund: np.ndarray
    edge_security: np.ndarray
    edge_value: np.ndarray
    as_of: date | None = None
    rejected: tuple[RejectedRow, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_arrays(
        cls,
        *,
        fund_ids: Sequence[str],
        security_ids: Sequence[str],
        capitalization,
        edge_fund,
        edge_security,
        edge_value,
        price=None,
        is_us=None,
        is_listed=None,
        as_of: date | None = None,
        rejected: Iterable[RejectedRow] = (),
    ) -> "UniverseSnapshot":
        """Assemble a snapshot from indexed edges.

        Duplicate (fund, security) edges are summed.  Funds left without any
        edge are dropped; every security is kept, held or not.
        """
        security_ids = np.asarray(security_ids, dtype=object)
        M = len(security_ids)
        if M == 0:
            raise EmptyInputError("snapshot needs at least one security")
        cap = np.asarray(capitalization, dtype=float)
        if cap.shape != (M,):
            raise ValueError("capitalization must have one entry per security")
        if np.any(~(cap > 0)) or not np.all(np.isfinite(cap)):
            raise ValueError("all capitalizations must be positive and finite")
        if len(set(security_ids.tolist())) != M:
            raise ValueError("security_id values must be unique")

        price = np.full(M, np.nan) if price is None else np.asarray(price, dtype=float)
        is_us = np.full(M, -1, np.int8) if is_us is None else np.asarray(is_us, dtype=np.int8)
        is_listed = (
            np.full(M, -1, np.int8) if is_listed is None else np.asarray(is_listed, dtype=np.int8)
        )

        fund_ids = np.asarray(fund_ids, dtype=object)
        ef = np.asarray(edge_fund, dtype=np.int64)
        es = np.asarray(edge_security, dtype=np.int64)
        ev = np.asarray(edge_value, dtype=float)
        if not (ef.shape == es.shape == ev.shape):
            raise ValueError("edge arrays must have equal length")
        if ev.size and not np.all(ev > 0):
            raise ValueError("position values must be strictly positive")
        if ef.size == 0:
            raise EmptyInputError("snapshot needs at least one position")

        # sum duplicates and sort by (fund, security)
        key = ef * M + es
        uniq, inverse = np.unique(key, return_inverse=True)
        values = np.bincount(inverse, weights=ev, minlength=uniq.size)
        ef, es = uniq // M, uniq % M

        # drop funds without positions and renumber densely
        held = np.unique(ef)
        if held.size != len(fund_ids):
            remap = np.full(len(fund_ids), -1, dtype=np.int64)
            remap[held] = np.arange(held.size)
            fund_ids = fund_ids[held]
            ef = remap[ef]

        return cls(
            fund_ids=fund_ids,
            security_ids=security_ids,
            capitalization=cap,
            price=price,
            is_us=is_us,
            is_listed=is_listed,
            edge_fund=ef,
            edge_security=es,
            edge_value=values,
            as_of=as_of,
            rejected=tuple(rejected),
        )

    # -- derived aggregates -------------------------------------------------

    @property
    def M(self) -> int:
        return len(self.security_ids)

    @property
    def n_funds(self) -> int:
        return len(self.fund_ids)

    @property
    def n_edges(self) -> int:
        return int(self.edge_value.size)

    def _cached(self, name, compute):
        if name not in self._cache:
            arr = compute()
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)
            self._cache[name] = arr
        return self._cache[name]

    @property
    def fund_value(self) -> np.ndarray:
        """W_i: total reported long value per fund."""
        return self._cached(
            "W", lambda: np.bincount(self.edge_fund, weights=self.edge_value, minlength=self.n_funds)
        )

    @property
    def fund_positions(self) -> np.ndarray:
        """n_i: number of distinct securities held per fund."""
        return self._cached("n", lambda: np.bincount(self.edge_fund, minlength=self.n_funds))

    @property
    def security_investors(self) -> np.ndarray:
        """m_alpha: number of funds holding each security."""
        return self._cached("m", lambda: np.bincount(self.edge_security, minlength=self.M))

    @property
    def fund_offsets(self) -> np.ndarray:
        """CSR row pointer: edges of fund i live in ``[offsets[i], offsets[i+1])``."""
        return self._cached(
            "offsets", lambda: np.concatenate([[0], np.cumsum(self.fund_positions)])
        )

    def security_index(self) -> dict[str, int]:
        return self._cached("sec_index", lambda: {s: k for k, s in enumerate(self.security_ids)})

    def fund_index(self) -> dict[str, int]:
        return self._cached("fund_index", lambda: {f: k for k, f in enumerate(self.fund_ids)})

    # -- record views ---------------------------------------------------------

    def security(self, k: int) -> SecurityRecord:
        price = self.price[k]
        return SecurityRecord(
            security_id=self.security_ids[k],
            capitalization=float(self.capitalization[k]),
            price=None if np.isnan(price) else float(price),
            is_us=None if self.is_us[k] < 0 else bool(self.is_us[k]),
            is_exchange_listed=None if self.is_listed[k] < 0 else bool(self.is_listed[k]),
        )

    @property
    def securities(self) -> list[SecurityRecord]:
        return [self.security(k) for k in range(self.M)]

    def fund(self, key: str | int) -> FundRecord:
        i = self.fund_index()[key] if isinstance(key, str) else int(key)
        lo, hi = self.fund_offsets[i], self.fund_offsets[i + 1]
        secs = self.security_ids[self.edge_security[lo:hi]]
        return FundRecord(
            fund_id=self.fund_ids[i],
            holdings=dict(zip(secs.tolist(), self.edge_value[lo:hi].tolist())),
        )

    @property
    def funds(self) -> list[FundRecord]:
        return list(self.iter_funds())

    def iter_funds(self) -> Iterator[FundRecord]:
        for i in range(self.n_funds):
            yield self.fund(i)

    def holdings_rows(self) -> Iterator[tuple[str, str, float]]:
        fids = self.fund_ids[self.edge_fund]
        sids = self.security_ids[self.edge_security]
        return zip(fids.tolist(), sids.tolist(), self.edge_value.tolist())

    def subset(self, keep_funds: np.ndarray, keep_securities: np.ndarray) -> "UniverseSnapshot":
        """Restrict to the masked funds and securities.

        Positions in dropped securities disappear from their funds, so W_i and
        n_i are recomputed; funds left empty are dropped.
        """
        keep_funds = np.asarray(keep_funds, dtype=bool)
        keep_securities = np.asarray(keep_securities, dtype=bool)
        if not keep_securities.any():
            raise EmptyInputError("no securities left")
        edge_mask = keep_funds[self.edge_fund] & keep_securities[self.edge_security]
        if not edge_mask.any():
            raise EmptyInputError("no positions left")
        sec_map = np.cumsum(keep_securities) - 1
        fund_map = np.cumsum(keep_funds) - 1
        return UniverseSnapshot.from_arrays(
            fund_ids=self.fund_ids[keep_funds],
            security_ids=self.security_ids[keep_securities],
            capitalization=self.capitalization[keep_securities],
            price=self.price[keep_securities],
            is_us=self.is_us[keep_securities],
            is_listed=self.is_listed[keep_securities],
            edge_fund=fund_map[self.edge_fund[edge_mask]],
            edge_security=sec_map[self.edge_security[edge_mask]],
            edge_value=self.edge_value[edge_mask],
            as_of=self.as_of,
        )

    def check_invariants(self) -> None:
        if int(self.fund_positions.sum()) != int(self.security_investors.sum()):
            raise AssertionError("edge-count conservation violated")
        if self.n_funds and not np.all(self.fund_value > 0):
            raise AssertionError("every retained fund must have W_i > 0")
        if self.M < 1:
            raise AssertionError("M must be at least 1")

    def aggregates_equal(self, other: "UniverseSnapshot") -> bool:
        """True when both snapshots carry the same ids and derived aggregates."""
        return (
            np.array_equal(self.fund_ids, other.fund_ids)
            and np.array_equal(self.security_ids, other.security_ids)
            and np.array_equal(self.capitalization, other.capitalization)
            and np.array_equal(self.fund_value, other.fund_value)
            and np.array_equal(self.fund_positions, other.fund_positions)
            and np.array_equal(self.security_investors, other.security_investors)
        )


def build_snapshot(
    securities: Sequence[SecurityRecord],
    holdings: Iterable[tuple[str, str, float]],
    as_of: date | None = None,
) -> UniverseSnapshot:
    """Build a snapshot from security records and (fund, security, value) rows.

    Rows naming an unknown security or carrying a non-positive or non-finite
    value are not fatal; they are collected in ``snapshot.rejected`` with their
    0-based row number.  Repeated (fund, security) rows are summed.
    """
    if not securities:
        raise EmptyInputError("no securities given")
    sec_ids = [s.security_id for s in securities]
    index = {s: k for k, s in enumerate(sec_ids)}
    if len(index) != len(sec_ids):
        raise ValueError("security_id values must be unique")

    fund_index: dict[str, int] = {}
    ef, es, ev = [], [], []
    rejected = []
    for row, (fund_id, security_id, value) in enumerate(holdings):
        k = index.get(security_id)
        if k is None:
            rejected.append(RejectedRow(row, f"unknown security_id {security_id!r}"))
            continue
        try:
            value = float(value)
        except (TypeError, ValueError):
            rejected.append(RejectedRow(row, "unparsable value"))
            continue
        if not math.isfinite(value):
            rejected.append(RejectedRow(row, "non-finite value"))
            continue
        if value <= 0:
            rejected.append(RejectedRow(row, "non-positive value"))
            continue
        ef.append(fund_index.setdefault(fund_id, len(fund_index)))
        es.append(k)
        ev.append(value)
    if not ev:
        raise EmptyInputError("no valid holdings rows")

    def opt(v):
        return np.nan if v is None else v

    return UniverseSnapshot.from_arrays(
        fund_ids=list(fund_index),
        security_ids=sec_ids,
        capitalization=[s.capitalization for s in securities],
        price=[opt(s.price) for s in securities],
        is_us=[_optional_bool_code(s.is_us) for s in securities],
        is_listed=[_optional_bool_code(s.is_exchange_listed) for s in securities],
        edge_fund=ef,
        edge_security=es,
        edge_value=ev,
        as_of=as_of,
        rejected=rejected,
    )


def capitalization_rank_order(snapshot: UniverseSnapshot) -> np.ndarray:
    """Security indices sorted from largest to smallest capitalization.

    Ties go to the lexicographically smaller security_id.
    """
    ids = snapshot.security_ids.astype(str)
    return np.lexsort((ids, -snapshot.capitalization))


def scaled_rank_array(snapshot: UniverseSnapshot) -> np.ndarray:
    """rho_alpha = r_alpha / M aligned with ``snapshot.security_ids``."""
    order = capitalization_rank_order(snapshot)
    ranks = np.empty(snapshot.M, dtype=np.int64)
    ranks[order] = np.arange(1, snapshot.M + 1)
    return ranks / snapshot.M


def scaled_capitalization_ranks(snapshot: UniverseSnapshot) -> dict[str, float]:
    """Map security_id to its scaled capitalization rank in (0, 1]."""
    return dict(zip(snapshot.security_ids.tolist(), scaled_rank_array(snapshot).tolist()))
