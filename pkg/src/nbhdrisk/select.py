"""Factor-group selection by deviance explained under a p-value filter.

Every candidate subset is fitted as an additive model. A candidate counts
only if each of its terms has p <= threshold; the winner is the counting
candidate with the largest deviance explained.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

from .gam import GamConfig, GamError, fit_gam
from .ingest import sufficient_factors

DEV_TIE = 1e-6


@dataclass(frozen=True)
class ExclusivityGroup:
    """Factors of which at most one may enter a model.

    ``scope`` is ``"all"`` (every analysis) or ``"overall"`` (only the
    all-neighborhood analysis, not per-class ones).
    """
    name: str
    members: tuple
    scope: str = "all"

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError(f"exclusivity group {self.name!r} needs >= 2 members")
        if self.scope not in ("all", "overall"):
            raise ValueError(f"unknown group scope {self.scope!r}")


def check_groups(groups):
    seen = {}
    for g in groups:
        for m in g.members:
            if m in seen:
                raise ValueError(f"factor {m!r} is in groups {seen[m]!r} and {g.name!r}")
            seen[m] = g.name


@dataclass(frozen=True)
class TermStat:
    name: str
    edf: float
    p_value: float
    lam: float


@dataclass(frozen=True)
class SubsetScore:
    factors: tuple
    deviance_explained: float
    all_significant: bool
    terms: tuple = ()
    error: str = ""
    index: int = 0

    @property
    def failed(self):
        return bool(self.error)


@dataclass(frozen=True)
class SelectionResult:
    winner: SubsetScore | None
    ranked: tuple
    mode: str
    exhaustive: bool = True
    n_evaluated: int = 0
    notes: tuple = field(default=())


def score_subset(table, factors, config=None, threshold=0.10, cache=None, index=0):
    factors = tuple(factors)
    try:
        fit = fit_gam(table, factors, config=config, cache=cache)
    except GamError as exc:
        return SubsetScore(factors, math.nan, False, error=str(exc), index=index)
    stats = tuple(TermStat(t.name, t.edf, t.p_value, t.lam) for t in fit.terms)
    ok = all(s.p_value <= threshold for s in stats)
    return SubsetScore(factors, fit.deviance_explained, ok, stats, index=index)


def rank_key(s):
    """Sort key: significant first, then deviance desc, size asc, names."""
    dev = -math.inf if s.failed else s.deviance_explained
    return (not s.all_significant, -dev, len(s.factors), s.factors)


def rank(scores):
    """Order candidates by :func:`rank_key`, with the tie-broken winner first."""
    ordered = sorted(scores, key=rank_key)
    win = pick_winner(scores)
    if win is not None:
        ordered.remove(win)
        ordered.insert(0, win)
    return tuple(ordered)


def pick_winner(scores):
    sig = [s for s in scores if s.all_significant and not s.failed]
    if not sig:
        return None
    top = max(s.deviance_explained for s in sig)
    tied = [s for s in sig if s.deviance_explained >= top - DEV_TIE]
    return min(tied, key=lambda s: (len(s.factors), s.factors))


def single_factor_scan(table, factors=None, config=None, threshold=0.10, cache=None):
    """One univariate smooth per factor, ranked by deviance explained.

    ``factors`` defaults to every variation-sufficient factor of ``table``.
    Failed fits are kept as entries with ``error`` set, ranked last.
    """
    config = config or GamConfig()
    if factors is None:
        factors = sufficient_factors(table, config.k)
    if not factors:
        raise ValueError("no variation-sufficient factor to scan")
    scores = [score_subset(table, (f,), config, threshold, cache, index=i)
              for i, f in enumerate(factors)]
    return sorted(scores, key=lambda s: (s.failed, -(s.deviance_explained if not s.failed
                                                     else -math.inf), s.index))


def enumerate_subsets(factors, groups=(), max_size=6):
    """All subsets of size 1..max_size with at most one member per group.

    Order: by size, then ``itertools.combinations`` order of ``factors``.
    """
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    check_groups(groups)
    owner = {m: g.name for g in groups for m in g.members}
    out = []
    for size in range(1, min(max_size, len(factors)) + 1):
        for combo in itertools.combinations(factors, size):
            tags = [owner[f] for f in combo if f in owner]
            if len(tags) == len(set(tags)):
                out.append(tuple(combo))
    return out


def count_subsets(factors, groups=(), max_size=6):
    """Number of candidates :func:`enumerate_subsets` would emit, without listing them."""
    owner = {m: g.name for g in groups for m in g.members}
    sizes = {}
    for f in factors:
        key = owner.get(f, f)
        sizes[key] = sizes.get(key, 0) + 1
    # generating polynomial: prod over blocks of (1 + size * t)
    poly = [1]
    for s in sizes.values():
        nxt = poly + [0]
        for i in range(len(poly)):
            nxt[i + 1] += poly[i] * s
        poly = nxt
    return sum(poly[1:max_size + 1])


def _greedy(table, factors, groups, max_size, config, threshold, cache):
    owner = {m: g.name for g in groups for m in g.members}
    chosen = ()
    best_dev = -math.inf
    evaluated = []
    while len(chosen) < max_size:
        used = {owner[f] for f in chosen if f in owner}
        step = []
        for f in factors:
            if f in chosen or (f in owner and owner[f] in used):
                continue
            s = score_subset(table, tuple(sorted(chosen + (f,), key=factors.index)),
                             config, threshold, cache, index=len(evaluated))
            evaluated.append(s)
            step.append(s)
        win = pick_winner(step)
        if win is None or win.deviance_explained <= best_dev:
            break
        chosen, best_dev = win.factors, win.deviance_explained
    return evaluated


def search_best_group(table, factors=None, groups=(), max_size=6, budget=5000, config=None,
                      threshold=0.10, cache=None):
    """Fit every admissible subset and return the best all-significant one.

    When the candidate count exceeds ``budget`` a greedy forward pass is used
    instead: starting from the empty set, add the factor giving the largest
    significant deviance, and stop when no addition improves it. The result
    then has ``exhaustive = False``.
    """
    config = config or GamConfig()
    if factors is None:
        factors = sufficient_factors(table, config.k)
    factors = list(factors)
    if not factors:
        raise ValueError("no candidate factors")
    cache = {} if cache is None else cache
    total = count_subsets(factors, groups, max_size)
    if total <= budget:
        cands = enumerate_subsets(factors, groups, max_size)
        scores = [score_subset(table, c, config, threshold, cache, index=i)
                  for i, c in enumerate(cands)]
        exhaustive = True
    else:
        scores = _greedy(table, factors, groups, max_size, config, threshold, cache)
        exhaustive = False
    return SelectionResult(winner=pick_winner(scores), ranked=rank(scores),
                           mode="multi_factor", exhaustive=exhaustive,
                           n_evaluated=len(scores))
