# mining_manager.py

"""
Candidate pools and triplet sampling for multi-label distance learning.

For every anchor with at least one disease we draw a random set of
negatives (no shared label) and positives (identical label set, optionally
mixed with partial matches), rank both by perceptual-hash distance to the
anchor, and let a curriculum window decide how hard the sampled triplets
are. Close negatives and distant positives are the hard ones.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from phash_manager import HashCache, HashCode

logger = logging.getLogger(__name__)

HIST_BINS = np.arange(0, 72, 8)


class MatchKind(Enum):
    EXACT = "exact"
    PARTIAL = "partial"
    DISJOINT = "disjoint"


def match_kind(a: np.ndarray, b: np.ndarray) -> MatchKind:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.shape} vs {b.shape}")
    if not (a & b).any():
        return MatchKind.DISJOINT
    if (a == b).all():
        return MatchKind.EXACT
    return MatchKind.PARTIAL


@dataclass
class PoolConfig:
    n_neg: int = 1000
    n_pos_max: int = 500
    partial_frac: float = 0.25
    allow_partial: bool = True
    hard_mining: bool = True
    ramp_epochs: int = 10
    window_floor: float = 0.1

    def __post_init__(self):
        if self.n_neg < 1 or self.n_pos_max < 1 or self.ramp_epochs < 1:
            raise ValueError("pool sizes and ramp_epochs must be positive")
        if not 0 <= self.partial_frac <= 1 or not 0 < self.window_floor <= 1:
            raise ValueError("partial_frac must lie in [0, 1] and window_floor in (0, 1]")


@dataclass
class CandidatePool:
    anchor_id: str
    positives: List[Tuple[str, MatchKind, int]] = field(default_factory=list)
    negatives: List[Tuple[str, int]] = field(default_factory=list)

    @property
    def poolless(self) -> bool:
        return not self.positives or not self.negatives

    @property
    def n_partial(self) -> int:
        return sum(kind is MatchKind.PARTIAL for _, kind, _ in self.positives)


@dataclass(frozen=True)
class TripletConstraint:
    anchor_id: str
    positive_id: str
    negative_id: str


class MiningCorpus:
    """Label matrix and hash codes of the samples that can be drawn into pools."""

    def __init__(self, samples: Sequence, hashes: Dict[str, HashCode]):
        self.ids = [s.sample_id for s in samples]
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        self.labels = np.stack([np.asarray(s.labels, dtype=bool) for s in samples])
        self.hash_bits = np.array([hashes[sid].bits for sid in self.ids], dtype=np.uint64)

    @classmethod
    def from_samples(cls, samples: Sequence, cache: Optional[HashCache] = None) -> "MiningCorpus":
        cache = cache or HashCache()
        return cls(samples, cache.build(samples))

    def distances(self, anchor: int, members: np.ndarray) -> np.ndarray:
        x = self.hash_bits[members] ^ self.hash_bits[anchor]
        return np.unpackbits(x.view(np.uint8)).reshape(-1, 64).sum(axis=1).astype(int)

    def match(self, a_id: str, b_id: str) -> MatchKind:
        return match_kind(self.labels[self.index[a_id]], self.labels[self.index[b_id]])


def _draw(rng: np.random.Generator, members: np.ndarray, k: int) -> np.ndarray:
    if k >= len(members):
        return members
    return rng.choice(members, size=k, replace=False)


def build_pool(anchor_id: str, corpus: MiningCorpus, rng: np.random.Generator,
               config: Optional[PoolConfig] = None) -> CandidatePool:
    config = config or PoolConfig()
    i = corpus.index[anchor_id]
    anchor = corpus.labels[i]
    if not anchor.any():
        raise ValueError(f"anchor {anchor_id} has no positive label and cannot be mined")

    others = np.ones(len(corpus.ids), dtype=bool)
    others[i] = False
    shared = (corpus.labels & anchor).any(axis=1)
    same = (corpus.labels == anchor).all(axis=1)
    exact = np.flatnonzero(same & others)
    partial = np.flatnonzero(shared & ~same & others)
    disjoint = np.flatnonzero(~shared & others)

    if config.allow_partial:
        # Partial share is taken from the realized pool size; a short kind is
        # backfilled with the other.
        target = min(config.n_pos_max, len(exact) + len(partial))
        n_partial = min(int(math.floor(config.partial_frac * target)), len(partial))
        n_exact = min(target - n_partial, len(exact))
        n_partial = min(len(partial), target - n_exact)
    else:
        n_exact, n_partial = min(config.n_pos_max, len(exact)), 0

    negatives = _draw(rng, disjoint, config.n_neg)
    pos_members = np.concatenate([_draw(rng, exact, n_exact), _draw(rng, partial, n_partial)]).astype(int)
    pos_kinds = [MatchKind.EXACT] * n_exact + [MatchKind.PARTIAL] * n_partial

    pool = CandidatePool(anchor_id)
    if len(pos_members):
        dist = corpus.distances(i, pos_members)
        for k in np.lexsort((pos_members, dist)):
            pool.positives.append((corpus.ids[pos_members[k]], pos_kinds[k], int(dist[k])))
    if len(negatives):
        dist = corpus.distances(i, negatives)
        for k in np.lexsort((negatives, dist)):
            pool.negatives.append((corpus.ids[negatives[k]], int(dist[k])))
    return pool


def build_pools(corpus: MiningCorpus, seed: int = 0,
                config: Optional[PoolConfig] = None) -> Dict[str, CandidatePool]:
    """
    One pool per anchor with at least one label. Each anchor draws from its
    own stream seeded by (seed, corpus index), so pools do not depend on the
    order in which anchors are processed.
    """
    config = config or PoolConfig()
    pools = {}
    for i, anchor_id in enumerate(corpus.ids):
        if not corpus.labels[i].any():
            continue
        pool = build_pool(anchor_id, corpus, np.random.default_rng([seed, i]), config)
        if pool.poolless:
            logger.debug(f"Anchor {anchor_id} has no usable positives or negatives; skipped")
        pools[anchor_id] = pool
    n_poolless = sum(p.poolless for p in pools.values())
    logger.info(f"Built {len(pools)} candidate pools ({n_poolless} poolless anchors skipped)")
    return pools


# ---------------------------------------------------------------------
# Curriculum sampling
# ---------------------------------------------------------------------
def curriculum_quantile(epoch: int, ramp_epochs: int = 10) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return max(0.0, 1.0 - epoch / ramp_epochs)


def window_size(n: int, q: float, floor: float = 0.1) -> int:
    """Number of hardest candidates eligible when a fraction q of the pool is open."""
    if n == 0:
        return 0
    return min(n, max(1, math.ceil(floor * n), math.ceil(q * n)))


def sample_triplets(pools: Dict[str, CandidatePool], epoch: int, rng: np.random.Generator,
                    batch_size: Optional[int] = None,
                    anchor_ids: Optional[Sequence[str]] = None,
                    config: Optional[PoolConfig] = None) -> List[TripletConstraint]:
    """
    Draw one positive and one negative for each anchor.

    Anchors are either given (the images of the current training batch) or
    drawn uniformly from the usable pools, batch_size of them. Anchors
    without a usable pool are skipped.
    """
    config = config or PoolConfig()
    if anchor_ids is None:
        if batch_size is None or batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        usable = sorted(aid for aid, p in pools.items() if not p.poolless)
        if not usable:
            return []
        anchor_ids = [usable[k] for k in rng.integers(len(usable), size=batch_size)]

    q = curriculum_quantile(epoch, config.ramp_epochs) if config.hard_mining else 1.0
    triplets = []
    for aid in anchor_ids:
        pool = pools.get(aid)
        if pool is None or pool.poolless:
            continue
        n_pos, n_neg = len(pool.positives), len(pool.negatives)
        wp = window_size(n_pos, q, config.window_floor)
        wn = window_size(n_neg, q, config.window_floor)
        positive = pool.positives[n_pos - wp + int(rng.integers(wp))]
        negative = pool.negatives[int(rng.integers(wn))]
        triplets.append(TripletConstraint(aid, positive[0], negative[0]))
    return triplets


class TripletMiner:
    """
    Owns the mining corpus and its pools for one training run. Pools are
    built once; only the curriculum window moves between epochs.
    """

    def __init__(self, samples: Sequence, config: Optional[PoolConfig] = None,
                 seed: int = 0, cache: Optional[HashCache] = None):
        self.config = config or PoolConfig()
        self.corpus = MiningCorpus.from_samples(samples, cache)
        self.pools = build_pools(self.corpus, seed, self.config)

    def sample(self, anchor_ids: Sequence[str], epoch: int,
               rng: np.random.Generator) -> List[TripletConstraint]:
        return sample_triplets(self.pools, epoch, rng, anchor_ids=anchor_ids, config=self.config)

    def violations(self, triplets: Sequence[TripletConstraint]) -> int:
        bad = 0
        for t in triplets:
            if self.corpus.match(t.anchor_id, t.positive_id) is MatchKind.DISJOINT:
                bad += 1
            elif self.corpus.match(t.anchor_id, t.negative_id) is not MatchKind.DISJOINT:
                bad += 1
        return bad


# ---------------------------------------------------------------------
# Audit table
# ---------------------------------------------------------------------
def _histogram(dists: List[int]) -> str:
    counts, _ = np.histogram(dists, bins=HIST_BINS)
    return "|".join(str(int(c)) for c in counts)


def pool_stats(pools: Dict[str, CandidatePool]) -> pd.DataFrame:
    rows = []
    for aid in sorted(pools):
        pool = pools[aid]
        pos_d = [d for _, _, d in pool.positives]
        neg_d = [d for _, d in pool.negatives]
        n_pos = len(pool.positives)
        rows.append({
            "anchor_id": aid,
            "n_pos": n_pos,
            "n_exact": n_pos - pool.n_partial,
            "n_partial": pool.n_partial,
            "n_neg": len(pool.negatives),
            "partial_share": pool.n_partial / n_pos if n_pos else 0.0,
            "pos_dist_mean": float(np.mean(pos_d)) if pos_d else float("nan"),
            "neg_dist_mean": float(np.mean(neg_d)) if neg_d else float("nan"),
            "pos_hist": _histogram(pos_d),
            "neg_hist": _histogram(neg_d),
            "poolless": pool.poolless,
        })
    columns = ["anchor_id", "n_pos", "n_exact", "n_partial", "n_neg", "partial_share",
               "pos_dist_mean", "neg_dist_mean", "pos_hist", "neg_hist", "poolless"]
    return pd.DataFrame(rows, columns=columns)
