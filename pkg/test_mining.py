#!/usr/bin/env python3
"""
Candidate pools, curriculum windows and the triplet label contract.
"""

import math

import numpy as np
import pytest

from dataset_manager import Sample, SyntheticConfig, generate_synthetic
from mining_manager import (MatchKind, MiningCorpus, PoolConfig, TripletMiner, build_pool, build_pools,
                            curriculum_quantile, match_kind, pool_stats, sample_triplets, window_size)
from phash_manager import HashCode


def labels_of(classes, n=8):
    v = np.zeros(n, dtype=np.uint8)
    v[list(classes)] = 1
    return v


def corpus_from(label_sets, seed=0, n=8):
    rng = np.random.default_rng(seed)
    image = np.zeros((4, 4), dtype=np.float32)
    samples = [Sample(f"s{i:05d}", image, labels_of(ls, n), f"p{i}") for i, ls in enumerate(label_sets)]
    hashes = {s.sample_id: HashCode(int(rng.integers(0, 2 ** 63, dtype=np.uint64))) for s in samples}
    return MiningCorpus(samples, hashes)


# ---------------------------------------------------------------------
# Match kinds
# ---------------------------------------------------------------------
def test_match_kinds():
    assert match_kind(labels_of({1, 3}), labels_of({1, 3})) is MatchKind.EXACT
    assert match_kind(labels_of({1, 3}), labels_of({3, 7})) is MatchKind.PARTIAL
    assert match_kind(labels_of({1, 3}), labels_of({2})) is MatchKind.DISJOINT
    assert match_kind(labels_of(set()), labels_of(set())) is MatchKind.DISJOINT


def test_match_kind_rejects_length_mismatch():
    with pytest.raises(ValueError):
        match_kind(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------
# Pools
# ---------------------------------------------------------------------
def test_anchor_without_positives_is_poolless():
    corpus = corpus_from([{0}] + [{1}] * 20)
    pool = build_pool("s00000", corpus, np.random.default_rng(0))
    assert pool.positives == []
    assert len(pool.negatives) == 20
    assert pool.poolless


def test_negative_pool_is_capped_at_one_thousand():
    corpus = corpus_from([{0}] + [{1}] * 2000)
    pool = build_pool("s00000", corpus, np.random.default_rng(0))
    assert len(pool.negatives) == 1000
    assert len({sid for sid, _ in pool.negatives}) == 1000


def test_partial_share_of_positive_pool():
    corpus = corpus_from([{0, 1}] + [{0, 1}] * 100 + [{0}] * 100 + [{2}] * 50)
    pool = build_pool("s00000", corpus, np.random.default_rng(0), PoolConfig(n_pos_max=100))
    kinds = [kind for _, kind, _ in pool.positives]
    assert kinds.count(MatchKind.EXACT) == 75
    assert kinds.count(MatchKind.PARTIAL) == 25


def test_exact_only_pool_when_partials_disallowed():
    corpus = corpus_from([{0, 1}] + [{0, 1}] * 10 + [{0}] * 10 + [{2}] * 10)
    pool = build_pool("s00000", corpus, np.random.default_rng(0), PoolConfig(allow_partial=False))
    assert pool.n_partial == 0
    assert len(pool.positives) == 10


def test_short_exact_supply_is_backfilled_with_partials():
    corpus = corpus_from([{0, 1}] + [{0, 1}] * 5 + [{1}] * 100 + [{2}] * 10)
    pool = build_pool("s00000", corpus, np.random.default_rng(0), PoolConfig(n_pos_max=40))
    assert len(pool.positives) == 40
    assert pool.n_partial == 35


def test_pools_are_ranked_by_hash_distance():
    corpus = corpus_from([{0}] + [{0}] * 30 + [{1}] * 30, seed=3)
    pool = build_pool("s00000", corpus, np.random.default_rng(0))
    pos_d = [d for _, _, d in pool.positives]
    neg_d = [d for _, d in pool.negatives]
    assert pos_d == sorted(pos_d) and neg_d == sorted(neg_d)
    anchor = corpus.hash_bits[0]
    sid, dist = pool.negatives[0]
    assert dist == bin(int(anchor) ^ int(corpus.hash_bits[corpus.index[sid]])).count("1")


def test_build_pools_skips_no_finding_anchors():
    corpus = corpus_from([set(), {0}, {0}, {1}, set()])
    pools = build_pools(corpus, seed=0)
    assert set(pools) == {"s00001", "s00002", "s00003"}
    assert pools["s00003"].poolless


def test_build_pools_is_seeded():
    corpus = corpus_from([{0}] * 20 + [{1}] * 20 + [{0, 1}] * 20)
    a = build_pools(corpus, seed=4)
    b = build_pools(corpus, seed=4)
    assert all(a[k].positives == b[k].positives and a[k].negatives == b[k].negatives for k in a)


# ---------------------------------------------------------------------
# Curriculum
# ---------------------------------------------------------------------
def test_curriculum_schedule():
    assert curriculum_quantile(0) == 1.0
    assert curriculum_quantile(5) == 0.5
    assert curriculum_quantile(10) == 0.0
    assert curriculum_quantile(25) == 0.0
    with pytest.raises(ValueError):
        curriculum_quantile(-1)


def test_window_keeps_at_least_the_hardest_tenth():
    assert window_size(100, 1.0) == 100
    assert window_size(100, 0.5) == 50
    assert window_size(100, 0.0) == 10
    assert window_size(5, 0.0) == 1
    assert window_size(0, 0.5) == 0


def test_forced_triplet_for_singleton_pools():
    corpus = corpus_from([{0}, {0}, {1}])
    pools = build_pools(corpus, seed=0)
    triplets = sample_triplets(pools, 0, np.random.default_rng(0), anchor_ids=["s00000"])
    assert [(t.anchor_id, t.positive_id, t.negative_id) for t in triplets] == [("s00000", "s00001", "s00002")]


def test_late_negatives_are_closer_than_the_pool_average():
    corpus = corpus_from([{0}] + [{0}] * 50 + [{1}] * 500, seed=8)
    pools = build_pools(corpus, seed=0)
    pool = pools["s00000"]
    dist = dict(pool.negatives)
    rng = np.random.default_rng(1)
    drawn = [dist[sample_triplets(pools, 12, rng, anchor_ids=["s00000"])[0].negative_id] for _ in range(1000)]
    assert np.mean(drawn) <= np.mean(list(dist.values()))


def test_random_selection_ignores_the_curriculum():
    corpus = corpus_from([{0}] + [{0}] * 50 + [{1}] * 500, seed=8)
    config = PoolConfig(hard_mining=False)
    pools = build_pools(corpus, seed=0, config=config)
    order = [sid for sid, _ in pools["s00000"].negatives]
    rng = np.random.default_rng(1)
    ranks = [order.index(sample_triplets(pools, 30, rng, anchor_ids=["s00000"], config=config)[0].negative_id)
             for _ in range(300)]
    assert max(ranks) >= math.ceil(0.1 * len(order))


def test_no_finding_anchor_is_never_used():
    corpus = corpus_from([set(), {0}, {0}, {1}])
    pools = build_pools(corpus, seed=0)
    rng = np.random.default_rng(0)
    triplets = sample_triplets(pools, 0, rng, batch_size=50)
    assert triplets and all(t.anchor_id != "s00000" for t in triplets)
    assert sample_triplets(pools, 0, rng, anchor_ids=["s00000"]) == []


# ---------------------------------------------------------------------
# Contract on synthetic data
# ---------------------------------------------------------------------
@pytest.fixture(scope="module")
def synthetic_miner():
    samples = generate_synthetic(SyntheticConfig(n_samples=400, num_classes=5, image_size=32), seed=0)
    return samples, TripletMiner(samples, PoolConfig(), seed=0)


def test_ten_thousand_triplets_respect_labels(synthetic_miner):
    samples, miner = synthetic_miner
    by_id = {s.sample_id: s for s in samples}
    usable = sorted(aid for aid, p in miner.pools.items() if not p.poolless)
    rng = np.random.default_rng(0)
    triplets = []
    epoch = 0
    while len(triplets) < 10000:
        triplets += miner.sample(usable, epoch % 15, rng)
        epoch += 1
    assert miner.violations(triplets) == 0
    for t in triplets[:2000]:
        a, p, n = by_id[t.anchor_id], by_id[t.positive_id], by_id[t.negative_id]
        assert match_kind(a.labels, p.labels) is not MatchKind.DISJOINT
        assert match_kind(a.labels, n.labels) is MatchKind.DISJOINT
        assert a.labels.any()


def test_pool_caps_and_partial_share_hold(synthetic_miner):
    samples, miner = synthetic_miner
    corpus = miner.corpus
    for aid, pool in miner.pools.items():
        assert len(pool.negatives) <= 1000 and len(pool.positives) <= 500
        anchor = corpus.labels[corpus.index[aid]]
        same = (corpus.labels == anchor).all(axis=1).sum() - 1
        shared = (corpus.labels & anchor).any(axis=1).sum() - 1
        partial = shared - same
        target = min(500, same + partial)
        quarter = math.floor(0.25 * target)
        assert len(pool.positives) == target
        if same >= target - quarter and partial >= quarter:
            assert pool.n_partial == quarter


def test_pool_stats_table(synthetic_miner):
    _, miner = synthetic_miner
    stats = pool_stats(miner.pools)
    assert len(stats) == len(miner.pools)
    assert (stats.n_exact + stats.n_partial == stats.n_pos).all()
    assert stats.partial_share.between(0, 1).all()
    assert all(len(h.split("|")) == 8 for h in stats.pos_hist)
