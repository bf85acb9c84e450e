import numpy as np
import pytest

import oracles
from qpm.errors import ConfigError
from qpm.retrieval import (DEFAULT_GAMMA, DEFAULT_N, GalleryIndex, GalleryRecord, evaluate, evaluate_rankings,
                           final_distance, part_distances, search, stage1_rank)


def random_index(rng, M, K=4, d=6, C=8, n_ids=None, mode="agfe"):
    n_ids = n_ids or max(M // 4, 2)
    return GalleryIndex(
        pids=rng.integers(0, n_ids, M), camids=rng.integers(0, 3, M),
        f=rng.normal(size=(M, K, d)).astype(np.float32), q=rng.uniform(0.05, 0.95, (M, K)).astype(np.float32),
        g=rng.normal(size=(M, K, C)).astype(np.float32), global_mode=mode)


def rec_lists(r: GalleryRecord):
    return r.f.astype(float).tolist(), r.q.astype(float).tolist(), r.g.astype(float).tolist()


def test_defaults():
    assert DEFAULT_N == 30 and DEFAULT_GAMMA == 0.6


class TestStage1:
    def test_copy_of_query_first(self, rng):
        idx = random_index(rng, 20)
        query = idx[7]
        top, d = stage1_rank(query, idx, 5)
        assert top[0] == 7 and d[7] < 1e-6

    def test_against_full_sort(self, rng):
        idx = random_index(rng, 50)
        query = random_index(rng, 1)[0]
        fq, qq, _ = rec_lists(query)
        ref = [oracles.weighted_part_distance(fq, rec_lists(idx[j])[0], qq, rec_lists(idx[j])[1]) for j in range(50)]
        top, d = stage1_rank(query, idx, 50)
        np.testing.assert_allclose(d, ref, atol=1e-7)
        assert list(top) == sorted(range(50), key=lambda j: (ref[j], j))

    def test_clamps_n(self, rng):
        idx = random_index(rng, 5)
        top, _ = stage1_rank(idx[0], idx, 30)
        assert len(top) == 5

    def test_ties_broken_by_index(self, rng):
        idx = random_index(rng, 1)
        recs = [idx[0]] * 6
        tied = GalleryIndex.from_records(recs)
        top, _ = stage1_rank(idx[0], tied, 6)
        assert list(top) == list(range(6))


class TestFinalDistance:
    def test_gamma_one_is_part_distance(self, rng):
        idx = random_index(rng, 2)
        assert final_distance(idx[0], idx[1], 1.0) == part_distances(idx[0], idx, [1])[0]

    def test_against_two_term_oracle(self, rng):
        idx = random_index(rng, 2)
        fa, qa, ga = rec_lists(idx[0])
        fb, qb, gb = rec_lists(idx[1])
        for gamma in (0.0, 0.3, 0.6):
            ref = oracles.final_distance(fa, qa, ga, fb, qb, gb, gamma)
            assert abs(final_distance(idx[0], idx[1], gamma) - ref) < 1e-7

    def test_gamma_range(self, rng):
        idx = random_index(rng, 2)
        with pytest.raises(ConfigError):
            final_distance(idx[0], idx[1], 1.5)

    def test_symmetric(self, rng):
        idx = random_index(rng, 2)
        assert final_distance(idx[0], idx[1], 0.3) == final_distance(idx[1], idx[0], 0.3)


class TestSearch:
    def test_degenerate_full_sort(self, rng):
        idx = random_index(rng, 25)
        query = random_index(rng, 1)[0]
        res = search(query, idx, n=100, gamma=0.6)
        full = [final_distance(query, idx[j], 0.6) for j in range(25)]
        stage1 = list(stage1_rank(query, idx, 25)[0])
        assert list(res.order) == sorted(range(25), key=lambda j: (full[j], stage1.index(j)))
        np.testing.assert_allclose(res.final, sorted(full), atol=1e-7)

    def test_gamma_one_keeps_stage1(self, rng):
        idx = random_index(rng, 30)
        query = random_index(rng, 1)[0]
        top, _ = stage1_rank(query, idx, 30)
        res = search(query, idx, n=10, gamma=1.0)
        assert list(res.order) == list(top) and res.global_evals == 0

    def test_two_stage_against_brute_force(self, rng):
        idx = random_index(rng, 40)
        query = random_index(rng, 1)[0]
        fq, qq, gq = rec_lists(query)
        stage1 = [oracles.weighted_part_distance(fq, rec_lists(idx[j])[0], qq, rec_lists(idx[j])[1])
                  for j in range(40)]
        candidates = sorted(range(40), key=lambda j: (stage1[j], j))[:10]
        final = {j: oracles.final_distance(fq, qq, gq, *rec_lists(idx[j]), 0.6) for j in candidates}
        expected = sorted(candidates, key=lambda j: (final[j], candidates.index(j)))
        res = search(query, idx, n=10, gamma=0.6)
        assert list(res.order[:10]) == expected
        assert list(res.order[10:]) == sorted(range(40), key=lambda j: (stage1[j], j))[10:]
        assert res.global_evals == 10

    def test_rank1_agrees_with_full_sort_when_in_candidates(self, rng):
        idx = random_index(rng, 60)
        checked = 0
        for _ in range(40):
            query = random_index(rng, 1)[0]
            res = search(query, idx, n=8, gamma=0.6)
            full = search(query, idx, n=60, gamma=0.6)
            if full.order[0] in res.order[:8]:
                checked += 1
                assert res.order[0] == full.order[0]
        assert checked > 0

    def test_pure(self, rng):
        idx = random_index(rng, 30)
        a, b = search(idx[3], idx, 10, 0.6), search(idx[3], idx, 10, 0.6)
        assert np.array_equal(a.order, b.order) and np.array_equal(a.final, b.final)

    def test_gamma_zero_is_global_order(self, rng):
        idx = random_index(rng, 20)
        query = random_index(rng, 1)[0]
        res = search(query, idx, n=20, gamma=0.0)
        glob = [final_distance(query, idx[j], 0.0) for j in range(20)]
        assert np.all(np.diff([glob[j] for j in res.order]) >= 0)

    def test_empty_gallery(self, rng):
        empty = GalleryIndex(pids=np.zeros(0, int), camids=np.zeros(0, int), f=np.zeros((0, 2, 3), np.float32),
                             q=np.zeros((0, 2), np.float32), g=np.zeros((0, 2, 4), np.float32))
        with pytest.raises(ConfigError):
            search(random_index(rng, 1, K=2, d=3, C=4)[0], empty)


@pytest.mark.parametrize("mode", ["agfe", "gap", "si"])
def test_index_roundtrip(tmp_path, rng, mode):
    idx = random_index(rng, 7, mode=mode)
    path = idx.save(tmp_path / "g.idx")
    back = GalleryIndex.load(path)
    assert back.global_mode == mode
    for a in ("pids", "camids", "f", "q", "g"):
        assert np.array_equal(getattr(back, a), getattr(idx, a))


def test_index_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"x" * 64)
    with pytest.raises(ConfigError):
        GalleryIndex.load(p)


def test_index_header_layout(tmp_path, rng):
    import struct

    idx = random_index(rng, 3, K=2, d=5, C=8)
    raw = idx.save(tmp_path / "g.idx").read_bytes()
    magic, version, K, d, C, count = struct.unpack_from("<8sIIIII", raw)
    assert (magic, version, K, d, C, count) == (b"QPMIDX\x00\x01", 1, 2, 5, 8, 3)
    record = 8 + 4 + 4 * (K * d + K + K * C)
    assert len(raw) == 28 + 4 + 3 * record


class TestEvaluate:
    def test_copies_under_other_cameras(self, rng):
        idx = random_index(rng, 12, n_ids=12)
        idx = GalleryIndex(pids=np.arange(12), camids=np.zeros(12, int), f=idx.f, q=idx.q, g=idx.g)
        gallery = GalleryIndex(pids=np.arange(12), camids=np.ones(12, int), f=idx.f, q=idx.q, g=idx.g)
        rep = evaluate(idx, gallery)
        assert rep.rank(1) == 1.0 and rep.mAP == pytest.approx(1.0)

    def test_single_hit_at_rank_three(self):
        g_pids = np.array([5, 6, 1, 7, 8, 9, 10, 11, 12, 13])
        rep = evaluate_rankings([np.arange(10)], [1], [0], g_pids, np.ones(10, int))
        assert rep.mAP == pytest.approx(1 / 3)
        assert rep.cmc[0] == 0 and rep.cmc[1] == 0 and rep.cmc[2] == 1

    def test_same_camera_exclusion(self):
        g_pids = np.array([1, 2, 1])
        g_cams = np.array([0, 1, 1])
        std = evaluate_rankings([np.arange(3)], [1], [0], g_pids, g_cams)
        partial = evaluate_rankings([np.arange(3)], [1], [0], g_pids, g_cams, protocol="partial")
        assert std.rank(1) == 0.0 and std.mAP == pytest.approx(0.5)
        assert partial.rank(1) == 1.0

    def test_skips_queries_without_match(self):
        rep = evaluate_rankings([np.arange(2), np.arange(2)], [1, 9], [0, 0], np.array([1, 2]), np.array([1, 1]))
        assert rep.num_skipped == 1 and rep.num_valid == 1

    def test_against_naive_oracle(self, rng):
        for trial in range(20):
            M, Q = 30, 8
            g_pids, g_cams = rng.integers(0, 6, M), rng.integers(0, 3, M)
            q_pids, q_cams = rng.integers(0, 6, Q), rng.integers(0, 3, Q)
            orders = [rng.permutation(M) for _ in range(Q)]
            rep = evaluate_rankings(orders, q_pids, q_cams, g_pids, g_cams, max_rank=M)
            # naive oracle needs the same valid query set
            cmc, mAP = oracles.cmc_map([list(o) for o in orders], list(q_pids), list(q_cams),
                                       list(g_pids), list(g_cams), M)
            assert rep.mAP == pytest.approx(mAP, abs=1e-12)
            np.testing.assert_allclose(rep.cmc, cmc, atol=1e-12)
            assert np.all(np.diff(rep.cmc) >= 0) and 0 <= rep.mAP <= 1

    def test_report_schema(self, rng):
        idx = random_index(rng, 20)
        d = evaluate(idx, idx).to_dict()
        assert {"rank1", "rank5", "rank10", "mAP"} <= set(d)
