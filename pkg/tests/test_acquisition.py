import numpy as np
import pytest

from spal.acquisition import (
    AcquisitionScore,
    LabelPool,
    al_score,
    build_units,
    click_cost,
    combine_scores,
    diversity_score,
    entropy,
    greedy_recompute_order,
    load_pool,
    oracle_label,
    pooled_feature,
    save_pool,
    score_candidates,
    select_query,
    shape_diversity_score,
    uncertainty_score,
)
from spal.model import ModelOutput
from spal.pcio import PointCloud
from spal.superpoint import SuperPointPartition


class TestClickCost:
    def test_superpoint_one_click(self):
        assert click_cost(("s", 3), "superpoint") == 1

    def test_point_one_click(self):
        assert click_cost(("s", 11), "point") == 1

    def test_shape_default_point_count(self):
        assert click_cost(("s", -1), "shape", {"s": 2048}) == 2048

    def test_unknown_granularity(self):
        with pytest.raises(ValueError):
            click_cost(("s", 0), "blob")


class TestPooledFeature:
    def test_identical_rows(self, rng):
        row = rng.normal(size=4)
        feats = np.tile(row, (5, 1))
        np.testing.assert_allclose(pooled_feature(feats, [0, 2, 4], "mean"), row, rtol=1e-15)
        np.testing.assert_array_equal(pooled_feature(feats, [0, 2, 4], "max"), row)

    def test_mean_and_max(self):
        feats = np.array([[0.0, 2.0], [2.0, 0.0]])
        np.testing.assert_array_equal(pooled_feature(feats, [0, 1], "mean"), [1.0, 1.0])
        np.testing.assert_array_equal(pooled_feature(feats, [0, 1], "max"), [2.0, 2.0])

    def test_empty_members(self):
        with pytest.raises(ValueError):
            pooled_feature(np.zeros((3, 2)), [], "mean")


class TestDiversity:
    def test_zero_when_labeled(self):
        assert diversity_score(np.array([1.0, 2.0]), np.array([[1.0, 2.0]])) == 0.0

    def test_three_four_five(self):
        assert diversity_score(np.array([3.0, 4.0]), np.array([[0.0, 0.0]])) == 5.0

    def test_matches_exhaustive_scan(self, rng):
        labeled = rng.normal(size=(20, 6))
        cand = rng.normal(size=6)
        expected = min(np.linalg.norm(cand - l) for l in labeled)
        assert np.isclose(diversity_score(cand, labeled), expected)

    def test_empty_labeled_is_inf(self):
        assert diversity_score(np.zeros(3), np.empty((0, 3))) == np.inf

    def test_monotone_in_labeled_set(self, rng):
        cand = rng.normal(size=4)
        labeled = rng.normal(size=(5, 4))
        d1 = diversity_score(cand, labeled)
        d2 = diversity_score(cand, np.vstack([labeled, rng.normal(size=(3, 4))]))
        assert d2 <= d1


class TestEntropy:
    def test_one_hot(self):
        assert entropy(np.array([1.0, 0.0, 0.0])) == 0.0

    def test_uniform(self):
        assert np.isclose(entropy(np.full(4, 0.25)), np.log(4))

    def test_half_half(self):
        assert np.isclose(entropy(np.array([0.5, 0.5, 0.0, 0.0])), np.log(2))

    def test_range(self, rng):
        for _ in range(50):
            p = rng.dirichlet(np.ones(5))
            assert 0.0 <= entropy(p) <= np.log(5) + 1e-12


class TestUncertainty:
    def test_one_hot_members(self):
        posts = np.eye(3)[np.array([0, 1, 2, 0])]
        assert uncertainty_score(posts, [0, 1, 2]) == 0.0

    def test_uniform_members(self):
        posts = np.full((5, 4), 0.25)
        assert np.isclose(uncertainty_score(posts, [0, 4]), np.log(4))

    def test_mixed_matches_direct_sum(self, rng):
        posts = rng.dirichlet(np.ones(3), size=8)
        members = [1, 4, 6]
        expected = np.mean([entropy(posts[m]) for m in members])
        assert np.isclose(uncertainty_score(posts, members), expected)

    def test_empty_members(self):
        with pytest.raises(ValueError):
            uncertainty_score(np.full((3, 2), 0.5), [])


class TestShapeDiversity:
    def test_self_in_labeled_set(self, rng):
        f = rng.normal(size=4)
        assert shape_diversity_score(f, np.vstack([f, rng.normal(size=4)])) == 0.0

    def test_min_of_two(self):
        f = np.zeros(2)
        labeled = np.array([[3.0, 0.0], [7.0, 0.0]])
        assert shape_diversity_score(f, labeled) == 3.0


class TestAlScore:
    def test_arithmetic_example(self):
        assert np.isclose(al_score(0.8, 0.4, 0.2, beta=0.25, delta=1.0), 0.9)

    def test_delta_zero_ignores_s(self, rng):
        d, e = rng.random(2)
        assert al_score(d, e, 123.0, 0.5, 0.0) == al_score(d, e, 0.0, 0.5, 0.0)

    def test_beta_one_ignores_d(self, rng):
        e, s = rng.random(2)
        assert al_score(5.0, e, s, 1.0, 0.3) == al_score(0.0, e, s, 1.0, 0.3)

    def test_bad_params(self):
        with pytest.raises(ValueError):
            al_score(0, 0, 0, beta=1.5, delta=1)
        with pytest.raises(ValueError):
            al_score(0, 0, 0, beta=0.5, delta=-1)

    def test_normalization_to_unit_range(self, rng):
        d = rng.normal(size=30) * 10
        e = rng.random(30)
        s = rng.normal(size=30)
        dn, en, sn, comb = combine_scores(d, e, s, 0.25, 1.0, normalize=True)
        for arr in (dn, en, sn):
            assert arr.min() >= 0.0 and arr.max() <= 1.0
        np.testing.assert_allclose(comb, 0.75 * dn + 0.25 * en + sn)

    def test_all_inf_term_contributes_zero(self):
        d = np.array([np.inf, np.inf])
        e = np.array([0.3, 0.7])
        s = np.array([0.0, 0.0])
        _, _, _, comb = combine_scores(d, e, s, 0.25, 1.0, normalize=True)
        assert comb[1] > comb[0]  # ranking falls back to entropy

    def test_argmax_invariant_to_common_rescale(self, rng):
        d, e, s = rng.random((3, 20))
        _, _, _, c1 = combine_scores(d, e, s, 0.25, 1.0)
        _, _, _, c2 = combine_scores(3.7 * d, 3.7 * e, 3.7 * s, 0.25, 1.0)
        assert np.argmax(c1) == np.argmax(c2)


def small_pool(granularity="superpoint", budget=100, n_units=10, sid="s"):
    units = {(sid, i): 1 for i in range(n_units)}
    return LabelPool(granularity, budget, units)


class TestSelectQuery:
    def scores_for(self, vals, sid="s"):
        return [
            AcquisitionScore(unit=(sid, i), d=0, e=0, s=0, combined=v)
            for i, v in enumerate(vals)
        ]

    def test_argsort_top_two(self):
        pool = small_pool(n_units=3)
        picked = select_query(self.scores_for([0.9, 0.5, 0.7]), 2, pool)
        assert picked == [("s", 0), ("s", 2)]

    def test_budget_truncation(self):
        pool = small_pool(budget=1, n_units=5)
        picked = select_query(self.scores_for([0.1, 0.9, 0.5, 0.7, 0.3]), 5, pool)
        assert picked == [("s", 1)]

    def test_matches_full_sort_oracle(self, rng):
        vals = rng.random(100)
        pool = small_pool(budget=1000, n_units=100)
        picked = select_query(self.scores_for(list(vals)), 10, pool)
        oracle = sorted(range(100), key=lambda i: (-vals[i], ("s", i)))[:10]
        assert picked == [("s", i) for i in oracle]

    def test_tie_break_by_unit_id(self):
        pool = small_pool(n_units=4)
        picked = select_query(self.scores_for([0.5, 0.5, 0.5, 0.5]), 2, pool)
        assert picked == [("s", 0), ("s", 1)]

    def test_excludes_labeled(self):
        pool = small_pool(n_units=3)
        pool.label_unit(("s", 0), 1)
        picked = select_query(self.scores_for([0.9, 0.1, 0.2]), 2, pool)
        assert picked == [("s", 2), ("s", 1)]

    def test_empty_pool_errors(self):
        pool = small_pool(n_units=2)
        pool.label_unit(("s", 0), 0)
        pool.label_unit(("s", 1), 0)
        with pytest.raises(ValueError, match="empty"):
            select_query(self.scores_for([0.5, 0.5]), 1, pool)

    def test_shape_costs_prefix_rule(self):
        units = {("a", -1): 10, ("b", -1): 3, ("c", -1): 2}
        pool = LabelPool("shape", 5, units)
        scores = [
            AcquisitionScore(("a", -1), 0, 0, 0, 0.9),
            AcquisitionScore(("b", -1), 0, 0, 0, 0.8),
            AcquisitionScore(("c", -1), 0, 0, 0, 0.7),
        ]
        # top unit does not fit: selection stops at the first overflow
        assert select_query(scores, 3, pool) == []


class TestOracleLabel:
    def setup_case(self, rng):
        pts = rng.normal(size=(9, 3))
        labels = np.array([1, 1, 2, 0, 0, 0, 2, 2, 1])
        cloud = PointCloud(id="s", points=pts, gt_labels=labels)
        part = SuperPointPartition.from_assignment(np.array([0, 0, 0, 1, 1, 1, 2, 2, 2]))
        return cloud, part

    def test_superpoint_majority_and_click(self, rng):
        cloud, part = self.setup_case(rng)
        units = build_units([cloud], "superpoint", {"s": part})
        pool = LabelPool("superpoint", 10, units)
        oracle_label(pool, cloud, ("s", 0), part)
        assert pool.recorded_label(("s", 0)) == 1
        assert pool.spent == 1
        assert pool._noise[("s", 0)] == 1

    def test_point_label(self, rng):
        cloud, part = self.setup_case(rng)
        pool = LabelPool("point", 10, build_units([cloud], "point"))
        oracle_label(pool, cloud, ("s", 2))
        assert pool.recorded_label(("s", 2)) == 2
        assert pool.spent == 1

    def test_shape_costs_full_point_count(self, rng):
        cloud, part = self.setup_case(rng)
        pool = LabelPool("shape", 20, build_units([cloud], "shape"))
        oracle_label(pool, cloud, ("s", -1))
        np.testing.assert_array_equal(pool.recorded_label(("s", -1)), cloud.gt_labels)
        assert pool.spent == 9

    def test_double_label_rejected(self, rng):
        cloud, part = self.setup_case(rng)
        pool = LabelPool("point", 10, build_units([cloud], "point"))
        oracle_label(pool, cloud, ("s", 0))
        with pytest.raises(ValueError, match="already"):
            oracle_label(pool, cloud, ("s", 0))

    def test_point_labels_broadcast(self, rng):
        cloud, part = self.setup_case(rng)
        units = build_units([cloud], "superpoint", {"s": part})
        pool = LabelPool("superpoint", 10, units)
        oracle_label(pool, cloud, ("s", 1), part)
        idx, lab = pool.point_labels(cloud, part)
        np.testing.assert_array_equal(idx, [3, 4, 5])
        np.testing.assert_array_equal(lab, [0, 0, 0])


class TestBudgetLedgerProperty:
    def test_never_overdrawn_under_random_sequences(self):
        """Randomized operation sequences can never push spent beyond budget."""
        rng = np.random.default_rng(20240811)
        violations = 0
        for trial in range(10_000):
            n_units = int(rng.integers(1, 8))
            granularity = ("point", "superpoint", "shape")[int(rng.integers(0, 3))]
            costs = (
                {("s", i): 1 for i in range(n_units)}
                if granularity != "shape"
                else {(f"s{i}", -1): int(rng.integers(1, 6)) for i in range(n_units)}
            )
            budget = int(rng.integers(0, 12))
            pool = LabelPool(granularity, budget, costs)
            for _ in range(int(rng.integers(1, 10))):
                op = rng.integers(0, 3)
                try:
                    if op == 0:
                        uid = list(costs)[int(rng.integers(0, n_units))]
                        pool.label_unit(uid, 0)
                    elif op == 1:
                        pool.raise_budget(pool.budget + int(rng.integers(0, 4)))
                    else:
                        scores = [
                            AcquisitionScore(u, 0, 0, 0, float(rng.random()))
                            for u in costs
                        ]
                        for uid in select_query(scores, int(rng.integers(1, 4)), pool):
                            pool.label_unit(uid, 0)
                except ValueError:
                    pass
                if pool.spent > pool.budget:
                    violations += 1
            expected = sum(costs[u] for u in pool.labeled_ids())
            assert pool.spent == expected
        assert violations == 0


class TestScoreCandidates:
    def build_world(self, rng, n_samples=3, n=12, c=3, k_clusters=4):
        samples, parts, outputs = [], {}, {}
        for i in range(n_samples):
            cloud = PointCloud(
                id=f"s{i}",
                points=rng.normal(size=(n, 3)),
                gt_labels=rng.integers(0, c, size=n),
            )
            samples.append(cloud)
            parts[cloud.id] = SuperPointPartition.from_assignment(
                np.arange(n) % k_clusters
            )
            outputs[cloud.id] = ModelOutput(
                posteriors=rng.dirichlet(np.ones(c), size=n),
                features=rng.normal(size=(n, 5)),
            )
        return samples, parts, outputs

    def test_superpoint_scores_match_manual_oracle(self, rng):
        samples, parts, outputs = self.build_world(rng)
        units = build_units(samples, "superpoint", parts)
        pool = LabelPool("superpoint", 100, units)
        oracle_label(pool, samples[0], ("s0", 0), parts["s0"])
        oracle_label(pool, samples[1], ("s1", 2), parts["s1"])
        beta, delta = 0.25, 1.0
        scores = score_candidates(pool, outputs, parts, beta, delta, normalize=False)
        # manual evaluation for every candidate
        labeled_feats = np.array(
            [
                pooled_feature(outputs[sid].features, parts[sid].members[ci], "mean")
                for sid, ci in pool.labeled_ids()
            ]
        )
        shape_feats = {sid: outputs[sid].features.max(axis=0) for sid in outputs}
        labeled_shapes = np.array([shape_feats[s] for s in sorted(pool.touched_samples())])
        by_unit = {sc.unit: sc for sc in scores}
        for sid, ci in pool.unlabeled_ids():
            f = pooled_feature(outputs[sid].features, parts[sid].members[ci], "mean")
            d = min(np.linalg.norm(f - lf) for lf in labeled_feats)
            e = uncertainty_score(outputs[sid].posteriors, parts[sid].members[ci])
            s = min(np.linalg.norm(shape_feats[sid] - lf) for lf in labeled_shapes)
            sc = by_unit[(sid, ci)]
            assert np.isclose(sc.d, d)
            assert np.isclose(sc.e, e)
            assert np.isclose(sc.s, s)
            assert np.isclose(sc.combined, al_score(d, e, s, beta, delta))

    def test_point_granularity(self, rng):
        samples, parts, outputs = self.build_world(rng, n=8)
        pool = LabelPool("point", 100, build_units(samples, "point"))
        oracle_label(pool, samples[0], ("s0", 3))
        scores = score_candidates(pool, outputs, None, 1.0, 0.0, normalize=False)
        by_unit = {sc.unit: sc for sc in scores}
        expected = entropy(outputs["s1"].posteriors[2])
        assert np.isclose(by_unit[("s1", 2)].e, expected)

    def test_shape_granularity_average_of_points(self, rng):
        samples, parts, outputs = self.build_world(rng, n=6)
        pool = LabelPool("shape", 100, build_units(samples, "shape"))
        oracle_label(pool, samples[0], ("s0", -1))
        scores = score_candidates(pool, outputs, None, 0.0, 0.0, normalize=False)
        by_unit = {sc.unit: sc for sc in scores}
        labeled_feats = outputs["s0"].features
        expected_d = np.mean(
            [
                min(np.linalg.norm(f - lf) for lf in labeled_feats)
                for f in outputs["s1"].features
            ]
        )
        assert np.isclose(by_unit[("s1", -1)].d, expected_d)

    def test_labeled_shape_has_zero_shape_diversity(self, rng):
        samples, parts, outputs = self.build_world(rng)
        units = build_units(samples, "superpoint", parts)
        pool = LabelPool("superpoint", 100, units)
        oracle_label(pool, samples[0], ("s0", 0), parts["s0"])
        scores = score_candidates(pool, outputs, parts, 0.25, 1.0, normalize=False)
        for sc in scores:
            if sc.unit[0] == "s0":
                assert sc.s == 0.0

    def test_baseline_equivalences(self, rng):
        """Core-set == (beta=0, delta=0); entropy == (beta=1, delta=0)."""
        samples, parts, outputs = self.build_world(rng)
        units = build_units(samples, "superpoint", parts)
        pool = LabelPool("superpoint", 100, units)
        oracle_label(pool, samples[0], ("s0", 1), parts["s0"])
        coreset = score_candidates(pool, outputs, parts, 0.0, 0.0, normalize=False)
        ranked = sorted(coreset, key=lambda sc: (-sc.combined, sc.unit))
        by_d = sorted(coreset, key=lambda sc: (-sc.d, sc.unit))
        assert [sc.unit for sc in ranked] == [sc.unit for sc in by_d]
        ent = score_candidates(pool, outputs, parts, 1.0, 0.0, normalize=False)
        ranked_e = sorted(ent, key=lambda sc: (-sc.combined, sc.unit))
        by_e = sorted(ent, key=lambda sc: (-sc.e, sc.unit))
        assert [sc.unit for sc in ranked_e] == [sc.unit for sc in by_e]

    def test_greedy_recompute_spreads_picks(self, rng):
        # two tight feature clumps: one-shot argsort picks all from the far
        # clump, greedy recompute alternates between clumps
        n = 8
        feats = np.vstack([np.zeros((4, 2)), np.full((4, 2), 5.0)])
        feats += rng.normal(scale=0.01, size=feats.shape)
        cloud = PointCloud(id="g", points=rng.normal(size=(n, 3)), gt_labels=np.zeros(n, dtype=int))
        part = SuperPointPartition.from_assignment(np.arange(n))
        outputs = {"g": ModelOutput(posteriors=np.full((n, 2), 0.5), features=feats)}
        pool = LabelPool("superpoint", 100, build_units([cloud], "superpoint", {"g": part}))
        oracle_label(pool, cloud, ("g", 0), part)
        scores = score_candidates(pool, outputs, {"g": part}, 0.0, 0.0)
        feat_by_unit = {("g", i): feats[i] for i in range(n)}
        picked = greedy_recompute_order(
            scores, feat_by_unit, feats[0:1], 3, beta=0.0, delta=0.0
        )
        sides = {0 if feats[i][0] < 2 else 1 for _, i in picked}
        assert sides == {0, 1}


class TestPoolIO:
    def test_round_trip_superpoint(self, tmp_path, rng):
        cloud = PointCloud(id="s", points=rng.normal(size=(6, 3)), gt_labels=np.array([0, 0, 1, 1, 2, 2]))
        part = SuperPointPartition.from_assignment([0, 0, 1, 1, 2, 2])
        units = build_units([cloud], "superpoint", {"s": part})
        pool = LabelPool("superpoint", 50, units)
        oracle_label(pool, cloud, ("s", 1), part)
        save_pool(tmp_path / "p.pool", pool)
        back = load_pool(tmp_path / "p.pool", units)
        assert back.spent == pool.spent
        assert back.labeled_ids() == pool.labeled_ids()
        assert back.recorded_label(("s", 1)) == 1

    def test_round_trip_shape(self, tmp_path, rng):
        cloud = PointCloud(id="sh", points=rng.normal(size=(4, 3)), gt_labels=np.array([0, 1, 1, 0]))
        units = build_units([cloud], "shape")
        pool = LabelPool("shape", 10, units)
        oracle_label(pool, cloud, ("sh", -1))
        save_pool(tmp_path / "p.pool", pool)
        back = load_pool(tmp_path / "p.pool", units)
        np.testing.assert_array_equal(back.recorded_label(("sh", -1)), [0, 1, 1, 0])
        assert back.spent == 4

    def test_spent_mismatch_detected(self, tmp_path, rng):
        cloud = PointCloud(id="s", points=rng.normal(size=(3, 3)), gt_labels=np.zeros(3, dtype=int))
        units = build_units([cloud], "point")
        pool = LabelPool("point", 5, units)
        oracle_label(pool, cloud, ("s", 0))
        save_pool(tmp_path / "p.pool", pool)
        text = (tmp_path / "p.pool").read_text().replace("spent 1", "spent 2")
        (tmp_path / "p.pool").write_text(text)
        with pytest.raises(ValueError, match="spent"):
            load_pool(tmp_path / "p.pool", units)
