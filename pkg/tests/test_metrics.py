import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualprompt import (ClassifierConfig, EvalMode, PromptConfig, ToyEncoders, evaluate, init_prompts,
                        make_catalog, make_zsl_split, synth_dataset)
from dualprompt.metrics import (IncompatibleCheckpointError, MetricsReport, average_precision,
                                classwise_overall_metrics, report_from_scores, threshold_counts, topk_hits,
                                topk_metrics)
from dualprompt.scoring import ScorePair, class_logit, class_probability, predict_labels
from oracles import ap_exact, classwise_exact, topk_exact


def expected_random_ap(n, n_pos):
    """Expected AP of a uniformly random ranking of n items with n_pos positives."""
    if n == 1:
        return 1.0
    harmonic = sum(1 / k for k in range(1, n + 1))
    return (n_pos - 1) / (n - 1) + (n - n_pos) / (n * (n - 1)) * harmonic


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, -1, -1]) == 1.0

    def test_hand_example(self):
        ap = average_precision([0.9, 0.8, 0.7, 0.1], [1, -1, 1, -1])
        assert ap == pytest.approx(0.8333, abs=5e-5)
        assert ap == pytest.approx(float(ap_exact([0.9, 0.8, 0.7, 0.1], [1, -1, 1, -1])), abs=1e-15)

    def test_single_positive(self):
        assert average_precision([0.3], [1]) == 1.0

    def test_no_positive(self):
        assert average_precision([0.3, 0.4], [-1, -1]) is None

    def test_ties_by_index(self):
        assert average_precision([0.5, 0.5], [-1, 1]) == 0.5
        assert average_precision([0.5, 0.5], [1, -1]) == 1.0

    def test_unknown_cells_ignored(self):
        assert average_precision([0.9, 0.8, 0.7], [0, -1, 1]) == 0.5

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(-40, 40), st.sampled_from([-1, 1])), min_size=1, max_size=12))
    def test_monotone_transform_invariance(self, items):
        s = np.array([a / 8 for a, _ in items])
        y = [b for _, b in items]
        a = average_precision(s, y)
        b = average_precision(np.exp(s) * 3 + 1, y)
        assert a == b

    def test_random_expectation_formula(self):
        # enumerate every ranking of a small instance
        for n, n_pos in [(2, 1), (4, 2), (5, 1), (5, 3)]:
            labels = [1] * n_pos + [-1] * (n - n_pos)
            aps = [ap_exact(list(range(n, 0, -1)), [labels[i] for i in perm])
                   for perm in itertools.permutations(range(n))]
            assert float(sum(aps) / len(aps)) == pytest.approx(expected_random_ap(n, n_pos), abs=1e-12)

    def test_random_scores_near_baseline(self):
        N, M = 200, 10
        truth = -np.ones((N, M), dtype=np.int8)
        truth[: N // 2] = 1
        maps = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            scores = rng.uniform(size=(N, M))
            maps.append(np.mean([average_precision(scores[:, m], truth[:, m]) for m in range(M)]))
        se = np.std(maps, ddof=1) / np.sqrt(len(maps))
        assert abs(np.mean(maps) - expected_random_ap(N, N // 2)) <= 3 * se


class TestClasswise:
    def test_identity(self):
        t = np.array([[1, -1], [-1, 1], [1, 1]])
        m = classwise_overall_metrics(t, t)
        assert all(m[k] == 1.0 for k in ("CP", "CR", "CF1", "OP", "OR", "OF1"))

    def test_all_negative_predictions(self):
        m = classwise_overall_metrics(-np.ones((2, 2)), [[1, -1], [-1, 1]])
        assert m["CR"] == 0 and m["OR"] == 0 and m["CF1"] == 0

    def test_hand_example(self):
        c = threshold_counts([[1, 1], [-1, 1]], [[1, -1], [-1, 1]])
        assert c.tp.tolist() == [1, 1] and c.fp.tolist() == [0, 1] and c.fn.tolist() == [0, 0]
        m = classwise_overall_metrics([[1, 1], [-1, 1]], [[1, -1], [-1, 1]])
        assert m["CP"] == 0.75 and m["OP"] == pytest.approx(2 / 3, abs=1e-15)
        assert m["CR"] == 1.0 and m["OR"] == 1.0

    def test_class_without_positives_skipped_in_cr(self):
        m = classwise_overall_metrics([[1, -1], [1, -1]], [[1, -1], [-1, -1]])
        assert m["CR"] == 1.0 and m["classes_without_positives"] == [1]

    def test_unknown_truth_excluded(self):
        m = classwise_overall_metrics([[1], [1]], [[1], [0]])
        assert m["OP"] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            classwise_overall_metrics(np.ones((2, 2)), np.ones((2, 3)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_rates_bounded_and_f1_arms(self, n, m, seed):
        rng = np.random.default_rng(seed)
        pred = rng.choice([-1, 1], (n, m))
        truth = rng.choice([-1, 0, 1], (n, m))
        out = classwise_overall_metrics(pred, truth)
        for p, r, f in (("CP", "CR", "CF1"), ("OP", "OR", "OF1")):
            assert 0 <= out[f] <= 1 and out[f] <= 2 * min(out[p], out[r]) + 1e-15


class TestTopK:
    def test_hand_example(self):
        p, r, f = topk_metrics([[0.9, 0.8, 0.1, 0.5]], [[1, 1, -1, -1]], 3)
        assert p == pytest.approx(2 / 3) and r == 1.0 and f == pytest.approx(0.8)

    def test_k_equals_m_full_recall(self, rng):
        truth = rng.choice([-1, 1], (10, 4))
        truth[:, 0] = 1
        assert topk_metrics(rng.uniform(size=(10, 4)), truth, 4)[1] == 1.0

    def test_tie_rule(self):
        hits, n_pos, n = topk_hits(np.full((1, 5), 0.5), [[1, 1, -1, -1, 1]], 2)
        assert hits == 2 and n_pos == 3

    def test_image_without_positives(self):
        hits, n_pos, n = topk_hits([[0.9, 0.1], [0.8, 0.2]], [[-1, -1], [1, -1]], 1)
        assert (hits, n_pos, n) == (1, 1, 2)

    def test_unknown_counts_as_not_positive(self):
        assert topk_hits([[0.9, 0.1]], [[0, 1]], 1)[0] == 0

    @pytest.mark.parametrize("k", [0, 5])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            topk_metrics(np.zeros((2, 4)), np.ones((2, 4)), k)

    def test_matches_set_intersection(self, rng):
        for _ in range(200):
            n, m = rng.integers(1, 7), rng.integers(1, 5)
            k = int(rng.integers(1, m + 1))
            s = rng.integers(0, 3, (n, m)) / 2
            t = rng.choice([-1, 1], (n, m))
            hits, n_pos, _, _ = topk_exact(s.tolist(), t.tolist(), k)
            assert topk_hits(s, t, k)[:2] == (hits, n_pos)


class TestReport:
    def test_logit_and_probability_rank_identically(self, rng):
        sp, sn = rng.uniform(-0.2, 0.2, 300), rng.uniform(-0.2, 0.2, 300)
        y = rng.choice([-1, 1], 300)
        a = average_precision(class_logit(sp, sn, 1.0), y)
        b = average_precision(class_probability(sp, sn, 1.0), y)
        assert a == b

    def test_partial_composition(self, rng):
        sp, sn = rng.uniform(-1, 1, (30, 5)), rng.uniform(-1, 1, (30, 5))
        truth = rng.choice([-1, 1], (30, 5))
        rep = report_from_scores(sp, sn, truth, list("abcde"), EvalMode(topk=(3,)), 0.01)
        preds = predict_labels(ScorePair(sp, sn, class_probability(sp, sn, 0.01)))
        direct = classwise_overall_metrics(preds, truth)
        assert all(getattr(rep, k) == direct[k] for k in ("CP", "CR", "CF1", "OP", "OR", "OF1"))
        assert set(rep.flat()) >= {"P@3", "R@3", "F1@3", "mAP"}

    def test_excluded_classes_flagged(self, rng):
        truth = np.array([[1, -1], [-1, -1]])
        rep = report_from_scores(np.array([[0.9, 0.1], [0.2, 0.3]]), np.zeros((2, 2)), truth, ["a", "b"],
                                 EvalMode(topk=(1,)), 0.01)
        assert rep.excluded_from_map == ["b"] and rep.per_class_ap["b"] is None and rep.mAP == 1.0

    def test_json_roundtrip(self, tmp_path, rng):
        rep = report_from_scores(rng.uniform(size=(8, 3)), rng.uniform(size=(8, 3)), rng.choice([-1, 1], (8, 3)),
                                 ["x", "y", "z"], EvalMode(topk=(1, 2)), 0.05)
        rep.meta = {"config_digest": "abc"}
        rep.write_json(tmp_path / "a.json")
        back = MetricsReport.from_dict(json.loads((tmp_path / "a.json").read_text()))
        back.write_json(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_csv_append(self, tmp_path, rng):
        rep = report_from_scores(rng.uniform(size=(8, 3)), rng.uniform(size=(8, 3)), rng.choice([-1, 1], (8, 3)),
                                 ["x", "y", "z"], EvalMode(topk=(1,)), 0.05)
        rep.write_csv_row(tmp_path / "t.csv", {"keep": 0.1}, append=True)
        rep.write_csv_row(tmp_path / "t.csv", {"keep": 0.2}, append=True)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert len(lines) == 3 and lines[0].startswith("keep,mode,mAP")


class TestEvaluate:
    @pytest.fixture(scope="class")
    @classmethod
    def setup(cls):
        cat = make_catalog(6, 8, seed=3)
        ds = synth_dataset(30, cat, (3, 3), (1, 2), 0.1, seed=8)
        return cat, ds, ToyEncoders.build("aligned", 8)

    def test_deterministic(self, setup):
        cat, ds, enc = setup
        bank = init_prompts(PromptConfig(4, 4, 8), 6, 0)
        a = evaluate(bank, cat, enc, ds, EvalMode(), ClassifierConfig())
        b = evaluate(bank, cat, enc, ds, EvalMode(), ClassifierConfig())
        assert a.to_json() == b.to_json()

    def test_zsl_rejects_class_specific(self, setup):
        cat, ds, enc = setup
        bank = init_prompts(PromptConfig(4, 4, 8), 6, 0)
        with pytest.raises(IncompatibleCheckpointError):
            evaluate(bank, cat, enc, ds, EvalMode("zsl", (3,), make_zsl_split(6, {5})), ClassifierConfig())

    def test_zsl_subset_and_gzsl_full(self, setup):
        cat, ds, enc = setup
        bank = init_prompts(PromptConfig(4, 4, 8, "shared"), 6, 0)
        split = make_zsl_split(6, {3, 4, 5})
        z = evaluate(bank, cat, enc, ds, EvalMode("zsl", (3,), split), ClassifierConfig())
        g = evaluate(bank, cat, enc, ds, EvalMode("gzsl", (3,), split), ClassifierConfig())
        assert z.classes == [cat.names[m] for m in (3, 4, 5)]
        assert len(g.classes) == 6

    def test_needs_split(self):
        with pytest.raises(ValueError):
            EvalMode("gzsl", (3,))


def test_exhaustive_small_oracles():
    rng = np.random.default_rng(99)
    for _ in range(300):
        n, m = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        scores = (rng.integers(0, 4, (n, m)) / 3).tolist()
        truth = rng.choice([-1, 1], (n, m)).tolist()
        pred = rng.choice([-1, 1], (n, m)).tolist()
        for j in range(m):
            col = [row[j] for row in truth]
            ref = ap_exact([row[j] for row in scores], col)
            got = average_precision([row[j] for row in scores], col)
            assert (ref is None and got is None) or Fraction(got).limit_denominator(10**6) == ref
        ex = classwise_exact(pred, truth)
        got = classwise_overall_metrics(pred, truth)
        for key in ("CP", "CR", "OP", "OR"):
            assert Fraction(got[key]).limit_denominator(10**6) == ex[key]
