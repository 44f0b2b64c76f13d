import math

import numpy as np
import pytest

from flowsuff.baselines import gen_correlated_gaussians
from flowsuff.errors import ContractViolation
from flowsuff.flow import FlowConfig, build_flow, clone_to_conditional
from flowsuff.numcore import RngStream
from flowsuff.sufficiency import (
    ISMatrix,
    PoolSettings,
    aggregate_scores,
    information_sufficiency,
    matrix_from_row_nll,
    pairwise_is_matrix,
    rank_models,
)
from flowsuff.training import TrainConfig, split_dataset, train_conditional, train_marginal

from conftest import CONDITIONAL_FAST, FLOW_SMALL, MARGINAL_FAST


class TestInformationSufficiency:
    def test_fresh_clone_gives_exactly_zero(self):
        marg = build_flow(2, FlowConfig(hidden_width=16), rng=0)
        rng = RngStream(1)
        for p in marg.params():
            if p.values.size:
                p.values += 0.1 * rng.child(p.name).normal(p.values.shape).astype(np.float32)
        cond = clone_to_conditional(marg, d_u=3, rng=2)
        u = rng.child("u").normal((200, 3))
        v = rng.child("v").normal((200, 2))
        est = information_sufficiency(marg, cond, u, v)
        assert est.is_value == 0.0

    def test_gaussian_pair_recovers_mutual_information(self, gauss_pair_09):
        est = information_sufficiency(
            gauss_pair_09["marginal"], gauss_pair_09["conditional"],
            gauss_pair_09["u_val"], gauss_pair_09["v_val"],
        )
        true_mi = gauss_pair_09["true_mi"]
        assert abs(est.is_value - true_mi) < max(0.1, 0.15 * true_mi)

    def test_independent_pair_near_zero(self):
        n = 3000
        rng = RngStream(9, ("indep-is",))
        u = rng.child("u").normal((n, 1)).astype(np.float32)
        v = rng.child("v").normal((n, 1)).astype(np.float32)
        split = split_dataset(n, 0.9, seed=9)
        marg, _ = train_marginal(v, split, TrainConfig.marginal(seed=9, **MARGINAL_FAST),
                                 FLOW_SMALL)
        cond, _ = train_conditional(u, v, marg, split,
                                    TrainConfig.conditional(seed=9, **CONDITIONAL_FAST))
        est = information_sufficiency(marg, cond, u[split.val_idx], v[split.val_idx])
        assert abs(est.is_value) < 0.1


class TestPairwiseMatrix:
    def test_job_counts_and_structure(self, pool_run):
        result = pool_run["result"]
        k = 4
        marg_jobs = [r for r in result.records if r.startswith("marginal:")]
        cond_jobs = [r for r in result.records if r.startswith("conditional:")]
        assert len(marg_jobs) == k
        assert len(cond_jobs) == k * (k - 1)
        assert np.all(np.isnan(np.diag(result.matrix.raw)))
        off_diag = ~np.eye(k, dtype=bool)
        assert np.all(np.isfinite(result.matrix.raw[off_diag]))

    def test_normalization_is_per_target_dim(self, pool_run):
        m = pool_run["result"].matrix
        for b in range(m.k):
            for a in range(m.k):
                if a == b:
                    continue
                assert m.normalized[a, b] == pytest.approx(m.raw[a, b] / m.dims[b])

    def test_noise_ladder_orders_scores(self, pool_run):
        scores = aggregate_scores(pool_run["result"].matrix, "median")
        by_id = {s.model_id: s.score for s in scores}
        # cleanest model beats the noisiest by a clear margin
        assert by_id["model_00"] > by_id["model_03"]

    def test_matrix_from_rows_reproduces_full_matrix(self, pool_run):
        result = pool_run["result"]
        rebuilt = matrix_from_row_nll(result)
        np.testing.assert_allclose(rebuilt.raw, result.matrix.raw, equal_nan=True,
                                   atol=1e-12)

    def test_pool_of_one_rejected(self, pool_run):
        with pytest.raises(ContractViolation):
            pairwise_is_matrix(pool_run["pool"][:1], PoolSettings())

    def test_matrix_csv_and_dict(self, pool_run):
        m = pool_run["result"].matrix
        payload = m.to_dict()
        assert payload["raw"][0][0] is None  # diagonal undefined
        csv = m.to_csv()
        assert csv.splitlines()[0] == "source," + ",".join(m.ids)


class TestSelfPair:
    def test_exchangeable_views_score_symmetrically(self):
        # two equal-noise views of one latent are exchangeable, so the two
        # directional scores share one true value
        n, d = 4000, 2
        rng = RngStream(31, ("views",))
        latent = rng.child("z").normal((n, d))
        from flowsuff.data import EmbeddingSet

        pool = [
            EmbeddingSet(
                f"view_{tag}",
                (latent + 0.3 * rng.child("eps", tag).normal((n, d))).astype(np.float32),
                corpus_hash="same",
            )
            for tag in ("a", "b")
        ]
        settings = PoolSettings(
            seed=31, flow=FLOW_SMALL,
            marginal=TrainConfig.marginal(seed=31, **MARGINAL_FAST),
            conditional=TrainConfig.conditional(seed=31, **CONDITIONAL_FAST),
        )
        result = pairwise_is_matrix(pool, settings)
        m = result.matrix
        ab, ba = m.normalized[0, 1], m.normalized[1, 0]
        assert ab > 0.3 and ba > 0.3  # strongly dependent views
        assert abs(ab - ba) < 0.05

    def test_identical_copy_recovers_target_entropy(self):
        # exact copy: the conditional drives its NLL to (at least) zero, so
        # the per-dim score reaches the marginal entropy per dim
        n, d = 2500, 2
        rng = RngStream(33, ("copy",))
        z = rng.child("z").normal((n, d))
        chol = np.linalg.cholesky(np.array([[1.0, 0.6], [0.6, 1.0]]))
        base = (z @ chol.T).astype(np.float32)
        split = split_dataset(n, 0.9, seed=33)
        marg, mrec = train_marginal(base, split, TrainConfig.marginal(seed=33, **MARGINAL_FAST),
                                    FLOW_SMALL)
        cond, crec = train_conditional(
            base, base, marg, split,
            TrainConfig.conditional(seed=33, lr=1e-2, batch_size=256, accum_steps=1,
                                    max_epochs=120, patience=120, ema_decay=0.98),
        )
        is_per_dim = (mrec.l_val - crec.l_val) / d
        assert is_per_dim > mrec.l_val / d - 0.05


class TestAggregation:
    def _matrix_from_rows(self, rows):
        # each row holds the k-1 off-diagonal entries of one source model
        k = len(rows[0]) + 1
        raw = np.full((k, k), np.nan)
        for i, row in enumerate(rows):
            cols = [j for j in range(k) if j != i]
            for j, val in zip(cols, row):
                raw[i, j] = val
        ids = [f"m{i}" for i in range(k)]
        return ISMatrix(ids=ids, dims=[1] * k, raw=raw, normalized=raw.copy())

    def test_median_vs_mean_on_outlier_row(self):
        m = self._matrix_from_rows([[1.0, 2.0, 100.0]])
        med = aggregate_scores(m, "median")[0].score
        mean = aggregate_scores(m, "mean")[0].score
        assert med == 2.0
        assert mean == pytest.approx(34.333333, abs=1e-4)

    def test_constant_row_any_method(self):
        m = self._matrix_from_rows([[3.5, 3.5, 3.5]])
        for method in ("median", "mean", "trimmed"):
            assert aggregate_scores(m, method)[0].score == pytest.approx(3.5)

    def test_even_count_median_is_midpoint(self):
        m = self._matrix_from_rows([[1.0, 2.0, 4.0, 10.0]])
        assert aggregate_scores(m, "median")[0].score == pytest.approx(3.0)

    def test_trimmed_drops_floor_fraction(self):
        m = self._matrix_from_rows([[0.0, 1.0, 2.0, 3.0, 100.0]])
        # floor(0.2 * 5) = 1 from each end -> mean of [1, 2, 3]
        assert aggregate_scores(m, "trimmed", trim_frac=0.2)[0].score == pytest.approx(2.0)

    def test_median_robust_to_single_sided_corruption(self):
        rng = RngStream(5)
        for trial in range(50):
            row = np.sort(rng.child("r", trial).normal(5))
            m = self._matrix_from_rows([row.tolist()])
            base = aggregate_scores(m, "median")[0].score
            corrupted = row.copy()
            # push one entry that is already above the median arbitrarily higher
            corrupted[-1] += 1e6
            m2 = self._matrix_from_rows([corrupted.tolist()])
            assert aggregate_scores(m2, "median")[0].score == pytest.approx(base)

    def test_bad_method_rejected(self):
        m = self._matrix_from_rows([[1.0, 2.0]])
        with pytest.raises(ContractViolation):
            aggregate_scores(m, "mode")
        with pytest.raises(ContractViolation):
            aggregate_scores(m, "trimmed", trim_frac=0.7)

    def test_flagged_rows_skip_entries(self):
        m = self._matrix_from_rows([[1.0, np.nan, 3.0]])
        assert aggregate_scores(m, "median")[0].score == pytest.approx(2.0)

    def test_fully_flagged_model_unscored(self):
        k = 3
        raw = np.full((k, k), np.nan)
        raw[1, 0] = raw[1, 2] = 0.5
        raw[2, 0] = raw[2, 1] = 0.2
        m = ISMatrix(ids=["a", "b", "c"], dims=[1, 1, 1], raw=raw, normalized=raw.copy())
        scores = aggregate_scores(m, "median")
        assert scores[0].score is None
        ranked = rank_models(scores)
        assert [s.model_id for s in ranked] == ["b", "c"]


class TestRanking:
    def test_two_models(self):
        m = ISMatrix(ids=["x", "y"], dims=[1, 1],
                     raw=np.array([[np.nan, 0.20], [0.13, np.nan]]),
                     normalized=np.array([[np.nan, 0.20], [0.13, np.nan]]))
        ranked = rank_models(aggregate_scores(m, "median"))
        assert [(s.model_id, s.rank) for s in ranked] == [("x", 1), ("y", 2)]

    def test_paper_pool_scores_with_ties(self):
        # the eight-model pool: Zeta/Linq tie at the top, broken lexicographically
        from flowsuff.sufficiency import ModelScore

        scores = {
            "Zeta_Alpha_E5_Mistral": 0.20,
            "Linq_Embed_Mistral": 0.20,
            "SFR_Embedding_Mistral": 0.19,
            "bge_multilingual_gemma2": 0.19,
            "GritLM_7B": 0.18,
            "gte_Qwen2_7B_instruct": 0.17,
            "stella_base_en_v2": 0.13,
            "all_MiniLM_L6_v2": 0.13,
        }
        ranked = rank_models(
            [ModelScore(model_id=m, method="median", score=s) for m, s in scores.items()]
        )
        assert ranked[0].model_id == "Linq_Embed_Mistral"  # lexicographic tie-break
        assert ranked[1].model_id == "Zeta_Alpha_E5_Mistral"
        assert ranked[0].tied and ranked[1].tied
        assert [s.rank for s in ranked] == list(range(1, 9))
        assert {s.model_id for s in ranked[:2]} == {
            "Zeta_Alpha_E5_Mistral", "Linq_Embed_Mistral"
        }

    def test_input_order_invariance(self):
        from flowsuff.sufficiency import ModelScore

        scores = [ModelScore(f"m{i}", "median", s) for i, s in enumerate([0.3, 0.1, 0.5])]
        a = rank_models(scores)
        b = rank_models(list(reversed(scores)))
        assert [(s.model_id, s.rank) for s in a] == [(s.model_id, s.rank) for s in b]


class TestNormalizationInvariance:
    def test_duplicated_coordinates_keep_per_dim_score(self):
        # doubling the target dim by duplicating coordinates: the duplicate
        # carries no new information, and its (identical) entropy cost
        # appears in both flow terms, so the per-dim score stays within the
        # stated band; moderate rho keeps the band meaningful
        n = 3000
        rng = RngStream(17, ("dup",))
        u, v, _ = gen_correlated_gaussians(n, 1, 1, 0.5, rng)
        jitter = 0.05 * rng.child("jit").normal((n, 2)).astype(np.float32)
        v2 = np.concatenate([v, v], axis=1) + jitter
        split = split_dataset(n, 0.9, seed=17)
        mc = TrainConfig.marginal(seed=17, **MARGINAL_FAST)
        cc = TrainConfig.conditional(seed=17, **CONDITIONAL_FAST)
        is_per_dim = []
        for target, dim in ((v, 1), (v2, 2)):
            marg, _ = train_marginal(target, split, mc, FLOW_SMALL)
            cond, _ = train_conditional(u, target, marg, split, cc)
            est = information_sufficiency(marg, cond, u[split.val_idx],
                                          target[split.val_idx])
            is_per_dim.append(est.is_value / dim)
        assert abs(is_per_dim[0] - is_per_dim[1]) < 0.1
