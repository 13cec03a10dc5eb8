"""Source-inference attacks: loss ranking, residual grouping, baselines."""

import itertools
import math

import numpy as np
import pytest

from unaryquant import attack, data, federation, nn


def toy_layout():
    # 1x2 weights + 2 biases: four parameters
    return nn.ModelLayout.for_config(nn.ModelConfig((1, 2), "relu"))


def build_uq_transcript(client_residuals, global_values=None):
    """Hand-built unary_quant transcript from explicit residual vectors."""
    layout = toy_layout()
    n = len(client_residuals)
    n_params = layout.size
    h = federation.QuantChannel(
        param_ids=np.tile(np.arange(n_params, dtype=np.uint32), n),
        values=np.concatenate([np.asarray(r, dtype=np.float64) for r in client_residuals]),
    )
    h = federation.shuffle_channel(h, np.random.default_rng(42))
    g = np.zeros(n_params) if global_values is None else np.asarray(global_values)
    t = federation.RoundTranscript(
        mode="unary_quant",
        round_index=0,
        cohort=tuple(range(n)),
        global_before=nn.ParamVector(g.copy(), layout),
        u_channel=federation.UnaryCounts(
            ones=np.zeros(n_params, dtype=np.int64), codes_per_param=n, r=4
        ),
        h_channel=h,
    )
    t.global_after = nn.ParamVector(g.copy(), layout)
    truth = federation.RoundGroundTruth(
        cohort=tuple(range(n)),
        endpoints=tuple(
            (float(np.min(r)), float(np.max(r))) for r in client_residuals
        ),
    )
    return t, truth


def two_coloring_oracle(client_residuals):
    """All ways to split the shuffled messages into two one-per-param groups
    with at most two distinct values each; brute force over colorings."""
    a, b = (np.asarray(r) for r in client_residuals)
    n_params = len(a)
    recoveries = set()
    for coloring in itertools.product([0, 1], repeat=n_params):
        g0 = tuple(a[i] if c == 0 else b[i] for i, c in enumerate(coloring))
        g1 = tuple(b[i] if c == 0 else a[i] for i, c in enumerate(coloring))
        if len(set(g0)) <= 2 and len(set(g1)) <= 2:
            recoveries.add(frozenset([g0, g1]))
    return recoveries


def overfit_partition(seed=0):
    """Clients with fully disjoint classes; local models memorize them."""
    ds = data.synthetic_gaussian(40, 4, 8, seed=seed, noise=0.08)
    part = []
    for c in range(4):
        mask = ds.labels == c
        part.append(
            data.ClientDataset(
                features=ds.features[mask],
                labels=ds.labels[mask],
                class_histogram=np.bincount(ds.labels[mask], minlength=4),
                indices=np.nonzero(mask)[0],
                n_classes=4,
            )
        )
    return ds, part


def run_pair(part, ds, seed=3, rounds=4, lr=0.4):
    results = {}
    for mode in ("standard", "unary_quant"):
        cfg = federation.FLConfig(
            rounds=rounds, n_clients=4, cohort=4, k=2, r=20, lr=lr, epochs=2,
            batch_size=8, mode=mode, seed=seed,
            model=nn.ModelConfig((8, 6, 4), "relu", seed=seed),
        )
        results[mode] = federation.run_rounds(cfg, part, (ds.features, ds.labels))
    return results


class TestLossBased:
    def test_disjoint_classes_identified(self):
        ds, part = overfit_partition()
        results = run_pair(part, ds)
        transcript = results["standard"].records[-1].transcript
        # a record only client 0 trains on
        target = attack.AttackTarget(
            features=part[0].features[0], label=int(part[0].labels[0]), true_source=0
        )
        report = attack.sia_loss_based(transcript, [target])
        assert report.predictions[0] == 0
        assert report.accuracy == 1.0

    def test_monotone_sanity_overfit(self):
        ds, part = overfit_partition()
        results = run_pair(part, ds)
        targets = attack.draw_targets(part, 20, np.random.default_rng(1))
        report = attack.sia_loss_based(results["standard"].records[-1].transcript, targets)
        assert report.accuracy >= 0.9

    def test_identical_models_degenerate_tiebreak(self):
        # eta=0: every local model equals the broadcast model, so argmin
        # always picks the lowest client; balanced targets give exactly 1/N
        ds, part = overfit_partition()
        cfg = federation.FLConfig(
            rounds=1, n_clients=4, cohort=4, k=2, r=10, lr=0.0, epochs=1,
            batch_size=8, mode="standard", seed=0,
            model=nn.ModelConfig((8, 6, 4), "relu", seed=0),
        )
        res = federation.run_rounds(cfg, part, (ds.features, ds.labels))
        targets = attack.draw_targets(part, 25, np.random.default_rng(2))
        report = attack.sia_loss_based(res.records[-1].transcript, targets)
        assert report.accuracy == pytest.approx(0.25)

    def test_mode_error_on_unary_quant(self):
        t, _ = build_uq_transcript([[1e-4, 2e-4, 3e-4, 4e-4], [5e-4, 6e-4, 7e-4, 8e-4]])
        with pytest.raises(federation.ModeError):
            attack.sia_loss_based(t, [])

    def test_deterministic(self):
        ds, part = overfit_partition()
        results = run_pair(part, ds)
        targets = attack.draw_targets(part, 10, np.random.default_rng(5))
        t = results["standard"].records[-1].transcript
        a = attack.sia_loss_based(t, targets)
        b = attack.sia_loss_based(t, targets)
        assert a.accuracy == b.accuracy
        assert np.array_equal(a.predictions, b.predictions)


class TestUnaryQuantGrouping:
    def test_exact_recovery_vs_coloring_oracle(self):
        # distinct endpoints, lambda=4: the grouped attack must recover the
        # true residual vectors, and the brute-force coloring oracle must
        # agree that the recovery is the only consistent one
        res_a = [1e-4, 9e-4, 9e-4, 1e-4]
        res_b = [7e-4, 2e-4, 7e-4, 7e-4]
        t, truth = build_uq_transcript([res_a, res_b])
        distinct, presence = attack._presence_matrix(
            t.h_channel.param_ids, t.h_channel.values, 4
        )
        pairs = attack._match_value_pairs(presence, 4, budget=4096)
        assert pairs is not None and len(pairs) == 2
        recovered = set()
        for i, j in pairs:
            recovered.add(tuple(np.where(presence[i] == 1, distinct[i], distinct[j])))
        oracle = two_coloring_oracle([res_a, res_b])
        assert len(oracle) == 1
        expected = {tuple(g) for g in next(iter(oracle))}
        assert recovered == expected

    def test_report_scores_with_ground_truth(self):
        res_a = [1e-4, 9e-4, 9e-4, 1e-4]
        res_b = [7e-4, 2e-4, 7e-4, 7e-4]
        t, truth = build_uq_transcript([res_a, res_b])
        rng = np.random.default_rng(0)
        targets = [
            attack.AttackTarget(features=rng.random(1), label=0, true_source=0),
            attack.AttackTarget(features=rng.random(1), label=1, true_source=1),
        ]
        report = attack.sia_on_unary_quant(t, targets, ground_truth=truth)
        assert report.grouping_recovered is True
        assert set(report.predictions.tolist()) <= {0, 1}

    def test_shared_endpoints_fall_back_to_random(self):
        shared = [1e-4, 9e-4, 9e-4, 1e-4]
        t, truth = build_uq_transcript([shared, shared])
        rng = np.random.default_rng(1)
        targets = [
            attack.AttackTarget(features=rng.random(1), label=i % 2, true_source=i % 2)
            for i in range(2000)
        ]
        report = attack.sia_on_unary_quant(
            t, targets, ground_truth=truth, rng=np.random.default_rng(3)
        )
        assert report.grouping_recovered is False
        sigma = math.sqrt(0.25 / 2000)
        assert abs(report.accuracy - 0.5) <= 4 * sigma

    def test_never_touches_client_updates(self):
        # the transcript type refuses to carry them in this mode at all
        layout = toy_layout()
        with pytest.raises(federation.ModeError):
            federation.RoundTranscript(
                mode="unary_quant",
                round_index=0,
                cohort=(0,),
                global_before=nn.ParamVector(np.zeros(layout.size), layout),
                per_client_updates=[nn.ParamVector(np.zeros(layout.size), layout)],
            )

    def test_full_run_end_to_end(self):
        ds, part = overfit_partition()
        results = run_pair(part, ds)
        rec = results["unary_quant"].records[-1]
        targets = attack.draw_targets(part, 20, np.random.default_rng(9))
        report = attack.sia_on_unary_quant(
            rec.transcript, targets, ground_truth=rec.ground_truth,
            rng=np.random.default_rng(10),
        )
        assert 0.0 <= report.accuracy <= 1.0
        assert report.random_baseline == 0.25

    def test_degenerate_many_valued_channel_skips_matrix(self):
        # a degenerate quantizer can leak one distinct value per parameter;
        # the attack must fall back without building the counts matrix
        rng = np.random.default_rng(2)
        res_a = rng.uniform(0, 1e-3, 4)  # four distinct values from one client
        res_b = rng.uniform(0, 1e-3, 4)
        t, truth = build_uq_transcript([res_a, res_b])
        distinct, presence = attack._presence_matrix(
            t.h_channel.param_ids, t.h_channel.values, 4, max_values=2 * 2
        )
        assert presence is None and distinct.shape[0] == 8
        targets = [
            attack.AttackTarget(features=rng.random(1), label=0, true_source=0)
            for _ in range(50)
        ]
        report = attack.sia_on_unary_quant(
            t, targets, ground_truth=truth, rng=np.random.default_rng(3)
        )
        assert report.grouping_recovered is False

    def test_known_stats_weights_fallback(self):
        shared = [1e-4, 9e-4, 9e-4, 1e-4]
        t, truth = build_uq_transcript([shared, shared])
        rng = np.random.default_rng(1)
        # client 0 holds only label 0, client 1 only label 1
        stats = np.array([[100, 0], [0, 100]])
        targets = [
            attack.AttackTarget(features=rng.random(1), label=i % 2, true_source=i % 2)
            for i in range(400)
        ]
        report = attack.sia_on_unary_quant(
            t, targets, known_stats=stats, ground_truth=truth,
            rng=np.random.default_rng(5),
        )
        # the label histogram fully identifies the source here
        assert report.accuracy == 1.0


class TestRandomBaseline:
    def balanced_targets(self, n_clients, per_client):
        rng = np.random.default_rng(0)
        return [
            attack.AttackTarget(features=rng.random(2), label=0, true_source=c)
            for c in range(n_clients)
            for _ in range(per_client)
        ]

    def test_ten_clients_ten_thousand_targets(self):
        targets = self.balanced_targets(10, 1000)
        report = attack.sia_random_baseline(10, targets, np.random.default_rng(8))
        assert abs(report.accuracy - 0.10) <= 0.01

    def test_single_client(self):
        targets = self.balanced_targets(1, 5)
        report = attack.sia_random_baseline(1, targets, np.random.default_rng(0))
        assert report.accuracy == 1.0

    def test_two_clients(self):
        targets = self.balanced_targets(2, 5000)
        report = attack.sia_random_baseline(2, targets, np.random.default_rng(4))
        assert abs(report.accuracy - 0.5) <= 0.015

    def test_concentration_with_target_count(self):
        # accuracy approaches 1/N as the target count grows
        rng = np.random.default_rng(11)
        deviations = []
        for n_targets in (100, 1000, 10000):
            targets = self.balanced_targets(5, n_targets // 5)
            report = attack.sia_random_baseline(5, targets, rng)
            deviations.append(abs(report.accuracy - 0.2))
        assert deviations[-1] <= 0.012
        assert deviations[-1] <= deviations[0] + 0.01


class TestEvaluateAttacks:
    def test_comparison_table(self):
        ds, part = overfit_partition()
        results = run_pair(part, ds)
        comparison = attack.evaluate_attacks(
            results["standard"], results["unary_quant"], targets_per_client=15, seed=2
        )
        assert [row[0] for row in comparison.rows] == ["standard", "unary_quant"]
        table = comparison.format_table()
        assert "standard" in table and "unary_quant" in table
        assert comparison.random_baseline == 0.25

    def test_mismatched_configs_rejected(self):
        ds, part = overfit_partition()
        results = run_pair(part, ds)
        other = run_pair(part, ds, seed=99)
        with pytest.raises(attack.ComparisonError):
            attack.evaluate_attacks(results["standard"], other["unary_quant"], 5, seed=0)
        with pytest.raises(attack.ComparisonError):
            attack.evaluate_attacks(results["standard"], results["standard"], 5, seed=0)

    def test_degenerate_identical_models_at_baseline(self):
        ds, part = overfit_partition()
        runs = {}
        for mode in ("standard", "unary_quant"):
            cfg = federation.FLConfig(
                rounds=1, n_clients=4, cohort=4, k=2, r=20, lr=0.0, epochs=1,
                batch_size=8, mode=mode, seed=1,
                model=nn.ModelConfig((8, 6, 4), "relu", seed=1),
            )
            runs[mode] = federation.run_rounds(cfg, part, (ds.features, ds.labels))
        comparison = attack.evaluate_attacks(
            runs["standard"], runs["unary_quant"], targets_per_client=50, seed=3
        )
        for _, _, sia_acc in comparison.rows:
            assert abs(sia_acc - 0.25) <= 0.15
