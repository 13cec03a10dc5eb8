"""Round protocol: channels, shuffling, aggregation, full runs."""

import math
from itertools import permutations

import numpy as np
import pytest

from unaryquant import codec, data, federation, nn


def make_config(mode="unary_quant", **overrides):
    defaults = dict(
        rounds=3,
        n_clients=4,
        cohort=4,
        k=2,
        r=20,
        lr=0.3,
        epochs=1,
        batch_size=8,
        mode=mode,
        seed=5,
        model=nn.ModelConfig((8, 6, 3), "relu", seed=5),
    )
    defaults.update(overrides)
    return federation.FLConfig(**defaults)


def make_partition(n_clients=4, seed=0):
    ds = data.synthetic_gaussian(60, 3, 8, seed=seed)
    return ds, data.dirichlet_partition(ds, data.PartitionSpec(n_clients, 0.5, seed=seed))


def random_transcript(rng, n=3, r=10, k=2):
    """A structurally valid unary_quant transcript from random updates."""
    layout = nn.ModelLayout.for_config(nn.ModelConfig((1, 3), "relu"))
    n_params = layout.size
    updates = rng.uniform(-1, 1, (n, n_params))
    bit_blocks, h_blocks = [], []
    for row in updates:
        codes, q = codec.unary_quant(row, r, k, rng)
        bit_blocks.append(np.concatenate([c.bits for c in codes]))
        h_blocks.append(q.values)
    u = federation.UnaryChannel(
        param_ids=np.tile(np.repeat(np.arange(n_params, dtype=np.uint32), r), n),
        bits=np.concatenate(bit_blocks),
    )
    h = federation.QuantChannel(
        param_ids=np.tile(np.arange(n_params, dtype=np.uint32), n),
        values=np.concatenate(h_blocks),
    )
    global_model = nn.ParamVector(values=np.zeros(layout.size), layout=layout)
    t = federation.RoundTranscript(
        mode="unary_quant",
        round_index=0,
        cohort=tuple(range(n)),
        global_before=global_model,
        u_channel=u,
        h_channel=h,
    )
    return t, updates


class TestClientStep:
    def test_message_counts(self):
        ds, part = make_partition()
        cfg = make_config()
        global_model = nn.init_params(cfg.model)
        u, h = federation.client_step(global_model, part[0], cfg, np.random.default_rng(1))
        n_params = global_model.layout.size
        assert len(u) == cfg.r * n_params
        assert len(h) == n_params
        assert isinstance(u.message(0), federation.UnaryMessage)
        assert isinstance(h.message(0), federation.QuantMessage)

    def test_mode_guard(self):
        ds, part = make_partition()
        cfg = make_config(mode="standard")
        global_model = nn.init_params(cfg.model)
        with pytest.raises(federation.ModeError):
            federation.client_step(global_model, part[0], cfg, np.random.default_rng(1))

    def test_zero_update_decodes_to_zero_in_expectation(self):
        ds, part = make_partition()
        cfg = make_config(lr=0.0, r=50)
        layout = nn.ModelLayout.for_config(cfg.model)
        zero_model = nn.ParamVector(values=np.zeros(layout.size), layout=layout)
        rng = np.random.default_rng(3)
        total_ones = 0
        reps = 200
        for _ in range(reps):
            u, h = federation.client_step(zero_model, part[0], cfg, rng)
            total_ones += int(u.bits.sum())
        decoded = codec.unary_decode(total_ones, reps * layout.size, cfg.r)
        assert abs(decoded) < 0.01

    def test_single_client_reconstruction(self):
        # server estimate of a lone client's model is within the unary
        # granularity plus the residual quantizer's span
        ds, part = make_partition(n_clients=4, seed=2)
        cfg = make_config(k=3, r=1000, n_clients=4, cohort=1, rounds=1)
        global_model = nn.init_params(cfg.model)
        rng = np.random.default_rng(9)
        local = nn.local_train(global_model, part[1], cfg.lr, cfg.epochs, cfg.batch_size, rng)
        u, h = federation.client_step(global_model, part[1], cfg, np.random.default_rng(9))
        # re-derive the same local model: client_step consumed the stream
        # identically up to encoding
        ones = u.ones_per_param(global_model.layout.size)
        est = codec.unary_decode_array(ones, 1, cfg.r) + h.values
        assert np.max(np.abs(est - local.values)) <= 2.0 / cfg.r + 10.0**-cfg.k


class TestShuffleChannel:
    def test_multiset_preserved(self):
        rng = np.random.default_rng(0)
        t, _ = random_transcript(rng)
        shuffled = federation.shuffle_channel(t.u_channel, np.random.default_rng(1))
        before = sorted(zip(t.u_channel.param_ids.tolist(), t.u_channel.bits.tolist()))
        after = sorted(zip(shuffled.param_ids.tolist(), shuffled.bits.tolist()))
        assert before == after

    def test_empty(self):
        empty = federation.QuantChannel(
            param_ids=np.empty(0, dtype=np.uint32), values=np.empty(0)
        )
        out = federation.shuffle_channel(empty, np.random.default_rng(0))
        assert len(out) == 0

    def test_permutation_distribution(self):
        # all 24 orders of 4 distinct items equally likely: 1e4 shuffles,
        # per-order count within 4 sigma of Binomial(1e4, 1/24)
        channel = federation.QuantChannel(
            param_ids=np.arange(4, dtype=np.uint32), values=np.arange(4.0)
        )
        rng = np.random.default_rng(123)
        counts = {p: 0 for p in permutations(range(4))}
        reps = 10_000
        for _ in range(reps):
            out = federation.shuffle_channel(channel, rng)
            counts[tuple(out.param_ids.tolist())] += 1
        expected = reps / 24
        sigma = math.sqrt(reps * (1 / 24) * (23 / 24))
        for order, count in counts.items():
            assert abs(count - expected) <= 4 * sigma, (order, count)

    def test_counts_form_passthrough(self):
        u = federation.UnaryCounts(ones=np.array([3, 1]), codes_per_param=2, r=5)
        out = federation.shuffle_channel(u, np.random.default_rng(0))
        assert isinstance(out, federation.UnaryCounts)
        assert np.array_equal(out.ones, u.ones)

    def test_list_passthrough(self):
        out = federation.shuffle_channel([1, 2, 3, 4], np.random.default_rng(4))
        assert sorted(out) == [1, 2, 3, 4]


class TestAggregateUnaryQuant:
    def test_two_client_oracle(self):
        # clients hold 0.4 and -0.2; decoded aggregate approaches 0.1.
        # MC mean over 1000 rounds within 4 sigma.
        layout = nn.ModelLayout.for_config(nn.ModelConfig((1, 1), "relu"))
        h0, h1 = 0.4, -0.2
        rng = np.random.default_rng(77)
        reps, r, k, n = 1000, 100, 3, 2
        total = 0.0
        for _ in range(reps):
            bit_blocks, h_blocks = [], []
            for value in (h0, h1):
                codes, q = codec.unary_quant(np.full(layout.size, value), r, k, rng)
                bit_blocks.append(np.concatenate([c.bits for c in codes]))
                h_blocks.append(q.values)
            t = federation.RoundTranscript(
                mode="unary_quant",
                round_index=0,
                cohort=(0, 1),
                global_before=nn.ParamVector(np.zeros(layout.size), layout),
                u_channel=federation.UnaryChannel(
                    param_ids=np.tile(np.repeat(np.arange(layout.size, dtype=np.uint32), r), n),
                    bits=np.concatenate(bit_blocks),
                ),
                h_channel=federation.QuantChannel(
                    param_ids=np.tile(np.arange(layout.size, dtype=np.uint32), n),
                    values=np.concatenate(h_blocks),
                ),
            )
            total += federation.server_aggregate_unary_quant(t, n, r, k).values[0]
        # per-round estimate sigma <= sqrt(2/4)/ (n r / 2)  (one Bernoulli
        # bit per client) plus negligible residual noise
        sigma_round = 2.0 / (n * r) * math.sqrt(0.5)
        assert abs(total / reps - 0.1) <= 4 * sigma_round / math.sqrt(reps) + 1e-6

    def test_identical_updates_fixed_point_in_expectation(self):
        rng = np.random.default_rng(5)
        layout = nn.ModelLayout.for_config(nn.ModelConfig((2, 2), "relu"))
        update = rng.uniform(-1, 1, layout.size)
        reps, n, r, k = 400, 3, 50, 2
        acc = np.zeros(layout.size)
        for _ in range(reps):
            bit_blocks, h_blocks = [], []
            for _ in range(n):
                codes, q = codec.unary_quant(update, r, k, rng)
                bit_blocks.append(np.concatenate([c.bits for c in codes]))
                h_blocks.append(q.values)
            t = federation.RoundTranscript(
                mode="unary_quant",
                round_index=0,
                cohort=tuple(range(n)),
                global_before=nn.ParamVector(np.zeros(layout.size), layout),
                u_channel=federation.UnaryChannel(
                    param_ids=np.tile(np.repeat(np.arange(layout.size, dtype=np.uint32), r), n),
                    bits=np.concatenate(bit_blocks),
                ),
                h_channel=federation.QuantChannel(
                    param_ids=np.tile(np.arange(layout.size, dtype=np.uint32), n),
                    values=np.concatenate(h_blocks),
                ),
            )
            acc += federation.server_aggregate_unary_quant(t, n, r, k).values
        assert np.max(np.abs(acc / reps - update)) < 0.01

    def test_permutation_invariance_bit_identical(self):
        rng = np.random.default_rng(8)
        t, _ = random_transcript(rng)
        base = federation.server_aggregate_unary_quant(t, 3, 10, 2).values
        for seed in range(5):
            shuffled = federation.RoundTranscript(
                mode="unary_quant",
                round_index=0,
                cohort=t.cohort,
                global_before=t.global_before,
                u_channel=federation.shuffle_channel(t.u_channel, np.random.default_rng(seed)),
                h_channel=federation.shuffle_channel(t.h_channel, np.random.default_rng(seed + 99)),
            )
            out = federation.server_aggregate_unary_quant(shuffled, 3, 10, 2).values
            assert np.array_equal(base, out)

    def test_missing_param_protocol_error(self):
        rng = np.random.default_rng(8)
        t, _ = random_transcript(rng)
        broken = federation.RoundTranscript(
            mode="unary_quant",
            round_index=0,
            cohort=t.cohort,
            global_before=t.global_before,
            u_channel=federation.UnaryChannel(
                param_ids=t.u_channel.param_ids[:-3], bits=t.u_channel.bits[:-3]
            ),
            h_channel=t.h_channel,
        )
        with pytest.raises(federation.ProtocolError, match="param_id"):
            federation.server_aggregate_unary_quant(broken, 3, 10, 2)

    def test_mode_guard(self):
        layout = nn.ModelLayout.for_config(nn.ModelConfig((2, 2), "relu"))
        t = federation.RoundTranscript(
            mode="standard",
            round_index=0,
            cohort=(0,),
            global_before=nn.ParamVector(np.zeros(layout.size), layout),
            per_client_updates=[nn.ParamVector(np.zeros(layout.size), layout)],
        )
        with pytest.raises(federation.ModeError):
            federation.server_aggregate_unary_quant(t, 1, 10, 2)


class TestAggregateStandard:
    def layout(self):
        return nn.ModelLayout.for_config(nn.ModelConfig((1, 1), "relu"))

    def test_opposite_updates_cancel(self):
        layout = self.layout()
        updates = [
            nn.ParamVector(np.full(layout.size, 1.0), layout),
            nn.ParamVector(np.full(layout.size, -1.0), layout),
        ]
        assert federation.server_aggregate_standard(updates).values.tolist() == [0.0, 0.0]

    def test_single_update_identity(self):
        layout = self.layout()
        u = nn.ParamVector(np.array([0.25, -0.5]), layout)
        assert np.array_equal(federation.server_aggregate_standard([u]).values, u.values)

    def test_matches_scalar_mean_oracle(self):
        rng = np.random.default_rng(3)
        layout = nn.ModelLayout.for_config(nn.ModelConfig((24, 40), "relu"))
        stacks = rng.uniform(-1, 1, (10, layout.size))
        updates = [nn.ParamVector(row.copy(), layout) for row in stacks]
        agg = federation.server_aggregate_standard(updates).values
        for j in range(0, layout.size, 97):
            s = 0.0
            for i in range(10):
                s += stacks[i, j]
            assert abs(agg[j] - s / 10) <= 1e-12

    def test_errors(self):
        layout = self.layout()
        with pytest.raises(ValueError):
            federation.server_aggregate_standard([])
        with pytest.raises(ValueError):
            federation.server_aggregate_standard(
                [nn.ParamVector(np.zeros(2), layout), np.zeros(3)]
            )


class TestTranscriptBarrier:
    def test_unary_quant_rejects_client_updates(self):
        layout = nn.ModelLayout.for_config(nn.ModelConfig((2, 2), "relu"))
        with pytest.raises(federation.ModeError):
            federation.RoundTranscript(
                mode="unary_quant",
                round_index=0,
                cohort=(0,),
                global_before=nn.ParamVector(np.zeros(layout.size), layout),
                per_client_updates=[nn.ParamVector(np.zeros(layout.size), layout)],
            )

    def test_standard_rejects_channels(self):
        layout = nn.ModelLayout.for_config(nn.ModelConfig((2, 2), "relu"))
        with pytest.raises(federation.ModeError):
            federation.RoundTranscript(
                mode="standard",
                round_index=0,
                cohort=(0,),
                global_before=nn.ParamVector(np.zeros(layout.size), layout),
                h_channel=federation.QuantChannel(
                    param_ids=np.zeros(1, dtype=np.uint32), values=np.zeros(1)
                ),
            )


class TestRunRounds:
    def test_zero_rounds(self):
        ds, part = make_partition()
        cfg = make_config(rounds=0)
        result = federation.run_rounds(cfg, part, (ds.features, ds.labels))
        assert result.records == []
        assert np.array_equal(result.final_model.values, result.init_model.values)

    def test_message_count_conservation(self):
        ds, part = make_partition()
        cfg = make_config(u_channel="explicit")
        result = federation.run_rounds(cfg, part, (ds.features, ds.labels))
        n_params = result.init_model.layout.size
        for rec in result.records:
            assert len(rec.transcript.u_channel) == cfg.cohort * cfg.r * n_params
            assert len(rec.transcript.h_channel) == cfg.cohort * n_params

    def test_deterministic_runs(self):
        ds, part = make_partition()
        cfg = make_config()
        a = federation.run_rounds(cfg, part, (ds.features, ds.labels))
        b = federation.run_rounds(cfg, part, (ds.features, ds.labels))
        assert np.array_equal(a.final_model.values, b.final_model.values)
        for ra, rb in zip(a.records, b.records):
            assert ra.metrics == rb.metrics
            assert np.array_equal(
                ra.transcript.h_channel.values, rb.transcript.h_channel.values
            )

    def test_counts_and_explicit_agree(self):
        # identical client streams make the two representations produce the
        # same per-parameter ones-counts, hence identical aggregates
        ds, part = make_partition()
        explicit = federation.run_rounds(
            make_config(u_channel="explicit"), part, (ds.features, ds.labels)
        )
        counted = federation.run_rounds(
            make_config(u_channel="counts"), part, (ds.features, ds.labels)
        )
        n_params = explicit.init_model.layout.size
        for re_, rc in zip(explicit.records, counted.records):
            assert np.array_equal(
                re_.transcript.u_channel.ones_per_param(n_params),
                rc.transcript.u_channel.ones_per_param(n_params),
            )
            assert np.array_equal(
                re_.transcript.global_after.values, rc.transcript.global_after.values
            )
            assert re_.metrics == rc.metrics

    def test_standard_mode_records_updates(self):
        ds, part = make_partition()
        cfg = make_config(mode="standard")
        result = federation.run_rounds(cfg, part, (ds.features, ds.labels))
        for rec in result.records:
            assert rec.transcript.per_client_updates is not None
            assert len(rec.transcript.per_client_updates) == cfg.cohort
            assert rec.transcript.u_channel is None
            assert rec.metrics.u_bits == 0

    def test_unary_quant_records_bits_and_ground_truth(self):
        ds, part = make_partition()
        cfg = make_config()
        n_params = nn.ModelLayout.for_config(cfg.model).size
        result = federation.run_rounds(cfg, part, (ds.features, ds.labels))
        for rec in result.records:
            assert rec.metrics.u_bits == cfg.cohort * cfg.r * n_params
            assert rec.metrics.h_bits == cfg.cohort * n_params * cfg.value_bits
            assert rec.ground_truth is not None
            assert len(rec.ground_truth.endpoints) == cfg.cohort

    def test_cohort_subsampling(self):
        ds, part = make_partition(n_clients=6, seed=3)
        cfg = make_config(n_clients=6, cohort=3, mode="standard")
        result = federation.run_rounds(cfg, part, (ds.features, ds.labels))
        seen = set()
        for rec in result.records:
            assert len(rec.transcript.cohort) == 3
            assert len(set(rec.transcript.cohort)) == 3
            seen.update(rec.transcript.cohort)
        assert seen <= set(range(6))

    def test_expectation_equivalence_with_standard(self):
        # with eta=0 the local models equal the broadcast model, so the
        # decoded aggregate must match the standard aggregate in expectation
        ds, part = make_partition()
        base = nn.init_params(make_config().model)
        reps = 300
        acc = np.zeros(base.layout.size)
        for seed in range(reps):
            cfg = make_config(lr=0.0, rounds=1, seed=seed, r=50)
            result = federation.run_rounds(cfg, part, (ds.features, ds.labels))
            acc += result.final_model.values
        std = federation.run_rounds(
            make_config(mode="standard", lr=0.0, rounds=1), part, (ds.features, ds.labels)
        )
        assert np.max(np.abs(acc / reps - std.final_model.values)) < 0.01

    def test_partition_size_mismatch(self):
        ds, part = make_partition()
        cfg = make_config(n_clients=7, cohort=7)
        with pytest.raises(ValueError):
            federation.run_rounds(cfg, part, (ds.features, ds.labels))


class TestFLConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            make_config(mode="secure")
        with pytest.raises(ValueError):
            make_config(cohort=9)
        with pytest.raises(ValueError):
            make_config(k=0)
        with pytest.raises(ValueError):
            make_config(r=0)
        with pytest.raises(ValueError):
            make_config(u_channel="zip")

    def test_auto_representation_thresholds(self):
        cfg = make_config(u_channel="auto", r=20)
        assert cfg.resolve_u_channel(100) == "explicit"
        assert cfg.resolve_u_channel(10**7) == "counts"
