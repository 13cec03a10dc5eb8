"""The round protocol: clients, a trusted shuffler, and an aggregating server.

Two modes share one loop. In ``standard`` mode the server receives each
client's updated model directly, which is what a source-inference adversary
exploits. In ``unary_quant`` mode every client encodes its update through
the codec, the shuffler permutes the pooled unary-bit and residual channels,
and the server reconstructs the average from per-parameter bit counts and
residual means alone, never seeing a per-client update.

Channels are columnar multisets: parallel numpy arrays in which element i is
one message. For large configurations the unary channel may be stored as
per-parameter ones-counts instead (``FLConfig.u_channel``); the counts form
is the canonical representation of the shuffled multiset, is produced by the
same encoder kernel with identical stream consumption, and carries exactly
the information the server uses. Explicit channels stay the default at test
scale, where the shuffler is exercised physically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import codec, nn

MODES = ("standard", "unary_quant")
U_CHANNEL_CHOICES = ("explicit", "counts", "auto")

# auto switches the unary channel to counts above this many messages/round
EXPLICIT_U_LIMIT = 2**24


class ProtocolError(ValueError):
    """A round's channels are structurally inconsistent with the config."""


class ModeError(ValueError):
    """An operation was applied to a transcript of the wrong mode."""


@dataclass(frozen=True)
class UnaryMessage:
    param_id: int
    bit: int


@dataclass(frozen=True)
class QuantMessage:
    param_id: int
    value: float


@dataclass
class UnaryChannel:
    """Multiset of (param_id, bit) messages in columnar form."""

    param_ids: np.ndarray
    bits: np.ndarray

    def __post_init__(self) -> None:
        if self.param_ids.shape != self.bits.shape:
            raise ValueError("param_ids and bits must be parallel arrays")

    def __len__(self) -> int:
        return int(self.param_ids.shape[0])

    def message(self, i: int) -> UnaryMessage:
        return UnaryMessage(int(self.param_ids[i]), int(self.bits[i]))

    def to_messages(self) -> list[UnaryMessage]:
        return [self.message(i) for i in range(len(self))]

    @classmethod
    def from_messages(cls, messages) -> "UnaryChannel":
        return cls(
            param_ids=np.array([m.param_id for m in messages], dtype=np.uint32),
            bits=np.array([m.bit for m in messages], dtype=np.uint8),
        )

    def ones_per_param(self, n_params: int) -> np.ndarray:
        return np.bincount(self.param_ids[self.bits == 1], minlength=n_params)

    def messages_per_param(self, n_params: int) -> np.ndarray:
        return np.bincount(self.param_ids, minlength=n_params)


@dataclass
class UnaryCounts:
    """Canonical multiset form of a unary channel: ones-count per parameter.

    Represents the same multiset as an explicit channel with
    ``codes_per_param * r`` messages per parameter, of which ``ones[i]``
    carry a one bit.
    """

    ones: np.ndarray
    codes_per_param: int
    r: int

    def __len__(self) -> int:
        return int(self.ones.shape[0]) * self.codes_per_param * self.r

    def ones_per_param(self, n_params: int) -> np.ndarray:
        if self.ones.shape[0] != n_params:
            raise ProtocolError(
                f"counts cover {self.ones.shape[0]} parameters, expected {n_params}"
            )
        return self.ones

    def messages_per_param(self, n_params: int) -> np.ndarray:
        return np.full(n_params, self.codes_per_param * self.r, dtype=np.int64)


@dataclass
class QuantChannel:
    """Multiset of (param_id, residual value) messages in columnar form."""

    param_ids: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.param_ids.shape != self.values.shape:
            raise ValueError("param_ids and values must be parallel arrays")

    def __len__(self) -> int:
        return int(self.param_ids.shape[0])

    def message(self, i: int) -> QuantMessage:
        return QuantMessage(int(self.param_ids[i]), float(self.values[i]))

    def to_messages(self) -> list[QuantMessage]:
        return [self.message(i) for i in range(len(self))]

    @classmethod
    def from_messages(cls, messages) -> "QuantChannel":
        return cls(
            param_ids=np.array([m.param_id for m in messages], dtype=np.uint32),
            values=np.array([m.value for m in messages], dtype=np.float64),
        )

    def messages_per_param(self, n_params: int) -> np.ndarray:
        return np.bincount(self.param_ids, minlength=n_params)


@dataclass(frozen=True)
class FLConfig:
    rounds: int
    n_clients: int
    cohort: int
    k: int
    r: int
    lr: float
    epochs: int
    batch_size: int
    mode: str
    seed: int
    model: nn.ModelConfig
    encoder_mode: str = "general"
    u_channel: str = "auto"
    value_bits: int = 64
    param_id_bits: int = 32

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if not (1 <= self.cohort <= self.n_clients):
            raise ValueError(
                f"cohort size {self.cohort} must be in 1..{self.n_clients}"
            )
        if not (1 <= self.k <= 9):
            raise ValueError(f"split depth k={self.k} outside 1..9")
        if self.r < 1:
            raise ValueError(f"code length r={self.r} must be >= 1")
        if self.encoder_mode not in codec.ENCODER_MODES:
            raise ValueError(f"unknown encoder mode {self.encoder_mode!r}")
        if self.u_channel not in U_CHANNEL_CHOICES:
            raise ValueError(f"unknown u_channel choice {self.u_channel!r}")

    def resolve_u_channel(self, n_params: int) -> str:
        if self.u_channel != "auto":
            return self.u_channel
        total = self.cohort * self.r * n_params
        return "explicit" if total <= EXPLICIT_U_LIMIT else "counts"


@dataclass
class RoundTranscript:
    """Everything the server observes in one round.

    In unary_quant mode the per-client updates must be absent; the type
    enforces this so attack code physically cannot reach them.
    """

    mode: str
    round_index: int
    cohort: tuple[int, ...]
    global_before: nn.ParamVector
    u_channel: UnaryChannel | UnaryCounts | None = None
    h_channel: QuantChannel | None = None
    per_client_updates: list[nn.ParamVector] | None = None
    global_after: nn.ParamVector | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ModeError(f"unknown mode {self.mode!r}")
        if self.mode == "unary_quant" and self.per_client_updates is not None:
            raise ModeError(
                "unary_quant transcripts must not carry per-client updates"
            )
        if self.mode == "standard" and (
            self.u_channel is not None or self.h_channel is not None
        ):
            raise ModeError("standard transcripts carry no shuffled channels")


@dataclass(frozen=True)
class RoundMetrics:
    round_index: int
    mode: str
    train_loss: float
    test_loss: float
    test_acc: float
    u_bits: int
    h_bits: int


@dataclass(frozen=True)
class RoundGroundTruth:
    """Evaluation-only record of what each cohort client actually emitted.

    Never part of the transcript; attack scoring uses it to translate
    recovered anonymous groups back to client identities.
    """

    cohort: tuple[int, ...]
    endpoints: tuple[tuple[float, float], ...]


@dataclass
class RoundRecord:
    metrics: RoundMetrics
    transcript: RoundTranscript
    ground_truth: RoundGroundTruth | None = None


@dataclass
class RunResult:
    cfg: FLConfig
    records: list[RoundRecord]
    init_model: nn.ParamVector
    final_model: nn.ParamVector
    partition: list = field(default_factory=list)

    @property
    def final_record(self) -> RoundRecord:
        if not self.records:
            raise ValueError("run has no rounds")
        return self.records[-1]

    def metrics_rows(self) -> list[RoundMetrics]:
        return [rec.metrics for rec in self.records]


def _round_rng(seed: int, round_index: int, role: tuple[int, ...]) -> np.random.Generator:
    """Deterministic per-(round, role) stream from the master seed."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(round_index, *role))
    )


def client_step(
    global_model: nn.ParamVector,
    data,
    cfg: FLConfig,
    rng: np.random.Generator,
) -> tuple[UnaryChannel, QuantChannel]:
    """Train locally, encode, and flatten into per-message channels.

    Produces exactly r * n_params unary messages (one per code bit, tagged
    with its parameter's flat index) and n_params residual messages.
    """
    if cfg.mode != "unary_quant":
        raise ModeError("client_step encodes updates only in unary_quant mode")
    local = nn.local_train(global_model, data, cfg.lr, cfg.epochs, cfg.batch_size, rng)
    bits, quantized = _encode_explicit(local.values, cfg, rng)
    n_params = local.values.shape[0]
    u = UnaryChannel(
        param_ids=np.repeat(np.arange(n_params, dtype=np.uint32), cfg.r),
        bits=bits.reshape(-1),
    )
    h = QuantChannel(
        param_ids=np.arange(n_params, dtype=np.uint32),
        values=quantized.values,
    )
    return u, h


def _encode_explicit(values: np.ndarray, cfg: FLConfig, rng: np.random.Generator):
    codes, quantized = codec.unary_quant(values, cfg.r, cfg.k, rng, mode=cfg.encoder_mode)
    bits = np.stack([c.bits for c in codes])
    return bits, quantized


def shuffle_channel(channel, rng: np.random.Generator):
    """Uniformly permute a channel's messages; the multiset is unchanged.

    Counts-form unary channels are already order-free, so they pass through
    untouched. Plain lists are permuted too, for convenience in tests.
    """
    if isinstance(channel, UnaryCounts):
        return UnaryCounts(
            ones=channel.ones.copy(),
            codes_per_param=channel.codes_per_param,
            r=channel.r,
        )
    if isinstance(channel, UnaryChannel):
        perm = rng.permutation(len(channel))
        return UnaryChannel(param_ids=channel.param_ids[perm], bits=channel.bits[perm])
    if isinstance(channel, QuantChannel):
        perm = rng.permutation(len(channel))
        return QuantChannel(param_ids=channel.param_ids[perm], values=channel.values[perm])
    items = list(channel)
    perm = rng.permutation(len(items))
    return [items[i] for i in perm]


def _mean_per_param_sorted(h: QuantChannel, n_params: int, n: int) -> np.ndarray:
    """Residual means in a canonical order, bit-identical under permutation."""
    order = np.lexsort((h.values, h.param_ids))
    sorted_values = h.values[order].reshape(n_params, n)
    return sorted_values.sum(axis=1) / n


def server_aggregate_unary_quant(
    transcript: RoundTranscript,
    n: int,
    r: int,
    k: int,
) -> nn.ParamVector:
    """Decode the round's channels into the next global model.

    Per parameter: the pooled ones-count inverts to the mean of the
    high-order parts, the residual messages average directly, and the sum
    is clipped back into the codec's domain.
    """
    if transcript.mode != "unary_quant":
        raise ModeError(f"cannot unary-decode a {transcript.mode!r} transcript")
    layout = transcript.global_before.layout
    n_params = layout.size

    u, h = transcript.u_channel, transcript.h_channel
    if u is None or h is None:
        raise ProtocolError("transcript is missing its channels")

    u_counts = u.messages_per_param(n_params)
    bad = np.nonzero(u_counts != n * r)[0]
    if bad.size:
        raise ProtocolError(
            f"param_id {int(bad[0])}: expected {n * r} unary messages, "
            f"got {int(u_counts[bad[0]])}"
        )
    h_counts = h.messages_per_param(n_params)
    bad = np.nonzero(h_counts != n)[0]
    if bad.size:
        raise ProtocolError(
            f"param_id {int(bad[0])}: expected {n} residual messages, "
            f"got {int(h_counts[bad[0]])}"
        )

    ones = u.ones_per_param(n_params)
    decoded_high = codec.unary_decode_array(ones, n, r)
    residual_mean = _mean_per_param_sorted(h, n_params, n)
    values = np.clip(decoded_high + residual_mean, -1.0, 1.0)
    return nn.ParamVector(values=values, layout=layout)


def server_aggregate_standard(updates: list[nn.ParamVector]) -> nn.ParamVector:
    """Elementwise mean of the cohort's updates."""
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    first = updates[0]
    arrays = []
    for u in updates:
        values = np.asarray(getattr(u, "values", u), dtype=np.float64)
        if values.shape != first.values.shape:
            raise ValueError(
                f"update length {values.shape} does not match {first.values.shape}"
            )
        arrays.append(values)
    return nn.ParamVector(values=np.mean(np.stack(arrays), axis=0), layout=first.layout)


def run_rounds(
    cfg: FLConfig,
    partition: list,
    test_set,
    train_eval_set=None,
) -> RunResult:
    """Execute the full protocol for cfg.rounds rounds.

    Each round: broadcast, uniform cohort selection without replacement,
    parallel-independent client steps, shuffling (unary_quant) or direct
    collection (standard), aggregation, evaluation. Every random draw comes
    from a stream derived from (seed, round, role), so a fixed master seed
    reproduces the run bit for bit.
    """
    if len(partition) != cfg.n_clients:
        raise ValueError(
            f"partition has {len(partition)} clients but config says {cfg.n_clients}"
        )
    init = nn.clip(nn.init_params(cfg.model))
    n_params = init.layout.size

    if train_eval_set is None:
        train_eval_set = (
            np.concatenate([c.features for c in partition]),
            np.concatenate([c.labels for c in partition]),
        )

    budget = codec.bit_budget(n_params, cfg.r, cfg.param_id_bits, cfg.value_bits)
    representation = cfg.resolve_u_channel(n_params)

    global_model = init
    records: list[RoundRecord] = []
    for t in range(cfg.rounds):
        selector = _round_rng(cfg.seed, t, (0,))
        cohort = tuple(
            int(c) for c in np.sort(selector.choice(cfg.n_clients, cfg.cohort, replace=False))
        )
        n = len(cohort)

        if cfg.mode == "standard":
            updates = []
            for client_id in cohort:
                rng_c = _round_rng(cfg.seed, t, (1, client_id))
                updates.append(
                    nn.local_train(
                        global_model,
                        partition[client_id],
                        cfg.lr,
                        cfg.epochs,
                        cfg.batch_size,
                        rng_c,
                    )
                )
            transcript = RoundTranscript(
                mode="standard",
                round_index=t,
                cohort=cohort,
                global_before=global_model,
                per_client_updates=updates,
            )
            new_global = server_aggregate_standard(updates)
            ground_truth = None
            u_bits = h_bits = 0
        else:
            ones_total = np.zeros(n_params, dtype=np.int64)
            bit_blocks: list[np.ndarray] = []
            h_blocks: list[np.ndarray] = []
            endpoints: list[tuple[float, float]] = []
            for client_id in cohort:
                rng_c = _round_rng(cfg.seed, t, (1, client_id))
                local = nn.local_train(
                    global_model,
                    partition[client_id],
                    cfg.lr,
                    cfg.epochs,
                    cfg.batch_size,
                    rng_c,
                )
                if representation == "explicit":
                    bits, quantized = _encode_explicit(local.values, cfg, rng_c)
                    bit_blocks.append(bits.reshape(-1))
                else:
                    ones, quantized = codec.unary_quant_counts(
                        local.values, cfg.r, cfg.k, rng_c, mode=cfg.encoder_mode
                    )
                    ones_total += ones
                h_blocks.append(quantized.values)
                endpoints.append((quantized.h_min, quantized.h_max))

            shuffler = _round_rng(cfg.seed, t, (2,))
            if representation == "explicit":
                u_channel = shuffle_channel(
                    UnaryChannel(
                        param_ids=np.tile(
                            np.repeat(np.arange(n_params, dtype=np.uint32), cfg.r), n
                        ),
                        bits=np.concatenate(bit_blocks),
                    ),
                    shuffler,
                )
            else:
                u_channel = UnaryCounts(ones=ones_total, codes_per_param=n, r=cfg.r)
            h_channel = shuffle_channel(
                QuantChannel(
                    param_ids=np.tile(np.arange(n_params, dtype=np.uint32), n),
                    values=np.concatenate(h_blocks),
                ),
                shuffler,
            )
            transcript = RoundTranscript(
                mode="unary_quant",
                round_index=t,
                cohort=cohort,
                global_before=global_model,
                u_channel=u_channel,
                h_channel=h_channel,
            )
            new_global = server_aggregate_unary_quant(transcript, n, cfg.r, cfg.k)
            ground_truth = RoundGroundTruth(cohort=cohort, endpoints=tuple(endpoints))
            u_bits = n * budget.unary_bits
            h_bits = n * budget.quant_payload_bits

        transcript.global_after = new_global
        global_model = new_global

        _, train_loss = nn.evaluate(global_model, train_eval_set)
        test_acc, test_loss = nn.evaluate(global_model, test_set)
        metrics = RoundMetrics(
            round_index=t,
            mode=cfg.mode,
            train_loss=train_loss,
            test_loss=test_loss,
            test_acc=test_acc,
            u_bits=u_bits,
            h_bits=h_bits,
        )
        records.append(
            RoundRecord(metrics=metrics, transcript=transcript, ground_truth=ground_truth)
        )

    return RunResult(
        cfg=cfg,
        records=records,
        init_model=init,
        final_model=global_model,
        partition=partition,
    )
