"""Source inference: which client owns a given training record?

Against standard federation the honest-but-curious server holds every
client's local model, so it predicts the client whose model gives the
record the smallest loss. Against the shuffled unary/residual channels the
server only sees anonymous residual messages; the attack here regroups them
by exact value (each client emits at most two distinct residual values),
rebuilds candidate residual vectors, and scores targets against the global
model perturbed by each candidate. Grouping failures degrade to random
guessing.

Accuracy bookkeeping for the grouped attack needs to know which anonymous
group a client actually emitted; that ground truth is recorded by the
harness during the run and is used only for scoring, never inside the
attack computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .federation import ModeError, RoundGroundTruth, RoundTranscript, RunResult


class ComparisonError(ValueError):
    """The two runs being compared were not produced by matched configs."""


@dataclass(frozen=True)
class AttackTarget:
    features: np.ndarray
    label: int
    true_source: int


@dataclass
class AttackReport:
    mode: str
    n_targets: int
    correct: int
    accuracy: float
    random_baseline: float
    grouping_recovered: bool | None = None
    predictions: np.ndarray | None = None


@dataclass
class AttackComparison:
    """Per-mode model and attack accuracy, mirroring a two-row summary."""

    rows: list[tuple[str, float, float]]
    random_baseline: float

    def format_table(self) -> str:
        header = f"{'Method':<24}{'Model Accuracy':>16}{'SIA accuracy':>16}"
        lines = [header, "-" * len(header)]
        for method, model_acc, sia_acc in self.rows:
            lines.append(f"{method:<24}{100 * model_acc:>15.1f}{100 * sia_acc:>15.1f}")
        lines.append(f"(random-guess baseline: {100 * self.random_baseline:.1f})")
        return "\n".join(lines)

    def csv_rows(self) -> list[tuple[str, str, str, str]]:
        out = [("method", "model_accuracy", "sia_accuracy", "random_baseline")]
        for method, model_acc, sia_acc in self.rows:
            out.append((method, repr(model_acc), repr(sia_acc), repr(self.random_baseline)))
        return out


def draw_targets(partition: list, per_client: int, rng: np.random.Generator) -> list[AttackTarget]:
    """Sample the same number of records from every client's local data.

    Balanced sampling makes the uniform-guess baseline exactly 1/N. Clients
    smaller than per_client are sampled with replacement.
    """
    targets = []
    for client_id, shard in enumerate(partition):
        n = len(shard)
        idx = rng.choice(n, size=per_client, replace=n < per_client)
        for i in idx:
            targets.append(
                AttackTarget(
                    features=shard.features[i],
                    label=int(shard.labels[i]),
                    true_source=client_id,
                )
            )
    return targets


def _target_matrix(targets: list[AttackTarget]) -> tuple[np.ndarray, np.ndarray]:
    features = np.stack([t.features for t in targets])
    labels = np.array([t.label for t in targets], dtype=np.int64)
    return features, labels


def sia_loss_based(transcript: RoundTranscript, targets: list[AttackTarget]) -> AttackReport:
    """Predict each target's source as the client with the smallest loss.

    Requires a standard-mode transcript (per-client updates present). Ties
    go to the lowest client index.
    """
    if transcript.per_client_updates is None:
        raise ModeError("loss-based source inference needs per-client updates")
    features, labels = _target_matrix(targets)
    cohort = np.asarray(transcript.cohort)
    losses = np.stack(
        [
            nn.per_example_loss(update, (features, labels))
            for update in transcript.per_client_updates
        ]
    )
    predictions = cohort[np.argmin(losses, axis=0)]
    true_sources = np.array([t.true_source for t in targets])
    correct = int((predictions == true_sources).sum())
    return AttackReport(
        mode="standard",
        n_targets=len(targets),
        correct=correct,
        accuracy=correct / len(targets),
        random_baseline=1.0 / len(cohort),
        predictions=predictions,
    )


def _presence_matrix(h_param_ids, h_values, n_params, max_values=None):
    """Distinct residual values and their per-parameter message counts.

    Returns (distinct, None) without building the counts matrix when there
    are more than `max_values` distinct values; a degenerate client can
    emit up to n_params distinct residuals, and a (d, n_params) matrix for
    that case would be enormous while grouping is hopeless anyway.
    """
    distinct, inverse = np.unique(h_values, return_inverse=True)
    if max_values is not None and distinct.shape[0] > max_values:
        return distinct, None
    presence = np.zeros((distinct.shape[0], n_params), dtype=np.int64)
    np.add.at(presence, (inverse, h_param_ids.astype(np.int64)), 1)
    return distinct, presence


def _match_value_pairs(presence: np.ndarray, n_params: int, budget: int):
    """Pair distinct values into per-client (min, max) candidates.

    A valid pairing covers every value exactly once such that each pair
    accounts for exactly one message per parameter. Returns a list of
    (i, j) index pairs (i == j for a single-value client) or None when no
    consistent pairing exists within the search budget.
    """
    d = presence.shape[0]
    totals = presence.sum(axis=1)
    compatible: dict[int, list[int]] = {i: [] for i in range(d)}
    for i in range(d):
        if totals[i] == n_params and np.all(presence[i] == 1):
            compatible[i].append(i)
        for j in range(i + 1, d):
            if totals[i] + totals[j] == n_params and np.all(presence[i] + presence[j] == 1):
                compatible[i].append(j)
                compatible[j].append(i)

    nodes_explored = 0

    def backtrack(unmatched: frozenset[int]):
        nonlocal nodes_explored
        if not unmatched:
            return []
        nodes_explored += 1
        if nodes_explored > budget:
            return None
        i = min(unmatched)
        for j in compatible[i]:
            if j != i and j not in unmatched:
                continue
            rest = unmatched - {i, j}
            tail = backtrack(rest)
            if tail is not None:
                return [(i, j) if i <= j else (j, i)] + tail
        return None

    return backtrack(frozenset(range(d)))


def sia_on_unary_quant(
    transcript: RoundTranscript,
    targets: list[AttackTarget],
    known_stats: np.ndarray | None = None,
    *,
    ground_truth: RoundGroundTruth,
    pairing_budget: int = 4096,
    rng: np.random.Generator | None = None,
) -> AttackReport:
    """Regroup shuffled residual messages and score targets per group.

    Pipeline: (1) group residual messages by exact value (each client emits
    at most its own h_min/h_max); (2) search for a consistent pairing of
    values into per-client candidates, capped at `pairing_budget` explored
    matchings; (3) rebuild each candidate's residual vector and predict, per
    target, the candidate whose residual added to the round's global model
    gives the smallest loss. If no consistent grouping exists the attack
    falls back to random guessing; `known_stats` (per-client class counts),
    when given, weights that fallback by the target label's frequency.

    `ground_truth` is used only to translate predicted anonymous groups
    into client identities for scoring.
    """
    if transcript.mode != "unary_quant":
        raise ModeError("this attack consumes unary_quant transcripts")
    if transcript.h_channel is None or transcript.global_after is None:
        raise ModeError("transcript is missing residual channel or global model")
    rng = rng if rng is not None else np.random.default_rng(0)
    cohort = list(transcript.cohort)
    n = len(cohort)
    n_params = transcript.global_before.layout.size
    true_sources = np.array([t.true_source for t in targets])

    distinct, presence = _presence_matrix(
        transcript.h_channel.param_ids,
        transcript.h_channel.values,
        n_params,
        max_values=2 * n,
    )
    pairs = None
    if presence is not None:
        pairs = _match_value_pairs(presence, n_params, pairing_budget)
    if pairs is not None and len(pairs) != n:
        pairs = None

    if pairs is None:
        predictions = _fallback_guess(cohort, targets, known_stats, rng)
        correct = int((predictions == true_sources).sum())
        return AttackReport(
            mode="unary_quant",
            n_targets=len(targets),
            correct=correct,
            accuracy=correct / len(targets),
            random_baseline=1.0 / n,
            grouping_recovered=False,
            predictions=predictions,
        )

    candidates = []
    for i, j in pairs:
        resid = np.where(presence[i] == 1, distinct[i], distinct[j])
        candidates.append((frozenset((float(distinct[i]), float(distinct[j]))), resid))

    features, labels = _target_matrix(targets)
    layout = transcript.global_after.layout
    losses = []
    for _, resid in candidates:
        perturbed = nn.ParamVector(
            values=np.clip(transcript.global_after.values + resid, -1.0, 1.0),
            layout=layout,
        )
        losses.append(nn.per_example_loss(perturbed, (features, labels)))
    best_group = np.argmin(np.stack(losses), axis=0)

    group_to_client = {}
    for g, (value_set, _) in enumerate(candidates):
        for pos, (h_min, h_max) in enumerate(ground_truth.endpoints):
            if value_set == frozenset((h_min, h_max)):
                group_to_client[g] = ground_truth.cohort[pos]
                break
    predictions = np.array(
        [group_to_client.get(int(g), -1) for g in best_group], dtype=np.int64
    )
    correct = int((predictions == true_sources).sum())
    return AttackReport(
        mode="unary_quant",
        n_targets=len(targets),
        correct=correct,
        accuracy=correct / len(targets),
        random_baseline=1.0 / n,
        grouping_recovered=True,
        predictions=predictions,
    )


def _fallback_guess(cohort, targets, known_stats, rng) -> np.ndarray:
    cohort = np.asarray(cohort)
    if known_stats is None:
        return cohort[rng.integers(0, len(cohort), size=len(targets))]
    stats = np.asarray(known_stats, dtype=np.float64)
    predictions = np.empty(len(targets), dtype=np.int64)
    for t_idx, target in enumerate(targets):
        weights = stats[:, target.label]
        total = weights.sum()
        probs = weights / total if total > 0 else np.full(len(cohort), 1.0 / len(cohort))
        predictions[t_idx] = cohort[rng.choice(len(cohort), p=probs)]
    return predictions


def sia_random_baseline(
    n_clients: int,
    targets: list[AttackTarget],
    rng: np.random.Generator | None = None,
) -> AttackReport:
    """Uniform guessing; expected accuracy is exactly 1/N."""
    if n_clients < 1:
        raise ValueError("need at least one client")
    rng = rng if rng is not None else np.random.default_rng(0)
    predictions = rng.integers(0, n_clients, size=len(targets))
    true_sources = np.array([t.true_source for t in targets])
    correct = int((predictions == true_sources).sum())
    return AttackReport(
        mode="random",
        n_targets=len(targets),
        correct=correct,
        accuracy=correct / len(targets) if targets else 0.0,
        random_baseline=1.0 / n_clients,
        predictions=predictions,
    )


def evaluate_attacks(
    standard_run: RunResult,
    unary_quant_run: RunResult,
    targets_per_client: int,
    seed: int,
    round_index: int = -1,
) -> AttackComparison:
    """Attack both runs on equal targets and tabulate the accuracy gap.

    The runs must share clients, rounds, seed, and partition, so the only
    difference is the defense. Targets are drawn balanced across clients.
    """
    cfg_s, cfg_u = standard_run.cfg, unary_quant_run.cfg
    if cfg_s.mode != "standard" or cfg_u.mode != "unary_quant":
        raise ComparisonError(
            f"expected (standard, unary_quant) runs, got ({cfg_s.mode}, {cfg_u.mode})"
        )
    for field_name in ("n_clients", "cohort", "rounds", "seed"):
        if getattr(cfg_s, field_name) != getattr(cfg_u, field_name):
            raise ComparisonError(
                f"runs disagree on {field_name}: "
                f"{getattr(cfg_s, field_name)} vs {getattr(cfg_u, field_name)}"
            )
    if len(standard_run.partition) != len(unary_quant_run.partition):
        raise ComparisonError("runs were produced from different partitions")

    rng = np.random.default_rng(seed)
    targets = draw_targets(standard_run.partition, targets_per_client, rng)

    std_record = standard_run.records[round_index]
    uq_record = unary_quant_run.records[round_index]
    std_report = sia_loss_based(std_record.transcript, targets)
    uq_report = sia_on_unary_quant(
        uq_record.transcript,
        targets,
        ground_truth=uq_record.ground_truth,
        rng=np.random.default_rng(seed + 1),
    )
    return AttackComparison(
        rows=[
            ("standard", standard_run.final_record.metrics.test_acc, std_report.accuracy),
            ("unary_quant", unary_quant_run.final_record.metrics.test_acc, uq_report.accuracy),
        ],
        random_baseline=1.0 / cfg_s.n_clients,
    )
