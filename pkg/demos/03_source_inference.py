"""How source inference works, and how the defense blunts it.

Four clients hold fully disjoint classes, the worst case for privacy: each
local model memorizes its own slice, so whichever model gives a record the
smallest loss almost certainly belongs to the record's owner. Against the
shuffled channels the adversary must first regroup anonymous residual
messages by value; this script shows both the clean-recovery case and the
realistic collision case that forces it back to guessing.
"""

import numpy as np

from unaryquant import attack, data, federation, nn

# --- disjoint-class partition -------------------------------------------
ds = data.synthetic_gaussian(40, 4, 8, seed=0, noise=0.08)
partition = []
for c in range(4):
    mask = ds.labels == c
    partition.append(
        data.ClientDataset(
            features=ds.features[mask],
            labels=ds.labels[mask],
            class_histogram=np.bincount(ds.labels[mask], minlength=4),
            indices=np.nonzero(mask)[0],
            n_classes=4,
        )
    )
print("per-client class histograms:", [p.class_histogram.tolist() for p in partition])

runs = {}
for mode in ("standard", "unary_quant"):
    cfg = federation.FLConfig(
        rounds=4, n_clients=4, cohort=4, k=2, r=20, lr=0.4, epochs=2,
        batch_size=8, mode=mode, seed=3, model=nn.ModelConfig((8, 6, 4), "relu", seed=3),
    )
    runs[mode] = federation.run_rounds(cfg, partition, (ds.features, ds.labels))

targets = attack.draw_targets(partition, 25, np.random.default_rng(5))

print("\n=== attacking the standard run (per-client models visible) ===")
report = attack.sia_loss_based(runs["standard"].records[-1].transcript, targets)
print(f"  loss-ranking SIA accuracy: {report.accuracy:.2f} "
      f"(random baseline {report.random_baseline:.2f})")

print("\n=== attacking the defended run (only shuffled channels) ===")
record = runs["unary_quant"].records[-1]
report = attack.sia_on_unary_quant(
    record.transcript, targets, ground_truth=record.ground_truth,
    rng=np.random.default_rng(6),
)
print(f"  residual-grouping SIA accuracy: {report.accuracy:.2f} "
      f"(grouping recovered: {report.grouping_recovered})")

print("\n=== why grouping can still succeed on clean transcripts ===")
layout = nn.ModelLayout.for_config(nn.ModelConfig((1, 2), "relu"))
res_a = np.array([1e-4, 9e-4, 9e-4, 1e-4])   # client A's quantized residuals
res_b = np.array([7e-4, 2e-4, 7e-4, 7e-4])   # client B's
h = federation.shuffle_channel(
    federation.QuantChannel(
        param_ids=np.tile(np.arange(4, dtype=np.uint32), 2),
        values=np.concatenate([res_a, res_b]),
    ),
    np.random.default_rng(0),
)
distinct, presence = attack._presence_matrix(h.param_ids, h.values, 4)
pairs = attack._match_value_pairs(presence, 4, budget=4096)
print(f"  distinct residual values seen by the server: {distinct.tolist()}")
for i, j in pairs:
    recovered = np.where(presence[i] == 1, distinct[i], distinct[j])
    print(f"  recovered candidate residual vector: {recovered.tolist()}")
print("  with unique endpoint values per client, the anonymous messages")
print("  regroup exactly; only the residual's tiny magnitude keeps the")
print("  scoring step near chance. Shared values (clipped or untouched")
print("  parameters) break the matching entirely, forcing a random guess.")
