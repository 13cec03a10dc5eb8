"""Walk through the wire codec one stage at a time.

A model parameter in [-1, 1] travels to the server as two messages: a unary
bit code carrying its first k decimal places, and one stochastically
quantized residual. This script shows each stage and checks the property
everything else rests on: both channels are unbiased, so pooled bit counts
and residual means recover averages exactly in expectation.
"""

import numpy as np

from unaryquant import codec

rng = np.random.default_rng(7)

print("=== 1. decimal decomposition ===")
for p in (0.12345, -0.678, 1.0):
    d = codec.decompose(p, k=2)
    print(f"  p={p:+.5f}  ->  p_a={d.p_a:+.2f}  p_b={d.p_b:.5f}")
print("  residuals are non-negative even for negative p: the split floors")
print("  toward -inf, so p_b always lands in [0, 10^-k).")

print("\n=== 2. unary encoding ===")
for x in (1.0, -1.0, 0.0, 0.25):
    code = codec.unary_encode(x, r=10, rng=rng)
    print(f"  E({x:+.2f}, r=10) = {code.bits.tolist()}  (ones={code.ones()})")
print("  The ones run length encodes the value: expected ones = r*(1+x)/2.")
print("  Only one bit per code is ever random, the one at the boundary.")

print("\n=== 3. decoding pooled codes ===")
print("  Shuffling destroys order but not counts, and counts are all the")
print("  decoder needs. Two clients encoding -0.5 at r=10:")
ones = int(codec.unary_ones_counts(np.array([-0.5, -0.5]), 10, rng).sum())
print(f"  pooled ones = {ones}, decode = {codec.unary_decode(ones, 2, 10):+.2f}")

print("\n=== 4. empirical unbiasedness ===")
x, r, m = 0.3721, 100, 50_000
ones = codec.unary_ones_counts(np.full(m, x), r, rng)
est = codec.unary_decode_array(ones, 1, r).mean()
print(f"  {m} encodes of x={x}: mean decode = {est:.5f} (|err|={abs(est - x):.2e})")

print("\n=== 5. stochastic quantization of residuals ===")
h = rng.uniform(0, 1e-3, 8)
q = codec.quantize(h, rng)
print(f"  residuals  = {np.array2string(h, precision=6)}")
print(f"  quantized  = {np.array2string(q.values, precision=6)}")
print(f"  every element becomes h_min={q.h_min:.6f} or h_max={q.h_max:.6f},")
print("  with probabilities that keep each expectation exact.")

print("\n=== 6. what a client pays per round ===")
for n_params, label in ((25_450, "784-32-10 MLP"), (421_642, "large CNN")):
    budget = codec.bit_budget(n_params, r=1000, param_id_bits=32, value_bits=64)
    print(
        f"  {label:>14}: unary {budget.unary_bits:>13,} bits"
        f" + residual payload {budget.quant_payload_bits:>11,} bits"
    )
print("  The unary channel dominates: r bits per parameter is the price of")
print("  making the shuffled multiset sum-sufficient.")
