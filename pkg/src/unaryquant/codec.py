"""Decimal decomposition, unary encoding, stochastic quantization, bit accounting.

This module is the wire codec of the defended federation protocol. A model
parameter p in [-1, 1] is split into a high-order part p_a (its first k
decimal places) and a small residual p_b in [0, 10^-k). The high-order part
is expanded into a unary bit code whose expected ones-count encodes the
value; the residuals of a client's whole parameter vector are compressed by
randomized rounding to the vector's min/max. Both encodings are unbiased, so
a server that only sees per-parameter bit counts and residual sums can still
recover the federated average.

All randomness is drawn from an explicit ``numpy.random.Generator``; the
functions are pure given their generator, so concurrent callers just need
distinct streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Modes of the unary encoder. "general" keeps the encoder unbiased on all of
# [-1, 1]. "zero_special" reserves the all-zero code for an input of exactly
# 0, which makes 0 indistinguishable from -1 on decode; it exists so the
# behavior of encoders with that convention can be reproduced and tested.
ENCODER_MODES = ("general", "zero_special")

# x'*r values this close to an integer (relative) are treated as exact grid
# points. Float rounding leaves exact grid products ~1e-14 off an integer,
# which would otherwise turn a deterministic code into a coin flip.
GRID_SNAP_RTOL = 1e-9


@dataclass(frozen=True)
class Decomposition:
    """Split of a parameter into k leading decimal places plus residual.

    ``p_a`` is floor(p * 10^k) / 10^k and ``p_b = p - p_a`` lies in
    [0, 10^-k), including for negative inputs.
    """

    p_a: float
    p_b: float
    k: int


@dataclass(frozen=True)
class UnaryCode:
    """A length-r bit vector whose ones-count encodes one parameter.

    Before shuffling the bits are prefix structured: a run of ones, at most
    one probabilistic bit, then zeros.
    """

    bits: np.ndarray
    r: int
    param_id: int = 0

    def __post_init__(self) -> None:
        if self.bits.shape != (self.r,):
            raise ValueError(f"bits must have shape ({self.r},), got {self.bits.shape}")

    def ones(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class QuantizedVector:
    """Residual vector after randomized rounding to its own min/max."""

    values: np.ndarray
    h_min: float
    h_max: float


@dataclass(frozen=True)
class BitBudget:
    """Per-client per-round transmission cost, split by purpose."""

    unary_bits: int
    quant_payload_bits: int
    metadata_bits: int

    @property
    def total_bits(self) -> int:
        return self.unary_bits + self.quant_payload_bits + self.metadata_bits


def _check_param_range(p: float) -> None:
    if not (-1.0 <= p <= 1.0) or math.isnan(p):
        raise ValueError(f"parameter {p!r} outside [-1, 1]")


def _check_k(k: int) -> None:
    if not (1 <= k <= 9):
        raise ValueError(f"split depth k={k!r} outside 1..9")


def decompose(p: float, k: int) -> Decomposition:
    """Split p into its first k decimal places and a non-negative residual.

    Uses truncation toward minus infinity, so the residual is in
    [0, 10^-k) for negative p too.
    """
    _check_param_range(float(p))
    _check_k(k)
    p_a, p_b = decompose_array(np.asarray([p], dtype=np.float64), k)
    return Decomposition(float(p_a[0]), float(p_b[0]), k)


def decompose_array(p: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized decomposition; returns (p_a, p_b) arrays.

    Guards against float rounding in the scaled product: after the floor the
    grid value is nudged down if it overshoots p, and up if the residual
    reaches 10^-k, so 0 <= p_b < 10^-k holds exactly in float semantics.
    """
    _check_k(k)
    p = np.asarray(p, dtype=np.float64)
    if p.size and (np.isnan(p).any() or p.min() < -1.0 or p.max() > 1.0):
        bad = int(np.argmax(np.isnan(p) | (p < -1.0) | (p > 1.0)))
        raise ValueError(f"parameter {p[bad]!r} at index {bad} outside [-1, 1]")
    scale = 10.0**k
    step = 10.0**-k
    m = np.floor(p * scale)
    p_a = m / scale
    over = p_a > p
    if over.any():
        m = np.where(over, m - 1, m)
        p_a = m / scale
    p_b = p - p_a
    high = p_b >= step
    if high.any():
        m = np.where(high, m + 1, m)
        p_a = m / scale
        p_b = p - p_a
    # p infinitesimally below a grid point can round its residual to
    # exactly `step`; the correction above then leaves a half-ulp negative
    # residual. Treat such p as the grid point itself.
    neg = p_b < 0
    if neg.any():
        p_b = np.where(neg, 0.0, p_b)
    return p_a, p_b


def _mu_q(x: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Shared encoder kernel: ceiling index and Bernoulli weight.

    For x in [-1, 1] shifted to x' = (1+x)/2, returns mu = ceil(x'*r) and
    q = x'*r - mu + 1, with near-integer products snapped to the grid so
    grid points stay deterministic (q == 1 there).
    """
    x_prime = (1.0 + x) / 2.0
    prod = x_prime * r
    nearest = np.rint(prod)
    snap = np.abs(prod - nearest) <= GRID_SNAP_RTOL * np.maximum(1.0, np.abs(prod))
    prod = np.where(snap, nearest, prod)
    mu = np.ceil(prod)
    q = prod - mu + 1.0
    return mu.astype(np.int64), q


def _ones_counts(x: np.ndarray, r: int, mode: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample the ones-count of each code; returns (ones, mu, bernoulli_bit).

    Consumes exactly one uniform per code regardless of mode, so the
    bit-materializing and count-only paths stay stream compatible.
    """
    if mode not in ENCODER_MODES:
        raise ValueError(f"unknown encoder mode {mode!r}")
    mu, q = _mu_q(x, r)
    ber = (rng.random(x.shape) < q).astype(np.int64)
    ber = np.where(mu >= 1, ber, 0)
    if mode == "zero_special":
        zero = x == 0.0
        mu = np.where(zero, 0, mu)
        ber = np.where(zero, 0, ber)
    ones = np.maximum(mu - 1, 0) + ber
    return ones, mu, ber


def unary_ones_counts(x: np.ndarray, r: int, rng: np.random.Generator, mode: str = "general") -> np.ndarray:
    """Ones-counts of the unary codes of x, without materializing bits.

    Distribution-identical to summing :func:`unary_encode` outputs: each
    code has mu-1 deterministic ones plus one Bernoulli(q) bit.
    """
    if r < 1:
        raise ValueError(f"code length r={r!r} must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.size and (np.isnan(x).any() or x.min() < -1.0 or x.max() > 1.0):
        bad = int(np.argmax(np.isnan(x) | (x < -1.0) | (x > 1.0)))
        raise ValueError(f"value {x[bad]!r} at index {bad} outside [-1, 1]")
    ones, _, _ = _ones_counts(x, r, mode, rng)
    return ones


def unary_encode(
    x: float,
    r: int,
    rng: np.random.Generator,
    mode: str = "general",
    param_id: int = 0,
) -> UnaryCode:
    """Encode x in [-1, 1] as a length-r prefix-structured bit vector.

    With x' = (1+x)/2, the first mu-1 = ceil(x'*r)-1 bits are ones, bit mu
    is Bernoulli(x'*r - mu + 1), and the rest are zeros, so the expected
    ones-count is exactly x'*r. In ``zero_special`` mode an input of exactly
    0 returns the all-zero vector instead.
    """
    _check_param_range(float(x))
    if r < 1:
        raise ValueError(f"code length r={r!r} must be >= 1")
    xs = np.asarray([x], dtype=np.float64)
    _, mu, ber = _ones_counts(xs, r, mode, rng)
    bits = _materialize_bits(mu, ber, r)[0]
    return UnaryCode(bits=bits, r=r, param_id=param_id)


def _materialize_bits(mu: np.ndarray, ber: np.ndarray, r: int) -> np.ndarray:
    """Expand (mu, bernoulli bit) rows into explicit (n, r) bit matrices."""
    n = mu.shape[0]
    cols = np.arange(r, dtype=np.int64)
    bits = (cols[None, :] < (mu - 1)[:, None]).astype(np.uint8)
    has_ber = mu >= 1
    rows = np.nonzero(has_ber)[0]
    bits[rows, mu[rows] - 1] = ber[rows].astype(np.uint8)
    return bits.reshape(n, r)


def unary_decode(ones_count: int, n_codes: int, r: int) -> float:
    """Unbiased mean of the values encoded by n_codes pooled codes.

    Inverts the encoder's shift: 2 * ones / (n_codes * r) - 1.
    """
    if n_codes < 1 or r < 1:
        raise ValueError(f"n_codes={n_codes!r} and r={r!r} must be >= 1")
    if not (0 <= ones_count <= n_codes * r):
        raise ValueError(
            f"ones_count={ones_count!r} outside 0..{n_codes * r} for n_codes={n_codes}, r={r}"
        )
    return 2.0 * ones_count / (n_codes * r) - 1.0


def unary_decode_array(ones_counts: np.ndarray, n_codes: int, r: int) -> np.ndarray:
    """Vectorized :func:`unary_decode` over per-parameter ones-counts."""
    if n_codes < 1 or r < 1:
        raise ValueError(f"n_codes={n_codes!r} and r={r!r} must be >= 1")
    ones_counts = np.asarray(ones_counts)
    if ones_counts.size and (ones_counts.min() < 0 or ones_counts.max() > n_codes * r):
        bad = int(np.argmax((ones_counts < 0) | (ones_counts > n_codes * r)))
        raise ValueError(
            f"ones_count={ones_counts[bad]!r} at index {bad} outside 0..{n_codes * r}"
        )
    return 2.0 * ones_counts / (n_codes * r) - 1.0


def quantize(h: np.ndarray, rng: np.random.Generator) -> QuantizedVector:
    """Randomized rounding of each element to the vector's min or max.

    Element h_j becomes h_max with probability (h_j - h_min)/(h_max - h_min)
    and h_min otherwise, so E[out_j] = h_j. Endpoints are fixed points. A
    constant vector (h_max == h_min) is returned unchanged, since the
    rounding probability is undefined there.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.size == 0:
        raise ValueError("cannot quantize an empty vector")
    h_min = float(h.min())
    h_max = float(h.max())
    if h_min == h_max:
        return QuantizedVector(values=h.copy(), h_min=h_min, h_max=h_max)
    prob_up = (h - h_min) / (h_max - h_min)
    values = np.where(rng.random(h.shape) < prob_up, h_max, h_min)
    return QuantizedVector(values=values, h_min=h_min, h_max=h_max)


def unary_quant(
    update: np.ndarray,
    r: int,
    k: int,
    rng: np.random.Generator,
    mode: str = "general",
) -> tuple[list[UnaryCode], QuantizedVector]:
    """Full per-client encoding of a parameter vector.

    Splits every parameter into k leading decimals plus residual, unary
    encodes the leading parts, and quantizes the residual vector to its own
    min/max. Returns one code per parameter (tagged with its flat index) and
    the quantized residuals.
    """
    values = np.asarray(getattr(update, "values", update), dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("update must be a non-empty flat vector")
    p_a, p_b = decompose_array(values, k)
    if r < 1:
        raise ValueError(f"code length r={r!r} must be >= 1")
    _, mu, ber = _ones_counts(p_a, r, mode, rng)
    bits = _materialize_bits(mu, ber, r)
    codes = [UnaryCode(bits=bits[i], r=r, param_id=i) for i in range(values.size)]
    quantized = quantize(p_b, rng)
    return codes, quantized


def unary_quant_counts(
    update: np.ndarray,
    r: int,
    k: int,
    rng: np.random.Generator,
    mode: str = "general",
) -> tuple[np.ndarray, QuantizedVector]:
    """Counts-only variant of :func:`unary_quant`.

    Returns per-parameter ones-counts instead of bit vectors; consumes the
    generator exactly like the materializing path, so both produce identical
    counts from the same stream.
    """
    values = np.asarray(getattr(update, "values", update), dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("update must be a non-empty flat vector")
    p_a, p_b = decompose_array(values, k)
    if r < 1:
        raise ValueError(f"code length r={r!r} must be >= 1")
    ones, _, _ = _ones_counts(p_a, r, mode, rng)
    quantized = quantize(p_b, rng)
    return ones, quantized


def bit_budget(n_params: int, r: int, param_id_bits: int, value_bits: int) -> BitBudget:
    """Per-client per-round cost of the two channels plus addressing metadata.

    The unary channel costs r bits per parameter; the residual channel one
    value per parameter; every message additionally carries a param_id.
    """
    if min(n_params, r, param_id_bits, value_bits) < 1:
        raise ValueError("all bit budget arguments must be positive")
    return BitBudget(
        unary_bits=r * n_params,
        quant_payload_bits=n_params * value_bits,
        metadata_bits=(r * n_params + n_params) * param_id_bits,
    )
