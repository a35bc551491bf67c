"""Fixed-point encoding and coefficient packing for encrypted matrix-vector products.

An input vector ``a`` of width ``d`` occupies coefficients ``0..d-1``. Row ``j`` of a
weight block is written reversed at offset ``j*d``, so in the ring product the
inner product ``<a, W_j>`` lands on coefficient ``(j+1)*d - 1``. Blocks hold
``B = max(1, floor((N - d + 1) / d))`` rows; with ``B`` rows no product term,
wrapped or not, reaches another row's target coefficient.

Inputs wider than ``N`` (or wider than a chosen chunk width) are split into
chunks that share the same layout; the per-chunk products are summed under
encryption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bfv import Plaintext
from .ring import RingParams, centered


class EncodingError(ValueError):
    pass


class HeadroomError(EncodingError):
    """Quantized accumulations would overflow the plaintext modulus."""


@dataclass(frozen=True)
class FixedPointScale:
    delta_a: int = 2**6
    delta_w: int = 2**6
    clamp_bound: float = 8.0

    @property
    def combined(self) -> int:
        return self.delta_a * self.delta_w

    def check(self, t: int):
        for delta in (self.delta_a, self.delta_w):
            if delta < 1 or delta & (delta - 1):
                raise EncodingError(f"scale {delta} is not a power of two")
            if self.clamp_bound * delta >= t / 2:
                raise EncodingError(f"clamp {self.clamp_bound} at scale {delta} does not fit below t/2")

    def max_preactivation(self, t: int) -> float:
        """Largest |z| whose quantized value stays in ``(-t/2, t/2)``."""
        return (t // 2) / self.combined

    def to_dict(self) -> dict:
        return {"delta_a": self.delta_a, "delta_w": self.delta_w, "clamp_bound": self.clamp_bound}


@dataclass
class SaturationCounter:
    """Counts how many values were clamped by :func:`quantize`."""

    saturated: int = 0
    total: int = 0

    @property
    def rate(self) -> float:
        return self.saturated / self.total if self.total else 0.0


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_signed(x, delta: float, clamp: float | None = None,
                    counter: SaturationCounter | None = None) -> np.ndarray:
    """``round(x * delta)`` as signed int64, after optional clamping to ``[-clamp, clamp]``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise EncodingError("cannot quantize non-finite values")
    if clamp is not None:
        over = np.abs(x) > clamp
        if counter is not None:
            counter.saturated += int(over.sum())
            counter.total += x.size
        x = np.clip(x, -clamp, clamp)
    elif counter is not None:
        counter.total += x.size
    return round_half_away(x * delta).astype(np.int64)


def quantize(x, delta: float, t: int, clamp: float | None = 8.0,
             counter: SaturationCounter | None = None) -> np.ndarray:
    """Quantize reals to residues mod ``t`` (negative values wrap to the top half)."""
    return np.mod(quantize_signed(x, delta, clamp, counter), t)


def dequantize(v, delta: float, t: int) -> np.ndarray:
    return centered(v, t).astype(np.float64) / delta


# -- packing -------------------------------------------------------------------

def block_capacity(N: int, d: int) -> int:
    if not 1 <= d <= N:
        raise EncodingError(f"width {d} must lie in [1, {N}]")
    return max(1, (N - d + 1) // d)


def output_map(d: int, rows: int) -> np.ndarray:
    return (np.arange(rows, dtype=np.int64) + 1) * d - 1


@dataclass(frozen=True, eq=False)
class PackedVector:
    d: int
    plaintext: Plaintext


@dataclass(frozen=True, eq=False)
class PackedWeightBlock:
    d: int
    rows: int
    plaintext: Plaintext
    output_map: np.ndarray


def pack_vector_ints(values, N: int, t: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    if v.ndim != 1 or v.size > N:
        raise EncodingError(f"cannot pack {v.size} values into {N} coefficients")
    out = np.zeros(N, dtype=np.int64)
    out[:v.size] = np.mod(v, t)
    return out


def pack_rows_ints(rows, d: int, N: int, t: int) -> np.ndarray:
    """Coefficient array for integer weight rows laid out reversed at offsets ``j*d``."""
    w = np.asarray(rows, dtype=np.int64)
    if w.ndim != 2 or w.shape[1] != d:
        raise EncodingError(f"rows must have shape (k, {d}), got {w.shape}")
    cap = block_capacity(N, d)
    if w.shape[0] > cap:
        raise EncodingError(f"{w.shape[0]} rows exceed block capacity {cap} for d={d}")
    out = np.zeros(N, dtype=np.int64)
    k = w.shape[0]
    out[:k * d] = np.mod(w[:, ::-1], t).reshape(-1)
    return out


def pack_vector(a, scale: FixedPointScale, params: RingParams,
                counter: SaturationCounter | None = None) -> PackedVector:
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size > params.N:
        raise EncodingError(f"vector of width {a.size} exceeds N={params.N}; split it with plan_layer")
    q = quantize(a, scale.delta_a, params.t, scale.clamp_bound, counter)
    return PackedVector(a.size, Plaintext.from_array(params, pack_vector_ints(q, params.N, params.t)))


def unpack_vector(pv: PackedVector, scale: FixedPointScale) -> np.ndarray:
    p = pv.plaintext
    return dequantize(p.coeffs[:pv.d], scale.delta_a, p.params.t)


def pack_weight_rows(rows, scale: FixedPointScale, params: RingParams) -> PackedWeightBlock:
    w = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    d = w.shape[1]
    ints = quantize(w, scale.delta_w, params.t, scale.clamp_bound)
    coeffs = pack_rows_ints(ints, d, params.N, params.t)
    return PackedWeightBlock(d, w.shape[0], Plaintext.from_array(params, coeffs), output_map(d, w.shape[0]))


def pack_bias_ints(values, targets, N: int, t: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if values.shape != targets.shape:
        raise EncodingError(f"{values.size} biases for {targets.size} output positions")
    out = np.zeros(N, dtype=np.int64)
    out[targets] = np.mod(values, t)
    return out


def pack_bias(b, targets, scale: FixedPointScale, params: RingParams) -> Plaintext:
    """Biases quantized at ``delta_a * delta_w`` placed on the target coefficients."""
    ints = quantize_signed(b, scale.combined)
    return Plaintext.from_array(params, pack_bias_ints(np.atleast_1d(ints), targets, params.N, params.t))


def extract_outputs(p: Plaintext, targets, scale: FixedPointScale) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= p.params.N):
        raise EncodingError("output index out of range")
    return dequantize(p.coeffs[targets], scale.combined, p.params.t)


def contamination_scan(N: int, d: int, rows: int | None = None) -> list[tuple[int, int, int]]:
    """Exhaustively list product terms that land on a foreign target coefficient.

    Row ``j`` times input coefficient ``l2`` contributes to index ``j*d + (d-1-l1) + l2``
    (reduced negacyclically). Grouping by offset ``s = d-1-l1+l2`` covers every
    ``(l1, l2)`` pair. A term is harmful if it hits a target and is not the
    ``l1 == l2`` diagonal of that target's own row. Returns ``(row, s, index)``
    for every harmful term; an empty list means the layout is safe.
    """
    rows = block_capacity(N, d) if rows is None else rows
    j = np.arange(rows)[:, None]
    s = np.arange(2 * d - 1)[None, :]
    idx = (j * d + s) % N
    targets = output_map(d, rows)
    inside = targets < N
    owner = np.full(N, -1)
    owner[targets[inside]] = np.arange(rows)[inside]
    hit = owner[idx]
    own_diagonal = (hit == j) & (s == d - 1) & (j * d + s < N)
    bad = (hit >= 0) & ~own_diagonal
    # a row whose own target lies past the ring cannot be read back at all
    bad[~inside, d - 1] = True
    jj, ss = np.nonzero(bad)
    return [(int(a), int(b), int(idx[a, b])) for a, b in zip(jj, ss)]


# -- layer planning ---------------------------------------------------------------

@dataclass(frozen=True)
class LayerPlan:
    """How one linear layer is split into input chunks and output blocks."""

    d_in: int
    n_out: int
    N: int
    chunk_width: int
    capacity: int
    n_chunks: int
    n_blocks: int

    @property
    def chunks(self) -> list[tuple[int, int]]:
        c = self.chunk_width
        return [(k * c, min(self.d_in, (k + 1) * c)) for k in range(self.n_chunks)]

    @property
    def blocks(self) -> list[tuple[int, int]]:
        b = self.capacity
        return [(k * b, min(self.n_out, (k + 1) * b)) for k in range(self.n_blocks)]

    def block_targets(self, block: int) -> np.ndarray:
        lo, hi = self.blocks[block]
        return output_map(self.chunk_width, hi - lo)

    def tuples(self) -> list[tuple[int, int, int]]:
        """``(chunk, block, neuron)`` for every neuron contribution, in plan order."""
        out = []
        for c in range(self.n_chunks):
            for b, (lo, hi) in enumerate(self.blocks):
                out.extend((c, b, n) for n in range(lo, hi))
        return out

    @property
    def input_ciphertexts(self) -> int:
        return self.n_chunks

    @property
    def output_ciphertexts(self) -> int:
        return self.n_blocks

    @property
    def multiplies(self) -> int:
        return self.n_chunks * self.n_blocks

    def to_dict(self) -> dict:
        return {"d_in": self.d_in, "n_out": self.n_out, "N": self.N,
                "chunk_width": self.chunk_width, "capacity": self.capacity,
                "n_chunks": self.n_chunks, "n_blocks": self.n_blocks,
                "output_maps": [self.block_targets(b).tolist() for b in range(self.n_blocks)]}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerPlan":
        plan = plan_layer(d["d_in"], d["n_out"], d["N"], d["chunk_width"])
        if (plan.capacity, plan.n_chunks, plan.n_blocks) != (d["capacity"], d["n_chunks"], d["n_blocks"]):
            raise EncodingError("inconsistent packing plan")
        if "output_maps" in d and d["output_maps"] != plan.to_dict()["output_maps"]:
            raise EncodingError("packing plan output maps disagree with layout")
        return plan


def plan_layer(d_in: int, n_out: int, N: int, chunk_width: int | None = None) -> LayerPlan:
    if d_in < 1 or n_out < 1:
        raise EncodingError("layer dimensions must be positive")
    c = min(d_in, N) if chunk_width is None else int(chunk_width)
    if not 1 <= c <= min(d_in, N):
        raise EncodingError(f"chunk width {c} must lie in [1, {min(d_in, N)}]")
    cap = block_capacity(N, c)
    return LayerPlan(d_in, n_out, N, c, cap, math.ceil(d_in / c), math.ceil(n_out / cap))


def optimal_plan(d_in: int, n_out: int, N: int, input_sets: int, output_sets: int) -> LayerPlan:
    """Plan minimizing ciphertexts on the wire: ``input_sets * chunks + output_sets * blocks``.

    Ties go to the wider chunk (fewer multiplies).
    """
    best, best_cost = None, None
    for c in range(min(d_in, N), 0, -1):
        plan = plan_layer(d_in, n_out, N, c)
        cost = input_sets * plan.n_chunks + output_sets * plan.n_blocks
        if best is None or cost < best_cost:
            best, best_cost = plan, cost
    return best


@dataclass
class LayerPacking:
    """Integer weight blocks and biases for one sampled layer, laid out per a plan."""

    plan: LayerPlan
    blocks: np.ndarray = field(repr=False)  # (n_blocks, n_chunks, N) residues mod t
    biases: np.ndarray = field(repr=False)  # (n_blocks, N) residues mod t


def quantize_layer(W, b, plan: LayerPlan, scale: FixedPointScale, params: RingParams) -> LayerPacking:
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.shape != (plan.n_out, plan.d_in) or b.shape != (plan.n_out,):
        raise EncodingError(f"weights {W.shape} / bias {b.shape} do not match plan {plan.n_out}x{plan.d_in}")
    Wq = quantize_signed(W, scale.delta_w, scale.clamp_bound)
    bq = quantize_signed(b, scale.combined)
    return pack_layer_ints(Wq, bq, plan, params)


def pack_layer_ints(Wq, bq, plan: LayerPlan, params: RingParams) -> LayerPacking:
    N, t, c = params.N, params.t, plan.chunk_width
    blocks = np.zeros((plan.n_blocks, plan.n_chunks, N), dtype=np.int64)
    biases = np.zeros((plan.n_blocks, N), dtype=np.int64)
    for bi, (lo, hi) in enumerate(plan.blocks):
        for ci, (s, e) in enumerate(plan.chunks):
            rows = np.zeros((hi - lo, c), dtype=np.int64)
            rows[:, :e - s] = Wq[lo:hi, s:e]
            blocks[bi, ci] = pack_rows_ints(rows, c, N, t)
        biases[bi] = pack_bias_ints(bq[lo:hi], plan.block_targets(bi), N, t)
    return LayerPacking(plan, blocks, biases)


def pack_input_chunks(a, plan: LayerPlan, scale: FixedPointScale, params: RingParams,
                      counter: SaturationCounter | None = None) -> np.ndarray:
    """Quantize and split an activation vector into ``(n_chunks, N)`` plaintext rows."""
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size != plan.d_in:
        raise EncodingError(f"activation width {a.size} does not match plan d_in={plan.d_in}")
    q = quantize(a, scale.delta_a, params.t, scale.clamp_bound, counter)
    return np.stack([pack_vector_ints(q[s:e], params.N, params.t) for s, e in plan.chunks])


def extract_layer(decrypted, plan: LayerPlan, scale: FixedPointScale, t: int) -> np.ndarray:
    """Read the ``n_out`` pre-activations from ``(n_blocks, N)`` decrypted residues."""
    decrypted = np.asarray(decrypted)
    parts = [decrypted[b, plan.block_targets(b)] for b in range(plan.n_blocks)]
    return dequantize(np.concatenate(parts), scale.combined, t)


def integer_layer(Wq, bq, aq) -> np.ndarray:
    """Exact signed integer ``Wq @ aq + bq`` (object-free; values must fit int64)."""
    return np.asarray(Wq, dtype=np.int64) @ np.asarray(aq, dtype=np.int64) + np.asarray(bq, dtype=np.int64)


def check_headroom(max_abs_z: float, scale: FixedPointScale, t: int, margin: float = 1.25):
    """Raise :class:`HeadroomError` if ``margin * max|z|`` would wrap mod t."""
    limit = scale.max_preactivation(t)
    if margin * max_abs_z >= limit:
        raise HeadroomError(
            f"pre-activation range {max_abs_z:.3f} (x{margin}) exceeds the plaintext headroom "
            f"{limit:.3f} at combined scale {scale.combined}")
