"""Element-wise trainable quantization with variable-rate bit packing.

Each feature owns an ordered set of 2^b_max - 1 boundaries, materialized as
a first boundary plus rectified pseudo-intervals so ordering survives
training. Reduced rates keep every alpha-th boundary, restore what the
ordering implies and mark the rest as zero; the resulting level sums live
in disjoint class sets per rate.
"""

from dataclasses import dataclass
import struct

import numpy as np

from . import diffcore as dc

BITSTREAM_MAGIC = b"CSIBITS\x00"
BITSTREAM_VERSION = 1


class QuantizerError(ValueError):
    pass


def n_levels(b_max):
    """Length of the comparator output vector: 2^b_max - 1."""
    return (1 << b_max) - 1


@dataclass
class QuantizerParams:
    """Per-feature first boundary and pseudo-intervals (numpy view)."""

    first_boundary: np.ndarray   # (N,)
    pseudo_intervals: np.ndarray  # (N, 2^b_max - 2)
    b_max: int

    def __post_init__(self):
        self.first_boundary = np.asarray(self.first_boundary, dtype=np.float64)
        self.pseudo_intervals = np.asarray(self.pseudo_intervals, dtype=np.float64)
        n = self.first_boundary.shape[0]
        want = (n, n_levels(self.b_max) - 1)
        if self.pseudo_intervals.shape != want:
            raise QuantizerError(
                f"pseudo_intervals shape {self.pseudo_intervals.shape}, expected {want}")

    @property
    def n_features(self):
        return self.first_boundary.shape[0]

    def param_count(self):
        return self.first_boundary.size + self.pseudo_intervals.size


def materialize_boundaries(params):
    """Boundary grid b_i^(k) = b_i^(1) + sum_{l<=k} max(0, beta_i^(l))."""
    steps = np.maximum(params.pseudo_intervals, 0.0)
    first = params.first_boundary[:, None]
    return np.concatenate([first, first + np.cumsum(steps, axis=1)], axis=1)


@dataclass(frozen=True)
class BitAllocation:
    """Per-feature bit budget for one target stream length."""

    bits: np.ndarray  # (N,) ints in [1, b_max]
    b_max: int

    @property
    def total(self):
        return int(self.bits.sum())

    @property
    def alphas(self):
        return (1 << (self.b_max - self.bits)).astype(np.int64)


def allocate_bits(total_bits, n_features, b_max):
    """Spread ``total_bits`` over features: earlier indices get the extra bit."""
    if not n_features <= total_bits <= n_features * b_max:
        raise QuantizerError(
            f"total_bits={total_bits} outside [{n_features}, {n_features * b_max}]")
    base, extra = divmod(total_bits, n_features)
    bits = np.full(n_features, base, dtype=np.int64)
    bits[:extra] += 1
    return BitAllocation(bits=bits, b_max=b_max)


def quantize_levels(z_i, boundaries_i, bits_i):
    """Ternary comparator output for one feature at rate ``bits_i``.

    Only every alpha-th boundary is observed (sign(0) = +1); entries the
    ordering determines are restored, the alpha-1 undecidable ones are 0.
    """
    boundaries_i = np.asarray(boundaries_i, dtype=np.float64)
    t = boundaries_i.shape[-1]
    b_max = int(np.round(np.log2(t + 1)))
    if not 1 <= bits_i <= b_max:
        raise QuantizerError(f"bits_i={bits_i} outside [1, {b_max}]")
    alpha = 1 << (b_max - bits_i)
    active = np.arange(1, t + 1) % alpha == 0
    m = int(np.count_nonzero((z_i >= boundaries_i) & active))
    return _restore(m, alpha, t)


def _restore(m, alpha, t):
    idx = np.arange(1, t + 1)
    lo = m * alpha
    return np.where(idx <= lo, 1, np.where(idx >= lo + alpha, -1, 0)).astype(np.int8)


def quantize_batch(z, boundaries, alloc):
    """Vectorized quantize_levels over (..., N) features."""
    z = np.asarray(z, dtype=np.float64)
    t = boundaries.shape[-1]
    alphas = alloc.alphas
    idx = np.arange(1, t + 1)
    active = (idx[None, :] % alphas[:, None]) == 0        # (N, T)
    m = ((z[..., None] >= boundaries) & active).sum(-1)    # (..., N)
    lo = (m * alphas)[..., None]
    hi = lo + alphas[:, None]
    return np.where(idx <= lo, 1, np.where(idx >= hi, -1, 0)).astype(np.int8)


def pack_bits(levels, bits_i, alpha_i):
    """MSB-first binary code of the +1 count at the active boundary indices."""
    levels = np.asarray(levels)
    t = levels.shape[-1]
    actives = levels[alpha_i - 1::alpha_i][: (1 << bits_i) - 1]
    m = int(np.count_nonzero(actives == 1))
    if not np.array_equal(levels, _restore(m, alpha_i, t)):
        raise QuantizerError("malformed level vector for the stated rate")
    return np.array([(m >> (bits_i - 1 - k)) & 1 for k in range(bits_i)], dtype=np.uint8)


def unpack_bits(bits, b_max):
    """Inverse of pack_bits: bits (MSB first) back to the ternary vector."""
    bits = np.asarray(bits).astype(np.uint8)
    bits_i = bits.shape[-1]
    m = 0
    for b in bits:
        m = (m << 1) | int(b)
    alpha = 1 << (b_max - bits_i)
    return _restore(m, alpha, n_levels(b_max))


def level_sum(levels):
    """Quantized feature value: the plain sum of the ternary entries."""
    return np.asarray(levels).sum(axis=-1)


def class_set(bits_i, b_max):
    """Representable level sums at rate ``bits_i`` (disjoint across rates)."""
    alpha = 1 << (b_max - bits_i)
    top = (1 << b_max) - 1
    out = set()
    for n in range(1 << b_max):
        out.add(2 * alpha * ((2 * n - top) // (2 * alpha)) + alpha)
    return frozenset(out)


def surrogate_backward(z, boundaries, bits, upstream):
    """Gradients of the quantizer surrogate w.r.t. feature and boundaries.

    An active boundary is critical when the comparator sign flips between it
    and an adjacent active entry (virtual +1 below / -1 above the active
    range). Critical entries propagate the tanh surrogate slope; everything
    else, including interpolated zeros, propagates exactly zero.

    z: (..., N); boundaries: (N, T); bits: (N,); upstream: (..., N, T).
    Returns (grad_z (..., N), grad_boundaries (N, T)).
    """
    z = np.asarray(z, dtype=np.float64)
    boundaries = np.asarray(boundaries, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    t = boundaries.shape[-1]
    b_max = int(np.round(np.log2(t + 1)))
    alphas = (1 << (b_max - np.asarray(bits, dtype=np.int64)))
    idx = np.arange(1, t + 1)
    active = (idx[None, :] % alphas[:, None]) == 0
    k = idx[None, :] // alphas[:, None]                    # active rank, valid where active
    m = ((z[..., None] >= boundaries) & active).sum(-1)    # (..., N)
    critical = active & ((k == m[..., None]) | (k == m[..., None] + 1))
    slope = (1.0 - np.tanh(z[..., None] - boundaries) ** 2) * critical
    contrib = upstream * slope
    grad_z = contrib.sum(-1)
    batch_axes = tuple(range(contrib.ndim - 2))
    grad_b = -contrib.sum(axis=batch_axes) if batch_axes else -contrib
    return grad_z, grad_b


# ---------------------------------------------------------------------------
# feature streams and the wire format

def encode_stream(z, boundaries, alloc):
    """Quantize all features and concatenate per-feature codes (index order)."""
    levels = quantize_batch(z, boundaries, alloc)
    if levels.ndim != 2:
        raise QuantizerError("encode_stream expects a single feature vector")
    parts = [pack_bits(levels[i], int(alloc.bits[i]), int(alloc.alphas[i]))
             for i in range(levels.shape[0])]
    return np.concatenate(parts)


def decode_stream(bits, alloc):
    """Split a feedback stream back into per-feature ternary vectors."""
    bits = np.asarray(bits).astype(np.uint8)
    if bits.shape[0] != alloc.total:
        raise QuantizerError(f"stream length {bits.shape[0]} != allocation {alloc.total}")
    out = np.empty((alloc.bits.shape[0], n_levels(alloc.b_max)), dtype=np.int8)
    pos = 0
    for i, b in enumerate(alloc.bits):
        out[i] = unpack_bits(bits[pos:pos + b], alloc.b_max)
        pos += int(b)
    return out


def pack_bytes(bits):
    """Big-endian bit packing, zero-padded tail."""
    return np.packbits(np.asarray(bits).astype(np.uint8)).tobytes()


def unpack_bytes(buf, total_bits):
    arr = np.frombuffer(buf, dtype=np.uint8)
    return np.unpackbits(arr, count=total_bits)


def write_bitstream(path, bits, n_features, b_max):
    """CsiBitstream file: header carries (N, b_max, B); allocation is derived."""
    bits = np.asarray(bits).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(BITSTREAM_MAGIC)
        fh.write(struct.pack("<III", BITSTREAM_VERSION, n_features, b_max))
        fh.write(struct.pack("<I", bits.shape[0]))
        fh.write(pack_bytes(bits))


def read_bitstream(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != BITSTREAM_MAGIC:
            raise QuantizerError(f"bad bitstream magic {magic!r}")
        version, n_features, b_max = struct.unpack("<III", fh.read(12))
        if version != BITSTREAM_VERSION:
            raise QuantizerError(f"unsupported bitstream version {version}")
        total_bits, = struct.unpack("<I", fh.read(4))
        payload = fh.read()
    need = (total_bits + 7) // 8
    if len(payload) < need:
        raise QuantizerError("truncated bitstream payload")
    bits = unpack_bytes(payload[:need], total_bits)
    alloc = allocate_bits(total_bits, n_features, b_max)
    return bits, alloc


# ---------------------------------------------------------------------------
# trainable wrapper

class TrainableQuantizer:
    """Boundary parameters as autodiff tensors plus the surrogate comparator."""

    def __init__(self, n_features, b_max, delta=1.0):
        if b_max < 1:
            raise QuantizerError("b_max must be >= 1")
        self.n_features = n_features
        self.b_max = b_max
        t = n_levels(b_max)
        first = np.full(n_features, -(t - 1) / 2.0 * delta)
        self.first_boundary = dc.Tensor(first, requires_grad=True)
        self.pseudo_intervals = dc.Tensor(
            np.full((n_features, t - 1), delta), requires_grad=True)

    @classmethod
    def from_feature_std(cls, n_features, b_max, feature_std):
        """Spacing chosen so boundaries span +-2 std of the feature mass."""
        t = n_levels(b_max)
        if t > 1:
            delta = 4.0 * float(feature_std) / (t - 1)
        else:
            delta = 1.0
        return cls(n_features, b_max, delta=delta)

    def parameters(self):
        return {"first_boundary": self.first_boundary,
                "pseudo_intervals": self.pseudo_intervals}

    def numpy_params(self):
        return QuantizerParams(self.first_boundary.data.copy(),
                               self.pseudo_intervals.data.copy(), self.b_max)

    def param_count(self):
        return self.first_boundary.size + self.pseudo_intervals.size

    def boundaries(self):
        """Materialized boundary grid as a graph tensor (ordering preserved)."""
        first = dc.reshape(self.first_boundary, (self.n_features, 1))
        if self.pseudo_intervals.size == 0:
            return first
        steps = dc.cumsum(dc.relu(self.pseudo_intervals), axis=1)
        return dc.concat([first, first + steps], axis=1)

    def quantize(self, z, alloc):
        """Comparator output as a tensor with the surrogate backward attached."""
        bnd = self.boundaries()
        levels = quantize_batch(z.data, bnd.data, alloc).astype(np.float64)

        def backward(g, z_data=z.data, b_data=bnd.data, bits=alloc.bits):
            return surrogate_backward(z_data, b_data, bits, g)

        return dc.custom_op("quantize_levels", levels, (z, bnd), backward)

    def quantized_features(self, z, alloc):
        """Level sums z(s) ready for the channel recovery network."""
        return dc.tsum(self.quantize(z, alloc), axis=-1)
