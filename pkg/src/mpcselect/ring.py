"""Fixed-point encoding of reals into a power-of-two ring.

All secret-shared values live in Z_{2^bits} (64-bit by default) as numpy
uint64 residues.  Negative numbers use two's complement, so the signed
range is [-2^(bits-1), 2^(bits-1)).  A parallel small ring (8-bit) exists
only so tests can enumerate the whole domain.
"""

from dataclasses import dataclass

import numpy as np


class EncodeRangeError(ValueError):
    """Raised when a real value does not fit the fixed-point range."""


def _as_u64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.uint64)


@dataclass(frozen=True)
class Ring:
    """The ring Z_{2^bits}, 2 <= bits <= 64, backed by uint64 arrays."""

    bits: int = 64

    def __post_init__(self):
        if not 2 <= self.bits <= 64:
            raise ValueError(f"ring bits must be in [2, 64], got {self.bits}")

    @property
    def modulus(self) -> int:
        return 1 << self.bits

    @property
    def mask(self) -> int:
        return (1 << self.bits) - 1

    @property
    def half(self) -> int:
        # smallest residue interpreted as negative
        return 1 << (self.bits - 1)

    def residue(self, x) -> np.ndarray:
        """Reduce integers (python ints, signed or unsigned arrays) into the ring."""
        a = np.asarray(x)
        if a.dtype.kind == "f":
            raise TypeError("residue() takes integers; use FixedPointCodec for reals")
        if a.dtype.kind == "i":
            a = a.astype(np.int64).astype(np.uint64)
        else:
            a = a.astype(np.uint64)
        if self.bits < 64:
            a = a & np.uint64(self.mask)
        return a

    def add(self, a, b) -> np.ndarray:
        out = _as_u64(a) + _as_u64(b)
        if self.bits < 64:
            out &= np.uint64(self.mask)
        return out

    def sub(self, a, b) -> np.ndarray:
        out = _as_u64(a) - _as_u64(b)
        if self.bits < 64:
            out &= np.uint64(self.mask)
        return out

    def neg(self, a) -> np.ndarray:
        out = np.uint64(0) - _as_u64(a)
        if self.bits < 64:
            out &= np.uint64(self.mask)
        return out

    def mul(self, a, b) -> np.ndarray:
        # uint64 multiplication wraps mod 2^64; masking folds it into 2^bits
        # (valid because 2^bits divides 2^64).
        out = _as_u64(a) * _as_u64(b)
        if self.bits < 64:
            out &= np.uint64(self.mask)
        return out

    def matmul(self, a, b) -> np.ndarray:
        """Matrix product in the ring; uint64 accumulation wraps mod 2^64."""
        out = _as_u64(a) @ _as_u64(b)
        if self.bits < 64:
            out &= np.uint64(self.mask)
        return out

    def shift_right(self, a, k: int) -> np.ndarray:
        """Logical right shift of residues (unsigned semantics)."""
        return _as_u64(a) >> np.uint64(k)

    def to_signed(self, a) -> np.ndarray:
        """Two's-complement interpretation, as int64."""
        a = _as_u64(a)
        if self.bits == 64:
            return a.astype(np.int64)
        s = a.astype(np.int64)
        return np.where(s >= self.half, s - self.modulus, s)

    def sign_bit(self, a) -> np.ndarray:
        """Plaintext MSB of each residue (1 = negative), as uint64 0/1."""
        return (_as_u64(a) >> np.uint64(self.bits - 1)) & np.uint64(1)

    def uniform(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        return rng.integers(0, self.modulus, size=shape, dtype=np.uint64)

    def to_bytes(self, a) -> bytes:
        """Little-endian 8-byte words; the wire and file encoding everywhere."""
        return np.ascontiguousarray(_as_u64(a), dtype="<u8").tobytes()

    def from_bytes(self, raw: bytes, shape=None) -> np.ndarray:
        a = np.frombuffer(raw, dtype="<u8").astype(np.uint64)
        if self.bits < 64:
            a = a & np.uint64(self.mask)
        return a.reshape(shape) if shape is not None else a


RING64 = Ring(64)
RING8 = Ring(8)


@dataclass(frozen=True)
class FixedPointCodec:
    """Maps reals to ring residues as round(x * 2^frac_bits), two's complement."""

    frac_bits: int = 16
    ring: Ring = RING64

    def __post_init__(self):
        if not 1 <= self.frac_bits <= self.ring.bits - 3:
            raise ValueError(
                f"frac_bits {self.frac_bits} out of range for {self.ring.bits}-bit ring"
            )

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def max_abs(self) -> float:
        # one sign bit plus one headroom bit stay clear of the encoded value
        return float(1 << (self.ring.bits - self.frac_bits - 2))

    @property
    def resolution(self) -> float:
        return 1.0 / self.scale

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if np.any(~np.isfinite(x)) or np.any(np.abs(x) >= self.max_abs):
            raise EncodeRangeError(
                f"value out of fixed-point range (+-{self.max_abs:g})"
            )
        v = np.round(x * self.scale).astype(np.int64)
        return self.ring.residue(v)

    def decode(self, r) -> np.ndarray:
        return self.ring.to_signed(r).astype(np.float64) / self.scale


def ring_add(a, b, ring: Ring = RING64) -> np.ndarray:
    return ring.add(a, b)


def ring_mul(a, b, ring: Ring = RING64) -> np.ndarray:
    return ring.mul(a, b)


def encode(x, codec: FixedPointCodec) -> np.ndarray:
    return codec.encode(x)


def decode(r, codec: FixedPointCodec) -> np.ndarray:
    return codec.decode(r)
