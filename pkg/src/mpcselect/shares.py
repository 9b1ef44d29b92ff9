"""Additive secret sharing and the trusted dealer for correlated randomness.

A secret x splits into x0 + x1 = x (mod 2^bits) with x0 uniform, so either
share alone is a uniform residue.  The dealer plays the non-colluding third
party of the semi-honest setting: it emits shares, Beaver triples, truncation
pairs, binary AND triples and bit-conversion pairs from independent seeded
streams, never looking at any secret.
"""

from dataclasses import dataclass, field

import numpy as np

from .ring import FixedPointCodec, Ring


class TripleExhaustionError(RuntimeError):
    """Raised when a protocol asks the dealer for more randomness than budgeted."""


@dataclass
class SharedTensor:
    """Both parties' additive shares of one shaped tensor.

    This artifact simulates the two parties in one address space, so the
    object carries both shares; protocol code only ever combines them
    through a channel exchange.  Shares are uint64 arrays of equal shape.
    """

    shares: tuple
    codec: FixedPointCodec

    def __post_init__(self):
        s0, s1 = self.shares
        if s0.shape != s1.shape:
            raise ValueError(f"share shape mismatch: {s0.shape} vs {s1.shape}")

    @property
    def shape(self):
        return self.shares[0].shape

    @property
    def size(self) -> int:
        return int(self.shares[0].size)

    @property
    def ndim(self) -> int:
        return self.shares[0].ndim

    def _lift(self, other):
        if isinstance(other, SharedTensor):
            return other
        raise TypeError(f"expected SharedTensor, got {type(other).__name__}")

    def __add__(self, other):
        o = self._lift(other)
        r = self.codec.ring
        return SharedTensor(
            (r.add(self.shares[0], o.shares[0]), r.add(self.shares[1], o.shares[1])),
            self.codec,
        )

    def __sub__(self, other):
        o = self._lift(other)
        r = self.codec.ring
        return SharedTensor(
            (r.sub(self.shares[0], o.shares[0]), r.sub(self.shares[1], o.shares[1])),
            self.codec,
        )

    def __neg__(self):
        r = self.codec.ring
        return SharedTensor((r.neg(self.shares[0]), r.neg(self.shares[1])), self.codec)

    def __getitem__(self, idx):
        return SharedTensor((self.shares[0][idx], self.shares[1][idx]), self.codec)

    def reshape(self, *shape):
        return SharedTensor(
            (self.shares[0].reshape(*shape), self.shares[1].reshape(*shape)), self.codec
        )

    def transpose(self, *axes):
        ax = axes if axes else None
        return SharedTensor(
            (np.transpose(self.shares[0], ax), np.transpose(self.shares[1], ax)),
            self.codec,
        )

    def mul_int(self, k: int):
        """Multiply by a public integer; exact and communication-free."""
        r = self.codec.ring
        kk = r.residue(int(k))
        return SharedTensor((r.mul(self.shares[0], kk), r.mul(self.shares[1], kk)), self.codec)

    def add_public(self, x):
        """Add a public real constant (enters through party 0's share)."""
        r = self.codec.ring
        c = self.codec.encode(np.asarray(x, dtype=np.float64))
        c = np.broadcast_to(c, self.shape)
        return SharedTensor((r.add(self.shares[0], c), self.shares[1]), self.codec)

    def sum(self, axis=None, keepdims=False):
        """Sum along an axis; linear, so each party sums locally.

        numpy reduces in uint64, which wraps mod 2^64; a final mask folds the
        result into smaller rings.
        """
        r = self.codec.ring
        s0 = self.shares[0].sum(axis=axis, keepdims=keepdims, dtype=np.uint64)
        s1 = self.shares[1].sum(axis=axis, keepdims=keepdims, dtype=np.uint64)
        if r.bits < 64:
            s0, s1 = s0 & np.uint64(r.mask), s1 & np.uint64(r.mask)
        return SharedTensor((np.asarray(s0), np.asarray(s1)), self.codec)


def broadcast_to(t: SharedTensor, shape) -> SharedTensor:
    return SharedTensor(
        (
            np.ascontiguousarray(np.broadcast_to(t.shares[0], shape)),
            np.ascontiguousarray(np.broadcast_to(t.shares[1], shape)),
        ),
        t.codec,
    )


def concat(tensors, axis=0) -> SharedTensor:
    codec = tensors[0].codec
    s0 = np.concatenate([t.shares[0] for t in tensors], axis=axis)
    s1 = np.concatenate([t.shares[1] for t in tensors], axis=axis)
    return SharedTensor((s0, s1), codec)


def stack(tensors, axis=0) -> SharedTensor:
    codec = tensors[0].codec
    s0 = np.stack([t.shares[0] for t in tensors], axis=axis)
    s1 = np.stack([t.shares[1] for t in tensors], axis=axis)
    return SharedTensor((s0, s1), codec)


@dataclass
class BeaverTriple:
    """Shares of random (a, b, c) with c = a*b elementwise in the ring."""

    a: SharedTensor
    b: SharedTensor
    c: SharedTensor


@dataclass
class MatmulTriple:
    """Shares of random (A[m,k], B[k,n], C=A@B) for one-round matrix products."""

    a: SharedTensor
    b: SharedTensor
    c: SharedTensor


@dataclass
class TruncPair:
    """Shares of (r, r >> k) for masked-open truncation by k bits."""

    r: SharedTensor
    r_hi: SharedTensor
    k: int


@dataclass
class BinaryTriple:
    """XOR-shares of words (a, b, c = a & b) for Beaver AND on packed bits."""

    a: tuple
    b: tuple
    c: tuple


@dataclass
class B2APair:
    """One random bit r, XOR-shared (r_b) and arithmetic-shared (r_a)."""

    r_b: tuple
    r_a: SharedTensor


_STREAMS = ("shares", "triples", "trunc", "binary", "b2a", "masks")


@dataclass
class Dealer:
    """Seeded trusted dealer; one independent PRNG stream per randomness kind.

    The same seed reproduces the exact same stream of correlated randomness,
    and consuming one kind never advances another.
    """

    seed: int
    codec: FixedPointCodec
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        self._rngs = {
            kind: np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(i,)))
            for i, kind in enumerate(_STREAMS)
        }
        self.counts = {kind: 0 for kind in _STREAMS}
        self._budget = None

    @property
    def ring(self) -> Ring:
        return self.codec.ring

    def set_budget(self, n_elements: int | None, kind: str = "triples"):
        """Optional cap on dealt elements of one randomness kind."""
        if self._budget is None:
            self._budget = {}
        if n_elements is None:
            self._budget.pop(kind, None)
        else:
            self._budget[kind] = n_elements

    def _uniform(self, kind: str, shape) -> np.ndarray:
        return self.ring.uniform(self._rngs[kind], shape)

    def _spend(self, kind: str, n: int):
        self.counts[kind] += n
        cap = (self._budget or {}).get(kind)
        if cap is not None and self.counts[kind] > cap:
            raise TripleExhaustionError(
                f"{kind} budget exceeded: {self.counts[kind]} > {cap}"
            )

    # -- plain sharing ----------------------------------------------------

    def share_residues(self, v: np.ndarray) -> SharedTensor:
        """Split ring residues: share0 uniform, share1 = v - share0."""
        v = self.ring.residue(np.asarray(v, dtype=np.uint64))
        s0 = self._uniform("shares", v.shape)
        self._spend("shares", int(v.size))
        return SharedTensor((s0, self.ring.sub(v, s0)), self.codec)

    def share(self, x) -> SharedTensor:
        """Encode reals and split them; share0 is uniform on the ring."""
        return self.share_residues(self.codec.encode(x))

    def share_bits(self, bits) -> SharedTensor:
        """Arithmetic-share integer 0/1 values (scale-free)."""
        return self.share_residues(np.asarray(bits, dtype=np.uint64))

    # -- correlated randomness --------------------------------------------

    def triple(self, shape) -> BeaverTriple:
        rng = "triples"
        a = self._uniform(rng, shape)
        b = self._uniform(rng, shape)
        c = self.ring.mul(a, b)
        n = int(np.prod(shape)) if shape else 1
        self._spend(rng, n)
        return BeaverTriple(
            self._split(rng, a), self._split(rng, b), self._split(rng, c)
        )

    def matmul_triple(self, m: int, k: int, n: int) -> MatmulTriple:
        return self.matmul_triple_shaped((m, k), (k, n))

    def matmul_triple_shaped(self, shape_a, shape_b) -> MatmulTriple:
        """Matrix triple with arbitrary (broadcast-matched) stacked batch dims."""
        rng = "triples"
        a = self._uniform(rng, shape_a)
        b = self._uniform(rng, shape_b)
        c = self.ring.matmul(a, b)
        nbatch = int(np.prod(shape_a[:-2])) if len(shape_a) > 2 else 1
        m, k = shape_a[-2:]
        n = shape_b[-1]
        self._spend(rng, nbatch * (m * k + k * n))
        return MatmulTriple(
            self._split(rng, a), self._split(rng, b), self._split(rng, c)
        )

    def trunc_pair(self, shape, k: int, max_value: int | None = None) -> TruncPair:
        """Masks (r, r >> k); max_value clips r's range so opens cannot wrap."""
        rng = "trunc"
        hi = self.ring.modulus if max_value is None else max_value
        r = self._rngs[rng].integers(0, hi, size=shape, dtype=np.uint64)
        r_hi = self.ring.shift_right(r, k)
        n = int(np.prod(shape)) if shape else 1
        self._spend(rng, n)
        return TruncPair(self._split(rng, r), self._split(rng, r_hi), k)

    def binary_triple(self, shape) -> BinaryTriple:
        rng = "binary"
        a = self._uniform(rng, shape)
        b = self._uniform(rng, shape)
        c = a & b
        n = int(np.prod(shape)) if shape else 1
        self.counts[rng] += n
        return BinaryTriple(
            self._xor_split(rng, a), self._xor_split(rng, b), self._xor_split(rng, c)
        )

    def b2a_pair(self, shape) -> B2APair:
        rng = "b2a"
        r = self._rngs[rng].integers(0, 2, size=shape, dtype=np.uint64)
        n = int(np.prod(shape)) if shape else 1
        self.counts[rng] += n
        r_b = self._xor_split(rng, r)
        r_a = self._split(rng, self.ring.residue(r))
        return B2APair(r_b, r_a)

    def input_mask(self, shape) -> np.ndarray:
        """Uniform words for XOR-masking a party's protocol input."""
        n = int(np.prod(shape)) if shape else 1
        self.counts["masks"] += n
        return self._uniform("masks", shape)

    # -- internals ---------------------------------------------------------

    def _split(self, rng: str, v: np.ndarray) -> SharedTensor:
        s0 = self._uniform(rng, v.shape)
        return SharedTensor((s0, self.ring.sub(v, s0)), self.codec)

    def _xor_split(self, rng: str, v: np.ndarray):
        s0 = self._uniform(rng, v.shape)
        if self.ring.bits < 64:
            s0 = s0 & np.uint64(self.ring.mask)
        return (s0, v ^ s0)


def share(x, dealer: Dealer) -> SharedTensor:
    return dealer.share(x)


def reconstruct(t: SharedTensor) -> np.ndarray:
    """Sum the shares and decode; the local (oracle-side) reconstruction.

    Audited protocol-level reveals go through the engine, which logs them.
    """
    total = t.codec.ring.add(t.shares[0], t.shares[1])
    return t.codec.decode(total)


def reconstruct_residues(t: SharedTensor) -> np.ndarray:
    return t.codec.ring.add(t.shares[0], t.shares[1])


def deal_triples(n: int, shape, dealer: Dealer) -> list:
    """A batch of n independent elementwise Beaver triples."""
    if n < 1:
        raise ValueError("need n >= 1 triples")
    return [dealer.triple(shape) for _ in range(n)]
