"""The two-party protocol suite over additive shares.

Linear operations are local.  Multiplication opens Beaver-masked values
(one round), truncation opens one masked word per element, and comparison
converts arithmetic shares to XOR shares and runs a parallel-prefix carry
circuit, so its round count is log2(ring bits) plus a constant.

Every exchange is charged to the engine's ledger under the caller's tag.
Secure comparisons additionally follow a configurable cost model: by
default each scalar comparison is charged at 8 rounds / 432 bytes (the
figure this pipeline is calibrated against), while the protocol's real
exchanges are tracked on a shadow ledger and reported alongside.
"""

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .ring import FixedPointCodec
from .shares import Dealer, SharedTensor, concat
from .shares import broadcast_to as _broadcast_shares
from .transport import CostLedger, LoopbackChannel, exchange


class DomainError(ValueError):
    """An input left a kernel's documented convergence domain (strict mode)."""


@dataclass(frozen=True)
class CompareCostConfig:
    """Ledger cost charged per scalar secure comparison.

    mode "model" charges `rounds`/`bytes` per compared scalar and diverts the
    real protocol traffic to the shadow ledger; mode "analytic" charges the
    real (batched) exchanges directly.
    """

    mode: str = "model"
    rounds: int = 8
    bytes: int = 432


@dataclass(frozen=True)
class KernelConfig:
    """Iteration counts and domain handling for the baseline nonlinear kernels."""

    exp_iterations: int = 8
    reciprocal_iterations: int = 10
    rsqrt_iterations: int = 10
    log_iterations: int = 15
    domain_mode: str = "permissive"  # permissive: clamp into domain; strict: raise


class Mpc:
    """Protocol engine: codec + dealer + channel + ledger."""

    def __init__(
        self,
        codec: FixedPointCodec,
        dealer: Dealer,
        channel=None,
        ledger: CostLedger | None = None,
        compare_cost: CompareCostConfig = CompareCostConfig(),
        kernels: KernelConfig = KernelConfig(),
    ):
        self.codec = codec
        self.ring = codec.ring
        self.dealer = dealer
        self.channel = channel if channel is not None else LoopbackChannel()
        self.ledger = ledger if ledger is not None else CostLedger()
        self.shadow_ledger = CostLedger(self.ledger.model)
        self.compare_cost = compare_cost
        self.kernels = kernels
        self._active_ledger = self.ledger
        # headroom for masked-open truncation; see truncate()
        self.trunc_offset_bits = max(self.ring.bits - 18, 2 * codec.frac_bits + 4)

    # ------------------------------------------------------------------ basics

    def share(self, x) -> SharedTensor:
        return self.dealer.share(x)

    def share_bits(self, bits) -> SharedTensor:
        return self.dealer.share_bits(bits)

    def public(self, x) -> SharedTensor:
        """A public constant as a degenerate sharing (party 1 holds zeros)."""
        enc = self.codec.encode(np.asarray(x, dtype=np.float64))
        return SharedTensor((enc, np.zeros_like(enc)), self.codec)

    def _exchange(self, tag: str, p0, p1):
        return exchange(self.channel, self._active_ledger, tag, p0, p1)

    def _open_residues(self, tag: str, t: SharedTensor) -> np.ndarray:
        """Open masked residues (never secrets); both parties learn the sum."""
        r0, r1 = self._exchange(tag, t.shares[0], t.shares[1])
        # party 0 computes shares[0] + r0, party 1 shares[1] + r1; identical sums
        return self.ring.add(t.shares[0], r0)

    def _open_xor(self, tag: str, s0, s1) -> np.ndarray:
        r0, r1 = self._exchange(tag, s0, s1)
        out = s0 ^ r0
        if self.ring.bits < 64:
            out &= np.uint64(self.ring.mask)
        return out

    def reconstruct(self, t: SharedTensor, tag: str = "reconstruct", kind: str = "oracle"):
        """Audited reveal: exchange shares, decode, and log the event."""
        total = self._open_residues(tag, t)
        value = self.codec.decode(total)
        self._active_ledger.log_reveal(kind, tag, _summarize(value))
        return value

    # --------------------------------------------------------------- linear ops

    def add(self, x: SharedTensor, y: SharedTensor) -> SharedTensor:
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
        return x + y

    def sub(self, x: SharedTensor, y: SharedTensor) -> SharedTensor:
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
        return x - y

    def mul_public(self, t: SharedTensor, c, tag: str) -> SharedTensor:
        """Multiply by public reals: local scale by encode(c), then truncate."""
        enc = self.codec.encode(np.asarray(c, dtype=np.float64))
        enc = np.broadcast_to(enc, t.shape) if np.ndim(enc) else enc
        r = self.ring
        scaled = SharedTensor((r.mul(t.shares[0], enc), r.mul(t.shares[1], enc)), self.codec)
        return self.truncate(scaled, tag=tag)

    # ---------------------------------------------------------------- truncation

    def truncate(self, t: SharedTensor, k: int | None = None, tag: str = "truncate") -> SharedTensor:
        """Rescale shares by 2^-k via one masked open; error at most 1 ulp.

        The dealt mask r is uniform on [0, 2^bits - 2^(l+2)) with
        l = trunc_offset_bits, so the open never wraps for inputs with
        |signed value| < 2^l; the truncation is then exact up to the carry
        from the low k bits.  The clipped mask range costs a statistical
        (not perfect) hiding of about 2^(l+2-bits).
        """
        k = self.codec.frac_bits if k is None else k
        ell = self.trunc_offset_bits
        if ell + 2 > self.ring.bits:
            raise ValueError("ring too small for masked-open truncation")
        pair = self.dealer.trunc_pair(t.shape, k, self.ring.modulus - (1 << (ell + 2)))
        r = self.ring
        offset = r.residue(1 << ell)
        y0 = r.add(t.shares[0], offset)
        masked = SharedTensor(
            (r.add(y0, pair.r.shares[0]), r.add(t.shares[1], pair.r.shares[1])), self.codec
        )
        c = self._open_residues(tag, masked)
        c_hi = r.shift_right(c, k)
        out0 = r.sub(r.sub(c_hi, pair.r_hi.shares[0]), r.residue(1 << (ell - k)))
        out1 = r.neg(pair.r_hi.shares[1])
        return SharedTensor((out0, out1), self.codec)

    # ------------------------------------------------------------ multiplication

    def mul(self, x: SharedTensor, y: SharedTensor, tag: str, trunc: bool = True) -> SharedTensor:
        """Beaver multiplication; one open round, then rescale."""
        shape = np.broadcast_shapes(x.shape, y.shape)
        x, y = _broadcast(x, shape), _broadcast(y, shape)
        trip = self.dealer.triple(shape)
        eps = x - trip.a
        dlt = y - trip.b
        e_and_d = SharedTensor(
            (
                np.stack([eps.shares[0], dlt.shares[0]]),
                np.stack([eps.shares[1], dlt.shares[1]]),
            ),
            self.codec,
        )
        opened = self._open_residues(tag, e_and_d)
        e, dl = opened[0], opened[1]
        r = self.ring
        z0 = r.add(r.add(trip.c.shares[0], r.mul(e, trip.b.shares[0])), r.mul(dl, trip.a.shares[0]))
        z0 = r.add(z0, r.mul(e, dl))
        z1 = r.add(r.add(trip.c.shares[1], r.mul(e, trip.b.shares[1])), r.mul(dl, trip.a.shares[1]))
        out = SharedTensor((z0, z1), self.codec)
        self._active_ledger.charge_flops(tag, 6 * int(np.prod(shape)))
        if trunc:
            out = self.truncate(out, tag=tag)
        return out

    def square(self, x: SharedTensor, tag: str, trunc: bool = True) -> SharedTensor:
        return self.mul(x, x, tag, trunc=trunc)

    def matmul(self, x: SharedTensor, y: SharedTensor, tag: str, trunc: bool = True) -> SharedTensor:
        """Batched secure matrix product; one round opens epsilon and delta.

        Opened words per party: prod(batch) * (m*k + k*n).
        """
        if x.shape[-1] != y.shape[-2]:
            raise ValueError(f"matmul dims mismatch: {x.shape} @ {y.shape}")
        batch = np.broadcast_shapes(x.shape[:-2], y.shape[:-2])
        x = _broadcast(x, batch + x.shape[-2:])
        y = _broadcast(y, batch + y.shape[-2:])
        trip = self.dealer.matmul_triple_shaped(x.shape, y.shape)
        eps = x - trip.a
        dlt = y - trip.b
        e0 = np.concatenate([eps.shares[0].ravel(), dlt.shares[0].ravel()])
        e1 = np.concatenate([eps.shares[1].ravel(), dlt.shares[1].ravel()])
        opened = self._open_residues(tag, SharedTensor((e0, e1), self.codec))
        e = opened[: x.size].reshape(x.shape)
        dl = opened[x.size :].reshape(y.shape)
        r = self.ring
        z0 = r.add(
            r.add(trip.c.shares[0], r.matmul(e, trip.b.shares[0])),
            r.add(r.matmul(trip.a.shares[0], dl), r.matmul(e, dl)),
        )
        z1 = r.add(
            r.add(trip.c.shares[1], r.matmul(e, trip.b.shares[1])),
            r.matmul(trip.a.shares[1], dl),
        )
        out = SharedTensor((z0, z1), self.codec)
        m, k, n = x.shape[-2], x.shape[-1], y.shape[-1]
        nbatch = int(np.prod(batch)) if batch else 1
        self._active_ledger.charge_flops(tag, 6 * nbatch * m * k * n)
        if trunc:
            out = self.truncate(out, tag=tag)
        return out

    # ----------------------------------------------------------- sign / compare

    def msb(self, t: SharedTensor, tag: str) -> SharedTensor:
        """Sign bit of the shared value, as arithmetic 0/1 shares (1 = negative).

        Arithmetic-to-XOR conversion, Kogge-Stone carry propagation on packed
        words, then a one-bit conversion back; nothing is revealed.
        """
        bit_x = self._msb_xor(t, tag)
        return self._bit_to_arith(bit_x, tag)

    def compare_open(self, a: SharedTensor, b: SharedTensor, tag: str = "compare") -> np.ndarray:
        """Public strict comparison [a < b]; reveals exactly the outcome bits.

        Ties (equal encodings) yield 0.  Under the "model" cost config the
        ledger charges the configured per-scalar cost and the protocol's own
        traffic lands on the shadow ledger.
        """
        diff = a - b
        n = diff.size
        model_mode = self.compare_cost.mode == "model"
        with self._redirect(self.shadow_ledger if model_mode else self._active_ledger):
            bit_x = self._msb_xor(diff, tag)
            bits = self._open_xor(tag, bit_x[0], bit_x[1]).astype(np.uint64)
        if model_mode:
            self._active_ledger.charge(
                tag,
                self.compare_cost.rounds * n,
                self.compare_cost.bytes * n,
                self.compare_cost.bytes * n,
                units=n,
            )
        self._active_ledger.log_reveal("comparison_bit", tag, _summarize_bits(bits))
        return bits.astype(np.int64).reshape(a.shape)

    def _msb_xor(self, t: SharedTensor, tag: str):
        """XOR-sharing of each element's sign bit (carried in bit 0)."""
        W = self.ring.bits
        mask = np.uint64(self.ring.mask)
        x0, x1 = t.shares
        # 1. each party XOR-shares its arithmetic share (one round)
        m0 = self.dealer.input_mask(x0.shape)
        m1 = self.dealer.input_mask(x1.shape)
        send0 = x0 ^ m0
        send1 = x1 ^ m1
        if self.ring.bits < 64:
            send0, send1, m0, m1 = send0 & mask, send1 & mask, m0 & mask, m1 & mask
        r0, r1 = self._exchange(tag, send0, send1)
        u = (m0, r1)  # XOR-sharing of x0
        v = (r0, m1)  # XOR-sharing of x1
        # 2. Kogge-Stone: generate/propagate prefixes of u + v
        g = self._and_words(tag, [(u, v)])[0]
        p = (u[0] ^ v[0], u[1] ^ v[1])
        k = 1
        while k < W:
            gs = (_shl(g[0], k, mask), _shl(g[1], k, mask))
            last = (k * 2) >= W
            if last:
                (gp,) = self._and_words(tag, [(p, gs)])
            else:
                ps = (_shl(p[0], k, mask), _shl(p[1], k, mask))
                gp, pp = self._and_words(tag, [(p, gs), (p, ps)])
                p = pp
            g = (g[0] ^ gp[0], g[1] ^ gp[1])
            k *= 2
        # 3. sum bit W-1 = u ^ v ^ carry-in, carry-in = g << 1
        s0 = u[0] ^ v[0] ^ _shl(g[0], 1, mask)
        s1 = u[1] ^ v[1] ^ _shl(g[1], 1, mask)
        sh = np.uint64(W - 1)
        self._active_ledger.charge_flops(tag, 80 * int(x0.size))  # circuit word ops
        return ((s0 >> sh) & np.uint64(1), (s1 >> sh) & np.uint64(1))

    def _and_words(self, tag: str, pairs):
        """Bitwise AND on XOR-shared words via binary Beaver triples.

        All pairs open their masked operands in a single exchange round.
        """
        triples = [self.dealer.binary_triple(u[0].shape) for (u, _) in pairs]
        open0, open1 = [], []
        for (u, v), tr in zip(pairs, triples):
            open0.extend([(u[0] ^ tr.a[0]).ravel(), (v[0] ^ tr.b[0]).ravel()])
            open1.extend([(u[1] ^ tr.a[1]).ravel(), (v[1] ^ tr.b[1]).ravel()])
        p0 = np.concatenate(open0)
        p1 = np.concatenate(open1)
        r0, r1 = self._exchange(tag, p0, p1)
        opened = p0 ^ r0
        outs = []
        pos = 0
        for (u, v), tr in zip(pairs, triples):
            n = u[0].size
            e = opened[pos : pos + n].reshape(u[0].shape)
            f = opened[pos + n : pos + 2 * n].reshape(u[0].shape)
            pos += 2 * n
            z0 = tr.c[0] ^ (f & tr.a[0]) ^ (e & tr.b[0]) ^ (e & f)
            z1 = tr.c[1] ^ (f & tr.a[1]) ^ (e & tr.b[1])
            outs.append((z0, z1))
        return outs

    def _bit_to_arith(self, bit_x, tag: str) -> SharedTensor:
        """XOR-shared bit -> arithmetic 0/1 shares (one masked bit open)."""
        pair = self.dealer.b2a_pair(bit_x[0].shape)
        z = self._open_xor(tag, bit_x[0] ^ pair.r_b[0], bit_x[1] ^ pair.r_b[1]) & np.uint64(1)
        # bit = z XOR r  ->  z + r - 2*z*r, with z public
        r = self.ring
        ra0, ra1 = pair.r_a.shares
        out0 = r.add(z, r.sub(ra0, r.mul(r.mul(ra0, z), r.residue(2))))
        out1 = r.sub(ra1, r.mul(r.mul(ra1, z), r.residue(2)))
        return SharedTensor((out0, out1), self.codec)

    # ------------------------------------------------------------- derived ops

    def select(self, bit: SharedTensor, x: SharedTensor, y: SharedTensor, tag: str) -> SharedTensor:
        """Oblivious mux: bit ? x : y (bit holds integer 0/1 shares)."""
        return y + self.mul(bit, x - y, tag, trunc=False)

    def relu(self, t: SharedTensor, tag: str) -> SharedTensor:
        neg = self.msb(t, tag)
        # x * (1 - [x<0])
        return t - self.mul(neg, t, tag, trunc=False)

    def maximum(self, a: SharedTensor, b: SharedTensor, tag: str) -> SharedTensor:
        lt = self.msb(a - b, tag)  # 1 where a < b
        return self.select(lt, b, a, tag)

    def max_last(self, t: SharedTensor, tag: str) -> SharedTensor:
        """Oblivious max along the last axis (comparison tree, no reveals)."""
        cur = t
        while cur.shape[-1] > 1:
            n = cur.shape[-1]
            half = n // 2
            a = cur[..., :half]
            b = cur[..., half : 2 * half]
            m = self.maximum(a, b, tag)
            if n % 2:
                m = concat([m, cur[..., 2 * half :]], axis=-1)
            cur = m
        return cur

    def clamp(self, t: SharedTensor, lo=None, hi=None, tag: str = "clamp") -> SharedTensor:
        """Obliviously clamp into [lo, hi] (each bound one msb + one select)."""
        if lo is not None:
            t = self.maximum(t, self.public(np.full(t.shape, lo)), tag)
        if hi is not None:
            gt = self.msb(self.public(np.full(t.shape, hi)) - t, tag)  # 1 where hi < t
            t = self.select(gt, self.public(np.full(t.shape, hi)), t, tag)
        return t

    # ---------------------------------------------------------------- plumbing

    @contextmanager
    def _redirect(self, ledger: CostLedger):
        prev = self._active_ledger
        self._active_ledger = ledger
        try:
            yield
        finally:
            self._active_ledger = prev

    def analytic_compare_cost(self) -> dict:
        """Measure the true cost of one scalar comparison on a scratch ledger."""
        probe = Mpc(
            self.codec,
            Dealer(0xC0FFEE, self.codec),
            LoopbackChannel(),
            CostLedger(self.ledger.model),
            compare_cost=CompareCostConfig(mode="analytic"),
            kernels=self.kernels,
        )
        a = probe.share(np.array([0.25]))
        b = probe.share(np.array([0.75]))
        probe.compare_open(a, b, tag="probe")
        t = probe.ledger.totals()
        return {"rounds": t.rounds, "bytes": t.bytes}


def _broadcast(t: SharedTensor, shape) -> SharedTensor:
    if t.shape == tuple(shape):
        return t
    return _broadcast_shares(t, shape)


def _shl(a: np.ndarray, k: int, mask: np.uint64) -> np.ndarray:
    return (a << np.uint64(k)) & mask


def _summarize(value: np.ndarray) -> str:
    v = np.asarray(value)
    if v.size <= 8:
        return np.array2string(v, precision=6, separator=",")
    return f"tensor{v.shape}"


def _summarize_bits(bits: np.ndarray) -> str:
    b = np.asarray(bits).ravel().astype(int)
    if b.size <= 128:
        return "".join(map(str, b))
    return f"{b.size} bits #{hashlib.blake2b(b.tobytes(), digest_size=6).hexdigest()}"
