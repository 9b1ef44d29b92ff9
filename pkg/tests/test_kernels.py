"""Baseline kernel accuracy, pinned once against reference math.

The bounds below were measured on the default iteration counts over
1000-point domain grids and frozen as regression limits; they are loose by
roughly 1.3x over the observed maxima so seed drift cannot flip them, but
tight enough to catch a broken iteration.
"""

import numpy as np
import pytest

from mpcselect import kernels
from mpcselect.protocols import DomainError, Mpc
from mpcselect.ring import FixedPointCodec
from mpcselect.shares import Dealer, reconstruct

CODEC = FixedPointCodec(frac_bits=16)

# measured maxima: exp rel 0.142 (limit-form bias), recip rel 9.1e-4,
# rsqrt rel 4.8e-4, log abs 0.038, softmax abs 5.7e-3, entropy abs 1.2e-2
EXP_REL_BOUND = 0.18  # on [-8, 8]
EXP_TAIL_ABS_BOUND = 1e-4  # on [-16, -8], values below fixed-point noise
RECIP_REL_BOUND = 0.002
RSQRT_REL_BOUND = 0.001
LOG_ABS_BOUND = 0.05
SOFTMAX_ABS_BOUND = 0.01
ENTROPY_ABS_BOUND = 0.02
LAYERNORM_ABS_BOUND = 5e-4


def make_engine(seed=3):
    return Mpc(CODEC, Dealer(seed, CODEC))


def grid(lo, hi, n=1000):
    return np.linspace(lo, hi, n)


def test_exp_pinned_grid():
    eng = make_engine()
    x = grid(-16, 8)
    got = reconstruct(kernels.sec_exp(eng, eng.share(x), mode="unchecked"))
    ref = np.exp(x)
    mid = x >= -8
    rel = np.abs(got[mid] - ref[mid]) / ref[mid]
    assert rel.max() <= EXP_REL_BOUND
    assert np.abs(got[~mid] - ref[~mid]).max() <= EXP_TAIL_ABS_BOUND


def test_exp_at_zero():
    eng = make_engine()
    got = reconstruct(kernels.sec_exp(eng, eng.share(np.array([0.0]))))
    assert abs(got[0] - 1.0) <= 1e-3


def test_reciprocal_pinned_grid():
    eng = make_engine()
    x = grid(2**-6, 2**6)
    got = reconstruct(kernels.sec_reciprocal(eng, eng.share(x), mode="unchecked"))
    rel = np.abs(got - 1 / x) * x
    assert rel.max() <= RECIP_REL_BOUND


def test_reciprocal_at_one():
    eng = make_engine()
    got = reconstruct(kernels.sec_reciprocal(eng, eng.share(np.array([1.0]))))
    assert abs(got[0] - 1.0) <= 1e-3


def test_rsqrt_pinned_grid():
    eng = make_engine()
    x = grid(2**-6, 2**6)
    got = reconstruct(kernels.sec_rsqrt(eng, eng.share(x), mode="unchecked"))
    ref = x**-0.5
    assert (np.abs(got - ref) / ref).max() <= RSQRT_REL_BOUND


def test_log_pinned_grid():
    eng = make_engine()
    x = grid(2**-6, 2**6)
    got = reconstruct(kernels.sec_log(eng, eng.share(x), mode="unchecked"))
    assert np.abs(got - np.log(x)).max() <= LOG_ABS_BOUND


def test_kernel_iteration_counts_configurable():
    from mpcselect.protocols import KernelConfig

    eng = Mpc(CODEC, Dealer(3, CODEC), kernels=KernelConfig(reciprocal_iterations=2))
    # two iterations are not enough at the domain edge; more must help
    x = np.array([55.0])
    bad = reconstruct(kernels.sec_reciprocal(eng, eng.share(x), mode="unchecked"))
    good = reconstruct(
        kernels.sec_reciprocal(eng, eng.share(x), iterations=12, mode="unchecked")
    )
    assert abs(good[0] - 1 / 55) < abs(bad[0] - 1 / 55)


def test_strict_mode_raises_and_logs():
    eng = make_engine()
    with pytest.raises(DomainError):
        kernels.sec_reciprocal(eng, eng.share(np.array([200.0])), mode="strict")
    assert eng.ledger.reveal_log[-1].kind == "domain_diagnostic"


def test_permissive_mode_clamps():
    eng = make_engine()
    got = reconstruct(
        kernels.sec_reciprocal(eng, eng.share(np.array([0.001])), mode="permissive")
    )
    assert abs(got[0] - 64.0) <= 0.1  # clamped to the domain floor 2^-6


def test_softmax_uniform_pair():
    eng = make_engine()
    got = reconstruct(kernels.sec_softmax(eng, eng.share(np.array([[0.0, 0.0]]))))
    assert np.abs(got - 0.5).max() <= 1e-3


def test_softmax_degenerate_length_one():
    eng = make_engine()
    before = eng.ledger.totals().bytes
    got = reconstruct(kernels.sec_softmax(eng, eng.share(np.array([[3.7]]))))
    assert got[0, 0] == 1.0
    assert eng.ledger.totals().bytes == before  # no kernels ran


def test_softmax_pinned_batch():
    eng = make_engine()
    rng = np.random.default_rng(5)
    x = rng.normal(0, 2.5, size=(64, 32))
    got = reconstruct(kernels.sec_softmax(eng, eng.share(x)))
    z = x - x.max(-1, keepdims=True)
    ref = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    assert np.abs(got - ref).max() <= SOFTMAX_ABS_BOUND
    assert np.abs(got.sum(-1) - 1).max() <= 1e-3


def test_entropy_onehot_and_uniform():
    eng = make_engine()
    near_onehot = reconstruct(
        kernels.sec_entropy(eng, eng.share(np.array([[5.0, -5.0, -5.0, -5.0]])))
    )
    assert abs(near_onehot[0]) <= 5e-3
    uniform = reconstruct(kernels.sec_entropy(eng, eng.share(np.ones((1, 4)))))
    assert abs(uniform[0] - np.log(4)) <= ENTROPY_ABS_BOUND


def test_entropy_single_class_is_zero():
    eng = make_engine()
    got = reconstruct(kernels.sec_entropy(eng, eng.share(np.array([[2.0]]))))
    assert got[0] == 0.0


def test_entropy_pinned_batch():
    eng = make_engine()
    rng = np.random.default_rng(5)
    logits = rng.normal(0, 2, size=(64, 4))
    got = reconstruct(kernels.sec_entropy(eng, eng.share(logits)))
    z = logits - logits.max(-1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    ref = -(p * np.log(p)).sum(-1)
    assert np.abs(got - ref).max() <= ENTROPY_ABS_BOUND


def test_layernorm_pinned_batch():
    eng = make_engine()
    rng = np.random.default_rng(7)
    g = rng.normal(1, 0.2, size=16)
    b = rng.normal(0, 0.2, size=16)
    x = rng.normal(0.5, 1.5, size=(40, 16))
    got = reconstruct(kernels.sec_layernorm(eng, eng.share(x), eng.share(g), eng.share(b)))
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b
    assert np.abs(got - ref).max() <= LAYERNORM_ABS_BOUND


def test_kernel_costs_hit_ledger_per_iteration():
    eng = make_engine()
    kernels.sec_exp(eng, eng.share(np.array([1.0])), tag="e", mode="unchecked")
    c = eng.ledger.per_tag["e"]
    # one rescale round + 2 rounds (open+trunc) per squaring
    assert c.rounds == 1 + 2 * eng.kernels.exp_iterations
