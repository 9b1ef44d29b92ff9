import numpy as np
import pytest
from scipy import stats

from mpcselect import approx, nn
from mpcselect.protocols import Mpc
from mpcselect.ring import FixedPointCodec
from mpcselect.shares import Dealer, reconstruct

CODEC = FixedPointCodec(frac_bits=16)

# small-but-real training budget so the suite stays fast; the acceptance
# module runs the full default budget
FAST = approx.TrainConfig(synth_n=2**14, lr=0.05, epochs=10, seed=5)


def make_engine(seed=41):
    return Mpc(CODEC, Dealer(seed, CODEC))


def test_estimate_gaussian_constant():
    est = approx.estimate_gaussian(np.full(10, 3.3))
    assert est == approx.GaussianEstimate(3.3, 0.0)


def test_estimate_gaussian_two_point():
    est = approx.estimate_gaussian(np.array([-1.0, 1.0]))
    assert est.mu == 0.0 and est.sigma == 1.0


def test_estimate_gaussian_large_sample():
    x = np.random.default_rng(0).normal(0, 1, 100_000)
    est = approx.estimate_gaussian(x)
    assert abs(est.mu) < 0.02 and abs(est.sigma - 1) < 0.02


def test_estimate_gaussian_needs_samples():
    with pytest.raises(ValueError):
        approx.estimate_gaussian([1.0])


def test_synthesize_sigma_zero_is_constant():
    rng = np.random.default_rng(1)
    x = approx.synthesize(approx.GaussianEstimate(2.5, 0.0), 100, rng)
    assert np.all(x == 2.5)
    xs, ts = approx.synthesize_site(
        nn.SITE_LN_RECIP, approx.GaussianEstimate(2.5, 0.0), 50, 1, rng
    )
    assert np.all(ts == ts[0])


def test_synthesize_matches_estimate():
    rng = np.random.default_rng(2)
    x = approx.synthesize(approx.GaussianEstimate(1.5, 0.7), 200_000, rng)
    assert abs(x.mean() - 1.5) < 0.01
    assert abs(x.std() - 0.7) < 0.01


def test_softmax_site_targets_are_rows_summing_to_one():
    rng = np.random.default_rng(3)
    x, t = approx.synthesize_site(
        nn.SITE_ATTN_SOFTMAX, approx.GaussianEstimate(0, 1.5), 500, 16, rng
    )
    assert np.allclose(t.sum(-1), 1.0)
    # mask injection shows up as exact -3 shifts on padded suffixes
    assert x.shape == (500, 16)


def test_ln_site_positive_domain():
    rng = np.random.default_rng(4)
    x, t = approx.synthesize_site(
        nn.SITE_LN_RECIP, approx.GaussianEstimate(1.0, 0.5), 2000, 1, rng
    )
    assert np.all(x >= 2.0**-6)
    assert np.allclose(t, 1 / np.sqrt(x + 1e-5))


def test_entropy_site_targets():
    rng = np.random.default_rng(5)
    x, t = approx.synthesize_site(
        nn.SITE_SOFTMAX_ENTROPY, approx.GaussianEstimate(0, 2.0), 1000, 4, rng
    )
    assert t.shape == (1000, 1)
    assert np.all(t >= 0) and np.all(t <= np.log(4) + 1e-12)


def test_train_constant_target_converges():
    rng = np.random.default_rng(6)
    x = rng.normal(0, 1, (4000, 3))
    t = np.full((4000, 1), 0.7)
    mlp, rep = approx.train_mlp("softmax_entropy", x, t, 4, FAST)
    assert rep.holdout_mse < 1e-6


def test_train_is_seed_deterministic():
    rng = np.random.default_rng(7)
    x, t = approx.synthesize_site(
        nn.SITE_LN_RECIP, approx.GaussianEstimate(1.0, 0.2), 2**14, 1, rng
    )
    a, _ = approx.train_mlp(nn.SITE_LN_RECIP, x, t, 8, FAST)
    b, _ = approx.train_mlp(nn.SITE_LN_RECIP, x, t, 8, FAST)
    assert np.array_equal(a.w1, b.w1) and np.array_equal(a.w2, b.w2)
    assert np.array_equal(a.b1, b.b1) and np.array_equal(a.b2, b.b2)


def test_capacity_helps_ln_site():
    rng = np.random.default_rng(8)
    x, t = approx.synthesize_site(
        nn.SITE_LN_RECIP, approx.GaussianEstimate(1.0, 0.3), 2**15, 1, rng
    )
    cfg = approx.TrainConfig(synth_n=2**15, lr=0.05, epochs=16, seed=5)
    _, rep16 = approx.train_mlp(nn.SITE_LN_RECIP, x, t, 16, cfg)
    _, rep2 = approx.train_mlp(nn.SITE_LN_RECIP, x, t, 2, cfg)
    assert rep16.holdout_mse < rep2.holdout_mse


def test_entropy_mlp_rank_correlation():
    # pinned after first measurement: observed rho ~ 0.98 at this budget
    rng = np.random.default_rng(9)
    x, t = approx.synthesize_site(
        nn.SITE_SOFTMAX_ENTROPY, approx.GaussianEstimate(0, 2.0), 2**15, 4, rng
    )
    cfg = approx.TrainConfig(synth_n=2**15, lr=0.05, epochs=16, seed=5)
    mlp, _ = approx.train_mlp(nn.SITE_SOFTMAX_ENTROPY, x, t, 16, cfg)
    hold_x, hold_t = x[-2000:], t[-2000:]
    rho = stats.spearmanr(mlp.forward(hold_x).ravel(), hold_t.ravel()).statistic
    assert rho > 0.9


def test_training_set_size_invariant():
    x = np.zeros((100, 16))
    t = np.zeros((100, 16))
    with pytest.raises(ValueError):
        approx.train_mlp(nn.SITE_ATTN_SOFTMAX, x, t, 16, FAST)


def test_mlp_zero_weights_output_is_bias():
    mlp = approx.MlpApprox(
        nn.SITE_LN_RECIP, np.zeros((4, 1)), np.zeros(4), np.zeros((1, 4)), np.array([2.5])
    )
    eng = make_engine()
    shared = approx.share_mlp(eng, mlp)
    x = eng.share(np.random.default_rng(10).uniform(0.5, 2.0, (7, 1)))
    got = reconstruct(approx.mlp_forward_mpc(eng, shared, x, "mlp"))
    assert np.allclose(got, 2.5, atol=1e-3)


def test_mlp_forward_mpc_matches_plaintext():
    rng = np.random.default_rng(11)
    x, t = approx.synthesize_site(
        nn.SITE_SOFTMAX_ENTROPY, approx.GaussianEstimate(0, 2.0), 2**14, 4, rng
    )
    mlp, _ = approx.train_mlp(nn.SITE_SOFTMAX_ENTROPY, x, t, 8, FAST)
    eng = make_engine()
    shared = approx.share_mlp(eng, mlp)
    probe = rng.normal(0, 2.0, (1000, 4))
    got = reconstruct(approx.mlp_forward_mpc(eng, shared, eng.share(probe), "mlp"))
    ref = mlp.forward(probe)
    assert np.abs(got - ref).max() <= 2e-3


def test_mlp_cheaper_than_baseline_softmax():
    from mpcselect import kernels

    n = 64
    rng = np.random.default_rng(12)
    probe = rng.normal(0, 1.5, (n, n))
    eng_mlp = make_engine(seed=1)
    mlp = approx.MlpApprox(
        nn.SITE_ATTN_SOFTMAX,
        rng.normal(0, 0.1, (2, n)),
        np.zeros(2),
        rng.normal(0, 0.1, (n, 2)),
        np.zeros(n),
    )
    shared = approx.share_mlp(eng_mlp, mlp)
    approx.mlp_forward_mpc(eng_mlp, shared, eng_mlp.share(probe), "m")
    eng_base = make_engine(seed=2)
    kernels.sec_softmax(eng_base, eng_base.share(probe), tag="s")
    assert eng_mlp.ledger.totals().bytes < eng_base.ledger.totals().bytes


def test_dimension_reduction_per_site():
    # Substitute bytes scale with h, not with iterative-kernel depth.  At
    # desk scale (T=64) the softmax and entropy substitutes undercut their
    # kernels at every h <= 16; the LayerNorm denominator kernel runs on one
    # scalar per token and is only undercut for h <= 4, so the whole-layer
    # comparison is what carries the claim there (see the P/PM tests).
    from mpcselect import kernels

    T = 64
    rng = np.random.default_rng(13)

    def site_bytes(site, h, make_input, kernel):
        e1, e2 = make_engine(seed=1), make_engine(seed=2)
        in_dim = {nn.SITE_ATTN_SOFTMAX: T, nn.SITE_LN_RECIP: 1, nn.SITE_SOFTMAX_ENTROPY: 4}[site]
        out_dim = {nn.SITE_ATTN_SOFTMAX: T, nn.SITE_LN_RECIP: 1, nn.SITE_SOFTMAX_ENTROPY: 1}[site]
        mlp = approx.MlpApprox(
            site, rng.normal(0, 0.1, (h, in_dim)), np.zeros(h),
            rng.normal(0, 0.1, (out_dim, h)), np.zeros(out_dim),
        )
        approx.mlp_forward_mpc(e1, approx.share_mlp(e1, mlp), e1.share(make_input()), "m")
        kernel(e2)
        return e1.ledger.totals().bytes, e2.ledger.totals().bytes

    for h in (2, 8, 16):
        a, b = site_bytes(
            nn.SITE_ATTN_SOFTMAX, h,
            lambda: rng.normal(0, 1, (T, T)),
            lambda e: kernels.sec_softmax(e, e.share(rng.normal(0, 1, (T, T))), tag="k"),
        )
        assert a < b, f"softmax h={h}"
        a, b = site_bytes(
            nn.SITE_SOFTMAX_ENTROPY, h,
            lambda: rng.normal(0, 1, (T, 4)),
            lambda e: kernels.sec_entropy(e, e.share(rng.normal(0, 1, (T, 4))), tag="k"),
        )
        assert a < b, f"entropy h={h}"
    a, b = site_bytes(
        nn.SITE_LN_RECIP, 4,
        lambda: rng.uniform(0.5, 2, (T, 1)),
        lambda e: kernels.sec_rsqrt(e, e.share(rng.uniform(0.5, 2, (T,))), tag="k", mode="unchecked"),
    )
    assert a < b, "ln h=4"


def test_mlp_shape_mismatch():
    eng = make_engine()
    mlp = approx.MlpApprox(
        nn.SITE_LN_RECIP, np.zeros((4, 2)), np.zeros(4), np.zeros((1, 4)), np.zeros(1)
    )
    shared = approx.share_mlp(eng, mlp)
    with pytest.raises(ValueError):
        approx.mlp_forward_mpc(eng, shared, eng.share(np.zeros((5, 3))), "mlp")
