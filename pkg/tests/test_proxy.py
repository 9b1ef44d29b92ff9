import numpy as np
import pytest

from mpcselect import approx, nn, proxy
from mpcselect.protocols import Mpc
from mpcselect.ring import FixedPointCodec
from mpcselect.shares import Dealer, reconstruct

CODEC = FixedPointCodec(frac_bits=16)
TCFG = nn.TransformerConfig(layers=3, heads=4, dim=32, seq_len=16, classes=4)


def target_model(seed=42, cfg=TCFG):
    return nn.init_weights(cfg, np.random.default_rng(seed))


def dummy_mlps(spec: proxy.ProxySpec, seq_len=16, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    h = spec.hidden
    sm = [
        approx.MlpApprox(
            nn.SITE_ATTN_SOFTMAX,
            rng.normal(0, 0.1, (h, seq_len)), np.zeros(h),
            rng.normal(0, 0.1, (seq_len, h)), np.full(seq_len, 1.0 / seq_len),
        )
        for _ in range(spec.layers)
    ]
    ln = [
        approx.MlpApprox(
            nn.SITE_LN_RECIP,
            rng.normal(0, 0.1, (h, 1)), np.zeros(h),
            rng.normal(0, 0.1, (1, h)), np.ones(1),
        )
        for _ in range(spec.layers)
    ]
    em = approx.MlpApprox(
        nn.SITE_SOFTMAX_ENTROPY,
        rng.normal(0, 0.1, (h, classes)), np.zeros(h),
        rng.normal(0, 0.1, (1, h)), np.ones(1),
    )
    return sm, ln, em


def test_extract_max_rule():
    w = target_model()
    schedule = [1, 3]
    depth = max(schedule)
    sub_cfg, sub_w = proxy.extract_submodel(TCFG, w, depth)
    assert sub_cfg.layers == 3
    assert len(sub_w.layers) == 3


def test_extract_full_depth_is_copy():
    w = target_model()
    _, sub_w = proxy.extract_submodel(TCFG, w, TCFG.layers)
    assert len(sub_w.layers) == TCFG.layers


def test_extracted_weights_bit_identical():
    w = target_model()
    _, sub_w = proxy.extract_submodel(TCFG, w, 2)
    for k in range(2):
        assert np.array_equal(sub_w.layers[k].wq, w.layers[k].wq)
        assert np.array_equal(sub_w.layers[k].wo, w.layers[k].wo)
        assert np.array_equal(sub_w.layers[k].ln_gamma, w.layers[k].ln_gamma)
    assert np.array_equal(sub_w.classifier_w, w.classifier_w)
    # and they are copies, not views
    sub_w.layers[0].wq[0, 0] += 1
    assert sub_w.layers[0].wq[0, 0] != w.layers[0].wq[0, 0]


def test_extract_depth_out_of_range():
    with pytest.raises(ValueError):
        proxy.extract_submodel(TCFG, target_model(), 4)


def test_full_width_pruning_is_identity():
    w = target_model()
    sub_cfg, sub_w = proxy.extract_submodel(TCFG, w, 1)
    spec = proxy.ProxySpec(1, TCFG.heads, 4)
    sm, ln, em = dummy_mlps(spec)
    p = proxy.assemble_proxy(sub_cfg, sub_w, spec, sm, ln, em)
    assert p.layers[0].kept_heads == tuple(range(TCFG.heads))
    # wq carries the folded 1/sqrt(dh); undo it for the comparison
    assert np.allclose(p.layers[0].wq * np.sqrt(TCFG.head_dim), w.layers[0].wq)


def test_zero_weight_head_never_kept():
    w = target_model()
    dh = TCFG.head_dim
    w.layers[0].wv[:, 0:dh] = 0.0  # zero value projection for head 0
    sub_cfg, sub_w = proxy.extract_submodel(TCFG, w, 1)
    spec = proxy.ProxySpec(1, 1, 4)
    sm, ln, em = dummy_mlps(spec)
    p = proxy.assemble_proxy(sub_cfg, sub_w, spec, sm, ln, em)
    assert 0 not in p.layers[0].kept_heads


def test_pruning_zero_projection_heads_preserves_forward():
    # heads 2 and 3 contribute nothing (zero value/output slices), so the
    # 2-head proxy must compute exactly what the full model computes
    cfg = nn.TransformerConfig(layers=1, heads=4, dim=32, seq_len=16, classes=4)
    w = target_model(cfg=cfg)
    dh = cfg.head_dim
    for h in (2, 3):
        w.layers[0].wv[:, h * dh : (h + 1) * dh] = 0.0
        w.layers[0].bv[h * dh : (h + 1) * dh] = 0.0
        w.layers[0].wo[h * dh : (h + 1) * dh, :] = 0.0
    sub_cfg, sub_w = proxy.extract_submodel(cfg, w, 1)
    spec = proxy.ProxySpec(1, 2, 4)
    p = proxy.assemble_proxy(sub_cfg, sub_w, spec)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 16, 32))
    mask = nn.make_mask(rng.integers(8, 17, size=5), 16)
    got = proxy.forward_entropy_plain(p, x, mask, use_mlps=False)
    ref = nn.forward(cfg, w, x, mask)
    assert np.allclose(got["entropy"], ref["entropy"], atol=1e-10)
    assert set(p.layers[0].kept_heads) == {0, 1}


def test_mlp_count_is_2l_plus_1():
    for l in (1, 2, 3):
        spec = proxy.ProxySpec(l, 2, 8)
        sm, ln, em = dummy_mlps(spec)
        sub_cfg, sub_w = proxy.extract_submodel(TCFG, target_model(), l)
        p = proxy.assemble_proxy(sub_cfg, sub_w, spec, sm, ln, em)
        assert p.mlp_count() == 2 * l + 1
        assert p.fully_substituted()


def test_unsubstituted_proxy_rejected_on_mlp_path():
    sub_cfg, sub_w = proxy.extract_submodel(TCFG, target_model(), 1)
    p = proxy.assemble_proxy(sub_cfg, sub_w, proxy.ProxySpec(1, 2, 8))
    eng = Mpc(CODEC, Dealer(1, CODEC))
    sp = proxy.share_proxy(eng, p)
    with pytest.raises(ValueError):
        proxy.forward_entropy_mpc(eng, sp, eng.share(np.zeros((1, 16, 32))), use_mlps=True)


def test_mpc_forward_matches_plain_substituted():
    w = target_model()
    sub_cfg, sub_w = proxy.extract_submodel(TCFG, w, 2)
    spec = proxy.ProxySpec(2, 2, 8)
    sm, ln, em = dummy_mlps(spec)
    p = proxy.assemble_proxy(sub_cfg, sub_w, spec, sm, ln, em)
    rng = np.random.default_rng(2)
    x = rng.normal(0, 1, size=(32, 16, 32))
    mask = nn.make_mask(rng.integers(8, 17, size=32), 16)
    eng = Mpc(CODEC, Dealer(3, CODEC))
    sp = proxy.share_proxy(eng, p)
    got = reconstruct(proxy.forward_entropy_mpc(eng, sp, eng.share(x), eng.share(mask)))
    ref = proxy.forward_entropy_plain(p, x, mask)["entropy"]
    # fixed-point/protocol error only; MLP approximation error is a separate
    # budget measured against the exact model elsewhere
    assert np.abs(got - ref).max() <= 5e-4


def test_mpc_forward_reveals_nothing():
    w = target_model()
    sub_cfg, sub_w = proxy.extract_submodel(TCFG, w, 1)
    spec = proxy.ProxySpec(1, 2, 4)
    sm, ln, em = dummy_mlps(spec)
    p = proxy.assemble_proxy(sub_cfg, sub_w, spec, sm, ln, em)
    eng = Mpc(CODEC, Dealer(4, CODEC))
    sp = proxy.share_proxy(eng, p)
    x = np.random.default_rng(5).normal(size=(2, 16, 32))
    proxy.forward_entropy_mpc(eng, sp, eng.share(x))
    assert eng.ledger.reveal_log == []


def test_zero_classifier_gives_equal_entropies():
    w = target_model()
    w.classifier_w = np.zeros_like(w.classifier_w)
    w.classifier_b = np.zeros_like(w.classifier_b)
    sub_cfg, sub_w = proxy.extract_submodel(TCFG, w, 1)
    spec = proxy.ProxySpec(1, 2, 4)
    sm, ln, em = dummy_mlps(spec)
    p = proxy.assemble_proxy(sub_cfg, sub_w, spec, sm, ln, em)
    eng = Mpc(CODEC, Dealer(6, CODEC))
    sp = proxy.share_proxy(eng, p)
    x = np.random.default_rng(7).normal(size=(6, 16, 32))
    got = reconstruct(proxy.forward_entropy_mpc(eng, sp, eng.share(x)))
    assert np.abs(got - got[0]).max() <= 1e-3


def test_pm_softmax_bytes_below_p_softmax_bytes():
    w = target_model()
    sub_cfg, sub_w = proxy.extract_submodel(TCFG, w, 1)
    spec = proxy.ProxySpec(1, 1, 8)
    sm, ln, em = dummy_mlps(spec)
    p = proxy.assemble_proxy(sub_cfg, sub_w, spec, sm, ln, em)
    x = np.random.default_rng(8).normal(size=(1, 16, 32))

    eng_pm = Mpc(CODEC, Dealer(9, CODEC))
    proxy.forward_entropy_mpc(eng_pm, proxy.share_proxy(eng_pm, p), eng_pm.share(x), use_mlps=True)
    eng_p = Mpc(CODEC, Dealer(9, CODEC))
    proxy.forward_entropy_mpc(eng_p, proxy.share_proxy(eng_p, p), eng_p.share(x), use_mlps=False)
    assert (
        eng_pm.ledger.per_tag["attn_softmax_mlp"].bytes
        < eng_p.ledger.per_tag["attn_softmax"].bytes
    )


def test_ledger_tags_per_module():
    w = target_model()
    sub_cfg, sub_w = proxy.extract_submodel(TCFG, w, 1)
    spec = proxy.ProxySpec(1, 2, 4)
    sm, ln, em = dummy_mlps(spec)
    p = proxy.assemble_proxy(sub_cfg, sub_w, spec, sm, ln, em)
    eng = Mpc(CODEC, Dealer(10, CODEC))
    sp = proxy.share_proxy(eng, p)
    proxy.forward_entropy_mpc(eng, sp, eng.share(np.zeros((1, 16, 32))))
    tags = set(eng.ledger.per_tag)
    assert {"qkv", "attn_matmul", "attn_softmax_mlp", "ln_mlp", "classifier", "entropy_mlp"} <= tags


def test_proxy_spec_validation():
    with pytest.raises(ValueError):
        proxy.ProxySpec(0, 1, 1)
    with pytest.raises(ValueError):
        proxy.assemble_proxy(
            *proxy.extract_submodel(TCFG, target_model(), 1), proxy.ProxySpec(2, 2, 4)
        )
    with pytest.raises(ValueError):
        proxy.assemble_proxy(
            *proxy.extract_submodel(TCFG, target_model(), 1), proxy.ProxySpec(1, 5, 4)
        )
