"""Proxy-model generation and the secure entropy forward pass.

A proxy <l, w, d> takes the bottom l layers of the extracted base model,
keeps the w highest-scoring attention heads per layer, and swaps every
remaining nonlinear module for a hidden-width-d MLP: one softmax emulator
and one LayerNorm-denominator emulator per layer plus a single fused
softmax+entropy head, 2l+1 MLPs in total.  The plaintext forward here is
the bit-level mirror of the MPC forward: the two must agree to fixed-point
tolerance, which separates protocol error from approximation error.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels, nn
from .approx import MlpApprox, SharedMlp, mlp_forward_mpc, share_mlp
from .protocols import Mpc
from .shares import SharedTensor, broadcast_to


@dataclass(frozen=True)
class ProxySpec:
    """<l, w, d>: layers, attention heads, MLP hidden width."""

    layers: int
    heads: int
    hidden: int

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.hidden < 1:
            raise ValueError(f"invalid proxy spec {self}")


@dataclass
class ProxyLayer:
    wq: np.ndarray  # [D, w*dh]
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray  # [w*dh, D]
    bo: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    kept_heads: tuple
    softmax_mlp: MlpApprox | None = None
    ln_mlp: MlpApprox | None = None


@dataclass
class ProxyModel:
    spec: ProxySpec
    dim: int
    head_dim: int
    seq_len: int
    classes: int
    mask_value: float
    eps: float
    layers: list
    classifier_w: np.ndarray
    classifier_b: np.ndarray
    entropy_mlp: MlpApprox | None = None

    def mlp_count(self) -> int:
        n = sum(
            (lw.softmax_mlp is not None) + (lw.ln_mlp is not None) for lw in self.layers
        )
        return n + (self.entropy_mlp is not None)

    def fully_substituted(self) -> bool:
        return self.mlp_count() == 2 * self.spec.layers + 1


def extract_submodel(
    config: nn.TransformerConfig, weights: nn.TransformerWeights, depth: int
) -> tuple[nn.TransformerConfig, nn.TransformerWeights]:
    """Bottom `depth` layers plus the classifier head, weights copied."""
    if not 1 <= depth <= config.layers:
        raise ValueError(f"depth {depth} out of range for {config.layers}-layer target")
    sub_cfg = nn.TransformerConfig(
        layers=depth,
        heads=config.heads,
        dim=config.dim,
        seq_len=config.seq_len,
        classes=config.classes,
        mask_value=config.mask_value,
        vocab=config.vocab,
        eps=config.eps,
    )
    sub_w = nn.TransformerWeights(
        layers=[
            nn.LayerWeights(
                lw.wq.copy(), lw.bq.copy(), lw.wk.copy(), lw.bk.copy(),
                lw.wv.copy(), lw.bv.copy(), lw.wo.copy(), lw.bo.copy(),
                lw.ln_gamma.copy(), lw.ln_beta.copy(),
            )
            for lw in weights.layers[:depth]
        ],
        classifier_w=weights.classifier_w.copy(),
        classifier_b=weights.classifier_b.copy(),
        embedding=None if weights.embedding is None else weights.embedding.copy(),
    )
    return sub_cfg, sub_w


def head_scores(lw: nn.LayerWeights, heads: int, head_dim: int) -> np.ndarray:
    """Weight-magnitude importance: Frobenius norms of each head's
    value-projection and output-projection slices, multiplied."""
    scores = np.empty(heads)
    for h in range(heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        scores[h] = np.linalg.norm(lw.wv[:, sl]) * np.linalg.norm(lw.wo[sl, :])
    return scores


def prune_layer(lw: nn.LayerWeights, keep: np.ndarray, head_dim: int) -> ProxyLayer:
    cols = np.concatenate([np.arange(h * head_dim, (h + 1) * head_dim) for h in keep])
    return ProxyLayer(
        wq=lw.wq[:, cols].copy(),
        bq=lw.bq[cols].copy(),
        wk=lw.wk[:, cols].copy(),
        bk=lw.bk[cols].copy(),
        wv=lw.wv[:, cols].copy(),
        bv=lw.bv[cols].copy(),
        wo=lw.wo[cols, :].copy(),
        bo=lw.bo.copy(),
        ln_gamma=lw.ln_gamma.copy(),
        ln_beta=lw.ln_beta.copy(),
        kept_heads=tuple(int(h) for h in keep),
    )


def assemble_proxy(
    base_config: nn.TransformerConfig,
    base_weights: nn.TransformerWeights,
    spec: ProxySpec,
    softmax_mlps: list | None = None,
    ln_mlps: list | None = None,
    entropy_mlp: MlpApprox | None = None,
) -> ProxyModel:
    """Depth- and width-prune the base model and attach the substitutes.

    Heads are ranked per layer by weight magnitude (largest kept); ties keep
    the lower head index.
    """
    if spec.layers > base_config.layers:
        raise ValueError(f"spec wants {spec.layers} layers, base has {base_config.layers}")
    if spec.heads > base_config.heads:
        raise ValueError(f"spec wants {spec.heads} heads, base has {base_config.heads}")
    dh = base_config.head_dim
    layers = []
    for li in range(spec.layers):
        lw = base_weights.layers[li]
        scores = head_scores(lw, base_config.heads, dh)
        order = np.argsort(-scores, kind="stable")  # ties: lower index first
        keep = np.sort(order[: spec.heads])
        pl = prune_layer(lw, keep, dh)
        # fold the attention 1/sqrt(dh) scale into the query projection;
        # saves one truncation pass over the T x T scores on the secure path
        pl.wq /= np.sqrt(dh)
        pl.bq /= np.sqrt(dh)
        if softmax_mlps is not None:
            pl.softmax_mlp = softmax_mlps[li]
        if ln_mlps is not None:
            pl.ln_mlp = ln_mlps[li]
        layers.append(pl)
    return ProxyModel(
        spec=spec,
        dim=base_config.dim,
        head_dim=dh,
        seq_len=base_config.seq_len,
        classes=base_config.classes,
        mask_value=base_config.mask_value,
        eps=base_config.eps,
        layers=layers,
        classifier_w=base_weights.classifier_w.copy(),
        classifier_b=base_weights.classifier_b.copy(),
        entropy_mlp=entropy_mlp,
    )


# -- plaintext mirror ---------------------------------------------------------


def forward_entropy_plain(
    proxy: ProxyModel, batch: np.ndarray, mask: np.ndarray | None = None,
    use_mlps: bool = True,
) -> dict:
    """Float64 forward of the (substituted) proxy; the MPC path's oracle."""
    x = np.asarray(batch, dtype=np.float64)
    b, t, d = x.shape
    w = proxy.spec.heads
    dh = proxy.head_dim
    if mask is None:
        mask = np.zeros((b, t))
    for pl in proxy.layers:
        q = (x @ pl.wq + pl.bq).reshape(b, t, w, dh).transpose(0, 2, 1, 3)
        k = (x @ pl.wk + pl.bk).reshape(b, t, w, dh).transpose(0, 2, 1, 3)
        v = (x @ pl.wv + pl.bv).reshape(b, t, w, dh).transpose(0, 2, 1, 3)
        # wq carries the 1/sqrt(dh) attention scale from assembly
        scores = q @ k.transpose(0, 1, 3, 2) + mask[:, None, None, :]
        if use_mlps:
            probs = pl.softmax_mlp.forward(scores.reshape(-1, t)).reshape(scores.shape)
        else:
            probs = nn.softmax(scores)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t, w * dh)
        h = x + ctx @ pl.wo + pl.bo
        mu = h.mean(-1, keepdims=True)
        xc = h - mu
        var = (xc * xc).mean(-1, keepdims=True)
        if use_mlps:
            inv = pl.ln_mlp.forward(var.reshape(-1, 1)).reshape(var.shape)
        else:
            inv = 1.0 / np.sqrt(var + proxy.eps)
        x = xc * inv * pl.ln_gamma + pl.ln_beta
    logits = x[:, 0, :] @ proxy.classifier_w + proxy.classifier_b
    if use_mlps:
        ent = proxy.entropy_mlp.forward(logits).reshape(-1)
    else:
        ent = nn.entropy(logits)
    return {"logits": logits, "entropy": ent}


# -- secure forward -----------------------------------------------------------


@dataclass
class SharedProxy:
    proxy: ProxyModel
    layers: list = field(default_factory=list)  # dicts of SharedTensors
    classifier_w: SharedTensor | None = None
    classifier_b: SharedTensor | None = None
    softmax_mlps: list = field(default_factory=list)
    ln_mlps: list = field(default_factory=list)
    entropy_mlp: SharedMlp | None = None


def share_proxy(eng: Mpc, proxy: ProxyModel) -> SharedProxy:
    """Secret-share all proxy parameters once, at setup."""
    sp = SharedProxy(proxy)
    for pl in proxy.layers:
        sp.layers.append(
            {
                name: eng.share(getattr(pl, name))
                for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_gamma", "ln_beta")
            }
        )
        sp.softmax_mlps.append(share_mlp(eng, pl.softmax_mlp) if pl.softmax_mlp else None)
        sp.ln_mlps.append(share_mlp(eng, pl.ln_mlp) if pl.ln_mlp else None)
    sp.classifier_w = eng.share(proxy.classifier_w)
    sp.classifier_b = eng.share(proxy.classifier_b)
    if proxy.entropy_mlp is not None:
        sp.entropy_mlp = share_mlp(eng, proxy.entropy_mlp)
    return sp


def _linear(eng: Mpc, x: SharedTensor, w: SharedTensor, bias: SharedTensor, tag: str) -> SharedTensor:
    lead = x.shape[:-1]
    out = eng.matmul(x.reshape(-1, x.shape[-1]), w, tag)
    out = out + broadcast_to(bias, out.shape)
    return out.reshape(*lead, out.shape[-1])


def forward_entropy_mpc(
    eng: Mpc,
    sp: SharedProxy,
    batch: SharedTensor,
    mask: SharedTensor | None = None,
    use_mlps: bool = True,
) -> SharedTensor:
    """Secure forward pass producing one shared entropy per datapoint.

    use_mlps=False keeps the same linear path but runs the exact iterative
    kernels instead of the substitutes (the "P" baseline); nothing is ever
    revealed on either path.
    """
    proxy = sp.proxy
    if use_mlps and not proxy.fully_substituted():
        raise ValueError("proxy is not fully substituted; train or attach its MLPs")
    b, t, d = batch.shape
    w, dh = proxy.spec.heads, proxy.head_dim
    x = batch
    for li, (pl, sw) in enumerate(zip(proxy.layers, sp.layers)):
        q = _linear(eng, x, sw["wq"], sw["bq"], "qkv")
        k = _linear(eng, x, sw["wk"], sw["bk"], "qkv")
        v = _linear(eng, x, sw["wv"], sw["bv"], "qkv")
        q = q.reshape(b, t, w, dh).transpose(0, 2, 1, 3)
        k = k.reshape(b, t, w, dh).transpose(0, 2, 1, 3)
        v = v.reshape(b, t, w, dh).transpose(0, 2, 1, 3)
        scores = eng.matmul(q, k.transpose(0, 1, 3, 2), "attn_matmul")
        if mask is not None:
            scores = scores + broadcast_to(
                mask.reshape(b, 1, 1, t), scores.shape
            )
        if use_mlps:
            flat = scores.reshape(-1, t)
            probs = mlp_forward_mpc(eng, sp.softmax_mlps[li], flat, "attn_softmax_mlp")
            probs = probs.reshape(b, w, t, t)
        else:
            probs = kernels.sec_softmax(eng, scores, tag="attn_softmax")
        ctx = eng.matmul(probs, v, "attn_matmul")
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, w * dh)
        h = x + _linear(eng, ctx, sw["wo"], sw["bo"], "attn_out")
        # LayerNorm numerator stays on cheap linear ops; only the
        # denominator reciprocal square root is emulated or iterated
        mu = eng.mul_public(h.sum(axis=-1, keepdims=True), 1.0 / d, "ln_linear")
        xc = h - broadcast_to(mu, h.shape)
        var = eng.mul_public(
            eng.mul(xc, xc, "ln_linear").sum(axis=-1, keepdims=True), 1.0 / d, "ln_linear"
        )
        if use_mlps:
            inv = mlp_forward_mpc(
                eng, sp.ln_mlps[li], var.reshape(-1, 1), "ln_mlp"
            ).reshape(b, t, 1)
        else:
            inv = kernels.sec_rsqrt(
                eng, var.add_public(proxy.eps), tag="ln_kernel", mode="unchecked"
            )
        xn = eng.mul(xc, broadcast_to(inv, xc.shape), "ln_linear")
        x = eng.mul(xn, broadcast_to(sw["ln_gamma"], xn.shape), "ln_linear") + broadcast_to(
            sw["ln_beta"], xn.shape
        )
    pooled = x[:, 0, :]
    logits = _linear(eng, pooled, sp.classifier_w, sp.classifier_b, "classifier")
    if use_mlps:
        ent = mlp_forward_mpc(eng, sp.entropy_mlp, logits, "entropy_mlp")
        return ent.reshape(b)
    return kernels.sec_entropy(eng, logits, tag="entropy_kernel")
