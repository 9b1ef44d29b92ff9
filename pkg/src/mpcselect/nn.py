"""Plaintext reference transformer: the float64 oracle for every MPC check.

The layer structure mirrors what the secure path evaluates: QKV projections,
scaled dot-product attention with an additive finite mask, output projection,
residual + LayerNorm, then a first-token classifier head and prediction
entropy.  The feed-forward block exists only for extended target-model
configurations (cost comparisons); proxies never carry one.

Activation taps record the inputs/outputs of the three nonlinear sites that
MLP substitution later replaces: attention softmax rows, the LayerNorm
variance -> 1/sqrt(var+eps) map, and logits -> entropy.
"""

from dataclasses import dataclass, field

import numpy as np

MASK_VALUE_DEFAULT = -3.0  # finite pad mask; large negatives break fixed point

SITE_ATTN_SOFTMAX = "attn_softmax"
SITE_LN_RECIP = "ln_recip"
SITE_SOFTMAX_ENTROPY = "softmax_entropy"
SITES = (SITE_ATTN_SOFTMAX, SITE_LN_RECIP, SITE_SOFTMAX_ENTROPY)


@dataclass(frozen=True)
class TransformerConfig:
    layers: int
    heads: int
    dim: int
    seq_len: int
    classes: int
    mask_value: float = MASK_VALUE_DEFAULT
    ffn_dim: int = 0  # >0 only on extended target configs
    vocab: int = 0  # >0 enables the token-id input path
    eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.seq_len < 1 or self.layers < 1 or self.classes < 1:
            raise ValueError("layers, seq_len and classes must be >= 1")
        if not np.isfinite(self.mask_value):
            raise ValueError("mask value must be finite")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class LayerWeights:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    ffn_w1: np.ndarray | None = None
    ffn_b1: np.ndarray | None = None
    ffn_w2: np.ndarray | None = None
    ffn_b2: np.ndarray | None = None
    ln2_gamma: np.ndarray | None = None
    ln2_beta: np.ndarray | None = None


@dataclass
class TransformerWeights:
    layers: list
    classifier_w: np.ndarray
    classifier_b: np.ndarray
    embedding: np.ndarray | None = None


def init_weights(config: TransformerConfig, rng: np.random.Generator) -> TransformerWeights:
    """Seeded synthetic weights with transformer-typical scales."""
    d = config.dim
    s = 1.0 / np.sqrt(d)
    layers = []
    for _ in range(config.layers):
        lw = LayerWeights(
            wq=rng.normal(0, s, (d, d)),
            bq=rng.normal(0, 0.02, d),
            wk=rng.normal(0, s, (d, d)),
            bk=rng.normal(0, 0.02, d),
            wv=rng.normal(0, s, (d, d)),
            bv=rng.normal(0, 0.02, d),
            wo=rng.normal(0, s, (d, d)),
            bo=rng.normal(0, 0.02, d),
            ln_gamma=1.0 + rng.normal(0, 0.05, d),
            ln_beta=rng.normal(0, 0.05, d),
        )
        if config.ffn_dim:
            lw.ffn_w1 = rng.normal(0, s, (d, config.ffn_dim))
            lw.ffn_b1 = rng.normal(0, 0.02, config.ffn_dim)
            lw.ffn_w2 = rng.normal(0, 1.0 / np.sqrt(config.ffn_dim), (config.ffn_dim, d))
            lw.ffn_b2 = rng.normal(0, 0.02, d)
            lw.ln2_gamma = 1.0 + rng.normal(0, 0.05, d)
            lw.ln2_beta = rng.normal(0, 0.05, d)
        layers.append(lw)
    return TransformerWeights(
        layers=layers,
        classifier_w=rng.normal(0, 2 * s, (d, config.classes)),
        classifier_b=rng.normal(0, 0.02, config.classes),
        embedding=rng.normal(0, 1.0, (config.vocab, d)) if config.vocab else None,
    )


@dataclass
class ActivationTaps:
    """Per-site streams of (input, output) rows, tagged with the layer index."""

    records: dict = field(default_factory=lambda: {site: [] for site in SITES})

    def add(self, site: str, layer: int, inputs: np.ndarray, outputs: np.ndarray):
        self.records[site].append((layer, inputs, outputs))

    def inputs(self, site: str, layer: int | None = None) -> np.ndarray:
        rows = [i for (l, i, _) in self.records[site] if layer is None or l == layer]
        return np.concatenate(rows, axis=0)

    def outputs(self, site: str, layer: int | None = None) -> np.ndarray:
        rows = [o for (_, _, o) in self.records[site]] if layer is None else [
            o for (l, _, o) in self.records[site] if l == layer
        ]
        return np.concatenate(rows, axis=0)

    def count(self, site: str) -> int:
        return sum(i.shape[0] for (_, i, _) in self.records[site])


def layernorm(x: np.ndarray, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def entropy(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy of softmax(logits) along the last axis, in nats."""
    if logits.shape[-1] == 1:
        return np.zeros(logits.shape[:-1])
    p = softmax(logits)
    return -(p * np.log(np.maximum(p, 1e-300))).sum(axis=-1)


def make_mask(valid_lens, seq_len: int, mask_value: float = MASK_VALUE_DEFAULT) -> np.ndarray:
    """Additive key mask: 0 on valid positions, mask_value on padding."""
    valid_lens = np.asarray(valid_lens, dtype=np.int64)
    pos = np.arange(seq_len)
    return np.where(pos[None, :] < valid_lens[:, None], 0.0, mask_value)


def embed_tokens(weights: TransformerWeights, token_ids: np.ndarray) -> np.ndarray:
    if weights.embedding is None:
        raise ValueError("model has no embedding table")
    return weights.embedding[np.asarray(token_ids, dtype=np.int64)]


def forward(
    config: TransformerConfig,
    weights: TransformerWeights,
    batch: np.ndarray,
    mask: np.ndarray | None = None,
    taps: ActivationTaps | None = None,
) -> dict:
    """Exact forward pass; returns logits, per-example entropy and probs.

    batch is [B, T, D] pre-embedded (use embed_tokens for the id path);
    mask is [B, T] of {0, mask_value} or None.
    """
    x = np.asarray(batch, dtype=np.float64)
    b, t, d = x.shape
    if t != config.seq_len or d != config.dim:
        raise ValueError(f"batch shape {x.shape} does not match config")
    if mask is None:
        mask = np.zeros((b, t))
    a, dh = config.heads, config.head_dim

    for li, lw in enumerate(weights.layers):
        q = (x @ lw.wq + lw.bq).reshape(b, t, a, dh).transpose(0, 2, 1, 3)
        k = (x @ lw.wk + lw.bk).reshape(b, t, a, dh).transpose(0, 2, 1, 3)
        v = (x @ lw.wv + lw.bv).reshape(b, t, a, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        scores = scores + mask[:, None, None, :]
        probs = softmax(scores)
        if taps is not None:
            taps.add(
                SITE_ATTN_SOFTMAX, li, scores.reshape(-1, t), probs.reshape(-1, t)
            )
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        h = x + ctx @ lw.wo + lw.bo
        var = h.var(axis=-1)
        if taps is not None:
            taps.add(
                SITE_LN_RECIP,
                li,
                var.reshape(-1, 1),
                (1.0 / np.sqrt(var + config.eps)).reshape(-1, 1),
            )
        x = layernorm(h, lw.ln_gamma, lw.ln_beta, config.eps)
        if lw.ffn_w1 is not None:
            ff = np.maximum(x @ lw.ffn_w1 + lw.ffn_b1, 0.0) @ lw.ffn_w2 + lw.ffn_b2
            x = layernorm(x + ff, lw.ln2_gamma, lw.ln2_beta, config.eps)

    pooled = x[:, 0, :]  # first-token pooling, BERT/ViT classifier style
    logits = pooled @ weights.classifier_w + weights.classifier_b
    ent = entropy(logits)
    if taps is not None:
        taps.add(SITE_SOFTMAX_ENTROPY, config.layers, logits, ent.reshape(-1, 1))
    return {"logits": logits, "entropy": ent, "probs": softmax(logits)}


def record_taps(
    config: TransformerConfig,
    weights: TransformerWeights,
    dataset: np.ndarray,
    mask: np.ndarray | None = None,
    batch_size: int = 32,
) -> ActivationTaps:
    """Forward the whole dataset, collecting every nonlinear site's stream."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    taps = ActivationTaps()
    for i in range(0, len(dataset), batch_size):
        mb = mask[i : i + batch_size] if mask is not None else None
        forward(config, weights, dataset[i : i + batch_size], mb, taps)
    return taps
