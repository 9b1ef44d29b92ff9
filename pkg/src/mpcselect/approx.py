"""Data-driven MLP emulators for the transformer's nonlinear sites.

Each emulator is two linear maps around one ReLU.  Instead of approximating
a single scalar function, an emulator swallows a whole fused module: a
softmax row, the LayerNorm denominator map v -> 1/sqrt(v+eps), or
logits -> entropy.  Training data is synthesized from a Gaussian fit of the
observed site inputs, so a small bootstrap sample is enough to produce
millions of labeled examples.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .protocols import Mpc
from .shares import SharedTensor, broadcast_to


class TrainingError(RuntimeError):
    """Loss went non-finite during MLP training."""


@dataclass(frozen=True)
class GaussianEstimate:
    mu: float
    sigma: float


def estimate_gaussian(samples) -> GaussianEstimate:
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size < 2:
        raise ValueError("need at least 2 samples to estimate")
    return GaussianEstimate(float(s.mean()), float(s.std()))


@dataclass
class MlpApprox:
    """W2 @ relu(W1 @ x + b1) + b2 with hidden width d, per nonlinear site."""

    site: str
    w1: np.ndarray  # [h, in]
    b1: np.ndarray  # [h]
    w2: np.ndarray  # [out, h]
    b2: np.ndarray  # [out]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def param_count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(x @ self.w1.T + self.b1, 0.0)
        return h @ self.w2.T + self.b2


@dataclass(frozen=True)
class TrainConfig:
    synth_n: int = 2**17  # desk scale; the fidelity flag raises this to 5.12M
    lr: float = 0.05
    epochs: int = 16
    batch_size: int = 256
    seed: int = 0
    momentum: float = 0.9
    holdout_frac: float = 0.1


def synthesize(est: GaussianEstimate, n: int, rng: np.random.Generator) -> np.ndarray:
    """n iid draws from the fitted Gaussian."""
    if est.sigma < 0:
        raise ValueError("sigma must be >= 0")
    return rng.normal(est.mu, est.sigma, size=n)


def make_targets(site: str, inputs: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Exact reference outputs for a site's synthesized inputs."""
    if site == nn.SITE_ATTN_SOFTMAX:
        return nn.softmax(inputs)
    if site == nn.SITE_LN_RECIP:
        return 1.0 / np.sqrt(inputs + eps)
    if site == nn.SITE_SOFTMAX_ENTROPY:
        return nn.entropy(inputs).reshape(-1, 1)
    raise ValueError(f"unknown site {site!r}")


def synthesize_site(
    site: str,
    est: GaussianEstimate,
    n: int,
    width: int,
    rng: np.random.Generator,
    mask_value: float = nn.MASK_VALUE_DEFAULT,
    eps: float = 1e-5,
) -> tuple[np.ndarray, np.ndarray]:
    """Labeled training set for one site.

    attn_softmax rows get the additive pad mask injected at a random suffix,
    matching what the site sees in a masked forward pass; ln_recip inputs are
    folded onto the positive variance domain.
    """
    if site == nn.SITE_ATTN_SOFTMAX:
        x = synthesize(est, n * width, rng).reshape(n, width)
        valid = rng.integers(max(1, width // 2), width + 1, size=n)
        x = x + np.where(np.arange(width)[None, :] < valid[:, None], 0.0, mask_value)
    elif site == nn.SITE_LN_RECIP:
        # fold onto the positive domain, floored where the kernel it replaces
        # is itself defined (2^-6); below that 1/sqrt blows up the target scale
        x = np.abs(synthesize(est, n, rng)).reshape(n, 1)
        x = np.maximum(x, 2.0**-6)
    elif site == nn.SITE_SOFTMAX_ENTROPY:
        x = synthesize(est, n * width, rng).reshape(n, width)
    else:
        raise ValueError(f"unknown site {site!r}")
    return x, make_targets(site, x, eps)


@dataclass
class TrainReport:
    site: str
    hidden: int
    train_mse: float
    holdout_mse: float
    epochs: int


def train_mlp(
    site: str,
    inputs: np.ndarray,
    targets: np.ndarray,
    hidden: int,
    cfg: TrainConfig = TrainConfig(),
) -> tuple[MlpApprox, TrainReport]:
    """Mini-batch SGD with momentum on mean squared error; seed-deterministic.

    Inputs and targets are standardized for the optimizer (softmax outputs
    are ~1/n, far too small for raw-scale gradients) and the affine maps are
    folded back into W1/b1 and W2/b2, so the returned weights evaluate on raw
    inputs.
    """
    x = np.asarray(inputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or t.ndim != 2 or len(x) != len(t):
        raise ValueError("inputs/targets must be matching 2-d arrays")
    if len(x) == 0:
        raise ValueError("empty training set")
    if hidden < 1:
        raise ValueError("hidden dim must be >= 1")
    n_in, n_out = x.shape[1], t.shape[1]
    params = hidden * n_in + hidden + n_out * hidden + n_out
    if len(x) < 10 * params:
        raise ValueError(
            f"training set too small: {len(x)} rows for {params} parameters"
        )

    x_mu, x_sd = x.mean(0), x.std(0) + 1e-12
    t_mu, t_sd = t.mean(0), t.std(0) + 1e-12
    xn = (x - x_mu) / x_sd
    tn = (t - t_mu) / t_sd
    n_hold = max(1, int(len(x) * cfg.holdout_frac))
    x_tr, t_tr = xn[:-n_hold], tn[:-n_hold]

    rng = np.random.default_rng(cfg.seed)
    w1 = rng.normal(0, np.sqrt(2.0 / n_in), (hidden, n_in))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0, np.sqrt(1.0 / hidden), (n_out, hidden))
    b2 = np.zeros(n_out)
    vel = [np.zeros_like(p) for p in (w1, b1, w2, b2)]

    n_tr = len(x_tr)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (1.0 - 0.9 * epoch / max(1, cfg.epochs - 1))  # decay to 10%
        order = rng.permutation(n_tr)
        for lo in range(0, n_tr, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb, tb = x_tr[idx], t_tr[idx]
            z = xb @ w1.T + b1
            h = np.maximum(z, 0.0)
            y = h @ w2.T + b2
            dy = 2.0 * (y - tb) / (xb.shape[0] * n_out)
            gw2 = dy.T @ h
            gb2 = dy.sum(0)
            dh = dy @ w2
            dz = dh * (z > 0)
            gw1 = dz.T @ xb
            gb1 = dz.sum(0)
            for p, g, v in zip((w1, b1, w2, b2), (gw1, gb1, gw2, gb2), vel):
                v *= cfg.momentum
                v -= lr * g
                p += v
        if not (np.isfinite(w1).all() and np.isfinite(w2).all()):
            raise TrainingError(f"{site} h={hidden}: loss diverged at epoch {epoch}")

    # fold the standardization into the weights: raw-input, raw-output form
    w1_raw = w1 / x_sd[None, :]
    b1_raw = b1 - (w1 * (x_mu / x_sd)[None, :]).sum(1)
    w2_raw = w2 * t_sd[:, None]
    b2_raw = b2 * t_sd + t_mu
    mlp = MlpApprox(site, w1_raw, b1_raw, w2_raw, b2_raw)
    x_tr, t_tr = x[:-n_hold], t[:-n_hold]
    x_ho, t_ho = x[-n_hold:], t[-n_hold:]
    train_mse = float(np.mean((mlp.forward(x_tr) - t_tr) ** 2))
    holdout_mse = float(np.mean((mlp.forward(x_ho) - t_ho) ** 2))
    if not np.isfinite(train_mse):
        raise TrainingError(f"{site} h={hidden}: non-finite final loss")
    return mlp, TrainReport(site, hidden, train_mse, holdout_mse, cfg.epochs)


def fit_site_mlp(
    site: str,
    samples: np.ndarray,
    hidden: int,
    width: int,
    cfg: TrainConfig = TrainConfig(),
    mask_value: float = nn.MASK_VALUE_DEFAULT,
    eps: float = 1e-5,
) -> tuple[MlpApprox, TrainReport, GaussianEstimate]:
    """Estimate the site's input Gaussian, synthesize, train; the full recipe."""
    est = estimate_gaussian(samples)
    site_key = nn.SITES.index(site)  # stable across processes, unlike hash()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(site_key,)))
    x, t = synthesize_site(site, est, cfg.synth_n, width, rng, mask_value, eps)
    mlp, report = train_mlp(site, x, t, hidden, cfg)
    return mlp, report, est


# -- secure evaluation ------------------------------------------------------


@dataclass
class SharedMlp:
    """An MLP whose weights were secret-shared once at setup."""

    site: str
    w1t: SharedTensor  # [in, h]
    b1: SharedTensor
    w2t: SharedTensor  # [h, out]
    b2: SharedTensor
    hidden: int


def share_mlp(eng: Mpc, mlp: MlpApprox) -> SharedMlp:
    return SharedMlp(
        mlp.site,
        eng.share(mlp.w1.T.copy()),
        eng.share(mlp.b1),
        eng.share(mlp.w2.T.copy()),
        eng.share(mlp.b2),
        mlp.hidden,
    )


def mlp_forward_mpc(eng: Mpc, mlp: SharedMlp, x: SharedTensor, tag: str) -> SharedTensor:
    """sec_matmul -> sec_relu -> sec_matmul on shared weights.

    x is [..., in]; leading axes are flattened for the products and restored.
    """
    lead = x.shape[:-1]
    n_in = x.shape[-1]
    if n_in != mlp.w1t.shape[0]:
        raise ValueError(f"MLP expects {mlp.w1t.shape[0]} inputs, got {n_in}")
    flat = x.reshape(-1, n_in)
    z = eng.matmul(flat, mlp.w1t, tag)
    z = z + broadcast_to(mlp.b1, z.shape)
    h = eng.relu(z, tag)
    y = eng.matmul(h, mlp.w2t, tag)
    y = y + broadcast_to(mlp.b2, y.shape)
    return y.reshape(*lead, y.shape[-1])
