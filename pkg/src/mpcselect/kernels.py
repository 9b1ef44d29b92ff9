"""Baseline iterative kernels for nonlinear functions over shares.

These are the expensive, round-heavy approximations a framework without MLP
substitution must run: limit-form exponentials, Newton-Raphson reciprocal
and inverse square root, and an exp-driven logarithm, composed into softmax,
layer normalization and entropy.  Every iteration's exchanges hit the ledger
under the caller's tag, which is exactly what makes the no-substitution
pipeline communication-bound.

Documented convergence domains (inputs as reals):
    exp:        [-16, 8]      (benign decay further down, divergent above)
    reciprocal: [2^-6, 2^6]   (converges well beyond, up to ~500)
    rsqrt:      [2^-6, 2^6]
    log:        [2^-6, 2^6]

Domain handling: "permissive" obliviously clamps into the domain (costs one
comparison per bound), "strict" opens a violation count and raises on any
hit, "unchecked" trusts the caller (used by composites whose inputs are
bounded by construction).
"""

import numpy as np

from .protocols import DomainError, Mpc, _broadcast
from .shares import SharedTensor, reconstruct_residues


def _domain(eng: Mpc, t: SharedTensor, lo, hi, tag: str, mode):
    mode = eng.kernels.domain_mode if mode is None else mode
    if mode == "unchecked":
        return t
    if mode == "strict":
        below = eng.msb(t.add_public(-lo), tag)  # t < lo
        above = eng.msb(eng.public(np.full(t.shape, float(hi))) - t, tag)  # t > hi
        count = reconstruct_residues((below + above).sum())
        eng._active_ledger.log_reveal("domain_diagnostic", tag, f"violations={int(count)}")
        if int(count) > 0:
            raise DomainError(f"{int(count)} inputs outside [{lo}, {hi}] for {tag}")
        return t
    if mode == "permissive":
        return eng.clamp(t, lo, hi, tag)
    raise ValueError(f"unknown domain mode {mode!r}")


def sec_exp(eng: Mpc, t: SharedTensor, tag: str = "exp", iterations=None, mode=None) -> SharedTensor:
    """exp(x) as (1 + x/2^n)^(2^n): one rescale plus n squarings."""
    n = eng.kernels.exp_iterations if iterations is None else iterations
    t = _domain(eng, t, -16.0, 8.0, tag, mode)
    y = eng.truncate(t, k=n, tag=tag).add_public(1.0)
    for _ in range(n):
        y = eng.mul(y, y, tag)
    return y


def sec_reciprocal(eng: Mpc, t: SharedTensor, tag: str = "reciprocal", iterations=None, mode=None) -> SharedTensor:
    """Newton-Raphson 1/x with the exp-decay initial guess 3*exp(0.5-x)+0.003.

    The guess keeps the relative error |1 - x*y0| below 1 over the whole
    positive domain (an affine guess cannot: it diverges mid-domain), and
    each iteration squares the error.
    """
    n = eng.kernels.reciprocal_iterations if iterations is None else iterations
    t = _domain(eng, t, 2.0**-6, 2.0**6, tag, mode)
    y = sec_exp(eng, (-t).add_public(0.5), tag, mode="unchecked").mul_int(3).add_public(0.003)
    for _ in range(n):
        xy = eng.mul(t, y, tag)
        y = eng.mul(y, (-xy).add_public(2.0), tag)
    return y


def sec_rsqrt(eng: Mpc, t: SharedTensor, tag: str = "rsqrt", iterations=None, mode=None) -> SharedTensor:
    """Newton-Raphson 1/sqrt(x), guess exp(-(x/2 + 0.2)) + 0.2."""
    n = eng.kernels.rsqrt_iterations if iterations is None else iterations
    t = _domain(eng, t, 2.0**-6, 2.0**6, tag, mode)
    half = eng.truncate(t, k=1, tag=tag)
    y = sec_exp(eng, -(half.add_public(0.2)), tag, mode="unchecked").add_public(0.2)
    for _ in range(n):
        yy = eng.mul(y, y, tag)
        xyy = eng.mul(t, yy, tag)
        y = eng.truncate(eng.mul(y, (-xyy).add_public(3.0), tag), k=1, tag=tag)
    return y


def sec_log(eng: Mpc, t: SharedTensor, tag: str = "log", iterations=None, mode=None) -> SharedTensor:
    """ln(x) by damped Newton y <- y + x*exp(-y) - 1; needs exp every step."""
    n = eng.kernels.log_iterations if iterations is None else iterations
    t = _domain(eng, t, 2.0**-6, 2.0**6, tag, mode)
    y = (
        eng.mul_public(t, 1.0 / 120.0, tag)
        - sec_exp(eng, t.mul_int(-2).add_public(-1.0), tag, mode="unchecked").mul_int(20)
    ).add_public(3.0)
    for _ in range(n):
        xe = eng.mul(t, sec_exp(eng, -y, tag, mode="unchecked"), tag)
        y = (y + xe).add_public(-1.0)
    return y


def sec_softmax(eng: Mpc, t: SharedTensor, tag: str = "softmax", mode=None) -> SharedTensor:
    """Row softmax: oblivious max subtraction, exp, one reciprocal per row.

    After max subtraction the inputs are non-positive, so exp runs unchecked;
    the row-sum lies in [1, n], where the reciprocal iteration still
    converges (documented up to ~500).
    """
    n = t.shape[-1]
    if n < 1:
        raise ValueError("softmax needs a non-empty last axis")
    if n == 1:
        return eng.public(np.ones(t.shape))
    t = _domain(eng, t, -16.0, 16.0, tag, mode) if mode == "strict" else t
    m = eng.max_last(t, tag)
    z = t - _broadcast(m, t.shape)
    e = sec_exp(eng, z, tag, mode="unchecked")
    s = e.sum(axis=-1, keepdims=True)
    r = sec_reciprocal(eng, s, tag, mode="unchecked")
    return eng.mul(e, _broadcast(r, e.shape), tag)


def sec_layernorm(
    eng: Mpc,
    x: SharedTensor,
    gamma: SharedTensor,
    beta: SharedTensor,
    eps: float = 1e-5,
    tag: str = "layernorm",
) -> SharedTensor:
    """(x - mean)/sqrt(var + eps) * gamma + beta along the last axis.

    Mean and variance are cheap sums and products; the denominator reciprocal
    square root is the expensive kernel this module exists to account for.
    """
    d = x.shape[-1]
    mu = eng.mul_public(x.sum(axis=-1, keepdims=True), 1.0 / d, tag)
    xc = x - _broadcast(mu, x.shape)
    var = eng.mul_public(eng.mul(xc, xc, tag).sum(axis=-1, keepdims=True), 1.0 / d, tag)
    inv = sec_rsqrt(eng, var.add_public(eps), tag, mode="unchecked")
    xn = eng.mul(xc, _broadcast(inv, x.shape), tag)
    return eng.mul(xn, _broadcast(gamma, xn.shape), tag) + _broadcast(beta, xn.shape)


def sec_entropy(eng: Mpc, logits: SharedTensor, tag: str = "entropy", mode=None) -> SharedTensor:
    """Shannon entropy of softmax(logits) rows, via E = ln Z - sum p*(x - m).

    The only logarithm runs on the partition sum Z in [1, n], safely inside
    the log kernel's domain even for very confident rows.
    """
    n = logits.shape[-1]
    if n == 1:
        zero = np.zeros(logits.shape[:-1])
        return eng.public(zero)
    m = eng.max_last(logits, tag)
    z = logits - _broadcast(m, logits.shape)
    e = sec_exp(eng, z, tag, mode="unchecked")
    s = e.sum(axis=-1, keepdims=True)
    p = eng.mul(e, _broadcast(sec_reciprocal(eng, s, tag, mode="unchecked"), e.shape), tag)
    ln_z = sec_log(eng, s, tag, mode="unchecked")
    dot = eng.mul(p, z, tag).sum(axis=-1, keepdims=True)
    out = ln_z - dot
    return out.reshape(logits.shape[:-1])
