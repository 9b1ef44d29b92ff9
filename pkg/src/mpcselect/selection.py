"""Multi-phase private data selection.

Each phase forwards the surviving datapoints through that phase's proxy
under MPC, then ranks the shared entropies with QuickSelect, where every
pivot comparison is a secure comparison revealing exactly one bit.  Only
indices flow between phases; shares never move.  The reveal log of a whole
run may contain nothing but comparison bits, the final indices, and the
optional appraisal output, and the engine's audit mode enforces that.

Ties are broken toward the lower index by folding the index into the key
below the entropy's least significant fixed-point bit, which makes the
top-k set unique and equal to the quantized plaintext ranking.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .proxy import ProxySpec, SharedProxy, forward_entropy_mpc
from .protocols import Mpc
from .shares import SharedTensor, broadcast_to, concat


@dataclass(frozen=True)
class PhaseSpec:
    proxy: ProxySpec
    selectivity: float

    def __post_init__(self):
        if not 0 < self.selectivity < 1:
            raise ValueError(f"selectivity must be in (0,1), got {self.selectivity}")


@dataclass(frozen=True)
class PhasePlan:
    """Ordered phase specs; proxies must grow (never shrink) across phases.

    budget, when set, is the total purchase count (bootstrap + final set)
    the plan must land on, up to per-phase rounding.
    """

    phases: tuple
    bootstrap_fraction: float = 0.05
    budget: int | None = None

    def __post_init__(self):
        if not self.phases:
            raise ValueError("plan needs at least one phase")
        if not 0 < self.bootstrap_fraction < 1:
            raise ValueError("bootstrap fraction must be in (0,1)")
        prev = None
        for ph in self.phases:
            s = ph.proxy
            if prev is not None and (
                s.layers < prev.layers or s.heads < prev.heads or s.hidden < prev.hidden
            ):
                raise ValueError("phase specs must be non-decreasing in l, w, d")
            prev = s

    @property
    def final_fraction(self) -> float:
        f = 1.0
        for ph in self.phases:
            f *= ph.selectivity
        return f

    def check_budget(self, n: int):
        """Selectivities must land on the budget, within rounding slack."""
        if self.budget is None:
            return
        boot = max(1, round_half_up(self.bootstrap_fraction * n))
        expect = boot + self.final_fraction * (n - boot)
        slack = len(self.phases) + 1
        if abs(self.budget - expect) > slack:
            raise ValueError(
                f"plan buys ~{expect:.0f} of {n} points but the budget is {self.budget}"
            )


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def bootstrap_sample(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement; bought in the clear, zero MPC cost."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0,1)")
    k = min(n, max(1, round_half_up(fraction * n)))
    return np.sort(rng.choice(n, size=k, replace=False))


def _augmented_keys(eng: Mpc, ent: SharedTensor) -> SharedTensor:
    """Shift entropies left and fold (n-1-i) into the low bits: total order."""
    n = ent.size
    shift = 1 << max(1, math.ceil(math.log2(max(n, 2))))
    keys = ent.mul_int(shift)
    r = eng.ring
    tie = r.residue(np.arange(n - 1, -1, -1, dtype=np.int64))
    return SharedTensor((r.add(keys.shares[0], tie), keys.shares[1]), keys.codec)


def secure_quickselect_topk(
    eng: Mpc,
    entropies: SharedTensor,
    k: int,
    rng: np.random.Generator,
    tag: str = "quickselect",
    trace_phase: int | None = None,
) -> tuple[np.ndarray, int]:
    """Positions of the k largest shared values; expected O(n) comparisons.

    Every partition compares the pivot against all remaining candidates in
    one batched secure comparison; the revealed bits drive the recursion and
    are the only information that leaves the shares.
    """
    n = entropies.size
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for n={n}")
    keys = _augmented_keys(eng, entropies)
    cand = np.arange(n)
    chosen: list = []
    comparisons = 0
    partition = 0
    need = k
    while True:
        if need == 0:
            break
        if need == len(cand):
            chosen.extend(cand.tolist())
            break
        pivot_pos = int(rng.integers(0, len(cand)))
        pivot = int(cand[pivot_pos])
        others = np.delete(cand, pivot_pos)
        if trace_phase is not None:
            eng.ledger.set_group((trace_phase, "cmp", partition))
        pk = broadcast_to(keys[pivot : pivot + 1], (len(others),))
        bits = eng.compare_open(pk, keys[others], tag)  # [pivot < other]
        comparisons += len(others)
        partition += 1
        larger = others[bits == 1]
        leq = others[bits == 0]
        if len(larger) == need:
            chosen.extend(larger.tolist())
            break
        if len(larger) > need:
            cand = larger
        else:
            chosen.extend(larger.tolist())
            chosen.append(pivot)
            need -= len(larger) + 1
            cand = leq
    if trace_phase is not None:
        eng.ledger.set_group(())
    return np.sort(np.array(chosen, dtype=np.int64)), comparisons


def plain_topk(entropies: np.ndarray, k: int, codec) -> np.ndarray:
    """Quantized plaintext oracle: same key order the secure path realizes."""
    q = codec.decode(codec.encode(entropies))
    order = np.lexsort((np.arange(len(q)), -q))  # entropy desc, index asc
    return np.sort(order[:k])


@dataclass
class PhaseResult:
    spec: ProxySpec
    selectivity: float
    in_size: int
    out_size: int
    comparisons: int
    survivors: np.ndarray


@dataclass
class SelectionRun:
    bootstrap: np.ndarray
    phases: list = field(default_factory=list)
    final: np.ndarray | None = None
    purchase: np.ndarray | None = None
    appraisal: float | int | None = None
    comparisons: int = 0

    def survivor_sets(self):
        return [p.survivors for p in self.phases]


ALLOWED_REVEALS = {"comparison_bit", "final_indices", "appraisal"}


def run_selection(
    eng: Mpc,
    plan: PhasePlan,
    proxies: list,
    data: SharedTensor,
    mask: SharedTensor | None,
    pivot_rng: np.random.Generator,
    bootstrap_rng: np.random.Generator,
    batch_size: int = 16,
    appraise_mode: str | None = None,
    appraise_threshold: float | None = None,
    entropy_fn=None,
    trace: bool = False,
) -> SelectionRun:
    """Bootstrap, N selection phases, optional appraisal, full audit.

    proxies: one SharedProxy (or entropy stub input) per phase.
    entropy_fn(phase_idx, global_indices) -> SharedTensor overrides the MPC
    forward (test hook for exact-entropy equivalence runs).
    """
    if len(proxies) != len(plan.phases):
        raise ValueError("one proxy per phase required")
    n = data.shape[0]
    plan.check_budget(n)
    run = SelectionRun(bootstrap=bootstrap_sample(n, plan.bootstrap_fraction, bootstrap_rng))
    in_boot = np.zeros(n, dtype=bool)
    in_boot[run.bootstrap] = True
    surviving = np.arange(n)[~in_boot]  # bootstrap is already purchased

    prev_allowed = eng.ledger.audit_allowed
    eng.ledger.audit_allowed = set(ALLOWED_REVEALS)
    try:
        last_entropies = None
        for pi, (phase, sproxy) in enumerate(zip(plan.phases, proxies)):
            result, ent, local = run_phase(
                eng, pi, phase, sproxy, data, mask, surviving,
                pivot_rng, batch_size, entropy_fn, trace,
            )
            run.comparisons += result.comparisons
            run.phases.append(result)
            last_entropies = (ent, local)
            surviving = result.survivors
        run.final = surviving
        run.purchase = np.sort(np.concatenate([run.bootstrap, surviving]))
        eng.ledger.log_reveal(
            "final_indices", "selection", f"{len(surviving)} indices"
        )
        if appraise_mode is not None:
            ent, local = last_entropies
            run.appraisal = appraise(
                eng, ent[local], appraise_mode, appraise_threshold
            )
    finally:
        eng.ledger.audit_allowed = prev_allowed
        eng.ledger.set_group(())
    return run


def run_phase(
    eng: Mpc,
    phase_idx: int,
    phase: PhaseSpec,
    sproxy,
    data: SharedTensor,
    mask,
    surviving: np.ndarray,
    pivot_rng: np.random.Generator,
    batch_size: int = 16,
    entropy_fn=None,
    trace: bool = False,
):
    """One selection phase: secure entropy forward, then ranked downselect.

    Only the surviving indices move to the next phase; the data shares stay
    where they are.  Returns the phase result plus the entropy shares (the
    last phase's entropies feed the appraisal).
    """
    ent = _phase_entropies(
        eng, phase_idx, sproxy, data, mask, surviving, batch_size, entropy_fn, trace
    )
    k = max(1, round_half_up(phase.selectivity * len(surviving)))
    local, comps = secure_quickselect_topk(
        eng, ent, k, pivot_rng, trace_phase=phase_idx if trace else None
    )
    kept = surviving[local]
    result = PhaseResult(
        phase.proxy, phase.selectivity, len(surviving), len(kept), comps, kept
    )
    return result, ent, local


def _phase_entropies(
    eng, pi, sproxy, data, mask, surviving, batch_size, entropy_fn, trace
) -> SharedTensor:
    if entropy_fn is not None:
        return entropy_fn(pi, surviving)
    chunks = []
    for bi, lo in enumerate(range(0, len(surviving), batch_size)):
        idx = surviving[lo : lo + batch_size]
        if trace:
            eng.ledger.set_group((pi, "fwd", bi))
        xb = data[idx]
        mb = mask[idx] if mask is not None else None
        use_mlps = sproxy.proxy.entropy_mlp is not None
        chunks.append(forward_entropy_mpc(eng, sproxy, xb, mb, use_mlps=use_mlps))
    if trace:
        eng.ledger.set_group(())
    return concat(chunks, axis=0)


def appraise(
    eng: Mpc,
    final_entropies: SharedTensor,
    mode: str,
    threshold: float | None = None,
):
    """Average entropy of the final set: revealed outright, or one threshold bit."""
    if final_entropies.size == 0:
        raise ValueError("empty final set")
    mean = eng.mul_public(
        final_entropies.sum(), 1.0 / final_entropies.size, "appraise"
    )
    if mode == "open":
        value = float(eng.reconstruct(mean, tag="appraise", kind="appraisal"))
        return value
    if mode == "threshold":
        if threshold is None:
            raise ValueError("threshold mode needs a threshold")
        thr = eng.public(np.array([threshold]))
        bit = int(eng.compare_open(thr, mean.reshape(1), "appraise")[0])  # [thr < mean]
        eng.ledger.log_reveal("appraisal", "appraise", f"bit={bit}")
        return bit
    raise ValueError(f"unknown appraisal mode {mode!r}")


def plain_selection(
    plan: PhasePlan,
    entropies_per_phase,
    n: int,
    codec,
    bootstrap_rng: np.random.Generator,
) -> SelectionRun:
    """Plaintext reference pipeline on quantized entropies; the oracle for
    end-to-end equivalence.  entropies_per_phase(phase_idx, indices) -> array."""
    run = SelectionRun(bootstrap=bootstrap_sample(n, plan.bootstrap_fraction, bootstrap_rng))
    in_boot = np.zeros(n, dtype=bool)
    in_boot[run.bootstrap] = True
    surviving = np.arange(n)[~in_boot]
    for pi, phase in enumerate(plan.phases):
        ent = entropies_per_phase(pi, surviving)
        k = max(1, round_half_up(phase.selectivity * len(surviving)))
        local = plain_topk(ent, k, codec)
        kept = surviving[local]
        run.phases.append(
            PhaseResult(phase.proxy, phase.selectivity, len(surviving), len(kept), 0, kept)
        )
        surviving = kept
    run.final = surviving
    run.purchase = np.sort(np.concatenate([run.bootstrap, surviving]))
    return run
