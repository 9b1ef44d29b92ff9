"""Experiment driver: gen, train-approx, select, bench, report.

Typical flow:

    mpcselect gen          --config exp.ini --out out
    mpcselect train-approx --config exp.ini --out out
    mpcselect select       --config exp.ini --out out --variant full
    mpcselect bench        --config exp.ini --out out
    mpcselect report       out/run_report.json

Every command is deterministic for a given config and seed: byte-identical
files on re-runs.  Exit codes: 0 ok, 2 config, 3 io, 4 validation,
5 training, 6 protocol/transport.
"""

import argparse
import json
import os
import subprocess
import sys

import numpy as np

from . import approx, config as cfgmod, modelio, nn, proxy, scheduler, selection
from .approx import TrainingError
from .protocols import Mpc
from .ring import EncodeRangeError
from .shares import Dealer
from .transport import (
    AuditError,
    CostLedger,
    LoopbackChannel,
    TransportError,
    connect_socket_pair,
)

EXIT_CONFIG, EXIT_IO, EXIT_VALIDATION, EXIT_TRAINING, EXIT_PROTOCOL = 2, 3, 4, 5, 6

MODEL_FILE = "target_model.sfmt"
DATASET_FILE = "dataset.sfdt"
CONFIG_ECHO = "effective_config.ini"


def _load_config(args) -> cfgmod.ExperimentConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides[("run", "seed")] = args.seed
    if getattr(args, "transport", None):
        overrides[("run", "transport")] = args.transport
    if getattr(args, "variant", None):
        overrides[("run", "variant")] = args.variant
    if getattr(args, "out", None):
        overrides[("run", "out")] = args.out
    if args.config:
        return cfgmod.load(args.config, overrides)
    return cfgmod.parse("", overrides)


def _echo_config(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, CONFIG_ECHO), "w") as f:
        f.write(cfgmod.effective_text(cfg))


# ---------------------------------------------------------------- gen


def cmd_gen(cfg: cfgmod.ExperimentConfig) -> int:
    weights = nn.init_weights(cfg.model, cfg.rng("weights"))
    rng = cfg.rng("data")
    t, d = cfg.model.seq_len, cfg.model.dim
    if cfg.model.vocab:
        rows = rng.integers(0, cfg.model.vocab, size=(cfg.data_count, t))
        token_mode = True
    else:
        rows = rng.normal(0.0, 1.0, size=(cfg.data_count, t, d))
        token_mode = False
    valid = rng.integers(max(1, t // 2), t + 1, size=cfg.data_count)
    os.makedirs(cfg.out_dir, exist_ok=True)
    modelio.save_model(os.path.join(cfg.out_dir, MODEL_FILE), cfg.model, weights)
    modelio.save_dataset(os.path.join(cfg.out_dir, DATASET_FILE), rows, valid, token_mode)
    _echo_config(cfg)
    print(f"wrote {MODEL_FILE} and {DATASET_FILE} ({cfg.data_count} rows) to {cfg.out_dir}")
    return 0


def _load_inputs(cfg):
    model_cfg, weights = modelio.load_model(os.path.join(cfg.out_dir, MODEL_FILE))
    rows, valid, token_mode = modelio.load_dataset(os.path.join(cfg.out_dir, DATASET_FILE))
    if token_mode:
        rows = nn.embed_tokens(weights, rows)
    mask = nn.make_mask(valid, model_cfg.seq_len, model_cfg.mask_value)
    return model_cfg, weights, rows, mask


# ---------------------------------------------------------------- train-approx


def _mlp_path(cfg, phase, name):
    return os.path.join(cfg.out_dir, f"mlp_phase{phase}_{name}.sfmt")


def cmd_train_approx(cfg: cfgmod.ExperimentConfig) -> int:
    model_cfg, weights, rows, mask = _load_inputs(cfg)
    depth = max(ph.proxy.layers for ph in cfg.plan.phases)
    sub_cfg, sub_w = proxy.extract_submodel(model_cfg, weights, depth)
    boot = selection.bootstrap_sample(
        len(rows), cfg.plan.bootstrap_fraction, cfg.rng("bootstrap")
    )
    taps = nn.record_taps(sub_cfg, sub_w, rows[boot], mask[boot])
    base = cfg.train_config()
    reports = []
    for pi, ph in enumerate(cfg.plan.phases):
        spec = ph.proxy
        for li in range(spec.layers):
            for site, width, name in (
                (nn.SITE_ATTN_SOFTMAX, model_cfg.seq_len, f"layer{li}_softmax"),
                (nn.SITE_LN_RECIP, 1, f"layer{li}_ln"),
            ):
                tc = approx.TrainConfig(
                    synth_n=base.synth_n, lr=base.lr, epochs=base.epochs,
                    batch_size=base.batch_size, holdout_frac=base.holdout_frac,
                    seed=base.seed + 1009 * pi + 101 * li,
                )
                mlp, rep, est = approx.fit_site_mlp(
                    site, taps.inputs(site, li), spec.hidden, width, tc,
                    mask_value=model_cfg.mask_value, eps=model_cfg.eps,
                )
                modelio.save_mlp(_mlp_path(cfg, pi, name), mlp)
                reports.append((pi, name, rep, est))
        tc = approx.TrainConfig(
            synth_n=base.synth_n, lr=base.lr, epochs=base.epochs,
            batch_size=base.batch_size, holdout_frac=base.holdout_frac,
            seed=base.seed + 1009 * pi + 7,
        )
        mlp, rep, est = approx.fit_site_mlp(
            nn.SITE_SOFTMAX_ENTROPY, taps.inputs(nn.SITE_SOFTMAX_ENTROPY),
            spec.hidden, model_cfg.classes, tc, eps=model_cfg.eps,
        )
        modelio.save_mlp(_mlp_path(cfg, pi, "entropy"), mlp)
        reports.append((pi, "entropy", rep, est))

    lines = [f"{'phase':>5} {'mlp':<18} {'hidden':>6} {'train_mse':>12} {'holdout_mse':>12}"]
    payload = []
    for pi, name, rep, est in reports:
        lines.append(
            f"{pi:>5} {name:<18} {rep.hidden:>6} {rep.train_mse:>12.3e} {rep.holdout_mse:>12.3e}"
        )
        payload.append(
            {
                "phase": pi, "mlp": name, "site": rep.site, "hidden": rep.hidden,
                "train_mse": rep.train_mse, "holdout_mse": rep.holdout_mse,
                "gaussian": [est.mu, est.sigma],
            }
        )
    text = "\n".join(lines)
    with open(os.path.join(cfg.out_dir, "train_report.txt"), "w") as f:
        f.write(text + "\n")
    with open(os.path.join(cfg.out_dir, "train_report.json"), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    print(text)
    print(f"trained {len(reports)} MLPs "
          f"(sum over phases of 2l+1 = {sum(2 * p.proxy.layers + 1 for p in cfg.plan.phases)})")
    return 0


# ---------------------------------------------------------------- select


def _build_proxies(cfg, model_cfg, weights, with_mlps, phases):
    depth = max(ph.proxy.layers for ph in cfg.plan.phases)
    sub_cfg, sub_w = proxy.extract_submodel(model_cfg, weights, depth)
    out = []
    for pi, ph in phases:
        if with_mlps:
            sm = [
                modelio.load_mlp(_mlp_path(cfg, pi, f"layer{li}_softmax"))
                for li in range(ph.proxy.layers)
            ]
            ln = [
                modelio.load_mlp(_mlp_path(cfg, pi, f"layer{li}_ln"))
                for li in range(ph.proxy.layers)
            ]
            em = modelio.load_mlp(_mlp_path(cfg, pi, "entropy"))
            out.append(proxy.assemble_proxy(sub_cfg, sub_w, ph.proxy, sm, ln, em))
        else:
            out.append(proxy.assemble_proxy(sub_cfg, sub_w, ph.proxy))
    return out


def _variant_plan(cfg, variant):
    """P and PM collapse to a single phase with the final proxy spec."""
    if variant in ("P", "PM"):
        final = cfg.plan.phases[-1]
        single = selection.PhaseSpec(final.proxy, cfg.plan.final_fraction)
        plan = selection.PhasePlan((single,), cfg.plan.bootstrap_fraction)
        phases = [(len(cfg.plan.phases) - 1, single)]
    else:
        plan = cfg.plan
        phases = list(enumerate(cfg.plan.phases))
    return plan, phases


def _run_variant(cfg, variant, channel=None, trace=None):
    model_cfg, weights, rows, mask = _load_inputs(cfg)
    plan, phases = _variant_plan(cfg, variant)
    with_mlps = variant != "P"
    proxies = _build_proxies(cfg, model_cfg, weights, with_mlps, phases)
    want_trace = trace if trace is not None else (variant == "full")
    ledger = CostLedger(cfg.network, trace=want_trace)
    eng = Mpc(
        cfg.codec,
        Dealer(cfgmod.substream_seed(cfg.seed, "dealer"), cfg.codec),
        channel if channel is not None else LoopbackChannel(),
        ledger,
        compare_cost=cfg.compare,
        kernels=cfg.kernels,
    )
    shared = [proxy.share_proxy(eng, p) for p in proxies]
    data_sh = eng.share(rows)
    mask_sh = eng.share(mask)
    run = selection.run_selection(
        eng,
        plan,
        shared,
        data_sh,
        mask_sh,
        pivot_rng=cfg.rng("quickselect"),
        bootstrap_rng=cfg.rng("bootstrap"),
        batch_size=cfg.batch_size,
        appraise_mode=cfg.appraise,
        appraise_threshold=cfg.appraise_threshold,
        trace=want_trace,
    )
    result = {
        "variant": variant,
        "seed": cfg.seed,
        "plan": [[p.proxy.layers, p.proxy.heads, p.proxy.hidden, p.selectivity] for p in plan.phases],
        "mlps_per_proxy": [p.mlp_count() for p in proxies],
        "phases": [
            {
                "spec": [r.spec.layers, r.spec.heads, r.spec.hidden],
                "alpha": r.selectivity,
                "in": r.in_size,
                "out": r.out_size,
                "comparisons": r.comparisons,
            }
            for r in run.phases
        ],
        "bootstrap": run.bootstrap.tolist(),
        "final": run.final.tolist(),
        "purchase": run.purchase.tolist(),
        "appraisal": run.appraisal,
        "comparisons": run.comparisons,
        "ledger": eng.ledger.to_dict(),
        "compare_cost": {
            "configured": {"rounds": cfg.compare.rounds, "bytes": cfg.compare.bytes},
            "analytic": eng.analytic_compare_cost(),
            "mode": cfg.compare.mode,
        },
        "reveal_digest": _digest(eng.ledger),
    }
    if want_trace:
        dag = scheduler.dag_from_trace(eng.ledger.events)
        merged = scheduler.coalesce(dag, cfg.window, cfg.latency_threshold)
        tl = scheduler.simulate(merged, cfg.network, cfg.compute, cfg.memory_cap)
        seq = scheduler.sequential_baseline(dag, cfg.network, cfg.compute)
        result["schedule"] = {
            "nodes": len(dag),
            "coalesced_nodes": len(merged),
            "window": cfg.window,
            "sequential_seconds": seq.makespan,
            "overlapped_seconds": tl.makespan,
            "speedup": seq.makespan / tl.makespan if tl.makespan else 1.0,
            "bytes_before": dag.total_bytes(),
            "bytes_after": merged.total_bytes(),
        }
        result["timeline"] = tl.export()
    return result


def _digest(ledger) -> dict:
    out = {}
    for e in ledger.reveal_log:
        out[e.kind] = out.get(e.kind, 0) + 1
    return out


def _report_text(res) -> str:
    lines = [f"variant {res['variant']}  seed {res['seed']}"]
    lines.append(f"bootstrap {len(res['bootstrap'])}  comparisons {res['comparisons']}")
    for ph in res["phases"]:
        l, w, d = ph["spec"]
        lines.append(
            f"  phase <l={l},w={w},d={d}> alpha={ph['alpha']:g}: "
            f"{ph['in']} -> {ph['out']} ({ph['comparisons']} comparisons)"
        )
    lines.append(f"purchase size {len(res['purchase'])}")
    if res.get("appraisal") is not None:
        lines.append(f"appraisal {res['appraisal']}")
    t = res["ledger"]["total"]
    lines.append(
        f"ledger total: {t['rounds']} rounds, {t['bytes']} bytes, {t['seconds']:.3f} s simulated"
    )
    cc = res["compare_cost"]
    lines.append(
        f"comparison cost: configured {cc['configured']['rounds']}r/{cc['configured']['bytes']}B, "
        f"protocol analytic {cc['analytic']['rounds']}r/{cc['analytic']['bytes']}B (mode {cc['mode']})"
    )
    lines.append(f"reveal digest: {res['reveal_digest']}")
    if "schedule" in res:
        s = res["schedule"]
        lines.append(
            f"schedule: sequential {s['sequential_seconds']:.3f} s -> overlapped "
            f"{s['overlapped_seconds']:.3f} s (speedup {s['speedup']:.2f}x, window {s['window']})"
        )
    lines.append("per-tag ledger:")
    total_bytes = max(1, t["bytes"])
    for tag, c in sorted(res["ledger"]["tags"].items(), key=lambda kv: -kv[1]["bytes"]):
        lines.append(
            f"  {tag:<20} {c['rounds']:>8} rounds {c['bytes']:>12} bytes "
            f"{c['seconds']:>10.3f} s  {100 * c['bytes'] / total_bytes:>5.1f}%"
        )
    return "\n".join(lines)


def _write_run_outputs(cfg, res):
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "indices.txt"), "w") as f:
        for i in res["purchase"]:
            f.write(f"{i}\n")
    with open(os.path.join(cfg.out_dir, "run_report.json"), "w") as f:
        json.dump(res, f, indent=1, sort_keys=True)
    with open(os.path.join(cfg.out_dir, "run_report.txt"), "w") as f:
        f.write(_report_text(res) + "\n")
    if "timeline" in res:
        with open(os.path.join(cfg.out_dir, "timeline.tsv"), "w") as f:
            f.write(res["timeline"] + "\n")
    _echo_config(cfg)


def cmd_select(cfg: cfgmod.ExperimentConfig, compare_variants=False) -> int:
    if cfg.transport == "socket":
        return _select_socket(cfg)
    if compare_variants:
        rows = []
        for variant in ("P", "PM", "PMT", "full"):
            res = _run_variant(cfg, variant)
            t = res["ledger"]["total"]
            secs = (
                res["schedule"]["overlapped_seconds"] if variant == "full" else t["seconds"]
            )
            rows.append((variant, t["rounds"], t["bytes"], secs))
        base = rows[0]
        lines = [f"{'variant':<8}{'rounds':>10}{'bytes':>14}{'sim_seconds':>14}{'vs P':>8}"]
        for v, r, b, s in rows:
            lines.append(f"{v:<8}{r:>10}{b:>14}{s:>14.3f}{base[3] / s:>7.1f}x")
        text = "\n".join(lines)
        with open(os.path.join(cfg.out_dir, "variant_comparison.txt"), "w") as f:
            f.write(text + "\n")
        print(text)
        return 0
    res = _run_variant(cfg, cfg.variant)
    _write_run_outputs(cfg, res)
    print(_report_text(res))
    return 0


def _select_socket(cfg) -> int:
    """Run the two parties as separate processes over TCP; verify equal ledgers."""
    _echo_config(cfg)  # children parse the effective echo
    procs = []
    for party in (0, 1):
        procs.append(
            subprocess.Popen(
                [
                    sys.executable, "-m", "mpcselect.cli", "_party",
                    "--config", os.path.join(cfg.out_dir, CONFIG_ECHO),
                    "--party", str(party), "--port", str(cfg.port),
                ],
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
            )
        )
    codes = [p.wait() for p in procs]
    for p, code in zip(procs, codes):
        if code != 0:
            sys.stderr.write(p.stdout.read().decode())
            return EXIT_PROTOCOL
    reports = []
    for party in (0, 1):
        with open(os.path.join(cfg.out_dir, f"party{party}", "run_report.json")) as f:
            reports.append(json.load(f))
    if reports[0]["ledger"] != reports[1]["ledger"] or reports[0]["purchase"] != reports[1]["purchase"]:
        print("error: protocol: party ledgers diverged", file=sys.stderr)
        return EXIT_PROTOCOL
    _write_run_outputs(cfg, reports[0])
    print(_report_text(reports[0]))
    print("socket run verified: both parties produced identical ledgers and indices")
    return 0


def cmd_party(cfg: cfgmod.ExperimentConfig, party: int, port: int) -> int:
    from dataclasses import replace

    channel = connect_socket_pair(party, "127.0.0.1", port)
    try:
        res = _run_variant(cfg, cfg.variant, channel=channel)
    finally:
        channel.close()
    sub = replace(cfg, out_dir=os.path.join(cfg.out_dir, f"party{party}"))
    _write_run_outputs(sub, res)
    return 0


# ---------------------------------------------------------------- bench


def cmd_bench(cfg: cfgmod.ExperimentConfig) -> int:
    model_cfg, weights, rows, mask = _load_inputs(cfg)
    final = cfg.plan.phases[-1]
    tables = {}
    for variant in ("P", "PM"):
        plan, phases = _variant_plan(cfg, variant)
        proxies = _build_proxies(cfg, model_cfg, weights, variant != "P", phases)
        eng = Mpc(
            cfg.codec,
            Dealer(cfgmod.substream_seed(cfg.seed, "dealer"), cfg.codec),
            LoopbackChannel(),
            CostLedger(cfg.network),
            compare_cost=cfg.compare,
            kernels=cfg.kernels,
        )
        sp = proxy.share_proxy(eng, proxies[-1])
        nb = min(cfg.batch_size, len(rows))
        proxy.forward_entropy_mpc(
            eng, sp, eng.share(rows[:nb]), eng.share(mask[:nb]), use_mlps=variant != "P"
        )
        tables[variant] = eng.ledger
    lines = []
    for variant, ledger in tables.items():
        lines.append(f"one forward pass, variant {variant} "
                     f"(<l={final.proxy.layers},w={final.proxy.heads},d={final.proxy.hidden}>, "
                     f"batch {min(cfg.batch_size, len(rows))}):")
        lines.append(ledger.format_table())
        lines.append("")
    text = "\n".join(lines)
    with open(os.path.join(cfg.out_dir, "bench.txt"), "w") as f:
        f.write(text)
    print(text)
    return 0


def cmd_report(path: str) -> int:
    with open(path) as f:
        res = json.load(f)
    print(_report_text(res))
    return 0


# ---------------------------------------------------------------- entry


def build_parser():
    p = argparse.ArgumentParser(prog="mpcselect", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config file (INI grammar)")
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--transport", choices=["loopback", "socket"])
        sp.add_argument("--variant", choices=["P", "PM", "PMT", "full"])
        sp.add_argument("--out", help="output directory override")

    common(sub.add_parser("gen", help="generate the synthetic model and dataset"))
    common(sub.add_parser("train-approx", help="train the substitute MLPs"))
    sp = sub.add_parser("select", help="run the private selection pipeline")
    common(sp)
    sp.add_argument(
        "--compare-variants", action="store_true",
        help="run P, PM, PMT and full at this config and tabulate",
    )
    common(sub.add_parser("bench", help="cost table for one proxy forward pass"))
    sp = sub.add_parser("report", help="render a saved run report")
    sp.add_argument("path")
    sp = sub.add_parser("_party")  # internal: one party of a socket run
    common(sp)
    sp.add_argument("--party", type=int, required=True)
    sp.add_argument("--port", type=int, required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "report":
            return cmd_report(args.path)
        cfg = _load_config(args)
        if args.cmd == "gen":
            return cmd_gen(cfg)
        if args.cmd == "train-approx":
            return cmd_train_approx(cfg)
        if args.cmd == "select":
            return cmd_select(cfg, compare_variants=args.compare_variants)
        if args.cmd == "bench":
            return cmd_bench(cfg)
        if args.cmd == "_party":
            return cmd_party(cfg, args.party, args.port)
        raise AssertionError(args.cmd)
    except cfgmod.ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, modelio.FormatError) as e:
        print(f"error: io: {e}", file=sys.stderr)
        return EXIT_IO
    except (EncodeRangeError, ValueError) as e:
        print(f"error: validation: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingError as e:
        print(f"error: training: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except (TransportError, AuditError) as e:
        print(f"error: protocol: {e}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
