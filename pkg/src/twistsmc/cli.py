"""Command-line runner: ``twistsmc <command> config.toml``.

Exit codes: 0 success, 2 configuration or contract error, 3 numerical
divergence (non-finite training loss or degenerate weights).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from .config import REFERENCE, build_spec, load_config, output_dir
from .engine import ResampleSchedule, bidirectional_bounds, estimate_kls, run_smc, run_smc_target
from .errors import DegenerateWeights, TrainingDiverged, TwistSMCError
from .learn import LossConfig, model_proposal, train
from .oracle import dump_csv, enumerate_target, exact_kl, exact_target_sample
from .rng import RngStream
from .targets import bdmc_exact_posterior_sample, rejection_sample_exact
from .twist import (MLPTwists, TabularTwists, ValueTwists, load_checkpoint, save_checkpoint)

BOUNDS_SCHEMA = "bounds/v1"
KL_SCHEMA = "eval_kl/v1"
TRACE_SCHEMA = "trace/v1"
METHODS = ("sis_base", "sis_twisted", "smc_base", "smc_twisted")


def _write_atomic(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def _oracle(cfg, spec):
    guard = int(cfg["engine"]["guard"])
    if spec.V**spec.T > guard:
        return None
    return enumerate_target(spec, guard=guard)


def _twists(cfg, spec, table=None, need_learnable=False):
    tc = cfg["twist"]
    V, T, n_obs = spec.V, spec.T, spec.n_obs
    if tc["checkpoint"]:
        from .config import _path
        tw = load_checkpoint(_path(cfg, tc["checkpoint"]))
        if (tw.V, tw.T) != (V, T) or tw.n_obs != n_obs:
            raise TwistSMCError("checkpoint does not match the model dimensions")
        return tw
    if cfg["loss"]["kind"] == "pcl1" and need_learnable:
        return ValueTwists(V, T, n_obs)
    kind = tc["kind"]
    if kind == "zero":
        return None if not need_learnable else TabularTwists(V, T, n_obs, tc["head"])
    if kind == "oracle":
        if need_learnable:
            raise TwistSMCError("oracle twists cannot be trained")
        if table is None:
            raise TwistSMCError("oracle twists need an enumerable instance")
        return table.twists()
    if kind == "tabular":
        return TabularTwists(V, T, n_obs, tc["head"])
    if kind == "mlp":
        return MLPTwists(V, T, hidden=int(tc["hidden"]), window=int(tc["window"]) or None,
                         n_obs=n_obs, head=tc["head"], seed=int(tc["seed"]))
    raise TwistSMCError(f"unknown twist kind {kind!r}")


def _exact_source(cfg, spec, table, seed):
    src = cfg["engine"]["exact_source"]
    if src == "oracle":
        if table is None:
            raise TwistSMCError("oracle exact samples need an enumerable instance")
        return lambda n: exact_target_sample(table, RngStream(seed, run=7), n)
    if src == "rejection":
        budget = int(cfg["engine"]["max_draws"])
        return lambda n: rejection_sample_exact(spec, RngStream(seed, run=8), max_draws=budget, n=n)
    if src in ("none", "bdmc"):
        return None
    raise TwistSMCError(f"unknown exact_source {src!r}")


def cmd_bounds(cfg):
    seed = int(cfg["seed"])
    ec = cfg["engine"]
    spec = build_spec(cfg)
    bdmc = ec["exact_source"] == "bdmc"
    if bdmc and spec.observation is None:
        raise TwistSMCError("exact_source = 'bdmc' needs an observation model")
    if spec.observation is not None and spec.conditioning is None and not bdmc:
        raise TwistSMCError("conditional target needs target.obs or exact_source = 'bdmc'")
    table = None if bdmc else _oracle(cfg, spec)
    tw = _twists(cfg, spec, table)
    upper = bool(ec["upper"])
    source = None if bdmc else _exact_source(cfg, spec, table, seed)
    if upper and source is None and not bdmc:
        raise TwistSMCError("upper bounds requested but no exact-sample source is configured")
    sched = ResampleSchedule.parse(ec["schedule"])
    n_runs = int(ec["n_runs"])
    rows, summary = [], []
    for method in METHODS:
        algo, prop = method.split("_")
        s = ResampleSchedule("never") if algo == "sis" else sched
        t_ = None if prop == "base" else tw
        proposal = "base" if prop == "base" else "twist_induced"
        for K in [int(k) for k in ec["K"]]:
            if bdmc:
                lb, ub = _bdmc_bounds(spec, t_, K, n_runs, s, proposal, seed, upper)
            else:
                rep = bidirectional_bounds(spec, t_, K, n_runs, s, source, seed, proposal, upper=upper)
                lb, ub = rep.lb_samples, rep.ub_samples
            for r, v in enumerate(lb):
                rows.append((method, r, K, s.label(), "lower", float(v)))
            if ub is not None:
                for r, v in enumerate(ub):
                    rows.append((method, r, K, s.label(), "upper", float(v)))
            summary.append({"method": method, "K": K, "schedule": s.label(), "proposal": proposal,
                            "lb_mean": float(np.mean(lb)), "ub_mean": None if ub is None else float(np.mean(ub)),
                            "lower": [float(x) for x in lb],
                            "upper": None if ub is None else [float(x) for x in ub]})
    out = output_dir(cfg)
    _write_atomic(os.path.join(out, "bounds.csv"),
                  _csv_text(["method", "run_id", "K", "schedule", "bound_side", "logZ_sample"], rows))
    manifest = {"schema": BOUNDS_SCHEMA, "version": __version__, "seed": seed, "n_runs": n_runs,
                "potential": spec.potential.kind, "exact_source": ec["exact_source"],
                "oracle_logZ": None if table is None else table.log_z, "runs": summary}
    _write_atomic(os.path.join(out, "bounds.json"), json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return 0


def _bdmc_bounds(spec, tw, K, n_runs, sched, proposal, seed, upper):
    """Per run: draw (s, o) jointly, then bound log Z(o) for that o."""
    seqs, obs = bdmc_exact_posterior_sample(spec, RngStream(seed, run=9), n_runs)
    lb, ub = np.empty(n_runs), np.empty(n_runs)
    for r in range(n_runs):
        sp = spec.condition(int(obs[r]))
        lb[r] = run_smc(sp, tw, K, sched, proposal, seed, run=r)[1]
        if upper:
            ub[r] = run_smc_target(sp, tw, K, sched, seqs[r], seed, run=n_runs + r, proposal=proposal)
    return lb, (ub if upper else None)


def _loss_config(cfg):
    lc = cfg["loss"]
    return LossConfig(loss=lc["kind"], positives=lc["positives"], negatives=lc["negatives"], K=int(lc["K"]),
                      lr=float(lc["lr"]) or None, steps=int(lc["steps"]), seed=int(cfg["seed"]),
                      optimizer=lc["optimizer"], eval_every=int(lc["eval_every"]), final=lc["final"])


def _trace_csv(trace):
    return _csv_text(["step", "loss", "grad_norm", "kl_q_sigma", "kl_sigma_q"], trace.rows())


def cmd_train(cfg):
    spec = build_spec(cfg)
    if spec.observation is not None and spec.conditioning is None:
        raise TwistSMCError("training needs a conditioned target (set target.obs)")
    table = _oracle(cfg, spec)
    lcfg = _loss_config(cfg)
    tw = _twists(cfg, spec, table, need_learnable=True)
    out = output_dir(cfg)
    try:
        tw, trace = train(lcfg, spec, tw, table)
    except TrainingDiverged as exc:
        trace = exc.trace
        if trace is not None:
            _write_atomic(os.path.join(out, "trace.csv"), _trace_csv(trace))
        raise
    save_checkpoint(tw, os.path.join(out, "twists.ckpt"))
    _write_atomic(os.path.join(out, "trace.csv"), _trace_csv(trace))
    return 0


def cmd_eval_kl(cfg, checkpoint=None):
    seed = int(cfg["seed"])
    ec = cfg["engine"]
    spec = build_spec(cfg)
    if checkpoint:
        cfg["twist"]["checkpoint"] = os.path.abspath(checkpoint)
    table = _oracle(cfg, spec)
    tw = _twists(cfg, spec, table)
    if tw is None:
        q = model_proposal(TabularTwists(spec.V, spec.T, spec.n_obs), spec, "ctl", cfg["loss"]["final"])
    else:
        q = model_proposal(tw, spec, cfg["loss"]["kind"] if cfg["loss"]["kind"] in ("dpg", "pcl1") else "ctl",
                           cfg["loss"]["final"])
    source = _exact_source(cfg, spec, table, seed)
    if source is None:
        raise TwistSMCError("KL evaluation needs an exact-sample source (oracle or rejection)")
    n = int(ec["kl_samples"])
    exact = source(n)
    rows = []
    smc_tw = tw if not isinstance(tw, ValueTwists) else None
    K = max(int(k) for k in ec["K"])
    rep = bidirectional_bounds(spec, smc_tw, K, int(ec["n_runs"]), ec["schedule"], source, seed)
    sources = [("midpoint", rep.midpoint)]
    if table is not None:
        sources.append(("oracle", table.log_z))
    for name, lz in sources:
        est = estimate_kls(spec, q, lz, n, exact, RngStream(seed, run=11))
        rows.append(("q_sigma", est.kl_q_sigma, est.se_q_sigma, name))
        rows.append(("sigma_q", est.kl_sigma_q, est.se_sigma_q, name))
    if table is not None:
        rows.append(("q_sigma", exact_kl(table, q, "q_sigma"), 0.0, "exact"))
        rows.append(("sigma_q", exact_kl(table, q, "sigma_q"), 0.0, "exact"))
    out = output_dir(cfg)
    _write_atomic(os.path.join(out, "eval_kl.csv"),
                  _csv_text(["direction", "estimate", "stderr", "logZ_source"], rows))
    return 0


def cmd_oracle_dump(cfg):
    spec = build_spec(cfg)
    table = enumerate_target(spec, guard=int(cfg["engine"]["guard"]))
    out = output_dir(cfg)
    dump_csv(table, os.path.join(out, "oracle.csv"))
    print(f"logZ {table.log_z!r}")
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(prog="twistsmc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name in ("bounds", "train", "eval-kl", "oracle-dump"):
        p = sub.add_parser(name)
        p.add_argument("config")
        if name == "eval-kl":
            p.add_argument("--checkpoint", default=None)
    sub.add_parser("config-reference")
    args = ap.parse_args(argv)
    if args.cmd == "config-reference":
        sys.stdout.write(REFERENCE)
        return 0
    try:
        cfg = load_config(args.config)
        if args.cmd == "bounds":
            return cmd_bounds(cfg)
        if args.cmd == "train":
            return cmd_train(cfg)
        if args.cmd == "eval-kl":
            return cmd_eval_kl(cfg, args.checkpoint)
        return cmd_oracle_dump(cfg)
    except (TrainingDiverged, DegenerateWeights) as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return 3
    except TwistSMCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
