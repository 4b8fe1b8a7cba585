"""Batch command-line surface: simulate, fit, summarize, evaluate.

Exit codes: 0 success, 2 usage/input error, 3 runtime/numerical failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import data_model, sim_harness, summaries
from .data_model import ParseError
from .sampler import ChainAbort, Config, load_chain, run_chain
from .stochastic import RngStream

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out_dir, command, args, inputs):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "input_hashes": {p: _sha256(p) for p in inputs if p and os.path.exists(p)},
        "seed": getattr(args, "seed", None),
        "tool_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def _load_config(path, args):
    d = {}
    if path:
        with open(path) as fh:
            d = json.load(fh)
    for key in ("seed", "iterations", "burnin", "thin"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "variant", None) is not None:
        d["prior_variant"] = args.variant
    return Config.from_dict(d)


def cmd_simulate(args):
    sim_cfg = {}
    if args.config:
        with open(args.config) as fh:
            sim_cfg = json.load(fh)
    rng = RngStream(args.seed, 0)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, "simulate", args, [args.config])
    if args.scenario == 1:
        full, fit_data, mask, truth = sim_harness.generate_sim1(
            m=sim_cfg.get("m", 30), J=sim_cfg.get("J", 150),
            reps=sim_cfg.get("reps", 3),
            holdout_fraction=sim_cfg.get("holdout_fraction", 0.05), rng=rng,
        )
    elif args.scenario == 2:
        full, fit_data, mask, truth = sim_harness.generate_sim2_zipll(
            m=sim_cfg.get("m", 15), J=sim_cfg.get("J", 15), rng=rng,
            holdout_fraction=sim_cfg.get("holdout_fraction", 0.10),
        )
    elif args.scenario == 3:
        full, truth = sim_harness.generate_sim3_multiplicity(
            J=sim_cfg.get("J", 20), rng=rng, reps=sim_cfg.get("reps", 5)
        )
        mask = np.zeros((full.m, full.J), dtype=bool)
    elif args.scenario == 4:
        full, fit_data, mask, truth = sim_harness.generate_sim4(
            regime=sim_cfg.get("regime", "high_corr"),
            missing_fraction=sim_cfg.get("missing_fraction", 0.1), rng=rng,
        )
    else:
        print(f"unknown scenario {args.scenario}", file=sys.stderr)
        return EXIT_USAGE
    data_model.write_csv(full, os.path.join(args.out, "data.csv"))
    data_model.write_mask(mask, full, os.path.join(args.out, "mask.csv"))
    sim_harness.write_truth(truth, os.path.join(args.out, "truth.json"))
    return EXIT_OK


def cmd_fit(args):
    try:
        data = data_model.ingest_csv(args.data)
        if args.cutoffs:
            cuts = data_model.ingest_cutoffs(args.cutoffs, data.endpoint_names)
            data = data_model.Dataset(
                data.m, data.J, data.cells, data.chemical_names,
                data.endpoint_names, cuts,
            )
        mask = None
        if args.mask:
            mask = data_model.read_mask(args.mask, data)
            data = data_model.Dataset(
                data.m, data.J,
                tuple(
                    tuple(
                        data_model.CellData(i, j, ()) if mask[i, j] else data.cells[i][j]
                        for j in range(data.J)
                    )
                    for i in range(data.m)
                ),
                data.chemical_names, data.endpoint_names, data.cutoffs,
            )
        config = _load_config(args.config, args)
    except (ParseError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    _write_manifest(args.out, "fit", args, [args.data, args.config, args.mask, args.cutoffs])
    try:
        if args.chains == 1:
            run_chain(data, config, out_dir=args.out, holdout_mask=mask)
        else:
            for c in range(args.chains):
                run_chain(
                    data, config,
                    out_dir=os.path.join(args.out, f"chain{c:02d}"),
                    holdout_mask=mask, stream_id=c,
                )
    except ChainAbort as e:
        print(f"chain aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _parse_cells(spec_str, design):
    pairs = []
    chem = {n: i for i, n in enumerate(design.chemical_names)}
    ep = {n: j for j, n in enumerate(design.endpoint_names)}
    for part in spec_str.split(","):
        c, _, e = part.partition(":")
        if c not in chem or e not in ep:
            raise ValueError(f"unknown cell {part!r}")
        pairs.append((chem[c], ep[e]))
    return pairs


def cmd_summarize(args):
    try:
        chain = load_chain(args.chain)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        cells = _parse_cells(args.cells, chain.design) if args.cells else None
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    _write_manifest(args.out, "summarize", args, [])
    summaries.write_summary_outputs(chain, args.out, cells=cells)
    return EXIT_OK


def metrics_from_chain(chain, truth):
    """Compute the evaluation metric set from a chain and its truth."""
    design = chain.design
    G = chain.draws["Gamma"] == 1
    T = chain.draws["T"] == 1
    p_gamma = G.mean(axis=0)
    p_t = T.mean(axis=0)
    p_union = (G | T).mean(axis=0)
    observed = design.observed
    held = chain.holdout_mask if chain.holdout_mask is not None else np.zeros_like(observed)
    union_true = ((truth.gamma_true == 1) | (truth.t_true == 1)).astype(int)

    def _auc_or_none(scores, labels):
        try:
            return sim_harness.auc(scores, labels)
        except ValueError:
            return None

    metrics = {
        "auc_in_gamma": _auc_or_none(p_gamma[observed], truth.gamma_true[observed]),
        "auc_in_t": _auc_or_none(p_t[observed], truth.t_true[observed]),
        "auc_in_union": _auc_or_none(p_union[observed], union_true[observed]),
        "fp_gamma_at_0.5": sim_harness.false_positives(p_gamma, truth.gamma_true, 0.5),
        "fp_t_at_0.5": sim_harness.false_positives(p_t, truth.t_true, 0.5),
        "xi_mean": float(chain.draws["xi"].mean()) if "xi" in chain.draws else None,
        "alpha0_mean": float(chain.draws["alpha"][:, 0].mean()),
    }
    if held.any():
        metrics["auc_out_gamma"] = _auc_or_none(p_gamma[held], truth.gamma_true[held])
        metrics["auc_out_t"] = _auc_or_none(p_t[held], truth.t_true[held])
        metrics["auc_out_union"] = _auc_or_none(p_union[held], union_true[held])
    # RMSE of the posterior-mean fit vs the true means at observed points
    fit = summaries.posterior_mean_fit(chain, raw_scale=True)
    tv = np.zeros_like(fit)
    for i in range(design.m):
        for j in range(design.J):
            k = design.kcount[i, j]
            if k == 0:
                continue
            x = design.X[i, j, :k]
            if truth.meta.get("zipll_a") is not None:
                tv[i, j, :k] = sim_harness.zipll_mean_at(truth, i, j, x)
            else:
                tv[i, j, :k] = truth.mean_value(i, j, x)
    sel = design.obs_mask
    metrics["rmse"] = sim_harness.rmse(fit[sel], tv[sel])
    metrics["rmse_zero_predictor"] = sim_harness.rmse(np.zeros(int(sel.sum())), tv[sel])
    return metrics


def cmd_evaluate(args):
    if not os.path.exists(args.truth):
        print(f"error: truth file not found: {args.truth}", file=sys.stderr)
        return EXIT_USAGE
    try:
        chain = load_chain(args.chain)
        truth = sim_harness.read_truth(args.truth)
    except (FileNotFoundError, ValueError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if truth.gamma_true.shape != (chain.design.m, chain.design.J):
        print("error: truth dimensions do not match the chain", file=sys.stderr)
        return EXIT_USAGE
    metrics = metrics_from_chain(chain, truth)
    with open(args.out, "w") as fh:
        json.dump(metrics, fh, indent=2)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="bmc", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    ps = sub.add_parser("simulate", help="generate a simulation scenario")
    ps.add_argument("--scenario", type=int, required=True)
    ps.add_argument("--config", default=None, help="JSON with scenario parameters")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_simulate)

    pf = sub.add_parser("fit", help="fit the model to a data CSV")
    pf.add_argument("--data", required=True)
    pf.add_argument("--config", default=None)
    pf.add_argument("--mask", default=None, help="hold-out cells CSV")
    pf.add_argument("--cutoffs", default=None, help="per-endpoint cutoff CSV")
    pf.add_argument("--out", required=True)
    pf.add_argument("--seed", type=int, default=None)
    pf.add_argument("--variant", choices=["factor", "bmc0", "bmc_i", "bmc_j"], default=None)
    pf.add_argument("--iterations", type=int, default=None)
    pf.add_argument("--burnin", type=int, default=None)
    pf.add_argument("--thin", type=int, default=None)
    pf.add_argument("--chains", type=int, default=1)
    pf.set_defaults(func=cmd_fit)

    pm = sub.add_parser("summarize", help="write posterior summary CSVs")
    pm.add_argument("--chain", required=True)
    pm.add_argument("--out", required=True)
    pm.add_argument("--cells", default=None, help="chem:endpoint[,chem:endpoint...]")
    pm.set_defaults(func=cmd_summarize)

    pe = sub.add_parser("evaluate", help="compute metrics against a truth file")
    pe.add_argument("--chain", required=True)
    pe.add_argument("--truth", required=True)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0,) else 0
    try:
        return args.func(args)
    except ChainAbort as e:
        print(f"chain aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
