"""Command-line surface: synthesize, fracture, train, complete, evaluate,
report, sweep.

Exit codes are stable: 0 success, 2 configuration problem, 3 I/O problem,
4 data problem (unmatched cases, exhausted fracture retries), 5 numeric
failure.  All randomness derives from the given --seed through named
sub-streams, so identical invocations produce identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    FractureError,
    NumericError,
)
from .geometry import PointCloud, load_cloud, save_cloud
from .metrics import aggregate, evaluate_case, read_csv, render_report, render_svg, severity_sweep
from .network import complete_cloud
from .synth import (
    FractureSpec,
    build_ground_truth,
    generate_cases,
    load_manifest,
    synth_vessel_tree,
    write_manifest,
    write_patient,
)
from .train import load_model_checkpoint, train_model

_THREAD_LIMITER = None  # keeps any BLAS thread cap alive for the process

# Reject trees whose pruned trunk is too short to fracture at the lowest
# removal ratio; regenerate with a fresh seed instead.
_MIN_TRUNK_POINTS = 20
_SYNTH_RETRY_CAP = 10


def _derive_seed(*parts) -> int:
    """Stable child seed for a named sub-stream."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _apply_threads(args):
    global _THREAD_LIMITER
    n = getattr(args, "threads", None)
    if n is None:
        env = os.environ.get("TUBECOMPLETE_THREADS")
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    try:
        from threadpoolctl import threadpool_limits
        _THREAD_LIMITER = threadpool_limits(limits=n)
    except ImportError:
        if n == 1:
            print("warning: threadpoolctl unavailable, BLAS thread cap not applied",
                  file=sys.stderr)


def _load_doc(args, overrides):
    return cfgmod.load_run_config(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    overrides = {"dataset": {}}
    if args.points is not None:
        overrides["dataset"]["points"] = args.points
    doc = _load_doc(args, overrides)
    tree_doc = doc["dataset"]["tree"]
    if args.tree_spec is not None:
        with open(args.tree_spec, "r", encoding="utf-8") as fh:
            tree_doc = {**tree_doc, **json.load(fh)}
    points = doc["dataset"]["points"]

    os.makedirs(args.out, exist_ok=True)
    patient_ids = [f"p{p:03d}" for p in range(args.patients)]
    for p, pid in enumerate(patient_ids):
        gt = spec = None
        for attempt in range(_SYNTH_RETRY_CAP):
            spec = cfgmod.tree_spec(
                {"dataset": {**doc["dataset"], "tree": tree_doc}},
                seed=_derive_seed(args.seed, 2, p, attempt),
            )
            aorta, coronary = synth_vessel_tree(spec)
            gt = build_ground_truth(aorta, coronary, points,
                                    np.random.default_rng([args.seed, 3, p, attempt]))
            if int((gt.labels == 1).sum()) >= _MIN_TRUNK_POINTS:
                break
        else:
            raise DataError(
                f"patient {pid}: no tree with >= {_MIN_TRUNK_POINTS} trunk "
                f"points in {_SYNTH_RETRY_CAP} attempts"
            )
        pdir = os.path.join(args.out, pid)
        os.makedirs(pdir, exist_ok=True)
        save_cloud(gt, os.path.join(pdir, "gt.tpc"))
        meta = {"patient_id": pid, "points": points,
                "tree_spec": spec.to_dict(), "cases": []}
        with open(os.path.join(pdir, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)
            fh.write("\n")

    frac = doc["dataset"]["split"]
    n_train = int(round(args.patients * frac["train"]))
    n_val = int(round(args.patients * frac["val"]))
    n_train = min(n_train, args.patients)
    n_val = min(n_val, args.patients - n_train)
    splits = {
        "train": patient_ids[:n_train],
        "val": patient_ids[n_train:n_train + n_val],
        "test": patient_ids[n_train + n_val:],
    }
    spec_echo = {"points": points, "seed": args.seed,
                 "patients": args.patients, "tree": tree_doc}
    write_manifest(args.out, splits, spec_echo)
    print(f"wrote {args.patients} patients under {args.out}")
    return 0


# ---------------------------------------------------------------------------
# fracture
# ---------------------------------------------------------------------------

def _fracture_overrides(args):
    over = {}
    for key, val in (("min_ratio", args.min_ratio), ("max_ratio", args.max_ratio),
                     ("min_break", args.min_break), ("max_break", args.max_break),
                     ("retry_limit", args.retry_limit)):
        if val is not None:
            over[key] = val
    return {"dataset": {"fracture": over}} if over else {}


def cmd_fracture(args) -> int:
    doc = _load_doc(args, _fracture_overrides(args))
    cases = args.cases if args.cases is not None else doc["dataset"]["cases_per_patient"]
    in_path = args.inp
    if os.path.isdir(in_path):
        manifest = load_manifest(in_path)
        pids = sorted(set(sum(manifest["splits"].values(), [])))
        for pi, pid in enumerate(pids):
            gt = load_cloud(os.path.join(in_path, pid, "gt.tpc"))
            spec = cfgmod.fracture_spec(doc, seed=_derive_seed(args.seed, 4, pi))
            records = generate_cases(gt, cases, spec, patient_id=pid)
            write_patient(args.out, pid, gt, records)
        if os.path.abspath(args.out) != os.path.abspath(in_path):
            write_manifest(args.out, manifest["splits"], manifest.get("spec", {}))
        print(f"fractured {len(pids)} patients x {cases} cases into {args.out}")
        return 0
    gt = load_cloud(in_path)
    pid = os.path.basename(os.path.normpath(args.out))
    spec = cfgmod.fracture_spec(doc, seed=args.seed)
    records = generate_cases(gt, cases, spec, patient_id=pid)
    parent = os.path.dirname(os.path.normpath(args.out)) or "."
    write_patient(parent, pid, gt, records)
    print(f"wrote {cases} cases into {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = {"train": {}}
    if args.epochs is not None:
        overrides["train"]["epochs"] = args.epochs
    if args.lr is not None:
        overrides["train"]["lr"] = args.lr
    if args.seed is not None:
        overrides["train"]["seed"] = args.seed
    doc = _load_doc(args, overrides)
    log_path = args.log if args.log is not None else args.out + ".log.csv"
    train_model(args.data, doc, args.out, log_path=log_path,
                resume=args.resume, quiet=args.quiet)
    print(f"checkpoint: {args.out}\nloss log:   {log_path}")
    return 0


# ---------------------------------------------------------------------------
# complete
# ---------------------------------------------------------------------------

def cmd_complete(args) -> int:
    mcfg, params, _ck = load_model_checkpoint(args.model)
    cloud = load_cloud(args.inp)
    out = complete_cloud(cloud, mcfg, params)
    save_cloud(out, args.out)
    print(f"completed {len(cloud)} -> {len(out)} points: {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval / report / sweep
# ---------------------------------------------------------------------------

def _gt_patients(gt_root):
    manifest_path = os.path.join(gt_root, "dataset.json")
    if os.path.exists(manifest_path):
        manifest = load_manifest(gt_root)
        return sorted(set(sum(manifest["splits"].values(), [])))
    pids = [d for d in sorted(os.listdir(gt_root))
            if os.path.exists(os.path.join(gt_root, d, "gt.tpc"))]
    if not pids:
        raise DataError(f"{gt_root}: no patient directories with gt.tpc found")
    return pids


def _patient_cases(gt_root, pid):
    """Case indices and severities from meta.json; [] when absent."""
    meta_path = os.path.join(gt_root, pid, "meta.json")
    if not os.path.exists(meta_path):
        return []
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return [(int(c["case_index"]), float(c["removed_ratio"]))
            for c in meta.get("cases", [])]


def cmd_eval(args) -> int:
    overrides = {"eval": {}}
    if args.tau is not None:
        overrides["eval"]["tau"] = args.tau
    if args.coronary_only is not None:
        overrides["eval"]["coronary_only"] = args.coronary_only
    doc = _load_doc(args, overrides)
    ecfg = cfgmod.eval_config(doc)

    rows = []
    unmatched = []
    for pid in _gt_patients(args.gt):
        gt = load_cloud(os.path.join(args.gt, pid, "gt.tpc"))
        cases = _patient_cases(args.gt, pid)
        if not cases:
            pred_path = _first_existing(
                os.path.join(args.pred, pid, "completed.tpc"),
                os.path.join(args.pred, pid, "gt.tpc"),
            )
            if pred_path is None:
                unmatched.append(pid)
                continue
            rows.append(evaluate_case(load_cloud(pred_path), gt, ecfg,
                                      case_id=pid))
            continue
        for k, severity in cases:
            case_id = f"{pid}/case_{k}"
            pred_path = _first_existing(
                os.path.join(args.pred, pid, f"completed_{k}.tpc"),
                os.path.join(args.pred, pid, "gt.tpc"),
            )
            if pred_path is None:
                unmatched.append(case_id)
                continue
            inp = load_cloud(os.path.join(args.gt, pid, f"case_{k}.tpc"))
            rows.append(evaluate_case(load_cloud(pred_path), gt, ecfg,
                                      input_cloud=inp, case_id=case_id,
                                      severity=severity))
    if unmatched:
        print("unmatched case ids:", file=sys.stderr)
        for cid in unmatched:
            print(f"  {cid}", file=sys.stderr)
        return 4
    report = aggregate(rows, ecfg.to_dict())
    render_report([("all", report)], args.out,
                  svg_path=args.svg, json_path=_json_sibling(args.out))
    print(f"evaluated {len(rows)} cases -> {args.out}")
    mean, std = report.mean, report.std
    print(f"cd_l1(1e-3) {mean['cd_l1']:.3f}+-{std['cd_l1']:.3f}  "
          f"f1(%) {mean['f1']:.2f}+-{std['f1']:.2f}  "
          f"fidelity(1e-3) {mean['fidelity']:.3f}+-{std['fidelity']:.3f}")
    return 0


def _first_existing(*paths):
    for p in paths:
        if os.path.exists(p):
            return p
    return None


def _json_sibling(csv_path):
    base, _ext = os.path.splitext(csv_path)
    return base + ".json"


def cmd_report(args) -> int:
    rows = read_csv(args.inp)
    if not rows:
        raise DataError(f"{args.inp}: no data rows")
    groups = {}
    for r in rows:
        groups.setdefault(r.severity, []).append(r)
    ordered = sorted(groups.items(), key=lambda kv: (kv[0] is not None, kv[0] or 0.0))
    sections = [("all" if sev is None else f"{sev:g}", aggregate(grp))
                for sev, grp in ordered]
    render_svg(sections, args.svg)
    print(f"chart: {args.svg}")
    return 0


def cmd_sweep(args) -> int:
    doc = _load_doc(args, {})
    ecfg = cfgmod.eval_config(doc)
    ratios = [float(r) for r in args.ratios.split(",") if r]
    if not ratios:
        raise ConfigError("--ratios must list at least one value")

    pids = _gt_patients(args.data)
    manifest_path = os.path.join(args.data, "dataset.json")
    if os.path.exists(manifest_path):
        manifest = load_manifest(manifest_path and args.data)
        pids = manifest["splits"].get(args.split, pids) or pids
    gts = [load_cloud(os.path.join(args.data, pid, "gt.tpc")) for pid in pids]

    if args.model is not None:
        mcfg, params, _ck = load_model_checkpoint(args.model)

        def complete_fn(cloud: PointCloud) -> PointCloud:
            return complete_cloud(cloud, mcfg, params)
    else:
        def complete_fn(cloud: PointCloud) -> PointCloud:
            return cloud  # identity baseline

    template = cfgmod.fracture_spec(doc, seed=args.seed)
    reports = severity_sweep(complete_fn, gts, ratios, template, args.seed, ecfg)
    sections = [(f"{ratio:g}", report) for ratio, report in reports]
    render_report(sections, args.out, svg_path=args.svg,
                  json_path=_json_sibling(args.out))
    for label, report in sections:
        print(f"ratio {label}: cd_l1(1e-3) {report.mean['cd_l1']:.3f}"
              f"+-{report.std['cd_l1']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="JSON run config; flags override its values")
    common.add_argument("--threads", type=int, metavar="N",
                        help="BLAS thread cap (default: TUBECOMPLETE_THREADS "
                             "env var, else library default); 1 gives "
                             "bit-exact reproducibility")

    parser = argparse.ArgumentParser(
        prog="tubecomplete",
        description="Point-cloud completion toolkit for fractured tubular "
                    "structures: dataset synthesis, training, completion "
                    "and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate synthetic patients (ground truths)")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--patients", type=int, default=4, metavar="K",
                   help="number of patients (default 4)")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--points", type=int, default=None, metavar="N",
                   help="points per ground truth (default 4096)")
    p.add_argument("--tree-spec", default=None, metavar="FILE",
                   help="JSON overriding the vessel-tree generator parameters")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fracture", parents=[common],
                       help="generate fractured input cases")
    p.add_argument("--in", dest="inp", required=True, metavar="PATH",
                   help="a gt.tpc file, or a dataset root to fracture wholesale")
    p.add_argument("--cases", type=int, default=None, metavar="M",
                   help="cases per ground truth (default: dataset.cases_per_patient, 8)")
    p.add_argument("--min-ratio", type=float, default=None,
                   help="min removed coronary fraction (default 0.10)")
    p.add_argument("--max-ratio", type=float, default=None,
                   help="max removed coronary fraction (default 0.30)")
    p.add_argument("--min-break", type=int, default=None,
                   help="min break-region count (default 1)")
    p.add_argument("--max-break", type=int, default=None,
                   help="max break-region count (default 3)")
    p.add_argument("--retry-limit", type=int, default=None,
                   help="attempts per break region (default 50)")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_fracture)

    p = sub.add_parser("train", parents=[common], help="train the model")
    p.add_argument("--data", required=True, metavar="DIR",
                   help="dataset root with dataset.json")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--epochs", type=int, default=None,
                   help="training epochs (default 30)")
    p.add_argument("--lr", type=float, default=None,
                   help="Adam learning rate (default 1e-4)")
    p.add_argument("--seed", type=int, default=None,
                   help="init/shuffle seed (default 0)")
    p.add_argument("--log", default=None, metavar="CSV",
                   help="loss log path (default <ckpt>.log.csv)")
    p.add_argument("--resume", action="store_true",
                   help="continue from an existing checkpoint at --out")
    p.add_argument("--quiet", action="store_true",
                   help="suppress per-epoch progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("complete", parents=[common],
                       help="complete a fractured cloud")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--in", dest="inp", required=True, metavar="TPC")
    p.add_argument("--out", required=True, metavar="TPC")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate completions against ground truth")
    p.add_argument("--pred", required=True, metavar="DIR",
                   help="predictions root (completed_<k>.tpc per patient; "
                        "falls back to the patient's gt.tpc)")
    p.add_argument("--gt", required=True, metavar="DIR", help="dataset root")
    p.add_argument("--tau", type=float, default=None,
                   help="F1 distance threshold (default 0.01)")
    p.add_argument("--coronary-only", action=argparse.BooleanOptionalAction,
                   default=None,
                   help="restrict metrics to coronary-labeled points (default on)")
    p.add_argument("--out", required=True, metavar="CSV")
    p.add_argument("--svg", default=None, metavar="SVG",
                   help="also render a bar chart")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common],
                       help="render an SVG chart from an eval CSV")
    p.add_argument("--in", dest="inp", required=True, metavar="CSV")
    p.add_argument("--svg", required=True, metavar="SVG")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", parents=[common],
                       help="evaluate across fixed fracture severities")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset root")
    p.add_argument("--model", default=None, metavar="CKPT",
                   help="checkpoint to evaluate (default: identity baseline)")
    p.add_argument("--ratios", default="0.1,0.2,0.3",
                   help="comma-separated removal ratios (default 0.1,0.2,0.3)")
    p.add_argument("--split", default="test",
                   help="manifest split to sweep (default test)")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--out", required=True, metavar="CSV")
    p.add_argument("--svg", default=None, metavar="SVG")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FractureError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
