"""Command-line entry point: ``python -m swr <command> ...``.

Every command writes into ``--out DIR`` through temp-file-and-rename,
re-reads what it wrote, and exits 0 only if all of it validates.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import container
from . import data as datamod
from . import trainer as T
from .backbone import count_mults, load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .costmodel import (CostWeights, achieved_cost, compute_r, controllability_tolerance,
                        discreteness_gap, head_count, mult_ratio, multitask_param_ratio,
                        report_csv, swr_task_count, task_specific_count)
from .policynet import PolicyNet, binarize, forward_probs, load_policy, save_policy
from .reparam import apply_record, load_record, merge_export, model_from_record, save_record

log = logging.getLogger("swr")

COMMANDS = ("gen-data", "pretrain", "supernet", "train-policy", "transfer", "eval", "merge",
            "report-controllability", "report-policy", "report-params", "ablate")


class CommandError(Exception):
    pass


# formatting and validated output ------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v


def csv_text(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def _validate_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise container.FormatError(f"{path}: ragged or empty CSV")


_LOADERS = {
    container.CKPT_MAGIC: lambda p: container.load(p, container.CKPT_MAGIC),
    container.DELTA_MAGIC: load_record,
    container.DATA_MAGIC: datamod.load_dataset,
}


def _validate(path: Path):
    if path.suffix == ".csv":
        _validate_csv(path)
        return
    magic = container.peek_magic(path)
    if magic not in _LOADERS:
        raise container.FormatError(f"{path}: unknown magic {magic!r}")
    _LOADERS[magic](path)


class Outputs:
    """Collects the files a command writes so they can be validated at the end."""

    def __init__(self, out: str):
        self.dir = Path(out)
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.written.append(p)
        return p

    def text(self, name: str, payload: str) -> Path:
        p = self.path(name)
        container.atomic_write(p, payload)
        return p

    def validate(self):
        for p in self.written:
            _validate(p)


# shared loading -----------------------------------------------------------------

def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise CommandError(f"file not found: {p}")


def _dataset(cfg: TrainConfig, args) -> datamod.Dataset:
    if getattr(args, "data", None):
        _require(args.data)
        return datamod.load_dataset(args.data)
    return T.load_task(cfg, args.task)


def _c_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CommandError(f"bad cost list {text!r}") from None
    if not values or any(not 0.0 <= v <= 1.0 for v in values):
        raise CommandError(f"costs must lie in [0, 1], got {text!r}")
    return values


def _ctag(c: float) -> str:
    return f"{c:.2f}"


def _load_base(path):
    _require(path)
    bb, heads, _ = load_checkpoint(path)
    return bb, heads


def policy_meta(base, r: CostWeights, task: str, num_classes: int) -> dict:
    return {
        "task": task,
        "num_classes": num_classes,
        "num_features": base.config.num_features,
        "base_fingerprint": base.fingerprint(),
        "r_mode": r.mode,
        "r": [float(x) for x in r.r],
        "layers": [{"index": s.index, "name": s.name, "kind": s.kind, "param_count": s.param_count}
                   for s in base.eligible],
        "storage_count": base.storage_count(),
        "bn_stat_count": base.bn_stat_count(),
        "affine_count": base.affine_count(),
    }


def _load_policy(path):
    _require(path)
    net, meta = load_policy(path)
    for key in ("r", "layers", "storage_count"):
        if key not in meta:
            raise container.FormatError(f"{path}: policy checkpoint lacks '{key}'")
    return net, meta, CostWeights(np.asarray(meta["r"], dtype=np.float64), meta.get("r_mode", "param-weighted"))


def _param_ratio(meta: dict, bits, bn_mode: str = "stats-only") -> float:
    affine = meta["affine_count"] if bn_mode == "stats-and-affine" else 0
    n = swr_task_count([l["param_count"] for l in meta["layers"]], bits, meta["bn_stat_count"],
                       head_count(meta["num_features"], meta["num_classes"]), affine)
    return (meta["storage_count"] + n) / meta["storage_count"]


# commands -----------------------------------------------------------------------

def cmd_gen_data(args, cfg, out: Outputs):
    tasks = T.TASKS if args.task == "all" else (args.task,)
    for task in tasks:
        ds = T.load_task(cfg, task)
        p = out.path(f"{task}.data")
        datamod.save_dataset(p, ds)
        print(f"{task}: {', '.join(f'{s}={ds.size(s)}' for s in datamod.SPLITS)} -> {p}")


def cmd_pretrain(args, cfg, out: Outputs):
    ds = _dataset(cfg, args)
    f0, head, run, acc = T.pretrain_source(cfg, ds)
    save_checkpoint(out.path("f0.ckpt"), f0, {args.task: head}, {"test_accuracy": acc})
    out.text("pretrain.csv", run.to_csv())
    out.text("metrics.csv", csv_text([{"task": args.task, "split": "test", "accuracy": acc}],
                                     ("task", "split", "accuracy")))
    print(f"source test accuracy {acc:.4f}")


def cmd_supernet(args, cfg, out: Outputs):
    f0, _ = _load_base(args.base)
    ds = _dataset(cfg, args)
    model, run = T.stage1a_train_supernet(f0, ds, cfg)
    _, rec = _merge_supernet(model, args.task)
    save_record(out.path("supernet.delta"), rec)
    out.text("supernet.csv", run.to_csv())
    acc = T.accuracy(model, ds, "test")
    out.text("metrics.csv", csv_text([{"task": args.task, "split": "test", "accuracy": acc}],
                                     ("task", "split", "accuracy")))
    print(f"super-net test accuracy {acc:.4f}")


def _merge_supernet(model, task):
    return merge_export(model, np.ones(model.num_layers, dtype=np.int64), task=task, achieved_cost=1.0)


def _supernet_for(args, cfg, f0, ds):
    if args.supernet:
        _require(args.supernet)
        return model_from_record(f0, load_record(args.supernet))
    model, _ = T.stage1a_train_supernet(f0, ds, cfg)
    return model


def cmd_train_policy(args, cfg, out: Outputs):
    f0, _ = _load_base(args.base)
    ds = _dataset(cfg, args)
    supernet = _supernet_for(args, cfg, f0, ds)
    r = compute_r(f0, cfg.r_mode)
    net, run = T.stage1b_train_policynet(supernet, ds, cfg, r)
    save_policy(out.path("policy.ckpt"), net, policy_meta(f0, r, args.task, ds.spec.num_classes))
    out.text("policy.csv", run.to_csv())
    rows = _controllability_rows(net, policy_meta(f0, r, args.task, ds.spec.num_classes), r, cfg.c_grid)
    print(f"worst |achieved - c| over grid: {max(row['abs_error'] for row in rows):.4f}")


METRIC_COLUMNS = ("task", "method", "c", "achieved_cost", "param_ratio", "mult_ratio", "accuracy")


def cmd_transfer(args, cfg, out: Outputs):
    f0, _ = _load_base(args.base)
    ds = _dataset(cfg, args)
    rows = []
    if args.method == "swr":
        if not args.policy:
            raise CommandError("transfer --method swr needs --policy")
        net, meta, r = _load_policy(args.policy)
        if meta["base_fingerprint"] != f0.fingerprint():
            raise CommandError("policy was trained against a different base checkpoint")
        for c in _c_list(args.c):
            res = T.stage2_reparam_train(f0, net, c, ds, cfg, r=r, bn_mode=cfg.bn_mode)
            rows.append(_emit_transfer(out, f0, res, args.task, "swr", c, _ctag(c)))
    else:
        fn = T.baseline_classifier_only if args.method == "classifier-only" else T.baseline_finetune_all
        res = fn(f0, ds, cfg)
        rows.append(_emit_transfer(out, f0, res, args.task, args.method, None, args.method))
    out.text("metrics.csv", csv_text(rows, METRIC_COLUMNS))
    for row in rows:
        label = row["method"] if row["c"] == "" else f"{row['method']} c={row['c']}"
        print(f"{label}: accuracy {row['accuracy']:.4f}, "
              f"achieved cost {row['achieved_cost']:.4f}, param ratio {row['param_ratio']:.4f}")


def _emit_transfer(out: Outputs, f0, res, task, method, c, tag):
    save_record(out.path(f"record_{tag}.delta"), res.record)
    save_checkpoint(out.path(f"merged_{tag}.ckpt"), res.backbone, {task: res.head})
    out.text(f"run_{tag}.csv", res.run.to_csv())
    return {
        "task": task, "method": method, "c": "" if c is None else c,
        "achieved_cost": res.achieved_cost,
        "param_ratio": multitask_param_ratio(f0, [res.record]),
        "mult_ratio": mult_ratio(res.backbone, f0),
        "accuracy": res.accuracy,
    }


def cmd_eval(args, cfg, out: Outputs):
    f0, heads = _load_base(args.base)
    ds = _dataset(cfg, args)
    if args.record:
        _require(args.record)
        bb, head = apply_record(f0, load_record(args.record))
    else:
        if args.task not in heads:
            raise CommandError(f"checkpoint has no head for task {args.task!r}; pass --record")
        bb, head = f0, heads[args.task]
    rows = [{"task": args.task, "split": split, "accuracy": T.accuracy(lambda x: head(bb.forward(x)), ds, split)}
            for split in args.splits.split(",")]
    out.text("eval.csv", csv_text(rows, ("task", "split", "accuracy")))
    for row in rows:
        print(f"{row['split']}: {row['accuracy']:.4f}")


def cmd_merge(args, cfg, out: Outputs):
    f0, _ = _load_base(args.base)
    _require(args.record)
    rec = load_record(args.record)
    bb, head = apply_record(f0, rec)
    p = out.path(args.name)
    save_checkpoint(p, bb, {rec.task or "task": head})
    print(f"merged {rec.kind} record -> {p} (mult ratio {mult_ratio(bb, f0):.6f})")


def _controllability_rows(net: PolicyNet, meta: dict, r: CostWeights, grid) -> list[dict]:
    tol = controllability_tolerance(r)
    rows = []
    for c in grid:
        bits = binarize(net, c)
        cost = achieved_cost(bits, r)
        rows.append({"c": c, "achieved_cost": cost, "param_ratio": _param_ratio(meta, bits),
                     "abs_error": abs(cost - c), "discreteness_gap": discreteness_gap(r, c),
                     "tolerance": tol, "within_tolerance": int(abs(cost - c) <= tol)})
    return rows


CONTROL_COLUMNS = ("c", "achieved_cost", "param_ratio", "abs_error", "discreteness_gap", "tolerance",
                   "within_tolerance")


def cmd_report_controllability(args, cfg, out: Outputs):
    net, meta, r = _load_policy(args.policy)
    rows = _controllability_rows(net, meta, r, _c_list(args.grid))
    out.text("controllability.csv", csv_text(rows, CONTROL_COLUMNS))
    for row in rows:
        print(f"c={row['c']:.2f} achieved={row['achieved_cost']:.4f} param_ratio={row['param_ratio']:.4f}")


def _bit_column(c: float) -> str:
    return f"bit_c{_ctag(c)}"


def policy_table(net: PolicyNet, meta: dict, c_values) -> list[dict]:
    """Per eligible layer: index, name, kind, N(w_l), r_l and the deployed bit at each c."""
    bits = {c: binarize(net, c) for c in c_values}
    rows = []
    for i, layer in enumerate(meta["layers"]):
        row = {"index": layer["index"], "name": layer["name"], "kind": layer["kind"],
               "param_count": layer["param_count"], "r": meta["r"][i]}
        row.update({_bit_column(c): int(bits[c][i]) for c in c_values})
        rows.append(row)
    return rows


def report_policy_kind_summary(table: list[dict]) -> list[dict]:
    """Per c and layer kind: fraction of layers selected and their share of selected parameters.

    ``selected_fraction`` counts layers; ``param_share`` is the kind's part of
    all selected parameters at that c (0 when nothing is selected).
    """
    bit_cols = [k for k in (table[0] if table else {}) if k.startswith("bit_c")]
    kinds = sorted({row["kind"] for row in table})
    out = []
    for col in bit_cols:
        total_selected = sum(row["param_count"] for row in table if row[col])
        for kind in kinds:
            rows = [row for row in table if row["kind"] == kind]
            sel = [row for row in rows if row[col]]
            sel_params = sum(row["param_count"] for row in sel)
            out.append({"c": float(col[len("bit_c"):]), "kind": kind, "layers": len(rows), "selected": len(sel),
                        "selected_fraction": len(sel) / len(rows),
                        "param_share": sel_params / total_selected if total_selected else 0.0})
    return out


KIND_COLUMNS = ("c", "kind", "layers", "selected", "selected_fraction", "param_share")
EXPORT_COLUMNS = ("c", "achieved_cost", "bits", "layer_indices", "probabilities")


def policy_export_rows(net: PolicyNet, meta: dict, r: CostWeights, c_values) -> list[dict]:
    """One row per c: the deployed bit string, selected layer indices and P(bit=1) per layer."""
    rows = []
    for c in c_values:
        bits = binarize(net, c)
        probs = forward_probs(net, c, 1.0).data[:, 0]
        rows.append({
            "c": c,
            "achieved_cost": achieved_cost(bits, r),
            "bits": "".join(str(int(b)) for b in bits),
            "layer_indices": ";".join(str(l["index"]) for l, b in zip(meta["layers"], bits) if b),
            "probabilities": ";".join(f"{p:.6f}" for p in probs),
        })
    return rows


def cmd_report_policy(args, cfg, out: Outputs):
    net, meta, r = _load_policy(args.policy)
    cs = _c_list(args.c)
    table = policy_table(net, meta, cs)
    out.text("policy_table.csv", csv_text(table, ("index", "name", "kind", "param_count", "r",
                                                  *[_bit_column(c) for c in cs])))
    summary = report_policy_kind_summary(table)
    out.text("policy_kinds.csv", csv_text(summary, KIND_COLUMNS))
    out.text("policy_export.csv", csv_text(policy_export_rows(net, meta, r, cs), EXPORT_COLUMNS))
    for row in summary:
        print(f"c={row['c']:.2f} {row['kind']:<10} selected {row['selected']}/{row['layers']}")


def cmd_report_params(args, cfg, out: Outputs):
    f0, _ = _load_base(args.base)
    _require(*args.records)
    records = [load_record(p) for p in args.records]
    r = compute_r(f0, cfg.r_mode)
    rows = []
    for rec in records:
        bb, head = apply_record(f0, rec)
        rows.append({"task": rec.task, "c": "" if rec.c is None else rec.c,
                     "achieved_cost": achieved_cost(rec.bits, r) if rec.kind == "swr" else rec.achieved_cost,
                     "param_ratio": multitask_param_ratio(f0, [rec]),
                     "mult_ratio": count_mults(bb, head=head) / count_mults(f0, head=head)})
    rows.append({"task": "all", "c": "", "achieved_cost": "",
                 "param_ratio": multitask_param_ratio(f0, records),
                 "mult_ratio": max(row["mult_ratio"] for row in rows) if rows else 1.0})
    out.text("params.csv", report_csv(rows))
    detail = [{"task": rec.task, "kind": rec.kind, "predicted": task_specific_count(f0, rec),
               "stored": sum(a.size for _, a in rec.tensors())} for rec in records]
    out.text("params_census.csv", csv_text(detail, ("task", "kind", "predicted", "stored")))
    print(f"total param ratio {rows[-1]['param_ratio']:.6f} over {len(records)} task(s)")


ABLATE_COLUMNS = ("c", "two_stage", "not_staged", "bn_affine", "supernet_init",
                  "two_stage_cost", "not_staged_cost", "zero_init_start_loss", "supernet_init_start_loss")


def cmd_ablate(args, cfg, out: Outputs):
    f0, _ = _load_base(args.base)
    ds = _dataset(cfg, args)
    cs = _c_list(args.c)
    r = compute_r(f0, cfg.r_mode)
    supernet = _supernet_for(args, cfg, f0, ds)
    if args.policy:
        net, _, r = _load_policy(args.policy)
    else:
        net, _ = T.stage1b_train_policynet(supernet, ds, cfg, r)
    coopt, _, _ = T.ablation_cooptimize(f0, ds, cfg, cs, r)
    rows = []
    for c in cs:
        two = T.stage2_reparam_train(f0, net, c, ds, cfg, r=r)
        aff = T.ablation_bn_affine(f0, net, c, ds, cfg)
        sup = T.ablation_supernet_init(f0, supernet, net, c, ds, cfg)
        rows.append({"c": c, "two_stage": two.accuracy, "not_staged": coopt[c].accuracy,
                     "bn_affine": aff.accuracy, "supernet_init": sup.accuracy,
                     "two_stage_cost": two.achieved_cost, "not_staged_cost": coopt[c].achieved_cost,
                     "zero_init_start_loss": two.run.start_loss, "supernet_init_start_loss": sup.run.start_loss})
    out.text("ablation.csv", csv_text(rows, ABLATE_COLUMNS))
    for row in rows:
        print(f"c={row['c']:.2f} two-stage {row['two_stage']:.4f} not-staged {row['not_staged']:.4f} "
              f"+bn-affine {row['bn_affine']:.4f} +supernet-init {row['supernet_init']:.4f}")


# parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value training config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    def task_flag(p, default="A", choices=T.TASKS):
        p.add_argument("--task", default=default, choices=choices)
        p.add_argument("--data", help="dataset dump to use instead of generating the task")

    parser = argparse.ArgumentParser(prog="swr", description="Cost-controllable weight reparametrization transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="dump synthetic task datasets")
    p.add_argument("--task", default="all", choices=("all", *T.TASKS))

    p = sub.add_parser("pretrain", parents=[common], help="train f0 on the source task")
    task_flag(p, "source")

    p = sub.add_parser("supernet", parents=[common], help="stage 1a: all-deltas super-net")
    p.add_argument("--base", required=True)
    task_flag(p)

    p = sub.add_parser("train-policy", parents=[common], help="stage 1b: policy net against a frozen super-net")
    p.add_argument("--base", required=True)
    p.add_argument("--supernet", help="super-net record; trained on the fly when omitted")
    task_flag(p)

    p = sub.add_parser("transfer", parents=[common], help="stage 2 at one or more costs, or a baseline")
    p.add_argument("--base", required=True)
    p.add_argument("--policy")
    p.add_argument("--c", default="0.5", help="cost or comma-separated costs in [0, 1]")
    p.add_argument("--method", default="swr", choices=("swr", "classifier-only", "finetune-all"))
    task_flag(p)

    p = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint head or a task record")
    p.add_argument("--base", required=True)
    p.add_argument("--record")
    p.add_argument("--splits", default="test")
    task_flag(p)

    p = sub.add_parser("merge", parents=[common], help="bake a task record into a standalone checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--name", default="merged.ckpt")

    p = sub.add_parser("report-controllability", parents=[common], help="target vs achieved cost CSV")
    p.add_argument("--policy", required=True)
    p.add_argument("--grid", default="0.1,0.3,0.5,0.7,0.9")

    p = sub.add_parser("report-policy", parents=[common], help="per-layer policy table and kind summary")
    p.add_argument("--policy", required=True)
    p.add_argument("--c", default="0.1,0.3,0.5")

    p = sub.add_parser("report-params", parents=[common], help="multi-task parameter and multiply ratios")
    p.add_argument("--base", required=True)
    p.add_argument("--records", nargs="+", required=True)

    p = sub.add_parser("ablate", parents=[common], help="two-stage vs not-staged, +bn-affine, +supernet-init")
    p.add_argument("--base", required=True)
    p.add_argument("--policy")
    p.add_argument("--supernet")
    p.add_argument("--c", default="0.1,0.3,0.5")
    task_flag(p)
    return parser


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "supernet": cmd_supernet,
    "train-policy": cmd_train_policy, "transfer": cmd_transfer, "eval": cmd_eval, "merge": cmd_merge,
    "report-controllability": cmd_report_controllability, "report-policy": cmd_report_policy,
    "report-params": cmd_report_params, "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Outputs(args.out)
    try:
        cfg = _config(args)
        HANDLERS[args.command](args, cfg, out)
        out.validate()
    except (CommandError, ValueError, KeyError, OSError, T.TrainingDiverged) as exc:
        print(f"swr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
