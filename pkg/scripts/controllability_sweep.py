"""Policy nets at several lambda values and both cost weightings, on one super-net.

    python3 scripts/controllability_sweep.py --run runs/seed0 --out runs/sweep [--lams 0,1,3,10]

Expects a finished ``run_pipeline.py`` directory. For each (r weighting, lambda)
it trains a policy, then writes the target-vs-achieved table and the per-kind
selection summary, so the depthwise preference under param-weighted vs equal
cost can be compared. Prints one line per setting.
"""
import argparse
import csv
from pathlib import Path

from swr import cli
from swr.config import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--run", required=True, help="output directory of run_pipeline.py")
    p.add_argument("--out", required=True)
    p.add_argument("--task", default="A")
    p.add_argument("--lams", default="0,1,3,10")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    run, out = Path(args.run), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = str(run / "pretrain/f0.ckpt")
    supernet = str(run / args.task / "supernet/supernet.delta")
    for mode in ("param-weighted", "equal"):
        for lam in (float(v) for v in args.lams.split(",")):
            tag = out / f"{mode}_lam{lam:g}"
            tag.mkdir(exist_ok=True)
            cfg = tag / "run.cfg"
            cfg.write_text(TrainConfig(seed=args.seed, lam=lam, r_mode=mode).to_text())
            common = ["--config", str(cfg)]
            steps = [
                ["train-policy", *common, "--base", base, "--task", args.task, "--supernet", supernet,
                 "--out", str(tag)],
                ["report-controllability", *common, "--policy", str(tag / "policy.ckpt"), "--out", str(tag)],
                ["report-policy", *common, "--policy", str(tag / "policy.ckpt"), "--c", "0.1,0.3,0.5",
                 "--out", str(tag)],
            ]
            for argv in steps:
                if cli.run(argv) != 0:
                    raise SystemExit(f"step failed: swr {' '.join(argv)}")
            with open(tag / "controllability.csv", newline="") as fh:
                worst = max(float(r["abs_error"]) for r in csv.DictReader(fh))
            with open(tag / "policy_kinds.csv", newline="") as fh:
                dw = [r for r in csv.DictReader(fh) if r["kind"] == "depthwise" and r["c"] == "0.300000"]
            print(f"{mode:>14} lam={lam:<5g} worst |achieved - c| {worst:.3f}  "
                  f"depthwise selected at c=0.3: {float(dw[0]['selected_fraction']):.2f}")


if __name__ == "__main__":
    main()
