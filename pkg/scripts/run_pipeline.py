"""Default end-to-end run: pretrain, both downstream tasks, baselines and reports.

    python3 scripts/run_pipeline.py --out runs/seed0 [--seed 0] [--config my.cfg]

Every step is one ``swr`` CLI call; the list is also what the acceptance
suite replays twice to check byte-identical outputs.
"""
import argparse
import sys
import time

from swr import cli

GRID = "0.1,0.3,0.5,0.7,0.9"


def pipeline_steps(out: str, seed: int = 0, config: str | None = None) -> list[list[str]]:
    common = ["--seed", str(seed)] + (["--config", config] if config else [])
    base = f"{out}/pretrain/f0.ckpt"
    steps = [["pretrain", "--out", f"{out}/pretrain"]]
    for task in ("A", "B"):
        steps += [
            ["supernet", "--base", base, "--task", task, "--out", f"{out}/{task}/supernet"],
            ["train-policy", "--base", base, "--task", task, "--supernet", f"{out}/{task}/supernet/supernet.delta",
             "--out", f"{out}/{task}/policy"],
        ]
    steps += [
        ["transfer", "--base", base, "--task", "A", "--policy", f"{out}/A/policy/policy.ckpt", "--c", GRID,
         "--out", f"{out}/A/swr"],
        ["transfer", "--base", base, "--task", "B", "--policy", f"{out}/B/policy/policy.ckpt", "--c", "0.5",
         "--out", f"{out}/B/swr"],
        ["transfer", "--base", base, "--task", "A", "--method", "classifier-only", "--out", f"{out}/A/classifier"],
    ]
    for task in ("A", "B"):
        steps.append(["transfer", "--base", base, "--task", task, "--method", "finetune-all",
                      "--out", f"{out}/{task}/finetune"])
    steps += [
        ["report-controllability", "--policy", f"{out}/A/policy/policy.ckpt", "--grid", GRID,
         "--out", f"{out}/reports"],
        ["report-policy", "--policy", f"{out}/A/policy/policy.ckpt", "--c", "0.1,0.3,0.5", "--out", f"{out}/reports"],
        ["report-params", "--base", base, "--records", f"{out}/A/swr/record_0.50.delta",
         f"{out}/B/swr/record_0.50.delta", "--out", f"{out}/reports"],
    ]
    return [[s[0], *common, *s[1:]] for s in steps]


def run_pipeline(out: str, seed: int = 0, config: str | None = None, echo=print) -> None:
    for argv in pipeline_steps(out, seed, config):
        t0 = time.time()
        code = cli.run(argv)
        echo(f"[{time.time() - t0:6.1f}s] swr {' '.join(argv)} -> {code}")
        if code != 0:
            raise SystemExit(f"step failed: swr {' '.join(argv)}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    args = p.parse_args()
    run_pipeline(args.out, args.seed, args.config)


if __name__ == "__main__":
    sys.exit(main())
