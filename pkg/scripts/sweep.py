"""Repeated simulator experiments: soundness and power sweeps.

    python3 scripts/sweep.py null --runs 200 --blocks 20
    python3 scripts/sweep.py planted --runs 50 --blocks 50 --out power.json

Each run uses its own seed (run index plus --seed-offset) for both the
assignment and the simulator, then the classifier pipeline.
"""

import argparse
import json
import logging
import tempfile
import time
from pathlib import Path

from blockaudit.harness import analyze, run_experiment
from blockaudit.model import Action, ExperimentPlan, Treatment
from blockaudit.simulator import SCENARIOS, Simulator, scenario

PLANTED_KEY = "The Watershed Rehab | www.thewatershed.com/Help"
log = logging.getLogger("sweep")


def one_run(workdir: Path, sim: str, blocks: int, size: int, seed: int, samples: int, workers: int):
    (workdir / "rehab.txt").write_text("www.thewatershed.com\n")
    plan = ExperimentPlan(
        id=f"{sim}-{seed}",
        treatments=(Treatment("control"), Treatment("rehab", (Action("visit_url_list", path="rehab.txt"),))),
        block_count=blocks, block_size=size, seed=seed, sim=sim, base_dir=workdir,
    )
    out = run_experiment(plan, Simulator(scenario(sim, seed)), workdir / plan.id)
    m = analyze(out, "transparency", samples=samples, seed=seed, workers=workers)
    top = m.explanation["experimental"][0]["key"]
    return {"seed": seed, "p_upper": m.primary().p_upper, "accuracy": m.accuracy,
            "mode": m.primary().mode.value, "top_feature": top,
            "settings_equal": m.settings["equal"]}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("scenario", choices=SCENARIOS)
    ap.add_argument("--runs", type=int, default=200)
    ap.add_argument("--blocks", type=int, default=20)
    ap.add_argument("--block-size", type=int, default=10)
    ap.add_argument("--samples", type=int, default=10**6)
    ap.add_argument("--alpha", type=float, default=0.05)
    ap.add_argument("--seed-offset", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", help="write per-run results as JSON")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rows = []
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(args.runs):
            seed = args.seed_offset + i
            rows.append(one_run(Path(tmp), args.scenario, args.blocks, args.block_size, seed,
                                args.samples, args.workers))
            if (i + 1) % 10 == 0:
                log.info("%d/%d runs, %.0fs", i + 1, args.runs, time.perf_counter() - t0)

    rejected = [r for r in rows if r["p_upper"] < args.alpha]
    planted_first = sum(r["top_feature"] == PLANTED_KEY for r in rejected)
    print(f"scenario {args.scenario}: k={args.blocks}, m={args.block_size}, {args.runs} runs")
    print(f"rejected at alpha={args.alpha}: {len(rejected)}/{args.runs} ({len(rejected) / args.runs:.1%})")
    if args.scenario in ("planted", "opacity"):
        print(f"planted ad ranked first in {planted_first}/{len(rejected)} rejecting runs")
    print(f"elapsed {time.perf_counter() - t0:.0f}s")
    if args.out:
        Path(args.out).write_text(json.dumps({"args": vars(args), "runs": rows}, indent=2) + "\n")


if __name__ == "__main__":
    main()
