"""Correction tables from reference p-values, plus an optional rerun.

    python3 scripts/reproduce_tables.py            # corrections only
    python3 scripts/reproduce_tables.py --run out/ # also run plans/*.cfg

The first part feeds the reference unadjusted p-values through the same
family summary the CLI uses. With --run, every example plan is run
against its simulator and analyzed, and the resulting manifests are
summarized as one family per preset.
"""

import argparse
from pathlib import Path

from blockaudit.harness import RunManifest, StatisticMode, analyze, run_experiment, summarize_family
from blockaudit.model import load_plan
from blockaudit.simulator import Simulator, load_config
from blockaudit.stats import Direction, Mode, TestResult

ROOT = Path(__file__).resolve().parent.parent

DISCRIMINATION = [("Gender, jobs, TOI May", 0.0000053, 0.93), ("Gender, jobs, Guardian July", 0.12, 0.57),
                  ("Gender, jobs + top 10, TOI July", 0.14, 0.56), ("Gender, jobs, TOI July", 0.20, 0.55),
                  ("Gender, TOI May", 0.77, 0.48)]
TRANSPARENCY = [("Substance abuse, TOI May", 0.0000053, 0.81), ("Substance abuse, TOI July", 0.0000053, 0.98),
                ("Substance abuse + top 10, TOI July", 0.0000053, 0.65), ("Disability, TOI May", 0.0000053, 0.75),
                ("Substance abuse, Guardian July", 0.0075, 0.62), ("Mental disorder, TOI May", 0.053, 0.59),
                ("Infertility, TOI May", 0.11, 0.57), ("Adult websites, TOI May", 0.42, 0.52)]
EFFECTFUL = [("Opting out", 0.0000053, 0.83), ("Dating (May)", 0.0000053, 0.74),
             ("Weight Loss (May)", 0.041, 0.60), ("Dating (July)", 0.070, 0.59),
             ("Weight Loss (July)", 0.41, 0.52)]
AD_CHOICE = [("Dating", 0.0076, 0.9970), ("Weight Loss (2)", 0.18, 0.9371), ("Weight Loss (1)", 0.72, 0.3818)]


def _result(p, direction=Direction.GREATER_EQUAL):
    return TestResult(0.0, 0, 10**6, Mode.SAMPLED, p, p, direction)


def reference_families():
    one_sided = StatisticMode.CLASSIFIER_ACCURACY.value
    fams = {
        name: [RunManifest(n, preset, one_sided, 0, 10**6, 0, "", (_result(p),), accuracy=a) for n, p, a in rows]
        for name, preset, rows in [("discrimination", "nondiscrimination", DISCRIMINATION),
                                   ("transparency", "transparency", TRANSPARENCY),
                                   ("effectful choice", "effectful-choice", EFFECTFUL)]
    }
    kw = []
    for n, p, q in AD_CHOICE:
        results = (_result(p), _result(q, Direction.FLIPPED))
        kw.append(RunManifest(n, "ad-choice", StatisticMode.KEYWORD_COUNT.value, 0, 10**6, 0, "", results,
                              corrections={"bonferroni": {"ge": 2 * p, "flipped": 2 * q}, "bonferroni_h": 2}))
    fams["ad choice"] = kw
    return fams


PRESET_BY_PLAN = {"substance": "transparency", "opacity": "transparency", "dating": "ad-choice",
                  "gender": "nondiscrimination", "null": "nondiscrimination"}


def rerun(out_dir: Path, samples: int):
    by_preset: dict[str, list] = {}
    for path in sorted((ROOT / "plans").glob("*.cfg")):
        plan = load_plan(path)
        preset = PRESET_BY_PLAN.get(plan.id, "nondiscrimination")
        logs = run_experiment(plan, Simulator(load_config(plan.sim, plan.seed, plan.base_dir)), out_dir / plan.id)
        m = analyze(logs, preset, samples=samples, seed=plan.seed)
        (out_dir / f"{plan.id}.manifest.json").write_text(m.dumps())
        by_preset.setdefault(preset, []).append(m)
    for preset, ms in sorted(by_preset.items()):
        print(f"\n== {preset} (simulated) ==")
        print(summarize_family(ms).render(), end="")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run", metavar="DIR", help="also run plans/*.cfg and write logs and manifests here")
    ap.add_argument("--samples", type=int, default=10**6)
    args = ap.parse_args()
    for name, ms in reference_families().items():
        print(f"== {name} (reference p-values) ==")
        print(summarize_family(ms).render())
    if args.run:
        out = Path(args.run)
        out.mkdir(parents=True, exist_ok=True)
        rerun(out, args.samples)


if __name__ == "__main__":
    main()
