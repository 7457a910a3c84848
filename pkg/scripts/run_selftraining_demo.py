"""Run rounds 1 -> 3 of self-training on toy volumes with the stub runner.

    python scripts/run_selftraining_demo.py --workdir /tmp/demo --fake 6 --real 6 --test 4

Prints the manifest sizes per round and a dice/ASSD table for the
ensembled, post-processed predictions on held-out toy cases.
"""
import argparse
import json
import sys
import time
from pathlib import Path

from vsadapt import metrics
from vsadapt.pipeline import SelfTrainingConfig, ensemble_predict, run_self_training
from vsadapt.synthetic import write_pools
from vsadapt.volume import read_nifti

STUB = Path(__file__).resolve().parent / "stub_runner.py"


def run(workdir: Path, n_fake: int, n_real: int, n_test: int, seed: int = 0) -> dict:
    runner = [sys.executable, str(STUB), "{mode}", "{manifest}", "{outdir}", "{variant}"]
    fake, real, _ = write_pools(workdir / "data", n_fake, n_real, seed=seed)
    _, test, truth = write_pools(workdir / "test", 0, n_test, seed=seed + 1)
    cfg = SelfTrainingConfig(augment_seed=seed, created="2022-01-01T00:00:00+00:00")
    result = run_self_training(fake, real, runner, workdir / "runs", cfg)
    preds = ensemble_predict(test, runner, workdir / "runs" / "final", cfg.final_variants, created=cfg.created)
    pairs = {cid: (preds[cid], read_nifti(truth[cid], as_label=True)) for cid in preds}
    report = metrics.metrics_report(pairs)
    report["rounds"] = {r: m.counts() for r, m in result["manifests"].items()}
    return report


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", type=Path, required=True)
    ap.add_argument("--fake", type=int, default=6)
    ap.add_argument("--real", type=int, default=6)
    ap.add_argument("--test", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    t0 = time.perf_counter()
    report = run(args.workdir, args.fake, args.real, args.test, args.seed)
    for r, counts in report["rounds"].items():
        print(f"round {r}: {sum(counts.values())} entries {json.dumps(counts, sort_keys=True)}")
    print(metrics.format_table(report))
    metrics.write_report(report, args.workdir / "report.json")
    print(f"done in {time.perf_counter() - t0:.1f}s, report in {args.workdir / 'report.json'}")


if __name__ == "__main__":
    main()
