"""Run a case matrix on freshly generated data and print per-scenario metrics.

    python3 scripts/run_matrix.py --cases A-nc,A,C,D \
        --set train.epochs=15 --set frame_stride=2 --out matrix.json

Without --set the full reference schedule is used (slow on one core).
"""
import argparse
import time

from mmcd.config import RunConfig
from mmcd.eval_harness import CaseSpec, run_matrix
from mmcd.sim import generate_dataset, split_dataset


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cases", default="A-nc,A,C,D")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="config override, repeatable (e.g. train.epochs=15)")
    ap.add_argument("--out", help="write the metrics report here as JSON")
    args = ap.parse_args(argv)

    cfg = RunConfig().with_overrides(args.set)
    t0 = time.time()
    datasets = {sc: split_dataset(generate_dataset(sc, cfg.episodes, cfg.data_seed, cfg.sim, cfg.comm),
                                  cfg.train_count) for sc in cfg.scenarios}
    cases = [CaseSpec.parse(c) for c in args.cases.split(",")]
    report, _ = run_matrix(cases, datasets, cfg)
    print(report.table())
    for c in cases:
        m = report.mean_adr(c.key)
        print(f"{c.key:6s} mean ADR " + ("n/a" if m is None else f"{m:.4f}"))
    print(f"{len(cfg.seeds)} seeds, {time.time() - t0:.0f}s")
    if args.out:
        report.write(args.out)


if __name__ == "__main__":
    main()
