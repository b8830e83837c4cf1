"""Command-line entry point: gen, train, distill, eval, selfcheck.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 check failure.
Every command reads an optional JSON config (``--config``) and any number of
``--set section.key=value`` overrides on top of the built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import SCENARIOS, RunConfig
from .distill import train_bce, train_student, train_teacher
from .eval_harness import CaseResult, CaseSpec, Harness, build_report, package_size
from .model import Model
from .observations import ObservationStore, SensorCache
from .sim import generate_dataset, read_dataset, split_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed_list(text: str) -> tuple[int, ...]:
    """``"1..5"`` or ``"1,3,7"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return tuple(range(int(lo), int(hi) + 1))
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use 1..5 or 1,2,3")


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise DataError(f"config file not found: {p}")
        try:
            cfg = RunConfig.from_dict(json.loads(p.read_text()))
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            raise DataError(f"invalid config {p}: {exc}")
    try:
        return cfg.with_overrides(overrides or [])
    except (ValueError, TypeError) as exc:
        raise DataError(f"invalid override: {exc}")


# --- datasets ---------------------------------------------------------------------

def dataset_file(data_dir: Path, scenario: str) -> Path:
    return data_dir / f"{scenario}.jsonl"


def load_datasets(data_dir: str | Path | None, cfg: RunConfig, scenarios=None) -> dict:
    """{scenario: (train episodes, test episodes)} from files, or generated
    in memory from the config when ``data_dir`` is None."""
    scenarios = tuple(scenarios or cfg.scenarios)
    out = {}
    for sc in scenarios:
        if data_dir is None:
            eps = generate_dataset(sc, cfg.episodes, cfg.data_seed, cfg.sim, cfg.comm)
            out[sc] = split_dataset(eps, cfg.train_count)
            continue
        path = dataset_file(Path(data_dir), sc)
        if not path.exists():
            raise DataError(f"dataset not found: {path}")
        eps = read_dataset(path)
        out[sc] = ([e for e in eps if e.split == "train"], [e for e in eps if e.split == "test"])
    return out


def cmd_gen(args, cfg: RunConfig) -> int:
    scenarios = SCENARIOS if args.scenario == "all" else (args.scenario,)
    for sc in scenarios:
        if sc not in SCENARIOS:
            raise DataError(f"unknown scenario {sc!r}; expected one of {', '.join(SCENARIOS)} or all")
    n = cfg.episodes if args.episodes is None else args.episodes
    seed = cfg.data_seed if args.seed is None else args.seed
    if n < 0:
        raise UsageError("--episodes must be >= 0")
    train_count = min(cfg.train_count, n) if args.train_count is None else args.train_count
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}")
    for sc in scenarios:
        train, test = split_dataset(generate_dataset(sc, n, seed, cfg.sim, cfg.comm), train_count)
        manifest = {"scenario": sc, "seed": seed, "episodes_requested": n, "train_count": train_count,
                    "sim": cfg.to_dict()["sim"], "comm": cfg.to_dict()["comm"], "tool_version": __version__}
        try:
            write_dataset(dataset_file(out, sc), train + test, manifest)
        except OSError as exc:
            raise DataError(f"cannot write dataset under {out}: {exc}")
        print(f"{sc}: {len(train)} train + {len(test)} test episodes -> {dataset_file(out, sc)}")
    return EXIT_OK


def _train_store(args, cfg: RunConfig, collaborative: bool) -> ObservationStore:
    data = load_datasets(args.data, cfg, None if args.scenario == "all" else [args.scenario])
    episodes = [e for sc in sorted(data) for e in data[sc][0]]
    if not episodes:
        raise DataError(f"no training episodes found under {args.data}")
    cache = SensorCache(cfg.grid, cfg.lidar, cfg.encoder.keypoints)
    return ObservationStore(episodes, cfg.comm, cfg.encoder, cache, collaborative=collaborative,
                            frame_stride=cfg.frame_stride)


def _checkpoint_meta(cfg: RunConfig, case: str, collaborative: bool, seed: int) -> dict:
    return {"case": case, "collaborative": collaborative, "seed": seed, "config_digest": cfg.digest(),
            "tool_version": __version__}


def cmd_train(args, cfg: RunConfig) -> int:
    case = CaseSpec(args.case, collaborative=not args.non_collaborative)
    if case.case == "D":
        raise UsageError("case D is produced by `distill` from a case C teacher")
    dcfg = replace(cfg.train, seed=args.seed)
    store = _train_store(args, cfg, case.collaborative)
    out = Path(args.out or f"ckpt/{case.key}-s{args.seed}")
    log = out / "train_log.jsonl"
    if case.case == "C":
        model, _ = train_teacher(store, dcfg, cfg.encoder, cfg.fusion, log)
    else:
        model, _ = train_bce(store, case.train_modalities, dcfg, cfg.encoder, cfg.fusion, log)
    model.save(out, _checkpoint_meta(cfg, case.case, case.collaborative, args.seed))
    print(f"case {case.key} seed {args.seed}: checkpoint {out} ({model.digest()[:12]})")
    return EXIT_OK


def _load_model(path: str) -> Model:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise DataError(f"checkpoint not found: {p}")
    try:
        return Model.load(p)
    except (KeyError, ValueError) as exc:
        raise DataError(f"unreadable checkpoint {p}: {exc}")


def cmd_distill(args, cfg: RunConfig) -> int:
    teacher = _load_model(args.teacher)
    if tuple(teacher.modalities) != ("rgb", "lidar"):
        raise DataError(f"teacher {args.teacher} must consume rgb and lidar, got {teacher.modalities}")
    collaborative = not args.non_collaborative
    store = _train_store(args, replace(cfg, encoder=teacher.encoder, fusion=teacher.fusion), collaborative)
    dcfg = replace(cfg.train, seed=args.seed)
    out = Path(args.out or f"ckpt/D{'' if collaborative else '-nc'}-s{args.seed}")
    model, _ = train_student(store, teacher, dcfg, log_path=out / "train_log.jsonl")
    meta = _checkpoint_meta(cfg, "D", collaborative, args.seed)
    meta["teacher_digest"] = teacher.digest()
    model.save(out, meta)
    print(f"student seed {args.seed}: checkpoint {out} ({model.digest()[:12]})")
    return EXIT_OK


def _run_seed(datasets, cfg: RunConfig, cases, seed: int, log_dir):
    harness = Harness(datasets, cfg, log_dir)
    order = sorted(cases, key=lambda c: (c.case == "D", c.key))
    return [harness.run_case(c, [seed]) for c in order]


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.checkpoint:
        return _eval_checkpoint(args, cfg)
    try:
        cases = [CaseSpec.parse(c) for c in args.cases.split(",") if c.strip()]
    except ValueError as exc:
        raise UsageError(str(exc))
    seeds = args.seeds or cfg.seeds
    cfg = replace(cfg, seeds=tuple(seeds))
    datasets = load_datasets(args.data, cfg)
    workers = max(1, int(os.environ.get("MMCD_THREADS", "1")))
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            parts = list(pool.map(_run_seed, *zip(*[(datasets, cfg, cases, s, args.logs) for s in seeds])))
    else:
        parts = [_run_seed(datasets, cfg, cases, s, args.logs) for s in seeds]
    merged = {}
    for part in parts:
        for res in part:
            if res.case.key in merged:
                merged[res.case.key].runs.extend(res.runs)
            else:
                merged[res.case.key] = res
    report = build_report([merged[k] for k in sorted(merged)], cfg)
    _write_report(report, args)
    return EXIT_OK


def _eval_checkpoint(args, cfg: RunConfig) -> int:
    model = _load_model(args.checkpoint)
    cases = [c for c in args.cases.split(",") if c.strip()]
    if len(cases) != 1:
        raise UsageError("--checkpoint evaluates exactly one case (use --case X)")
    case = CaseSpec.parse(cases[0])
    if tuple(model.modalities) != case.test_modalities:
        raise DataError(f"checkpoint {args.checkpoint} consumes {'+'.join(model.modalities)} but case "
                        f"{case.key} tests on {'+'.join(case.test_modalities)}")
    cfg = replace(cfg, encoder=model.encoder, fusion=model.fusion)
    harness = Harness(load_datasets(args.data, cfg), cfg)
    seed = int(json.loads((Path(args.checkpoint) / "manifest.json").read_text())["meta"].get("seed", 0))
    result = CaseResult(case, package_size(case, encoder=cfg.encoder))
    for sc in harness.datasets:
        result.runs.append(harness.evaluate(model, case, sc, seed))
    _write_report(build_report([result], cfg), args)
    return EXIT_OK


def _write_report(report, args) -> None:
    out = Path(args.out)
    try:
        report.write(out)
        if args.csv:
            Path(args.csv).write_text(report.to_csv())
    except OSError as exc:
        raise DataError(f"cannot write report {out}: {exc}")
    print(report.table())
    print(f"report -> {out}")


def cmd_selfcheck(args, cfg: RunConfig) -> int:
    from .selfcheck import run_all
    results = run_all(args.inject)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON RunConfig file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.epochs=20 (repeatable)")
    p = _Parser(prog="mmcd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mmcd {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate scenario datasets")
    g.add_argument("--scenario", default="all", help=f"one of {', '.join(SCENARIOS)} or all")
    g.add_argument("--episodes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--train-count", type=int, help="episodes assigned to the train split")
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a case A, B or C model")
    t.add_argument("--case", required=True, choices=["A", "B", "C", "D"])
    t.add_argument("--data", help="dataset directory (default: generate from config)")
    t.add_argument("--scenario", default="all")
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--non-collaborative", action="store_true")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill", parents=[common], help="distill a teacher into an RGB student")
    d.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    d.add_argument("--data")
    d.add_argument("--scenario", default="all")
    d.add_argument("--seed", type=int, default=1)
    d.add_argument("--non-collaborative", action="store_true")
    d.add_argument("--out")
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", parents=[common], help="run the case matrix and write a report")
    e.add_argument("--cases", "--case", dest="cases", default="A,B,C,D,A-nc,B-nc,C-nc,D-nc",
                   help="comma list; suffix -nc for non-collaborative")
    e.add_argument("--seeds", type=_seed_list)
    e.add_argument("--data")
    e.add_argument("--checkpoint", help="evaluate one trained checkpoint instead of training")
    e.add_argument("--out", default="report.json")
    e.add_argument("--csv")
    e.add_argument("--logs", help="directory for per-run training logs")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selfcheck", parents=[common], help="run built-in correctness checks")
    s.add_argument("--inject", choices=["sqrt_d", "t2"], help="test hook: plant a known bug")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"mmcd: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"mmcd: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
