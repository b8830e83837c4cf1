"""Case A-D experiment matrix, per-frame metrics and canonical reports.

Case  train modalities  test modalities
A     rgb               rgb
B     lidar             lidar
C     rgb + lidar       rgb + lidar
D     rgb + lidar       rgb (distilled student)
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .config import SCENARIOS, EncoderConfig, RunConfig
from .distill import predict, train_bce, train_student, train_teacher
from .encoders import FLOAT_BYTES, keypoint_message_floats
from .model import Model
from .observations import ObservationStore, SensorCache
from .sim import Episode

BOTH = ("rgb", "lidar")
CASE_MODALITIES = {
    "A": (("rgb",), ("rgb",)),
    "B": (("lidar",), ("lidar",)),
    "C": (BOTH, BOTH),
    "D": (BOTH, ("rgb",)),
}
NC_SUFFIX = "-nc"


class NotApplicable(ValueError):
    """Metric undefined for this input (e.g. no ground-truth brake frames)."""


@dataclass(frozen=True)
class CaseSpec:
    case: str
    collaborative: bool = True

    def __post_init__(self):
        if self.case not in CASE_MODALITIES:
            raise ValueError(f"unknown case {self.case!r}; expected one of {sorted(CASE_MODALITIES)}")

    @property
    def train_modalities(self) -> tuple[str, ...]:
        return CASE_MODALITIES[self.case][0]

    @property
    def test_modalities(self) -> tuple[str, ...]:
        return CASE_MODALITIES[self.case][1]

    @property
    def key(self) -> str:
        return self.case if self.collaborative else self.case + NC_SUFFIX

    @classmethod
    def parse(cls, text: str) -> "CaseSpec":
        """``"C"`` -> collaborative C, ``"A-nc"`` -> non-collaborative A."""
        text = text.strip()
        if text.endswith(NC_SUFFIX):
            return cls(text[:-len(NC_SUFFIX)], collaborative=False)
        return cls(text)


# --- metrics ----------------------------------------------------------------

def _as_brake(values) -> np.ndarray:
    arr = np.asarray(list(values))
    if arr.dtype.kind in "US":
        bad = set(arr.tolist()) - {"brake", "drive"}
        if bad:
            raise ValueError(f"actions must be 'brake' or 'drive', got {sorted(bad)}")
        return arr == "brake"
    return arr.astype(bool)


def adr(predictions, labels) -> float:
    """Recall on brake frames."""
    p, y = _as_brake(predictions), _as_brake(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    positives = int(y.sum())
    if positives == 0:
        raise NotApplicable("adr is undefined without ground-truth brake frames")
    return int((p & y).sum()) / positives


def ir(predictions, labels) -> float:
    """Exact-match accuracy over all frames."""
    p, y = _as_brake(predictions), _as_brake(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("ir needs at least one frame")
    return int((p == y).sum()) / p.size


def package_size(case: CaseSpec | str, scale: str = "full", encoder: EncoderConfig | None = None) -> int:
    """Bytes of one collaborator's message for the case's test modalities.

    Non-collaborative runs send nothing, so their package size is 0.
    """
    spec = CaseSpec.parse(case) if isinstance(case, str) else case
    if encoder is None:
        if scale not in ("full", "desk"):
            raise ValueError(f"scale must be 'full' or 'desk', got {scale!r}")
        encoder = EncoderConfig.full_scale() if scale == "full" else EncoderConfig()
    if not spec.collaborative:
        return 0
    floats = 0
    if "rgb" in spec.test_modalities:
        floats += encoder.embed_dim
    if "lidar" in spec.test_modalities:
        floats += keypoint_message_floats(encoder)
    return FLOAT_BYTES * floats


# --- running cases ------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    scenario: str
    adr: float | None
    ir: float
    n_samples: int
    reads: dict[str, int]


@dataclass
class CaseResult:
    case: CaseSpec
    ps_bytes: int
    runs: list[SeedResult] = field(default_factory=list)

    def test_reads(self) -> dict[str, int]:
        total: dict[str, int] = {}
        for r in self.runs:
            for k, v in r.reads.items():
                total[k] = total.get(k, 0) + v
        return total


Datasets = Mapping[str, tuple[Sequence[Episode], Sequence[Episode]]]


class Harness:
    """Shares sensor renders and trained teachers between the cases it runs."""

    def __init__(self, datasets: Datasets, cfg: RunConfig = RunConfig(), log_dir: str | Path | None = None):
        unknown = set(datasets) - set(SCENARIOS)
        if unknown:
            raise ValueError(f"unknown scenarios {sorted(unknown)}")
        self.datasets = {sc: datasets[sc] for sc in sorted(datasets)}
        self.cfg = cfg
        self.log_dir = Path(log_dir) if log_dir is not None else None
        self.cache = SensorCache(cfg.grid, cfg.lidar, cfg.encoder.keypoints)
        self._teachers: dict[tuple, Model] = {}
        self._stores: dict[tuple, ObservationStore] = {}

    def _store(self, scope: str, split: str, collaborative: bool, stride: int) -> ObservationStore:
        key = (scope, split, collaborative, stride)
        if key not in self._stores:
            part = 0 if split == "train" else 1
            scenarios = list(self.datasets) if scope == "*" else [scope]
            episodes = [e for sc in scenarios for e in self.datasets[sc][part]]
            self._stores[key] = ObservationStore(episodes, self.cfg.comm, self.cfg.encoder, self.cache,
                                                 collaborative=collaborative, frame_stride=stride)
        return self._stores[key]

    def train_store(self, scope: str, collaborative: bool) -> ObservationStore:
        return self._store(scope, "train", collaborative, self.cfg.frame_stride)

    def test_store(self, scenario: str, collaborative: bool) -> ObservationStore:
        """A fresh view (fresh read counters) over the cached renders."""
        test = self.datasets[scenario][1]
        return ObservationStore(list(test), self.cfg.comm, self.cfg.encoder, self.cache,
                                collaborative=collaborative)

    def _log(self, name: str):
        return None if self.log_dir is None else self.log_dir / f"{name}.jsonl"

    def teacher(self, scope: str, collaborative: bool, seed: int) -> Model:
        key = (scope, collaborative, seed)
        if key not in self._teachers:
            dcfg = replace(self.cfg.train, seed=seed)
            tag = f"teacher-{scope.replace('*', 'all')}-{'c' if collaborative else 'nc'}-s{seed}"
            self._teachers[key], _ = train_teacher(self.train_store(scope, collaborative), dcfg,
                                                   self.cfg.encoder, self.cfg.fusion, self._log(tag))
        return self._teachers[key]

    def train(self, case: CaseSpec, scope: str, seed: int) -> Model:
        """Train the model a case evaluates (Case D: teacher, then student)."""
        dcfg = replace(self.cfg.train, seed=seed)
        data = self.train_store(scope, case.collaborative)
        tag = f"{case.key}-{scope.replace('*', 'all')}-s{seed}"
        if case.case == "C":
            return self.teacher(scope, case.collaborative, seed)
        if case.case == "D":
            teacher = self.teacher(scope, case.collaborative, seed)
            model, _ = train_student(data, teacher, dcfg, case.test_modalities, log_path=self._log(tag))
            return model
        model, _ = train_bce(data, case.train_modalities, dcfg, self.cfg.encoder, self.cfg.fusion,
                             self._log(tag))
        return model

    def evaluate(self, model: Model, case: CaseSpec, scenario: str, seed: int) -> SeedResult:
        if tuple(model.modalities) != tuple(case.test_modalities):
            raise ValueError(f"case {case.key} tests on {case.test_modalities} but the model "
                             f"consumes {model.modalities}")
        store = self.test_store(scenario, case.collaborative)
        p = predict(model, store) > 0.5
        y = store.labels > 0.5
        try:
            a = adr(p, y)
        except NotApplicable:
            a = None
        return SeedResult(seed, scenario, a, ir(p, y), len(store), dict(store.reads))

    def run_case(self, case: CaseSpec, seeds: Iterable[int]) -> CaseResult:
        result = CaseResult(case, package_size(case, encoder=self.cfg.encoder))
        for seed in sorted(seeds):
            if self.cfg.train_scope == "pooled":
                model = self.train(case, "*", seed)
                for sc in self.datasets:
                    result.runs.append(self.evaluate(model, case, sc, seed))
            else:
                for sc in self.datasets:
                    result.runs.append(self.evaluate(self.train(case, sc, seed), case, sc, seed))
        return result


def run_case(case: CaseSpec, datasets: Datasets, cfg: RunConfig = RunConfig(),
             seeds: Iterable[int] | None = None) -> "MetricsReport":
    harness = Harness(datasets, cfg)
    return build_report([harness.run_case(case, cfg.seeds if seeds is None else seeds)], cfg)


def run_matrix(cases: Sequence[CaseSpec], datasets: Datasets, cfg: RunConfig = RunConfig(),
               seeds: Iterable[int] | None = None, log_dir=None) -> tuple["MetricsReport", list[CaseResult]]:
    harness = Harness(datasets, cfg, log_dir)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    # C before D so students reuse the trained teachers
    order = sorted(cases, key=lambda c: (c.case == "D", c.key))
    results = [harness.run_case(c, seeds) for c in order]
    return build_report(results, cfg), results


# --- reports --------------------------------------------------------------------

@dataclass
class MetricsReport:
    entries: dict[str, dict[str, dict]]  # scenario -> case key -> metrics
    config_digest: str
    version: str = __version__

    def to_dict(self) -> dict:
        return {"config_digest": self.config_digest, "tool_version": self.version, "results": self.entries}

    def to_json(self) -> str:
        return canonical_json(self.to_dict()) + "\n"

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())

    def mean_adr(self, case_key: str) -> float | None:
        """Mean over scenarios (and hence seeds) of the per-scenario ADR."""
        vals = [e[case_key]["adr"] for e in self.entries.values() if case_key in e and e[case_key]["adr"] is not None]
        return float(np.mean(vals)) if vals else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "case", "ps_bytes", "adr", "ir", "n_samples", "seeds"])
        for sc in sorted(self.entries):
            for key in sorted(self.entries[sc]):
                e = self.entries[sc][key]
                w.writerow([sc, key, e["ps_bytes"], _fmt(e["adr"]), _fmt(e["ir"]), e["n_samples"],
                            " ".join(str(s) for s in e["seeds"])])
        return buf.getvalue()

    def table(self) -> str:
        """PS | ADR | IR per scenario, one row per case."""
        scenarios = sorted(self.entries)
        keys = sorted({k for e in self.entries.values() for k in e}, key=lambda k: (k.endswith(NC_SUFFIX), k))
        head = f"{'case':<6}" + "".join(f" | {sc:^26}" for sc in scenarios)
        sub = f"{'':<6}" + "".join(f" | {'PS':>8} {'ADR':>8} {'IR':>8}" for _ in scenarios)
        lines = [head, sub, "-" * len(sub)]
        for k in keys:
            row = f"{k:<6}"
            for sc in scenarios:
                e = self.entries[sc].get(k)
                if e is None:
                    row += f" | {'':>26}"
                    continue
                ps = f"{e['ps_bytes'] / 1024:.1f}KB"
                a = "n/a" if e["adr"] is None else f"{e['adr']:.4f}"
                row += f" | {ps:>8} {a:>8} {e['ir']:>8.4f}"
            lines.append(row)
        return "\n".join(lines)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def build_report(results: Sequence[CaseResult], cfg: RunConfig) -> MetricsReport:
    entries: dict[str, dict[str, dict]] = {}
    for res in results:
        for sc in sorted({r.scenario for r in res.runs}):
            runs = sorted((r for r in res.runs if r.scenario == sc), key=lambda r: r.seed)
            entries.setdefault(sc, {})[res.case.key] = {
                "adr": _mean(r.adr for r in runs),
                "ir": _mean(r.ir for r in runs),
                "n_samples": runs[0].n_samples,
                "ps_bytes": res.ps_bytes,
                "seeds": [r.seed for r in runs],
                "per_seed": {str(r.seed): {"adr": r.adr, "ir": r.ir} for r in runs},
            }
    return MetricsReport(entries, cfg.digest())


def canonical_json(obj, indent: int = 2, _level: int = 0) -> str:
    """Sorted keys, floats with exactly six decimals, ints and null as-is."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_string(str(k))}: {canonical_json(obj[k], indent, _level + 1)}"
                 for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + ", ".join(canonical_json(v, indent, _level + 1) for v in obj) + "]"
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise ValueError("non-finite metric cannot be serialized")
        return f"{float(obj):.6f}"
    if isinstance(obj, str):
        return _string(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _string(s: str) -> str:
    return json.dumps(s)
