"""Built-in correctness checks and the mutation hooks used to test them.

Each check returns ``(name, ok, detail)``. ``inject`` swaps in a known-wrong
implementation so the suite can prove it notices.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator

import numpy as np

from . import distill, fusion
from . import tensor as T
from .config import DistillConfig, EncoderConfig
from .encoders import encode_grid, glorot_init, rgb_encoder_shapes
from .eval_harness import package_size
from .tensor import Graph

CheckResult = tuple[str, bool, str]


# --- op instances for gradient checking -------------------------------------------

def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _distinct(rng, shape):
    """Values with a clear gap between entries (no max ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(float) * 0.3 + rng.uniform(0, 0.05, n)).reshape(shape)


def _weighted(out: T.Tensor, weights: dict, rng) -> T.Tensor:
    """Fixed random linear functional of ``out`` so every output entry is probed."""
    if "w" not in weights:
        weights["w"] = rng.normal(size=out.shape)
    return T.sum_(T.mul(out, T.Tensor(weights["w"])))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Graph, dict[str, np.ndarray]]]:
    """One random instance per supported op: name -> (graph, inputs)."""
    m, n, k = (int(v) for v in rng.integers(2, 5, size=3))
    a, b = rng.normal(size=(m, n)), rng.normal(size=(m, n))
    cases: dict[str, tuple[Graph, dict]] = {}

    def add(name, fn, **inputs):
        r, weights = np.random.default_rng(rng.integers(1 << 31)), {}
        cases[name] = (Graph(lambda **kw: _weighted(fn(**kw), weights, r)), inputs)

    add("add", lambda x, y: T.add(x, y), x=a, y=b)
    add("sub", lambda x, y: T.sub(x, y), x=a, y=b)
    add("mul", lambda x, y: T.mul(x, y), x=a, y=b)
    add("scale", lambda x: T.scale(x, 1.7), x=a)
    add("add_scalar", lambda x: T.add_scalar(x, -0.4), x=a)
    add("relu", lambda x: T.relu(x), x=_away_from_zero(rng, (m, n)))
    add("sigmoid", lambda x: T.sigmoid(x), x=a)
    add("log", lambda x: T.log(x), x=rng.uniform(0.5, 2.0, size=(m, n)))
    add("exp", lambda x: T.exp(x), x=a)
    add("clip", lambda x: T.clip(x, -0.5, 0.5), x=np.where(np.abs(np.abs(a) - 0.5) < 0.05, a * 2, a))
    add("matmul", lambda x, y: T.matmul(x, y), x=a, y=rng.normal(size=(n, k)))
    add("matmul_batched", lambda x, y: T.matmul(x, y), x=rng.normal(size=(2, m, n)), y=rng.normal(size=(2, n, k)))
    add("transpose", lambda x: T.transpose(x), x=a)
    add("softmax", lambda x: T.softmax(x), x=a)
    add("concat", lambda x, y: T.concat([x, y]), x=a, y=rng.normal(size=(m, k)))
    add("slice", lambda x: T.slice_(x, (slice(None), slice(0, 1))), x=a)
    add("take", lambda x: T.take(x, np.array([0, m - 1, 0])), x=a)
    add("reshape", lambda x: T.reshape(x, (n, m)), x=a)
    add("broadcast_to", lambda x: T.broadcast_to(x, (k, m, n)), x=a)
    add("sum", lambda x: T.sum_(x, axis=1), x=a)
    add("mean", lambda x: T.mean(x, axis=0), x=a)
    add("max", lambda x: T.max_(x, axis=1), x=_distinct(rng, (m, n)))
    add("affine", lambda x, w, c: T.affine(x, w, c), x=a, w=rng.normal(size=(n, k)), c=rng.normal(size=(k,)))
    return cases


def encoder_case(rng: np.random.Generator, cfg: EncoderConfig | None = None):
    """encode_grid w.r.t. its parameters on a random one-hot grid."""
    cfg = cfg or EncoderConfig(grid_size=8, patch=4, d_model=4, embed_dim=6)
    params = glorot_init(rgb_encoder_shapes(cfg), rng)
    for name, v in params.items():
        if v.ndim == 1:
            params[name] = rng.normal(scale=0.1, size=v.shape)
    grid = np.eye(3)[rng.integers(0, 3, size=(cfg.grid_size, cfg.grid_size))]
    w = rng.normal(size=cfg.embed_dim)

    def fn(**p):
        return T.sum_(T.mul(encode_grid(p, grid, cfg), T.Tensor(w)))

    return Graph(fn), params


def attention_decide_case(rng: np.random.Generator, e: int = 6, d: int = 4, n: int = 3):
    """cross-attention aggregation -> fusion -> decision head -> p_brake."""
    shapes = {"fusion.wq": (e, d), "fusion.wk": (e, d), "fusion.wv": (e, d),
              "fusion.w_ego": (e, e), "fusion.w_agg": (d, e),
              "dec.in_rgb_w": (e, 5), "dec.in_rgb_b": (5,), "dec.h_w": (5, 4), "dec.h_b": (4,),
              "dec.out_w": (4, 2), "dec.out_b": (2,)}
    inputs = {k: rng.normal(scale=0.7, size=s) for k, s in shapes.items()}
    inputs["f_ego"] = rng.normal(size=e)
    inputs["f_collab"] = rng.normal(size=(n, e))

    def fn(f_ego, f_collab, **p):
        agg, _ = fusion.cross_attention_aggregate(f_ego, f_collab, p)
        _, pb = fusion.decide(fusion.fuse_rgb(f_ego, agg, p), None, p)
        return pb

    return Graph(fn), inputs


def student_loss_case(rng: np.random.Generator, batch: int = 4):
    cfg = DistillConfig(temperature=float(rng.uniform(1.0, 4.0)), alpha=float(rng.uniform(0.1, 0.9)))
    y = rng.integers(0, 2, size=batch).astype(float)
    teacher = rng.normal(size=(batch, 2))

    def fn(z):
        total, _, _ = distill.student_loss_tensors(z, teacher, y, cfg)
        return total

    return Graph(fn), {"z": rng.normal(size=(batch, 2))}


# --- checks ---------------------------------------------------------------------------

def check_ps() -> CheckResult:
    got = tuple(package_size(c, "full") for c in ("A", "B", "C"))
    return "package size (full scale)", got == (1024, 67072, 68096), f"{got}"


def check_gradients(instances: int = 3, tol: float = 1e-4) -> CheckResult:
    worst, where = 0.0, ""
    for i in range(instances):
        rng = np.random.default_rng(1000 + i)
        suite = dict(op_cases(rng))
        suite["encode_grid"] = encoder_case(rng)
        suite["attention+decide"] = attention_decide_case(rng)
        suite["student_loss"] = student_loss_case(rng)
        for name, (graph, inputs) in suite.items():
            err = T.finite_diff_check(graph, inputs, max_probes=6, seed=i)
            if err > worst:
                worst, where = err, name
    return "finite-difference gradients", worst < tol, f"max rel err {worst:.2e} ({where})"


def check_attention() -> CheckResult:
    eye = {k: np.eye(2) for k in ("fusion.wq", "fusion.wk", "fusion.wv")}
    agg, a = fusion.cross_attention_aggregate(np.array([1.0, 0.0]), np.eye(2), eye)
    e = math.exp(1.0 / math.sqrt(2.0))
    want = np.array([e / (e + 1.0), 1.0 / (e + 1.0)])
    ok = np.allclose(a.data.reshape(-1), want, atol=1e-12, rtol=0) and np.allclose(agg.data, want, atol=1e-12, rtol=0)
    rng = np.random.default_rng(0)
    p = {k: rng.normal(size=(5, 3)) for k in ("fusion.wq", "fusion.wk", "fusion.wv")}
    f_ego, rows = rng.normal(size=5), rng.normal(size=(4, 5))
    agg1, a1 = fusion.cross_attention_aggregate(f_ego, rows, p)
    agg2, _ = fusion.cross_attention_aggregate(f_ego, rows[::-1], p)
    _, single = fusion.cross_attention_aggregate(f_ego, rows[:1], p)
    ok = ok and abs(a1.data.sum() - 1.0) <= 1e-9 and np.allclose(agg1.data, agg2.data, atol=1e-9, rtol=0)
    ok = ok and single.data.reshape(-1).tolist() == [1.0]
    return "attention scaling and invariants", bool(ok), f"A={np.round(a.data.reshape(-1), 6).tolist()}"


def check_kd() -> CheckResult:
    z = np.array([2.0, 0.0])
    s3 = distill.soften(z, 3.0).data
    s1 = distill.soften(z, 1.0).data
    ok = np.allclose(s3, [0.660757, 0.339243], atol=1e-6) and np.array_equal(s1, T.softmax(T.Tensor(z)).data)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        cfg = DistillConfig(temperature=float(rng.uniform(0.5, 5.0)), alpha=float(rng.uniform(0, 1)))
        zs, zt = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        terms = distill.student_loss(zs, zt, rng.integers(0, 2, 3), cfg)
        t = cfg.temperature
        expect = (1.0 - cfg.alpha) * terms.l_bce + cfg.alpha * t * t * terms.l_kd
        worst = max(worst, abs(terms.l_total - expect))
    ok = ok and worst <= 1e-12
    return "distillation loss composition", bool(ok), f"soften(2,0;3)={np.round(s3, 6).tolist()} max|dL|={worst:.1e}"


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "ps": check_ps,
    "attention": check_attention,
    "kd": check_kd,
    "gradients": check_gradients,
}


# --- mutation hooks -----------------------------------------------------------------------

def _wrong_scale(d: int) -> float:
    return 1.0 / d


def _missing_t2(alpha: float, t: float) -> float:
    return alpha


INJECTIONS = {
    "sqrt_d": (fusion, "attention_scale", _wrong_scale),
    "t2": (distill, "kd_weight", _missing_t2),
}


@contextlib.contextmanager
def inject(name: str | None) -> Iterator[None]:
    if name is None:
        yield
        return
    if name not in INJECTIONS:
        raise ValueError(f"unknown injection {name!r}; expected one of {sorted(INJECTIONS)}")
    module, attr, fake = INJECTIONS[name]
    original = getattr(module, attr)
    setattr(module, attr, fake)
    try:
        yield
    finally:
        setattr(module, attr, original)


def run_all(injection: str | None = None) -> list[CheckResult]:
    with inject(injection):
        return [fn() for fn in CHECKS.values()]
