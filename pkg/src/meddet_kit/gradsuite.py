"""Finite-difference gradient suite over every differentiable operation.

Each case draws random inputs, reduces the op output to a scalar with a fixed
random projection, and compares reverse-mode gradients against central
differences for every differentiable input.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import aatm, alignfuse, losses
from . import numcore as nc
from .boxes import Truth
from .detnet import HeadOutput
from .nmode import OdeState, PerceptualMap, SolverSpec, integrate, nmode2_block, nmode2_deriv, nmode_deriv
from .numcore import Tensor

TOL = 1e-4
EPS = 1e-6


@dataclass
class Case:
    name: str
    module: str
    build: Callable[[np.random.Generator], tuple[dict, Callable[[dict], Tensor]]]


@dataclass
class CaseResult:
    name: str
    module: str
    trials: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOL


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), dtype=nc.get_dtype())


def _proj(out: Tensor, rng_seed: int) -> Tensor:
    r = np.random.default_rng(rng_seed).normal(size=out.shape)
    return (out * _t(r)).sum()


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _off_bounds(rng, shape, bound, margin=0.05):
    x = rng.normal(size=shape)
    near = np.abs(np.abs(x) - bound) < margin
    return np.where(near, np.sign(x) * (bound + 2 * margin), x)


def _unary(op, sampler=None):
    def build(rng):
        x = sampler(rng) if sampler else rng.normal(size=(2, 3, 4))
        return {"x": _t(x)}, lambda v: _proj(op(v["x"]), 1)
    return build


def _binary(op):
    def build(rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        return {"a": _t(a), "b": _t(b)}, lambda v: _proj(op(v["a"], v["b"]), 2)
    return build


def _conv(k, stride):
    def build(rng):
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, k, k))
        b = rng.normal(size=3)
        return ({"x": _t(x), "w": _t(w), "b": _t(b)},
                lambda v: _proj(nc.conv2d(v["x"], v["w"], v["b"], stride=stride, padding=k // 2), 3))
    return build


def _fc(rng):
    return ({"x": _t(rng.normal(size=(3, 5))), "w": _t(rng.normal(size=(5, 4))), "b": _t(rng.normal(size=4))},
            lambda v: _proj(nc.fully_connected(v["x"], v["w"], v["b"]), 4))


def _ode(deriv, method):
    spec = SolverSpec(method, 0.125, 1.0)

    def build(rng):
        y0, g = rng.uniform(-1, 1, size=(2, 3)), rng.normal(size=(2, 3))
        return ({"y0": _t(y0), "gamma": _t(g)},
                lambda v: _proj(integrate(OdeState(v["y0"], v["gamma"]), deriv, spec).y, 5))
    return build


def _nmode2_block(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    return ({"x": _t(x), "w": _t(rng.normal(size=(2, 2, 1, 1))), "b": _t(rng.normal(size=2))},
            lambda v: _proj(nmode2_block(v["x"], PerceptualMap(v["w"], v["b"])), 6))


def _afa(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(2, 3, 1, 1))
    b = rng.normal(size=2)

    def f(v):
        spec = alignfuse.AlignSpec(3, 2, 2, 3, v["w"], v["b"])
        return _proj(alignfuse.afa_apply(v["x"], spec), 7)
    return {"x": _t(x), "w": _t(w), "b": _t(b)}, f


def _lwff(rng):
    C, K = 2, 3
    feats = {f"f{k}": _t(rng.normal(size=(2, C, 3, 3))) for k in range(K)}
    heads = {f"h{k}": _t(rng.normal(size=(C, C, 1, 1))) for k in range(K)}
    hb = {f"hb{k}": _t(rng.normal(size=C)) for k in range(K)}
    inputs = {**feats, **heads, **hb, "mw": _t(rng.normal(size=(C, K * C, 1, 1))), "mb": _t(rng.normal(size=C))}

    def f(v):
        p = alignfuse.FusionParams([v[f"h{k}"] for k in range(K)], [v[f"hb{k}"] for k in range(K)], v["mw"], v["mb"])
        return _proj(alignfuse.lwff_fuse([v[f"f{k}"] for k in range(K)], p), 8)
    return inputs, f


def _generator(rng):
    C = 2
    inputs = {"x": _t(rng.normal(size=(1, C, 4, 4))), "w1": _t(rng.normal(size=(C, C, 3, 3))),
              "b1": _t(rng.normal(size=C)), "w2": _t(rng.normal(size=(C, C, 3, 3))), "b2": _t(rng.normal(size=C))}
    return inputs, lambda v: _proj(aatm.generate(aatm.Generator(v["w1"], v["b1"], v["w2"], v["b2"]), v["x"]), 9)


def _disc_layers(rng, d_in, hidden=(6, 4)):
    dims = [d_in, *hidden, 1]
    out = {}
    for j, (a, b) in enumerate(zip(dims, dims[1:])):
        out[f"w{j}"] = _t(rng.normal(0, np.sqrt(1.0 / a), size=(a, b)))
        out[f"b{j}"] = _t(rng.normal(0, 0.1, size=b))
    return out


def _disc_from(v):
    return aatm.Discriminator([(v[f"w{j}"], v[f"b{j}"]) for j in range(3)])


def _discriminator(rng):
    inputs = {"x": _t(rng.normal(size=(3, 2, 2, 2))), **_disc_layers(rng, 8)}
    return inputs, lambda v: _proj(aatm.discriminate(_disc_from(v), v["x"]), 10)


def _qfl(rng):
    p = rng.uniform(0.02, 0.98, size=(4, 3))
    y = rng.uniform(0, 1, size=(4, 3))
    return {"p": _t(p)}, lambda v: losses.qfl_elementwise(v["p"], y).sum()


def _dfl(rng):
    n = 6
    logits = rng.normal(size=(5, n + 1))
    y = rng.uniform(0, n, size=5)
    return {"z": _t(logits)}, lambda v: losses.dfl_elementwise(nc.softmax(v["z"], -1), y).sum()


def _boxes(rng, m):
    xy = rng.uniform(0, 10, size=(m, 2))
    wh = rng.uniform(1, 5, size=(m, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def _giou(rng):
    return ({"a": _t(_boxes(rng, 4)), "b": _t(_boxes(rng, 4))},
            lambda v: losses.giou_elementwise(v["a"], v["b"]).sum())


def _dist(rng):
    C = 2
    inputs = {"s": _t(rng.normal(size=(1, 3, 4, 4))), "aw": _t(rng.normal(size=(C, 3, 1, 1))),
              "ab": _t(rng.normal(size=C)), "w1": _t(rng.normal(size=(C, C, 3, 3))), "b1": _t(rng.normal(size=C)),
              "w2": _t(rng.normal(size=(C, C, 3, 3))), "b2": _t(rng.normal(size=C)),
              "t": _t(rng.normal(size=(1, C, 2, 2)))}

    def f(v):
        g = aatm.Generator(v["w1"], v["b1"], v["w2"], v["b2"])
        a = alignfuse.AlignSpec(3, C, 2, 2, v["aw"], v["ab"])
        return losses.dist_loss([v["t"]], [v["s"]], g, [a])
    return inputs, f


def _d_loss(rng):
    inputs = {"t": _t(rng.normal(size=(3, 2, 2, 2))), "s": _t(rng.normal(size=(3, 2, 2, 2))), **_disc_layers(rng, 8)}

    def f(v):
        return aatm.d_loss([aatm.AdversarialBatch(0, v["t"], v["s"])], [_disc_from(v)])
    # teacher/student features are detached inside d_loss, so only D parameters are checked
    return {k: x for k, x in inputs.items() if k[0] in "wb"}, lambda v: f({**inputs, **v})


def _g_loss(form):
    def build(rng):
        t = _t(rng.normal(size=(3, 2, 2, 2)))
        layers = _disc_layers(rng, 8)
        s = _t(rng.normal(size=(3, 2, 2, 2)))
        return {"s": s}, lambda v: aatm.g_loss([aatm.AdversarialBatch(0, t, v["s"])], [_disc_from(layers)], form)
    return build


def _det(component_weights):
    lam, mu = component_weights

    def build(rng):
        strides = [8, 16]
        n, k, bins = 2, 2, 3
        cls = [rng.normal(size=(n, k, 2, 2)), rng.normal(size=(n, k, 1, 1))]
        reg = [rng.normal(size=(n, 4 * (bins + 1), 2, 2)), rng.normal(size=(n, 4 * (bins + 1), 1, 1))]
        truths = [Truth(np.array([[2.0, 3.0, 9.0, 8.5], [5.0, 4.0, 15.0, 15.5]]), np.array([0, 1])),
                  Truth(np.array([[9.0, 1.5, 14.0, 7.0]]), np.array([1]))]
        w = losses.LossWeights(lam=lam, mu=mu)
        inputs = {"c0": _t(cls[0]), "c1": _t(cls[1]), "r0": _t(reg[0]), "r1": _t(reg[1])}
        if lam > 0:
            # QFL targets are detached IoUs of the predicted boxes: only the logits can be checked
            inputs = {k: v for k, v in inputs.items() if k[0] == "c"}
            fixed = {"r0": _t(reg[0]), "r1": _t(reg[1])}
        else:
            fixed = {}

        def f(v):
            v = {**fixed, **v}
            head = HeadOutput([v["c0"], v["c1"]], [v["r0"], v["r1"]], strides, bins)
            return losses.det_loss(head, truths, w)
        return inputs, f
    return build


def _total(rng):
    a, b, c = rng.uniform(0, 2, size=3)
    return ({"det": _t(a), "dist": _t(b), "adv": _t(c)},
            lambda v: losses.total_loss(v["det"], v["dist"], v["adv"], losses.LossWeights())[0])


def _softmax(rng):
    x = rng.normal(size=(3, 5))
    return {"x": _t(x)}, lambda v: _proj(nc.softmax(v["x"], -1), 11)


def _matmul(rng):
    return ({"a": _t(rng.normal(size=(3, 4))), "b": _t(rng.normal(size=(4, 2)))},
            lambda v: _proj(nc.matmul(v["a"], v["b"]), 12))


def _concat(rng):
    return ({"a": _t(rng.normal(size=(2, 2, 3))), "b": _t(rng.normal(size=(2, 1, 3)))},
            lambda v: _proj(nc.concat([v["a"], v["b"]], axis=1), 13))


def _index(rng):
    idx = np.array([0, 2, 2, 1])
    return {"x": _t(rng.normal(size=(3, 4)))}, lambda v: _proj(nc.index(v["x"], idx), 14)


def _pool_max(rng):
    x = rng.normal(size=(2, 2, 5, 7))
    return {"x": _t(x)}, lambda v: _proj(nc.adaptive_max_pool(v["x"], 2, 3), 15)


def _pool_avg(rng):
    return {"x": _t(rng.normal(size=(2, 3, 4, 4)))}, lambda v: _proj(nc.global_avg_pool(v["x"]), 16)


def _upsample(rng):
    return {"x": _t(rng.normal(size=(1, 2, 2, 3)))}, lambda v: _proj(nc.upsample_nearest(v["x"], 3, 5), 17)


def _scale(rng):
    return ({"x": _t(rng.normal(size=(2, 3, 2, 2))), "s": _t(rng.normal(size=(2, 3, 1, 1)))},
            lambda v: _proj(nc.scale_channels(v["x"], v["s"]), 18))


def _sum_axis(rng):
    return {"x": _t(rng.normal(size=(2, 3, 4)))}, lambda v: _proj(nc.sum_axis(v["x"], (0, 2)), 19)


def _transpose(rng):
    return {"x": _t(rng.normal(size=(2, 3, 4)))}, lambda v: _proj(nc.transpose(v["x"], (2, 0, 1)), 20)


CASES: list[Case] = [
    Case("add", "numcore", _binary(nc.add)),
    Case("sub", "numcore", _binary(nc.sub)),
    Case("mul", "numcore", _binary(nc.mul)),
    Case("div", "numcore", lambda r: ({"a": _t(r.normal(size=(3, 4))), "b": _t(r.uniform(0.5, 2, size=(3, 4)))},
                                      lambda v: _proj(nc.div(v["a"], v["b"]), 2))),
    Case("neg", "numcore", _unary(nc.neg)),
    Case("square", "numcore", _unary(nc.square)),
    Case("power", "numcore", _unary(lambda x: nc.power(x, 1.7), lambda r: r.uniform(0.2, 2, size=(2, 3, 4)))),
    Case("absolute", "numcore", _unary(nc.absolute, lambda r: _away_from_zero(r, (2, 3, 4)))),
    Case("exp", "numcore", _unary(nc.exp)),
    Case("log", "numcore", _unary(nc.log, lambda r: r.uniform(0.2, 3, size=(2, 3, 4)))),
    Case("sqrt", "numcore", _unary(nc.sqrt, lambda r: r.uniform(0.2, 3, size=(2, 3, 4)))),
    Case("sin", "numcore", _unary(nc.sin)),
    Case("cos", "numcore", _unary(nc.cos)),
    Case("relu", "numcore", _unary(nc.relu, lambda r: _away_from_zero(r, (2, 3, 4)))),
    Case("sigmoid", "numcore", _unary(nc.sigmoid)),
    Case("clamp", "numcore", _unary(lambda x: nc.clamp(x, -0.5, 0.5), lambda r: _off_bounds(r, (2, 3, 4), 0.5))),
    Case("maximum", "numcore", _binary(nc.maximum)),
    Case("minimum", "numcore", _binary(nc.minimum)),
    Case("sum_axis", "numcore", _sum_axis),
    Case("transpose", "numcore", _transpose),
    Case("concat", "numcore", _concat),
    Case("index", "numcore", _index),
    Case("softmax", "numcore", _softmax),
    Case("matmul", "numcore", _matmul),
    Case("fully_connected", "numcore", _fc),
    Case("conv1x1", "numcore", _conv(1, 1)),
    Case("conv3x3", "numcore", _conv(3, 1)),
    Case("conv3x3_stride2", "numcore", _conv(3, 2)),
    Case("global_avg_pool", "numcore", _pool_avg),
    Case("adaptive_max_pool", "numcore", _pool_max),
    Case("upsample_nearest", "numcore", _upsample),
    Case("scale_channels", "numcore", _scale),
    Case("nmode_rk4", "nmode", _ode("nmode", "rk4")),
    Case("nmode2_rk4", "nmode", _ode("nmode2", "rk4")),
    Case("nmode2_euler", "nmode", _ode("nmode2", "euler")),
    Case("nmode_composed_rk4", "nmode", _ode(nmode_deriv, "rk4")),
    Case("nmode2_composed_rk4", "nmode", _ode(nmode2_deriv, "rk4")),
    Case("nmode2_block", "nmode", _nmode2_block),
    Case("afa", "alignfuse", _afa),
    Case("lwff", "alignfuse", _lwff),
    Case("generator", "aatm", _generator),
    Case("discriminator", "aatm", _discriminator),
    Case("d_loss", "aatm", _d_loss),
    Case("g_loss_nonsaturating", "aatm", _g_loss("nonsaturating")),
    Case("g_loss_literal", "aatm", _g_loss("literal")),
    Case("qfl", "losses", _qfl),
    Case("dfl", "losses", _dfl),
    Case("giou", "losses", _giou),
    Case("dist_loss", "losses", _dist),
    Case("det_loss_logits", "losses", _det((0.4, 0.3))),
    Case("det_loss_boxes", "losses", _det((0.0, 0.5))),
    Case("total_loss", "losses", _total),
]

MODULES = sorted({c.module for c in CASES})


def check_case(case: Case, trials: int = 100, seed: int = 0, eps: float = EPS, precision: int = 64) -> CaseResult:
    """Worst error over ``trials`` random draws and every differentiable input."""
    t0 = time.perf_counter()
    worst = 0.0
    with nc.precision(precision):
        for trial in range(trials):
            rng = np.random.default_rng(np.random.SeedSequence([seed, trial, sum(map(ord, case.name))]))
            inputs, fn = case.build(rng)
            for key, x in inputs.items():
                err = nc.finite_diff_check(lambda t, k=key: fn({**inputs, k: t}), x, eps)
                worst = max(worst, err)
    return CaseResult(case.name, case.module, trials, worst, time.perf_counter() - t0)


def select(module: str = "all") -> list[Case]:
    if module == "all":
        return list(CASES)
    picked = [c for c in CASES if c.module == module or c.name == module]
    if not picked:
        raise ValueError(f"unknown module or case {module!r}; modules: {', '.join(MODULES)}")
    return picked


def run_suite(module: str = "all", trials: int = 100, seed: int = 0) -> list[CaseResult]:
    return [check_case(c, trials, seed) for c in select(module)]


def format_table(results: list[CaseResult]) -> str:
    lines = [f"{'case':<24} {'module':<10} {'trials':>6} {'max_err':>10}  result"]
    for r in results:
        lines.append(f"{r.name:<24} {r.module:<10} {r.trials:>6} {r.max_error:>10.2e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


# --- negative control: an op whose backward is deliberately wrong ----------------------

def broken_sin(x: Tensor) -> Tensor:
    """sin with a 2% error injected into its derivative."""
    return nc.record(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data) * 1.02,))


BROKEN_CASE = Case("broken_sin", "control", _unary(broken_sin))
