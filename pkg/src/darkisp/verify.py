"""Self-contained property suites behind ``darkisp verify``.

Each suite returns a :class:`SuiteResult`; a failing case carries its seed and a
digest of its inputs so it can be replayed.
"""

from __future__ import annotations

import hashlib
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .linear_isp import (
    LinearParams,
    apply_matrix,
    binning,
    color_transform,
    compose,
    extract_features,
    global_attention,
    init_attention_params,
    init_feature_params,
    local_attention,
    white_balance,
)
from .nonlinear_isp import BasisFamily, apply_nonlinear, check_basis, init_coeff_params, predict_coefficients
from .raw_io import CFA_LAYOUTS, BayerImage, RgbImage, load_bayer, load_rgb, pack_cfa, save_bayer, save_rgb, unpack_cfa
from .self_boost import sb_loss, solve_pseudo_target
from .tensor import Tensor, grad_check

SUITES = ("grad", "basis", "lsq", "attn", "roundtrip")
GRAD_TOL = 1e-5
EPS = 1e-5


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    failures: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def record(self, ok: bool, case: str, seed: int, *arrays, **detail) -> None:
        self.cases += 1
        if not ok:
            self.failures.append({"case": case, "seed": seed, "inputs_digest": digest(*arrays), **detail})

    def to_dict(self) -> dict:
        return {"passed": self.passed, "cases": self.cases, "failures": self.failures,
                "seconds": round(self.seconds, 3)}


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = a.data if isinstance(a, Tensor) else np.asarray(a)
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def _away_from_zero(rng, shape, margin=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def primitive_cases(rng: np.random.Generator):
    """(op name, inputs, kwargs) with random float64 inputs for every primitive."""
    def t(*shape, positive=False, margin=False):
        if positive:
            data = rng.uniform(0.5, 2.0, size=shape)
        elif margin:
            data = _away_from_zero(rng, shape)
        else:
            data = rng.standard_normal(shape)
        return Tensor(data, requires_grad=True)

    return [
        ("add", (t(2, 3), t(2, 3)), {}),
        ("sub", (t(2, 3), t(2, 3)), {}),
        ("mul", (t(2, 2), t(2, 2)), {}),
        ("scalar_pow", (t(3, 2, positive=True),), {"p": 2.5}),
        ("matmul", (t(3, 4), t(4, 2)), {}),
        ("transpose", (t(3, 4),), {}),
        ("conv2d_3x3", (t(1, 4, 4), t(2, 1, 3, 3), t(2)), {}),
        ("avg_pool2d", (t(2, 5, 4),), {"k": 2}),
        ("softmax", (t(3, 5),), {}),
        ("relu", (t(3, 4, margin=True),), {}),
        ("mean", (t(2, 3, 4),), {"axis": (1, 2)}),
        ("sum", (t(2, 3, 4),), {"axis": 1}),
        ("reshape", (t(2, 6),), {"shape": (3, 4)}),
        ("broadcast", (t(3, 1, 2),), {"shape": (4, 3, 5, 2)}),
        ("cosine_rows", (t(3, 4), t(3, 4)), {}),
        ("l2_norm", (t(2, 3),), {}),
    ]


def _check(result: SuiteResult, label: str, fn, inputs, seed: int, max_coords=None, **kw) -> None:
    rep = grad_check(fn, inputs, epsilon=EPS, tolerance=GRAD_TOL, seed=seed, max_coords=max_coords, **kw)
    result.record(rep.passed, label, seed, *inputs, max_rel_err=rep.worst)


def composite_cases(seed: int):
    """Gradient checks through the network blocks, small enough to finite-difference."""
    rng = np.random.default_rng(seed)
    width, dim = 4, 4
    img = Tensor(rng.uniform(0.05, 1.0, size=(4, 16, 16)), requires_grad=True)
    feat = init_feature_params(rng, width)
    la = init_attention_params(rng, "local", width, dim)
    ga = init_attention_params(rng, "global", width, dim)
    for p in (la, ga):  # non-zero output projections so every parameter sees gradient
        for k in p:
            if k.endswith(".wo") or k.endswith(".bo"):
                p[k].data = rng.standard_normal(p[k].shape)
    base = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    out = []

    def local_stream(x, *ps):
        return extract_features(x, feat).local

    def global_stream(x, *ps):
        return extract_features(x, feat).global_

    out.append(("features.local", local_stream, [img, *feat.values()]))
    out.append(("features.global", global_stream, [img, *feat.values()]))

    lf = Tensor(rng.standard_normal((width, 4, 4)), requires_grad=True)
    out.append(("local_attention", lambda f, b, *ps: local_attention(f, b, la), [lf, base, *la.values()]))
    gf = Tensor(rng.standard_normal((width, 2, 3)), requires_grad=True)
    out.append(("global_attention", lambda b, f, *ps: global_attention(b, f, ga), [base, gf, *ga.values()]))

    fam = BasisFamily.default(8)
    coeff = init_coeff_params(rng, fam.order, width=4)
    coeff["nonlinear.conv3.weight"].data = rng.standard_normal(coeff["nonlinear.conv3.weight"].shape) * 0.3
    rgb = Tensor(rng.uniform(0.05, 1.0, size=(3, 6, 6)), requires_grad=True)
    out.append(("predict_coefficients", lambda x, *ps: predict_coefficients(x, coeff), [rgb, *coeff.values()]))
    cmaps = Tensor(rng.standard_normal((fam.order + 1, 6, 6)), requires_grad=True)
    out.append(("apply_nonlinear.skip", lambda x, c: apply_nonlinear(x, c, fam), [rgb, cmaps]))
    plain = BasisFamily.default(8, skip_mode=False)
    out.append(("apply_nonlinear.plain", lambda x, c: apply_nonlinear(x, c, plain), [rgb, cmaps]))
    target = Tensor(rng.standard_normal((3, 4)))
    out.append(("sb_loss", lambda b: sb_loss(b, target), [base]))
    return out


def suite_grad(trials: int = 100) -> SuiteResult:
    res = SuiteResult("grad")
    for s in range(trials):
        rng = np.random.default_rng(s)
        for name, inputs, kw in primitive_cases(rng):
            _check(res, name, name, list(inputs), s, **kw)
    for s in range(3):
        for name, fn, inputs in composite_cases(1000 + s):
            _check(res, name, fn, inputs, 1000 + s, max_coords=24)
    return res


def suite_basis(order: int = 8) -> SuiteResult:
    res = SuiteResult("basis")
    fam = BasisFamily.default(order)
    problems = check_basis(fam)
    res.record(not problems, "shape_constraints", 0, fam.table, problems=problems)
    xs = np.linspace(0.0, 1.0, 1001)
    for k in range(order + 1):
        naive = sum(c * xs**j for j, c in enumerate(fam.table[k]))
        err = float(np.abs(fam.f(k, xs) - naive).max())
        res.record(err <= 1e-13, f"horner_vs_naive_f{k}", 0, fam.table[k], max_abs_err=err)
    return res


def suite_lsq(cases: int = 100, rank_cases: int = 20, size: int = 32) -> SuiteResult:
    res = SuiteResult("lsq")
    for s in range(cases):
        rng = np.random.default_rng(s)
        a = rng.standard_normal((3, 4))
        i = rng.uniform(0.0, 1.0, size=(4, size, size))
        u = np.einsum("rc,chw->rhw", a, i)
        pt = solve_pseudo_target(u, i)
        err = float(np.abs(pt.p_tilde - a).max())
        res.record(err <= 1e-8 and not pt.used_pinv, "exact_recovery", s, a, i, max_abs_err=err)
    for s in range(rank_cases):
        rng = np.random.default_rng(10_000 + s)
        rank = 1 + s % 3
        mix = rng.uniform(0.1, 1.0, size=(4, rank))
        i = np.einsum("cr,rhw->chw", mix, rng.uniform(0, 1, size=(rank, size, size)))
        u = rng.standard_normal((3, size, size))
        pt = solve_pseudo_target(u, i)
        # oracle: minimum-norm least squares from the SVD of the 4 x HW data matrix itself
        uf, i_f = u.reshape(3, -1), i.reshape(4, -1)
        left, sv, right = np.linalg.svd(i_f, full_matrices=False)
        keep = sv > sv[0] * 1e-6
        oracle = uf @ (right[keep].T / sv[keep]) @ left[:, keep].T
        err = float(np.abs(pt.p_tilde - oracle).max())
        ok = pt.used_pinv and pt.truncated_rank == rank and err <= 1e-8
        res.record(ok, "rank_deficient", 10_000 + s, u, i, max_abs_err=err, rank=pt.truncated_rank)
    return res


def reference_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Literal per-query loop of softmax(q k^T / sqrt(d)) v."""
    out = np.zeros((q.shape[0], v.shape[1]))
    d = q.shape[1]
    for a in range(q.shape[0]):
        scores = [sum(q[a, j] * k[b, j] for j in range(d)) / math.sqrt(d) for b in range(k.shape[0])]
        m = max(scores)
        w = [math.exp(x - m) for x in scores]
        z = sum(w)
        for b in range(k.shape[0]):
            out[a] += (w[b] / z) * v[b]
    return out


def reference_local(feat: np.ndarray, base: np.ndarray, p: dict) -> np.ndarray:
    pre = "linear.local_attn"
    tokens = base.reshape(12, 1) * p[f"{pre}.embed"][None, :] + p[f"{pre}.pos"]
    c, h, w = feat.shape
    out = np.zeros((12, h, w))
    keys, vals = tokens @ p[f"{pre}.wk"], tokens @ p[f"{pre}.wv"]
    for i in range(h):
        for j in range(w):
            q = feat[:, i, j] @ p[f"{pre}.wq"]
            mixed = reference_attention(q[None], keys, vals)[0]
            out[:, i, j] = mixed @ p[f"{pre}.wo"] + p[f"{pre}.bo"]
    return out


def reference_global(base: np.ndarray, feat: np.ndarray, p: dict) -> np.ndarray:
    pre = "linear.global_attn"
    tokens = base.reshape(12, 1) * p[f"{pre}.embed"][None, :] + p[f"{pre}.pos"]
    c = feat.shape[0]
    flat = feat.reshape(c, -1).T
    mixed = reference_attention(tokens @ p[f"{pre}.wq"], flat @ p[f"{pre}.wk"], flat @ p[f"{pre}.wv"])
    return ((mixed @ p[f"{pre}.wo"]).reshape(12) + p[f"{pre}.bo"]).reshape(3, 4)


def suite_attn(cases: int = 10) -> SuiteResult:
    res = SuiteResult("attn")
    for s in range(cases):
        rng = np.random.default_rng(2000 + s)
        la = init_attention_params(rng, "local", 5, 6)
        ga = init_attention_params(rng, "global", 5, 6)
        for p in (la, ga):
            for k in p:
                if k.endswith(".wo") or k.endswith(".bo"):
                    p[k].data = rng.standard_normal(p[k].shape)
        base = rng.standard_normal((3, 4))
        lf = rng.standard_normal((5, 3, 4))
        gf = rng.standard_normal((5, 2, 2))
        raw_l = {k: v.data for k, v in la.items()}
        raw_g = {k: v.data for k, v in ga.items()}
        got = local_attention(Tensor(lf), Tensor(base), la).data
        err = float(np.abs(got - reference_local(lf, base, raw_l)).max())
        res.record(err <= 1e-10, "local_vs_reference", 2000 + s, lf, base, max_abs_err=err)
        got = global_attention(Tensor(base), Tensor(gf), ga).data
        err = float(np.abs(got - reference_global(base, gf, raw_g)).max())
        res.record(err <= 1e-10, "global_vs_reference", 2000 + s, gf, base, max_abs_err=err)
    # zero output projections give zero corrections
    rng = np.random.default_rng(0)
    la = init_attention_params(rng, "local", 5, 6)
    zero = local_attention(Tensor(rng.standard_normal((5, 3, 3))), Tensor(rng.standard_normal((3, 4))), la).data
    res.record(not np.any(zero), "local_zero_init", 0, zero)
    return res


def suite_roundtrip(cases: int = 20) -> SuiteResult:
    res = SuiteResult("roundtrip")
    with tempfile.TemporaryDirectory() as tmp:
        for s in range(cases):
            rng = np.random.default_rng(3000 + s)
            planes = rng.uniform(0, 1, size=(4, 5, 7)).astype(np.float32).astype(np.float64)
            path = Path(tmp) / f"r{s}.draw"
            save_bayer(BayerImage(planes), path)
            back = load_bayer(path).planes
            res.record(np.array_equal(back, planes), "draw_bit_exact", 3000 + s, planes)
            rgb = rng.uniform(-1, 2, size=(3, 4, 6)).astype(np.float32).astype(np.float64)
            save_rgb(RgbImage(rgb), Path(tmp) / f"r{s}.pfm", "float")
            res.record(np.array_equal(load_rgb(Path(tmp) / f"r{s}.pfm").channels, rgb), "pfm_bit_exact", 3000 + s, rgb)
            m = rng.uniform(0, 1, size=(8, 8))
            for pattern in CFA_LAYOUTS:
                ok = np.array_equal(unpack_cfa(pack_cfa(m, pattern)), m)
                res.record(ok, f"cfa_{pattern}", 3000 + s, m)
            params = LinearParams(rng.uniform(0.5, 2.5, 4), rng.standard_normal((3, 3)))
            img = BayerImage(rng.uniform(0, 1, size=(4, 16, 16)))
            seq = color_transform(binning(white_balance(img, params.wb_gains)), params.ccm).channels
            err = float(np.abs(apply_matrix(compose(params), img).channels - seq).max())
            res.record(err <= 1e-12, "compose_equivalence", 3000 + s, img.planes, max_abs_err=err)
    return res


RUNNERS = {
    "grad": suite_grad,
    "basis": suite_basis,
    "lsq": suite_lsq,
    "attn": suite_attn,
    "roundtrip": suite_roundtrip,
}


def run_suites(names=SUITES) -> dict:
    report = {"suites": {}, "passed": True}
    start = time.perf_counter()
    for name in names:
        t0 = time.perf_counter()
        res = RUNNERS[name]()
        res.seconds = time.perf_counter() - t0
        report["suites"][name] = res.to_dict()
        report["passed"] = report["passed"] and res.passed
    report["seconds"] = round(time.perf_counter() - start, 3)
    return report
