"""Central finite-difference verification of every differentiable primitive
and of the three composite losses run end to end through a small model.

The numeric probe perturbs stored values directly and re-runs the forward
closure, so it shares nothing with the analytic backward rules it checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import losses as L
from . import propagation as P
from . import tensor as T
from .errors import NumericalError
from .model import ModelConfig, SegPropModel
from .schedule import CASE_SEMI, CASE_SUPERVISED, CASE_UNSUPERVISED
from .tensor import Tensor

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-5
FD_STEP = 1e-6
# relative-error denominator floor (the usual rtol/atol convention): at
# h=1e-6 the probe's roundoff is ~1e-9 absolute, so coordinates below this
# magnitude are held to |a - f| < tol * REL_FLOOR instead of a pure ratio
REL_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def fd_gradient(forward: Callable[[], Tensor], leaf: Tensor,
                coords=None, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar-valued closure with respect
    to selected flat coordinates of `leaf` (all coordinates by default)."""
    flat = leaf.data.reshape(-1)
    coords = list(range(flat.size)) if coords is None else list(coords)
    grads = np.zeros(len(coords))
    for out_i, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = forward().item()
        flat[i] = orig - h
        f_minus = forward().item()
        flat[i] = orig
        grads[out_i] = (f_plus - f_minus) / (2.0 * h)
    return grads


def compare_gradients(forward: Callable[[], Tensor], leaves: List[Tensor],
                      coords_per_leaf=None, h: float = FD_STEP,
                      fd_forward: Callable[[], Tensor] = None) -> float:
    """Max relative error between analytic and numeric gradients over the
    probed coordinates of every leaf.

    `fd_forward`, when given, is the closure the numeric probe perturbs
    (e.g. a twin with discrete selections pinned); the analytic sweep
    always runs through `forward`.
    """
    for leaf in leaves:
        leaf.grad = None
    out = forward()
    out.backward()
    probe = forward if fd_forward is None else fd_forward
    worst = 0.0
    for li, leaf in enumerate(leaves):
        analytic = (np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad).reshape(-1)
        coords = None if coords_per_leaf is None else coords_per_leaf[li]
        if coords is None:
            coords = list(range(leaf.data.size))
        numeric = fd_gradient(probe, leaf, coords, h=h)
        for out_i, i in enumerate(coords):
            a, f = analytic[i], numeric[out_i]
            err = abs(a - f) / max(abs(a), abs(f), REL_FLOOR)
            worst = max(worst, err)
    return worst


def _away_from_kinks(rng, shape, margin=1e-3):
    """Random values with |x| bounded away from 0 (relu / max safe)."""
    x = rng.uniform(-1.0, 1.0, size=shape)
    x = np.where(np.abs(x) < margin, margin * np.sign(x) + (x == 0) * margin, x)
    return x


def _primitive_checks(rng) -> List[CheckResult]:
    checks = []

    def run(name, forward, leaves, coords=None):
        err = compare_gradients(forward, leaves, coords)
        checks.append(CheckResult(name=name, max_rel_err=err, tol=PRIMITIVE_TOL))

    a = Tensor(_away_from_kinks(rng, (3, 4)), requires_grad=True)
    b = Tensor(_away_from_kinks(rng, (3, 4)), requires_grad=True)
    run("add", lambda: T.tsum(T.mul(T.add(a, b), T.add(a, b))), [a, b])
    run("sub", lambda: T.tsum(T.mul(T.sub(a, b), T.sub(a, b))), [a, b])
    run("mul", lambda: T.tsum(T.mul(a, b)), [a, b])
    run("scale", lambda: T.tsum(T.scale(a, -1.7)), [a])
    run("relu", lambda: T.tsum(T.relu(a)), [a])
    run("mean", lambda: T.tmean(T.mul(a, a)), [a])
    run("max", lambda: T.tmax(T.mul(a, b)), [a, b])

    pos = Tensor(rng.uniform(0.3, 2.0, size=(3, 4)), requires_grad=True)
    run("log", lambda: T.tsum(T.log(pos)), [pos])
    run("exp", lambda: T.tsum(T.exp(T.scale(pos, 0.5))), [pos])
    run("clamp_min", lambda: T.tsum(T.clamp_min(a, 0.25)), [a])
    run("exp.log.mul chain",
        lambda: T.tsum(T.exp(T.scale(T.log(T.mul(pos, pos)), 0.3))), [pos])

    x4 = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
    w4 = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True)
    b4 = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    cprobe = Tensor(rng.standard_normal((2, 4, 8, 8)))
    run("conv2d s1p1",
        lambda: T.tmean(T.mul(T.conv2d(x4, w4, b4, 1, 1), cprobe)), [x4, w4, b4])
    run("conv2d s2p0",
        lambda: T.tmean(T.conv2d(x4, w4, b4, 2, 0)), [x4, w4, b4])

    sx = Tensor(rng.standard_normal((1, 5, 4, 4)), requires_grad=True)
    tgt = rng.standard_normal((1, 5, 4, 4))
    run("softmax_channel",
        lambda: T.tsum(T.mul(T.softmax_channel(sx), Tensor(tgt))), [sx])

    ux = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    utgt = rng.standard_normal((1, 2, 8, 8))
    run("upsample_bilinear",
        lambda: T.tsum(T.mul(T.upsample_bilinear(ux, 2), Tensor(utgt))), [ux])

    px = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)
    ptgt = rng.standard_normal((1, 3, 3, 3))
    run("avg_pool",
        lambda: T.tsum(T.mul(T.avg_pool(px, 2), Tensor(ptgt))), [px])

    nx = Tensor(rng.uniform(0.2, 1.5, size=(1, 4, 3, 3)), requires_grad=True)
    ntgt = rng.standard_normal((1, 4, 3, 3))
    run("normalize_channel",
        lambda: T.tsum(T.mul(T.normalize_channel(nx), Tensor(ntgt))), [nx])

    fa = Tensor(rng.standard_normal((5, 4)) + 0.3, requires_grad=True)
    fb = Tensor(rng.standard_normal((6, 4)) - 0.2, requires_grad=True)
    ctgt = rng.standard_normal((5, 6))
    run("cosine_rows",
        lambda: T.tsum(T.mul(T.cosine_rows(fa, fb), Tensor(ctgt))), [fa, fb])

    # top-k with a stable selection margin so the probe cannot flip the set
    while True:
        ma = rng.standard_normal((4, 7))
        srt = np.sort(ma, axis=1)
        if np.min(np.diff(srt, axis=1)) > 1e-3:
            break
    mt = Tensor(ma, requires_grad=True)
    yv = Tensor(rng.uniform(0.1, 1.0, size=(7, 3)), requires_grad=True)
    ttgt = rng.standard_normal((4, 3))
    run("topk_rows_aggregate",
        lambda: T.tsum(T.mul(T.topk_rows_aggregate(mt, yv, 3), Tensor(ttgt))), [mt, yv])
    run("propagate_labels",
        lambda: T.tsum(T.mul(P.propagate_labels(mt, T.softmax(yv, 1).detach(), 3),
                             Tensor(ttgt))), [mt])

    rx = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    rprobe = Tensor(rng.standard_normal((4, 3)))
    run("reshape+transpose",
        lambda: T.tsum(T.mul(T.transpose2d(T.reshape(rx, (3, 4))), rprobe)), [rx])

    qa = Tensor(rng.standard_normal((3, 5)) * 0.3, requires_grad=True)
    qb = Tensor(rng.standard_normal((5, 4)) * 0.3, requires_grad=True)
    qprobe = Tensor(rng.standard_normal((3, 4)))
    run("matmul", lambda: T.tsum(T.mul(T.matmul(qa, qb), qprobe)), [qa, qb])
    return checks


def _toy_setup(rng, case: int):
    """Build a 32x32 toy pair with two forward closures over one model.

    `forward(frozen=False)` is the production path through the case loss.
    `forward(frozen=True)` computes the identical formula but with the
    discrete structure (top-k index sets, hardened argmax targets) pinned
    to the values recorded during the last production run. The backward
    rules define those structures as constants, so the frozen twin is the
    smooth function the analytic gradient differentiates; probing it keeps
    central differences away from selection-flip discontinuities.
    """
    cfg = ModelConfig(num_classes=3, base_width=2, encoder_blocks=2,
                      output_stride=4, prop_feature_dim=4, seed=int(rng.integers(2 ** 31)))
    model = SegPropModel(cfg)
    # lift biases so the toy net has no dead-relu feature vectors, which
    # would tie cosines exactly and leave propagated maps exactly uniform
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data += 0.1
    h = w = 32
    x_m = rng.uniform(0.0, 1.0, size=(3, h, w))
    x_n = rng.uniform(0.0, 1.0, size=(3, h, w))
    y_m = rng.integers(0, 3, size=(h, w))
    y_n = rng.integers(0, 3, size=(h, w))
    k = 3
    lam = 1e-3
    state: dict = {}

    def forward(frozen: bool = False) -> Tensor:
        f_m = model.encode(Tensor(x_m))
        f_n = model.encode(Tensor(x_n))
        o_s_m = model.seg_forward(f_m)
        o_s_n = model.seg_forward(f_n)
        fp_m = model.prop_features(f_m)
        fp_n = model.prop_features(f_n)
        ghw = fp_m.shape[1:]
        s = cfg.output_stride

        def prop(tag, ft, fs, vec):
            mm = P.similarity_matrix(ft, fs)
            if frozen:
                masked = T.mul(mm, Tensor(state[tag]))
                agg = T.scale(T.matmul(masked, vec), 1.0 / k)
            else:
                order = np.argsort(-mm.data, axis=1, kind="stable")[:, :k]
                mask = np.zeros_like(mm.data)
                np.put_along_axis(mask, order, 1.0, axis=1)
                state[tag] = mask
                agg = T.topk_rows_aggregate(mm, vec, k)
            return P.lift_to_full_resolution(T.softmax(agg, axis=1), ghw, s)

        def cons(tag, o_a, o_b):
            # frozen twin of consistency_loss with recorded targets
            ha, hb = state[tag]
            return T.scale(T.add(L.ce_sum_hard(o_a, hb), L.ce_sum_hard(o_b, ha)), 0.5)

        def record(tag, o_a, o_b):
            state[tag] = (L.harden(o_a), L.harden(o_b))

        if case == CASE_SUPERVISED:
            o_p_m = prop("pm", fp_m, fp_n, P.downsample_source_labels(y_n, s, 3))
            o_p_n = prop("pn", fp_n, fp_m, P.downsample_source_labels(y_m, s, 3))
            if frozen:
                seg = T.add(L.ce_loss(o_s_m, y_m), L.ce_loss(o_s_n, y_n))
                prp = T.add(L.ce_loss(o_p_m, y_m), L.ce_loss(o_p_n, y_n))
                l_c = T.add(cons("cm", o_p_m, o_s_m), cons("cn", o_p_n, o_s_n))
                total = T.add(T.add(seg, prp), T.scale(l_c, lam))
            else:
                record("cm", o_p_m, o_s_m)
                record("cn", o_p_n, o_s_n)
                total = L.loss_case1(o_s_m, o_s_n, o_p_m, o_p_n, y_m, y_n, lam).total
        elif case == CASE_UNSUPERVISED:
            o_pp_m = prop("pm", fp_m, fp_n, P.downsample_source_probs(o_s_n, s))
            o_pp_n = prop("pn", fp_n, fp_m, P.downsample_source_probs(o_s_m, s))
            if frozen:
                l_c = T.add(cons("cm", o_pp_m, o_s_m), cons("cn", o_pp_n, o_s_n))
                total = T.scale(l_c, lam)
            else:
                record("cm", o_pp_m, o_s_m)
                record("cn", o_pp_n, o_s_n)
                total = L.loss_case2(o_s_m, o_s_n, o_pp_m, o_pp_n, lam).total
        else:
            o_pp_m = prop("pm", fp_m, fp_n, P.downsample_source_probs(o_s_n, s))
            o_p_n = prop("pn", fp_n, fp_m, P.downsample_source_labels(y_m, s, 3))
            if frozen:
                sup = T.add(L.ce_loss(o_s_m, y_m), L.ce_loss(o_pp_m, y_m))
                l_c = T.add(cons("cm", o_pp_m, o_s_m), cons("cn", o_p_n, o_s_n))
                total = T.add(sup, T.scale(l_c, lam))
            else:
                record("cm", o_pp_m, o_s_m)
                record("cn", o_p_n, o_s_n)
                total = L.loss_case3(o_s_m, o_s_n, o_p_n, o_pp_m, y_m, lam).total
        # the 0.25 keeps the loss value small enough that the probe's
        # roundoff stays below tolerance; gradients scale identically
        return T.scale(total, 0.25)

    return model, forward


def _composite_checks(rng, coords_per_tensor: int = 6) -> List[CheckResult]:
    checks = []
    for case, name in ((CASE_SUPERVISED, "loss_case1 end-to-end"),
                       (CASE_UNSUPERVISED, "loss_case2 end-to-end"),
                       (CASE_SEMI, "loss_case3 end-to-end")):
        model, forward = _toy_setup(rng, case)
        base = forward(frozen=False).item()
        freezer = T.ReluFreezer()
        with T.relu_frozen(freezer):
            twin = forward(frozen=True).item()
        freezer.start_replay()

        def fd_probe():
            freezer.pos = 0
            with T.relu_frozen(freezer):
                return forward(frozen=True)

        if abs(base - twin) > 1e-9 * max(1.0, abs(base)):
            raise NumericalError(
                f"{name}: frozen twin diverges at the base point "
                f"({base!r} vs {twin!r})")
        leaves = list(model.params.values())
        coords = []
        for p in leaves:
            n = p.data.size
            take = min(coords_per_tensor, n)
            coords.append(sorted(rng.choice(n, size=take, replace=False).tolist()))
        err = compare_gradients(lambda: forward(frozen=False), leaves, coords,
                                fd_forward=fd_probe)
        checks.append(CheckResult(name=name, max_rel_err=err, tol=COMPOSITE_TOL))
    return checks


def run_suite(seed: int = 0, report=None) -> List[CheckResult]:
    """All primitive and composite checks; `report` gets one line each."""
    rng = np.random.default_rng(seed)
    results = _primitive_checks(rng) + _composite_checks(rng)
    if report is not None:
        for r in results:
            status = "PASS" if r.passed else "FAIL"
            report(f"{status} {r.name}: max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e}")
    return results
