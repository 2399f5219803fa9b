"""Finite-difference verification of every differentiable operation.

The numeric side is an independent oracle: central differences with step
h = 1e-5 evaluated in the float64 mode, compared against taped gradients at
relative tolerance 1e-4.  ``run_suite`` drives one named check over many
random instances; the CLI and the acceptance tests both call it.

Two practical policies keep the oracle honest but usable:

* A coordinate whose first comparison fails is re-measured with the step
  shrunk 16x and 256x, keeping the best agreement.  A wrong analytic
  gradient stays wrong at every step size, while an interval that happened
  to straddle a non-smooth point (leaky-relu corner, argmax tie) almost
  surely stops straddling it, so this filters kink artifacts without
  masking real defects.
* Composite-module checks sample a fixed-size random subset of coordinates
  for large parameter tensors (the per-op checks below stay exhaustive);
  full coverage of, say, a 144-channel conv would cost minutes per
  instance for no extra signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor, backward, using_dtype

H_STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-8  # per unit of |f|; central differences cannot resolve below this
_FLOOR = 1e-6  # treat gradients this small as zero when forming relative error


def numeric_gradient(f: Callable[[list[np.ndarray]], float],
                     arrays: list[np.ndarray], h: float = H_STEP) -> list[np.ndarray]:
    """Central differences of a scalar function, coordinate by coordinate."""
    grads = []
    work = [a.copy() for a in arrays]
    for i, a in enumerate(work):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi = f(work)
            flat[j] = orig - h
            lo = f(work)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def _coord_fd(f, work: list[np.ndarray], i: int, j: int, h: float) -> float:
    flat = work[i].reshape(-1)
    orig = flat[j]
    flat[j] = orig + h
    hi = f(work)
    flat[j] = orig - h
    lo = f(work)
    flat[j] = orig
    return (hi - lo) / (2 * h)


def check_gradients(forward: Callable[..., Tensor],
                    arrays: list[np.ndarray], h: float = H_STEP,
                    max_coords: int | None = None) -> float:
    """Max relative error between taped and central-difference gradients.

    ``forward`` maps input Tensors to a scalar Tensor.  Evaluation happens in
    float64 regardless of the ambient mode.  With ``max_coords`` set, tensors
    larger than that check a deterministic random coordinate subset.

    Two escapes keep the check honest without false alarms.  A coordinate
    whose first measurement disagrees is re-measured at smaller steps: a real
    gradient bug stays wrong at every step, while a difference interval that
    straddles a kink (leaky-relu corner, argmax tie) stops straddling.  A
    coordinate where analytic and numeric agree within ``ABS_TOL * |f|``
    passes outright: the difference quotient carries rounding noise of about
    ``eps * |f| / (2 h)``, so gradients near zero cannot be resolved any
    tighter than that no matter the step.
    """
    with using_dtype(np.float64):
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = forward(*ts)
        backward(tape, out)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data)
                    for t in ts]

        def f(arrs):
            return forward(*[Tensor(a) for a in arrs]).item()

        work = [t.data.copy() for t in ts]
        abs_tol = ABS_TOL * max(1.0, abs(out.item()))
        worst = 0.0
        for i, grad in enumerate(analytic):
            gflat = grad.reshape(-1)
            if max_coords is not None and gflat.size > max_coords:
                picker = np.random.default_rng(7919 * (i + 1) + gflat.size)
                coords = picker.choice(gflat.size, size=max_coords,
                                       replace=False)
            else:
                coords = range(gflat.size)
            for j in coords:
                err = np.inf
                for step in (h, h / 16, h / 256):
                    num = _coord_fd(f, work, i, j, step)
                    if abs(gflat[j] - num) < abs_tol:
                        err = 0.0
                        break
                    err = min(err, rel_error(np.asarray(gflat[j]),
                                             np.asarray(num)))
                    if err < REL_TOL:
                        break
                worst = max(worst, err)
    return worst


def _wsum(t: Tensor, const: np.ndarray) -> Tensor:
    """Reduce to a scalar with fixed random weights so gradients are generic."""
    return (t * const).sum()


@dataclass
class OpReport:
    name: str
    max_rel_err: float
    passed: bool


# ---------------------------------------------------------------------------
# checks on core operations
# ---------------------------------------------------------------------------


def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Nudge values that sit within margin of any kink point."""
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.sign(x - p + 0.5 * margin) * margin, x)
    return x


def base_op_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    """One closure per core op; each returns the max relative gradient error."""

    def rnd(*shape):
        return rng.standard_normal(shape)

    checks: dict[str, Callable[[], float]] = {}

    def simple(name, make):
        checks[name] = make

    w1 = rnd(3, 4)
    simple("add", lambda: check_gradients(lambda a, b: _wsum(a + b, w1), [rnd(3, 4), rnd(4)]))
    simple("sub", lambda: check_gradients(lambda a, b: _wsum(a - b, w1), [rnd(3, 4), rnd(3, 1)]))
    simple("mul", lambda: check_gradients(lambda a, b: _wsum(a * b, w1), [rnd(3, 4), rnd(4)]))
    simple("div", lambda: check_gradients(
        lambda a, b: _wsum(a / b, w1), [rnd(3, 4), rnd(4) + np.sign(rnd(4)) * 0.5 + 1.5]))
    simple("neg", lambda: check_gradients(lambda a: _wsum(-a, w1), [rnd(3, 4)]))
    simple("exp", lambda: check_gradients(lambda a: _wsum(a.exp(), w1), [rnd(3, 4) * 0.5]))
    simple("log", lambda: check_gradients(lambda a: _wsum(a.log(), w1), [np.abs(rnd(3, 4)) + 0.5]))
    simple("abs", lambda: check_gradients(
        lambda a: _wsum(a.abs(), w1), [_away_from(rnd(3, 4), [0.0], 0.05)]))
    simple("sigmoid", lambda: check_gradients(lambda a: _wsum(a.sigmoid(), w1), [rnd(3, 4)]))
    simple("tanh", lambda: check_gradients(lambda a: _wsum(a.tanh(), w1), [rnd(3, 4)]))
    simple("leaky_relu", lambda: check_gradients(
        lambda a: _wsum(a.leaky_relu(0.01), w1), [_away_from(rnd(3, 4), [0.0], 0.05)]))
    simple("clip", lambda: check_gradients(
        lambda a: _wsum(a.clip(-0.8, 0.8), w1), [_away_from(rnd(3, 4), [-0.8, 0.8], 0.05)]))

    wsm = rnd(4, 5)
    simple("softmax.ax0", lambda: check_gradients(
        lambda a: _wsum(a.softmax(0), wsm), [rnd(4, 5)]))
    simple("softmax.ax1", lambda: check_gradients(
        lambda a: _wsum(a.softmax(1), wsm), [rnd(4, 5)]))

    simple("sum.all", lambda: check_gradients(lambda a: a.sum(), [rnd(3, 4, 2)]))
    w2 = rnd(3, 2)
    simple("sum.axis", lambda: check_gradients(lambda a: _wsum(a.sum(1), w2), [rnd(3, 4, 2)]))
    simple("mean", lambda: check_gradients(lambda a: _wsum(a.mean(1), w2), [rnd(3, 4, 2)]))

    def max_input():
        a = rnd(3, 4, 2)
        # keep a clear margin between the top two values along axis 1
        a[:, 0, :] += 3.0
        return a
    simple("max", lambda: check_gradients(lambda a: _wsum(a.max(1), w2), [max_input()]))

    mask = rng.random((3, 4)) > 0.5
    simple("where", lambda: check_gradients(
        lambda a, b: _wsum(T.where(mask, a, b), w1), [rnd(3, 4), rnd(3, 4)]))
    w3 = rnd(3, 7)
    simple("concat", lambda: check_gradients(
        lambda a, b: _wsum(T.concat([a, b], 1), w3), [rnd(3, 4), rnd(3, 3)]))
    w4 = rnd(12, 2)
    simple("reshape", lambda: check_gradients(
        lambda a: _wsum(a.reshape((12, 2)), w4), [rnd(3, 4, 2)]))
    w5 = rnd(2, 4, 3)
    simple("transpose", lambda: check_gradients(
        lambda a: _wsum(a.transpose((2, 1, 0)), w5), [rnd(3, 4, 2)]))
    w6 = rnd(2, 3)
    simple("getitem", lambda: check_gradients(
        lambda a: _wsum(a[1:3, ::2, 1], w6), [rnd(4, 5, 2)]))

    didx = rng.integers(0, 5, size=(3, 4, 2))
    w7 = rnd(3, 4, 2)
    simple("take_depth", lambda: check_gradients(
        lambda a: _wsum(T.take_depth(a, didx), w7), [rnd(5, 4, 2)]))
    giy = rng.integers(0, 4, size=(3, 3))
    gix = rng.integers(0, 5, size=(3, 3))
    w8 = rnd(3, 3)
    simple("gather2d", lambda: check_gradients(
        lambda a: _wsum(T.gather2d(a, giy, gix), w8), [rnd(4, 5)]))

    # sampling: fractional coords away from texel boundaries; a couple OOB
    n_pts = 9
    sx = rng.uniform(0.2, 5.8, n_pts)
    sy = rng.uniform(0.2, 4.8, n_pts)
    sx[0], sy[0] = -3.0, 2.0  # invalid on purpose: gradient must be zero there
    frac = lambda v: np.clip(v - np.floor(v), 0.2, 0.8) + np.floor(v)
    sx, sy = frac(sx), frac(sy)
    w9 = rnd(3, n_pts)

    def samp(grid, xs, ys):
        out, _ = T.bilinear_sample(grid, xs, ys)
        return _wsum(out, w9)

    simple("bilinear_sample", lambda: check_gradients(samp, [rnd(3, 6, 7), sx, sy]))

    def samp_edge(grid, xs, ys):
        out, _ = T.bilinear_sample(grid, xs, ys, mode="edge")
        return _wsum(out, w9)

    simple("bilinear_sample.edge", lambda: check_gradients(samp_edge, [rnd(3, 6, 7), sx, sy]))

    w10 = rnd(2, 6, 8)
    simple("bilinear_resize.up", lambda: check_gradients(
        lambda a: _wsum(T.bilinear_resize(a, (6, 8)), w10), [rnd(2, 3, 4)]))
    w11 = rnd(2, 2, 3)
    simple("bilinear_resize.down", lambda: check_gradients(
        lambda a: _wsum(T.bilinear_resize(a, (2, 3)), w11), [rnd(2, 5, 6)]))

    wc1 = rnd(4, 5, 5)
    simple("conv2d.s1", lambda: check_gradients(
        lambda x, w, b: _wsum(T.conv2d(x, w, b, 1, 1), wc1),
        [rnd(3, 5, 5), rnd(4, 3, 3, 3) * 0.5, rnd(4) * 0.1]))
    wc2 = rnd(4, 3, 3)
    simple("conv2d.s2", lambda: check_gradients(
        lambda x, w, b: _wsum(T.conv2d(x, w, b, 2, 1), wc2),
        [rnd(3, 6, 6), rnd(4, 3, 3, 3) * 0.5, rnd(4) * 0.1]))
    wc3 = rnd(4, 5, 5)
    simple("conv2d.k1", lambda: check_gradients(
        lambda x, w, b: _wsum(T.conv2d(x, w, b, 1, 0), wc3),
        [rnd(3, 5, 5), rnd(4, 3, 1, 1) * 0.5, rnd(4) * 0.1]))
    wc4 = rnd(2, 3, 4, 4)
    simple("conv2d.batched", lambda: check_gradients(
        lambda x, w, b: _wsum(T.conv2d(x, w, b, 1, 1), wc4),
        [rnd(2, 5, 4, 4), rnd(3, 5, 3, 3) * 0.4, rnd(3) * 0.1]))

    # geometry: warping differentiable in depth
    from .geometry import CameraView, relative_pose, warp_points, normalize_inv, denormalize_inv

    k = np.array([[20.0, 0.0, 7.5], [0.0, 20.0, 7.5], [0.0, 0.0, 1.0]])
    ang = 0.15
    r_src = np.array([[np.cos(ang), 0, np.sin(ang)], [0, 1, 0], [-np.sin(ang), 0, np.cos(ang)]])
    img = np.zeros((3, 16, 16), dtype=np.float32)
    ref = CameraView(k, np.eye(3), np.zeros(3), 2.0, 6.0, img)
    src = CameraView(k, r_src, np.array([0.3, 0.05, 0.02]), 2.0, 6.0, img)
    pose = relative_pose(ref, src)
    px = rng.uniform(2, 13, 6)
    py = rng.uniform(2, 13, 6)
    wwa = rnd(2, 6)
    wwb = rnd(2, 6)
    wwc = rnd(2, 6)

    def warp_fwd(d):
        u, v, z, _ = warp_points(px, py, d, ref.k, src.k, pose)
        return _wsum(u, wwa) + _wsum(v, wwb) + _wsum(z, wwc)

    simple("warp_points.depth", lambda: check_gradients(
        warp_fwd, [rng.uniform(2.5, 5.5, (2, 6))]))

    weta = rnd(4, 3)
    simple("normalize_inv", lambda: check_gradients(
        lambda d: _wsum(normalize_inv(d, 2.0, 6.0), weta), [rng.uniform(2.2, 5.8, (4, 3))]))
    simple("denormalize_inv", lambda: check_gradients(
        lambda e: _wsum(denormalize_inv(e, 2.0, 6.0), weta), [rng.uniform(0.05, 0.95, (4, 3))]))

    return checks


def _substitute_params(module, names: list[str], tensors) -> None:
    """Replace named parameter tensors on a module tree (for gradient checks)."""
    for name, t in zip(names, tensors):
        obj = module
        *path, last = name.split(".")
        for part in path:
            obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
        setattr(obj, last, t)


_MODEL_COORDS = 48


def model_op_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    """Gradient checks for the composite network operations."""
    from .estimator import GruCell, gru_update, predict_depth
    from .geometry import inverse_grid, normalize_inv
    from .matching import AggregationUnet, group_correlation, integrate
    from .training import loss_class, loss_conf, loss_regress
    from .upsample import ConvexUpsampler

    def rnd(*shape):
        return rng.standard_normal(shape)

    checks: dict[str, Callable[[], float]] = {}

    wgc = rnd(4, 3, 6)
    checks["group_correlation"] = lambda: check_gradients(
        lambda f0, fi: _wsum(group_correlation(f0, fi, 4), wgc),
        [rnd(8, 6), rnd(8, 3, 6)], max_coords=_MODEL_COORDS)

    wint = rnd(4, 3, 2, 5)

    def integ(s1, s2, w1v, w2v):
        return _wsum(integrate([s1, s2], [w1v.sigmoid(), w2v.sigmoid()]), wint)

    checks["integrate"] = lambda: check_gradients(
        integ, [rnd(4, 3, 2, 5), rnd(4, 3, 2, 5), rnd(1, 1, 2, 5),
                rnd(1, 1, 2, 5)], max_coords=_MODEL_COORDS)

    with using_dtype(np.float64):
        unet = AggregationUnet(6, 3, np.random.default_rng(7))
        unet_names = list(unet.parameters())
        unet_init = [p.data.copy() for p in unet.parameters().values()]
    wun = rnd(3, 8, 8)

    def unet_fwd(x, *params):
        _substitute_params(unet, unet_names, params)
        return _wsum(unet(x), wun)

    checks["aggregate_unet"] = lambda: check_gradients(
        unet_fwd, [rnd(6, 8, 8)] + unet_init, max_coords=_MODEL_COORDS)

    with using_dtype(np.float64):
        gru = GruCell(4, 3, np.random.default_rng(8))
        gru_names = list(gru.parameters())
        gru_init = [p.data.copy() for p in gru.parameters().values()]
    wgru = rnd(4, 5, 5)

    def gru_fwd(h, x, *params):
        _substitute_params(gru, gru_names, params)
        return _wsum(gru_update(gru, h, x), wgru)

    checks["gru_update"] = lambda: check_gradients(
        gru_fwd, [np.tanh(rnd(4, 5, 5)), rnd(3, 5, 5)] + gru_init,
        max_coords=_MODEL_COORDS)

    inv = inverse_grid(2.0, 8.0, 16)
    rnd_read = rnd(4, 4)
    peaked = rnd(16, 4, 4)
    peaked[5] += 4.0  # keep the argmax stable under the FD perturbation

    def readout(logits):
        p = logits.softmax(0)
        depth, _ = predict_depth(p, inv, radius=2)
        return (depth * rnd_read).sum()

    checks["predict_depth"] = lambda: check_gradients(readout, [peaked], max_coords=_MODEL_COORDS)

    with using_dtype(np.float64):
        ups = ConvexUpsampler(6, np.random.default_rng(9))
        ups_names = list(ups.parameters())
        ups_init = [p.data.copy() for p in ups.parameters().values()]
    wup = rnd(16, 16)

    def ups_fwd(depth, feat, *params):
        _substitute_params(ups, ups_names, params)
        return _wsum(ups.upsample_depth(depth, feat), wup)

    checks["convex_upsample"] = lambda: check_gradients(
        ups_fwd, [rng.uniform(2, 5, (4, 4)), rnd(6, 4, 4)] + ups_init,
        max_coords=_MODEL_COORDS)

    d2 = 16
    x_gt = rng.integers(2, d2 - 2, size=(4, 4))
    valid = rng.random((4, 4)) > 0.2
    eta_gt = rng.uniform(0.1, 0.9, (4, 4))

    def lcls(logits):
        return loss_class(logits.softmax(0), x_gt, valid)

    checks["loss_class"] = lambda: check_gradients(
        lcls, [rnd(d2, 4, 4)], max_coords=_MODEL_COORDS)

    def lreg(logits):
        p = logits.softmax(0)
        depth, x_k = predict_depth(p, inv, radius=2)
        eta = normalize_inv(depth, 2.0, 8.0)
        return loss_regress(eta, x_k, eta_gt, x_gt, valid, radius=2, beta=float(d2))

    checks["loss_regress"] = lambda: check_gradients(
        lreg, [peaked.copy()], max_coords=_MODEL_COORDS)

    conf_gt = rng.random((4, 4)) > 0.5

    def lconf(raw):
        return loss_conf(raw.sigmoid(), conf_gt, valid)

    checks["loss_conf"] = lambda: check_gradients(
        lconf, [rnd(4, 4)], max_coords=_MODEL_COORDS)

    return checks


def run_suite(instances: int = 20, seed: int = 0,
              include_model_ops: bool = True) -> list[OpReport]:
    """Run every op check ``instances`` times with fresh random draws."""
    reports: list[OpReport] = []
    names: list[str] | None = None
    worst: dict[str, float] = {}
    for i in range(instances):
        rng = np.random.default_rng(seed * 1000 + i)
        checks = base_op_checks(rng)
        if include_model_ops:
            checks.update(model_op_checks(rng))
        if names is None:
            names = list(checks)
        for name in names:
            err = checks[name]()
            worst[name] = max(worst.get(name, 0.0), err)
    for name in names or []:
        reports.append(OpReport(name, worst[name], worst[name] < REL_TOL))
    return reports


def check_full_loss(size: int = 16, iters: int = 1, seed: int = 3,
                    coords_per_param: int = 4) -> float:
    """Central-difference check of the complete training loss.

    Builds a 2-view synthetic sample at ``size`` x ``size``, computes the full
    staged loss, and compares taped parameter gradients against central
    differences on sampled coordinates of every parameter tensor (plus all of
    the smallest ones).  Returns the max relative error.
    """
    from .estimator import DepthEstimator, EstimatorConfig
    from .scenes import SynthSpec, synth_scene
    from .training import TrainConfig, sample_loss

    rng = np.random.default_rng(seed)
    with using_dtype(np.float64):
        scene = synth_scene(SynthSpec(seed=seed, views=2, size=size, quads=1))
        cfg = EstimatorConfig(iters=iters)
        tcfg = TrainConfig(iters=iters, views=2)
        model = DepthEstimator(cfg, np.random.default_rng(seed + 1))
        params = model.parameters()

        def loss_value() -> float:
            with T.no_grad():
                return sample_loss(model, scene.views, 0, [1], tcfg, warmup=False).total.item()

        with Tape() as tape:
            breakdown = sample_loss(model, scene.views, 0, [1], tcfg, warmup=False)
        backward(tape, breakdown.total)

        abs_tol = ABS_TOL * max(1.0, abs(breakdown.total.item()))
        worst = 0.0
        for name, p in params.items():
            flat = p.data.reshape(-1)
            gflat = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
            if flat.size <= coords_per_param:
                picks = np.arange(flat.size)
            else:
                picks = rng.choice(flat.size, size=coords_per_param, replace=False)
            for j in picks:
                orig = flat[j]
                err = np.inf
                for step in (H_STEP, H_STEP / 16, H_STEP / 256):
                    flat[j] = orig + step
                    hi = loss_value()
                    flat[j] = orig - step
                    lo = loss_value()
                    flat[j] = orig
                    num = (hi - lo) / (2 * step)
                    if abs(gflat[j] - num) < abs_tol:
                        err = 0.0
                        break
                    err = min(err, rel_error(np.array(gflat[j]), np.array(num)))
                    if err < REL_TOL:
                        break
                worst = max(worst, err)
    return worst
