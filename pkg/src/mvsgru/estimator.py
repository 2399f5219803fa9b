"""GRU-based per-pixel depth probability estimator.

Initializes a hidden state from coarse plane-sweep matching, then runs K
convolutional-GRU updates at 1/4 resolution.  Each update injects fresh
multi-scale matching evidence around the previous estimate; depth is read
out with an argmax-windowed expectation over inverse depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .features import FeatureExtractor, FeaturePyramid
from .geometry import (CameraView, denormalize_inv, inverse_grid, normalize_inv,
                       relative_pose, sample_inverse_uniform, scale_intrinsics)
from .matching import (GROUPS, AggregationUnet, ViewWeightCNN, integrate,
                       multiscale_similarity, view_weight, warp_and_correlate)
from .nn import Conv2d, Module
from .tensor import Tensor, bilinear_resize, concat, take_depth
from .upsample import ConvexUpsampler


@dataclass
class EstimatorConfig:
    iters: int = 4
    init_hyps: int = 32
    prob_samples: int = 256
    readout_radius: int = 4
    groups: int = GROUPS
    radii: tuple[float, ...] = (2.0 ** -7, 2.0 ** -5, 2.0 ** -3)
    counts: tuple[int, ...] = (4, 4, 2)
    hidden: int = 32


class GruCell(Module):
    """Convolutional gated recurrent unit over [hidden + input] channels."""

    def __init__(self, hidden: int, x_ch: int, rng: np.random.Generator):
        self.hidden = hidden
        self.x_ch = x_ch
        self.wz = Conv2d(hidden + x_ch, hidden, 3, rng)
        self.wr = Conv2d(hidden + x_ch, hidden, 3, rng)
        self.wh = Conv2d(hidden + x_ch, hidden, 3, rng)


def gru_update(cell: GruCell, h: Tensor, x: Tensor) -> Tensor:
    if h.shape[0] != cell.hidden or x.shape[0] != cell.x_ch:
        raise ShapeError(f"gru expects {cell.hidden}+{cell.x_ch} channels, "
                         f"got {h.shape[0]}+{x.shape[0]}")
    hx = concat([h, x], 0)
    z = cell.wz(hx).sigmoid()
    r = cell.wr(hx).sigmoid()
    candidate = cell.wh(concat([r * h, x], 0)).tanh()
    return (1.0 - z) * h + z * candidate


def predict_depth(prob: Tensor, inv_grid: np.ndarray,
                  radius: int) -> tuple[Tensor, np.ndarray]:
    """Hybrid readout: expectation in inverse depth near the argmax.

    prob: normalized [D, H, W].  Ties in the argmax resolve to the lowest
    index.  The window [X-r, X+r] is intersected with [0, D-1] and the
    probabilities renormalized inside it.
    """
    d = prob.shape[0]
    x_best = np.argmax(prob.data, axis=0)
    offsets = np.arange(-radius, radius + 1)
    idx = x_best[None] + offsets[:, None, None]
    inside = (idx >= 0) & (idx < d)
    idx_c = np.clip(idx, 0, d - 1)
    win = take_depth(prob, idx_c) * inside.astype(prob.dtype)
    mass = win.sum(0)
    inv_exp = (win * inv_grid[idx_c]).sum(0) / mass
    return 1.0 / inv_exp, x_best


@dataclass
class InitState:
    h0: Tensor
    s_init: Tensor               # [D1, H/8, W/8]
    weights_up: list[Tensor]     # per source, [1, H/4, W/4]
    inv_grid_init: np.ndarray    # [D1]
    d_init: Tensor               # [H/4, W/4]
    d_init_coarse: Tensor        # [H/8, W/8]


@dataclass
class RunResult:
    """Everything the loss and the CLI need from one forward pass."""
    d_init: Tensor
    probs: list[Tensor] = field(default_factory=list)
    depths: list[Tensor] = field(default_factory=list)
    indices: list[np.ndarray] = field(default_factory=list)
    confs: list[Tensor] = field(default_factory=list)
    d_up: Tensor | None = None
    conf_up: Tensor | None = None
    d_min: float = 0.0
    d_max: float = 0.0
    inv_grid: np.ndarray | None = None


class DepthEstimator(Module):
    def __init__(self, cfg: EstimatorConfig, rng: np.random.Generator):
        if cfg.iters < 0:
            raise ConfigError("iteration count must be >= 0")
        if len(cfg.radii) != 3 or len(cfg.counts) != 3:
            raise ConfigError("need radii and counts for exactly 3 levels")
        if any(r2 >= r1 for r1, r2 in zip(cfg.radii[1:], cfg.radii)):
            raise ConfigError("search radii must grow with the level")
        self.cfg = cfg
        self.fpn = FeatureExtractor(rng)
        self.vw_cnn = ViewWeightCNN(cfg.groups, rng)
        self.init_unet = AggregationUnet(cfg.groups * cfg.init_hyps,
                                         cfg.init_hyps, rng)
        # correlation logits live in [-1, 1]; the gain sharpens their
        # softmax so the coarse expectation tracks the argmax from the start
        self.init_gain = Tensor(np.full((), 8.0), requires_grad=True)
        self.h0a = Conv2d(cfg.init_hyps, cfg.hidden, 3, rng)
        self.h0b = Conv2d(cfg.hidden, cfg.hidden, 3, rng)
        self.level_unets = [AggregationUnet(cfg.groups * n, n, rng)
                            for n in cfg.counts]
        self.gru = GruCell(cfg.hidden, 1 + sum(cfg.counts), rng)
        self.prob_head = Conv2d(cfg.hidden, cfg.prob_samples, 3, rng)
        self.conf_head = Conv2d(cfg.hidden, 1, 3, rng)
        self.upsampler = ConvexUpsampler(32, rng)

    def initialize(self, pyramids: list[FeaturePyramid],
                   views: list[CameraView]) -> InitState:
        """Coarse plane sweep at 1/8 resolution over D1 hypotheses."""
        cfg = self.cfg
        ref = views[0]
        f3 = pyramids[0].f3
        h8, w8 = f3.shape[1], f3.shape[2]
        h4, w4 = h8 * 2, w8 * 2
        depths = sample_inverse_uniform(ref.d_min, ref.d_max, cfg.init_hyps)
        hyp_vol = np.broadcast_to(depths[:, None, None],
                                  (cfg.init_hyps, h8, w8))
        ys, xs = np.meshgrid(np.arange(h8, dtype=np.float64),
                             np.arange(w8, dtype=np.float64), indexing="ij")
        k_ref = scale_intrinsics(ref.k, 3)
        sims, weights, weights_up = [], [], []
        for src_pyr, src in zip(pyramids[1:], views[1:]):
            pose = relative_pose(ref, src)
            sim, valid = warp_and_correlate(
                f3, src_pyr.f3, xs, ys, hyp_vol, k_ref,
                scale_intrinsics(src.k, 3), pose, cfg.groups)
            w, _ = view_weight(self.vw_cnn, sim, valid)
            sims.append(sim)
            weights.append(w.reshape((1, 1, h8, w8)))
            weights_up.append(bilinear_resize(w, (h4, w4)))
        merged = integrate(sims, weights)
        merged = merged.reshape((cfg.groups * cfg.init_hyps, h8, w8))
        s_init = self.init_unet(merged) * self.init_gain
        pre = self.h0b(self.h0a(s_init).leaky_relu())
        h0 = bilinear_resize(pre, (h4, w4)).tanh()
        inv_init = inverse_grid(ref.d_min, ref.d_max, cfg.init_hyps)
        p_init = s_init.softmax(0)
        d_coarse = 1.0 / (p_init * inv_init[:, None, None]).sum(0)
        d_init = bilinear_resize(d_coarse, (h4, w4))
        return InitState(h0, s_init, weights_up, inv_init, d_init, d_coarse)

    def generate_hypotheses(self, d_prev: Tensor, d_min: float,
                            d_max: float) -> list[Tensor]:
        """Per-level hypothesis sets around the previous estimate.

        N_l samples spaced evenly over [eta - R_l, eta + R_l] in normalized
        inverse depth, clamped to [0, 1], then mapped back to depth.
        """
        eta = normalize_inv(d_prev, d_min, d_max)
        h4, w4 = eta.shape
        eta = eta.reshape((1, h4, w4))
        out = []
        for radius, count in zip(self.cfg.radii, self.cfg.counts):
            offs = np.linspace(-radius, radius, count)
            samples = (eta + offs[:, None, None]).clip(0.0, 1.0)
            out.append(denormalize_inv(samples, d_min, d_max))
        return out

    def predict_probability(self, h: Tensor) -> Tensor:
        return self.prob_head(h).softmax(0)

    def predict_confidence(self, h: Tensor) -> Tensor:
        c = self.conf_head(h).sigmoid()
        return c.reshape((h.shape[1], h.shape[2]))

    def run(self, views: list[CameraView], iters: int | None = None,
            upsample: bool = True) -> RunResult:
        """Full forward pass; views[0] is the reference."""
        cfg = self.cfg
        if len(views) < 2:
            raise ConfigError("need a reference and at least one source view")
        k = cfg.iters if iters is None else iters
        ref = views[0]
        pyramids = [self.fpn.extract(v.image) for v in views]
        init = self.initialize(pyramids, views)
        inv2 = inverse_grid(ref.d_min, ref.d_max, cfg.prob_samples)
        poses = [relative_pose(ref, src) for src in views[1:]]
        res = RunResult(d_init=init.d_init, d_min=ref.d_min, d_max=ref.d_max,
                        inv_grid=inv2)
        h = init.h0
        h4, w4 = h.shape[1], h.shape[2]

        def readout(hidden: Tensor) -> None:
            prob = self.predict_probability(hidden)
            depth, x_best = predict_depth(prob, inv2, cfg.readout_radius)
            res.probs.append(prob)
            res.depths.append(depth)
            res.indices.append(x_best)
            res.confs.append(self.predict_confidence(hidden))

        readout(h)
        for _ in range(k):
            hyps = self.generate_hypotheses(res.depths[-1], ref.d_min,
                                            ref.d_max)
            s_bar = multiscale_similarity(pyramids, views, poses, hyps,
                                          init.weights_up, self.level_unets,
                                          cfg.groups)
            eta_prev = normalize_inv(res.depths[-1], ref.d_min, ref.d_max)
            x_in = concat([eta_prev.reshape((1, h4, w4)), s_bar], 0)
            h = gru_update(self.gru, h, x_in)
            readout(h)
        if upsample:
            res.d_up = self.upsampler.upsample_depth(res.depths[-1],
                                                     pyramids[0].f2)
            res.conf_up = bilinear_resize(res.confs[-1], (h4 * 4, w4 * 4))
        return res
