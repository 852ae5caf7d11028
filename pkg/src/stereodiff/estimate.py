"""End-to-end metric depth estimation in the three supported modes.

* ``full``: reprojection-guided diffusion sampling with per-step scale/shift
  updates, ensembled by per-pixel median;
* ``scale-shift-only``: the same sampler with latent guidance switched off, so
  only the scale and shift are fitted to the images;
* ``reprojection-only``: no diffusion at all; the prior's unguided sample is
  used as a starting relative map whose pixels are optimised directly together
  with scale and shift.

All modes start from the same calibration: a prior sample fixes a relative
map, the global scale is swept, and the raw scale/shift start where a
coarse-to-fine search over the depth range puts them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .diffusion import (
    AffineDecoder,
    GuidanceConfig,
    NoiseSchedule,
    StepRecord,
    Trajectory,
    ensemble_estimate,
    initial_latent,
    unguided_ddim,
)
from .errors import NonFiniteGradient
from .metric_param import (
    ScaleShiftParams,
    default_candidates,
    global_scale_search,
    metric_grads,
    scale_shift_search,
    to_metric,
    update_params,
)
from .photometric import GeoLossConfig, geo_loss
from .scene import DepthMap, ViewPair
from .warp import backward_warp

MODES = ("full", "scale-shift-only", "reprojection-only")


@dataclass(frozen=True)
class EstimateSettings:
    mode: str = "full"
    guidance: GuidanceConfig = GuidanceConfig()
    loss: GeoLossConfig = GeoLossConfig()
    lr: float = 1e-2
    # None runs the sweep; a number fixes g_s
    global_scale: float | None = None
    scale_candidates: tuple = (0.5, 100.0, 24)
    # None skips the range search and starts from s_init / t_init
    range_search: bool = True
    s_init: float = ScaleShiftParams.s_raw
    t_init: float = ScaleShiftParams.t_raw
    reprojection_iters: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.global_scale is not None and not self.global_scale > 0:
            raise ValueError("global scale must be positive")
        if self.reprojection_iters < 1:
            raise ValueError("reprojection_iters must be at least 1")


@dataclass(frozen=True, eq=False)
class EstimateResult:
    depth: DepthMap
    trajectories: list
    samples: list
    initial_params: ScaleShiftParams
    calibration_relative: np.ndarray


def prior_relative(model, schedule: NoiseSchedule, shape, seed: int, cond=None, decoder=None):
    """Decoded unguided sample of the prior, a relative map in [0, 1]."""
    decoder = decoder or AffineDecoder()
    return decoder.decode(unguided_ddim(model, schedule, initial_latent(shape, seed), cond))


def calibrate(pair: ViewPair, relative, settings: EstimateSettings) -> ScaleShiftParams:
    """Global scale from the sweep (or fixed), then the initial raw scale/shift."""
    rel = DepthMap(np.asarray(relative), None, relative=True)
    g = settings.global_scale
    if g is None:
        g = global_scale_search(pair, rel, default_candidates(*settings.scale_candidates), settings.loss)
    if settings.range_search:
        return scale_shift_search(pair, rel, g, settings.loss, lr=settings.lr)
    return ScaleShiftParams(settings.s_init, settings.t_init, g, settings.lr)


def reprojection_only(
    pair: ViewPair,
    relative,
    params: ScaleShiftParams,
    loss_cfg: GeoLossConfig,
    iters: int = 50,
    seed: int | None = None,
):
    """Gradient descent on the relative map's pixels and on the raw scale/shift.

    Pixel gradients use the same valid-pixel normalisation as latent guidance,
    and pixels stay in [0, 1]. Returns ``(metric depth, Trajectory)``.
    """
    x = np.array(relative, dtype=np.float64)
    traj = Trajectory(seed=seed, g_s=params.g_s)
    depth = None
    for k in range(iters):
        depth = to_metric(DepthMap(x, None, relative=True), params)
        warped = backward_warp(pair, depth)
        lv = geo_loss(pair.left_image, warped, loss_cfg, params)
        grad_depth = np.sum(lv.grad_wrt_rendered * warped.depth_jacobian, axis=-1)
        grad_x, grad_s, grad_t = metric_grads(x, params, grad_depth)
        grad_s += 2.0 * loss_cfg.gamma * params.s_raw
        grad_t += 2.0 * loss_cfg.gamma * params.t_raw
        if not np.all(np.isfinite(grad_x)):
            raise NonFiniteGradient("non-finite depth gradient")
        params = update_params(params, grad_s, grad_t)
        x = np.clip(x - params.lr * lv.n_valid * grad_x, 0.0, 1.0)
        traj.records.append(
            StepRecord(k, iters - k, lv.total, params.s_raw, params.t_raw, grad_s, grad_t, lv.n_valid)
        )
    return to_metric(DepthMap(x, None, relative=True), params), traj


def estimate(
    pair: ViewPair,
    model,
    schedule: NoiseSchedule,
    settings: EstimateSettings,
    seeds,
    decoder=None,
) -> EstimateResult:
    """Run one mode on a pair. ``schedule`` is the sampling schedule.

    The first seed also draws the calibration sample.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    cond = pair.left_image.data
    rel0 = prior_relative(model, schedule, pair.shape, seeds[0], cond, decoder)
    params = calibrate(pair, rel0, settings)

    if settings.mode == "reprojection-only":
        samples, trajectories = [], []
        for seed in seeds:
            start = rel0 if seed == seeds[0] else prior_relative(model, schedule, pair.shape, seed, cond, decoder)
            d, traj = reprojection_only(pair, start, params, settings.loss, settings.reprojection_iters, seed)
            samples.append(d)
            trajectories.append(traj)
        depth = DepthMap(np.median(np.stack([d.data for d in samples]), axis=0))
        return EstimateResult(depth, trajectories, samples, params, rel0)

    cfg = settings.guidance
    if settings.mode == "scale-shift-only":
        cfg = replace(cfg, lam=0.0)
    depth, trajectories, samples = ensemble_estimate(
        pair, model, cfg, schedule, seeds, params, settings.loss, decoder
    )
    return EstimateResult(depth, trajectories, samples, params, rel0)
