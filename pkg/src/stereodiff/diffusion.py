"""Variance-preserving schedule, Tweedie estimate and reprojection-guided DDIM.

Denoisers follow the epsilon-prediction convention: ``predict`` returns the
noise estimate, the clean latent is ``(z - sqrt(1 - a) * eps) / sqrt(a)`` and
the score is ``-eps / sqrt(1 - a)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import NonFiniteLoss
from .metric_param import ScaleShiftParams, metric_grads, to_metric, update_params
from .photometric import GeoLossConfig, geo_loss
from .scene import DepthMap, ViewPair
from .warp import backward_warp


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Discrete schedule with ``alpha_bar[0] = 1`` and ``alpha_bar[t] = prod(1 - beta[1..t])``.

    ``beta[0]`` is a placeholder 0 so that ``beta[t]`` lines up with step ``t``.
    """

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2 or beta[0] != 0.0:
            raise ValueError("beta must be 1-D with beta[0] == 0 and at least one step")
        if np.any(beta[1:] <= 0) or np.any(beta[1:] >= 1):
            raise ValueError("beta values must lie in (0, 1)")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        alpha_bar = np.cumprod(1.0 - beta)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def T(self) -> int:
        return self.beta.size - 1

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        return cls(np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)]))

    @classmethod
    def from_alpha_bar(cls, alpha_bar):
        a = np.asarray(alpha_bar, dtype=np.float64)
        if a[0] != 1.0:
            a = np.concatenate([[1.0], a])
        return cls(np.concatenate([[0.0], 1.0 - a[1:] / a[:-1]]))

    def subsample(self, steps: int) -> "NoiseSchedule":
        """Sampling schedule keeping ``steps`` evenly spaced levels plus the clean end."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must lie in [1, {self.T}], got {steps}")
        idx = np.unique(np.round(np.linspace(0, self.T, steps + 1)).astype(int))
        return NoiseSchedule.from_alpha_bar(self.alpha_bar[idx])

    def corrupt(self, z0: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
        a = self.alpha_bar[t]
        return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * noise


class DenoiserModel(Protocol):
    """Noise predictor standing in for the pretrained score network."""

    def predict(self, z: np.ndarray, t: int, schedule: NoiseSchedule, cond=None) -> np.ndarray:
        ...

    def vjp(
        self, z: np.ndarray, t: int, schedule: NoiseSchedule, cond, cotangent: np.ndarray
    ) -> np.ndarray:
        """``cotangent @ d(predict)/dz``."""
        ...


class AffineDecoder:
    """Latent range [-1, 1] to relative depth [0, 1], clipped at the ends."""

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.clip(0.5 * (z + 1.0), 0.0, 1.0)

    def vjp(self, z: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        inside = (z > -1.0) & (z < 1.0)
        return np.where(inside, 0.5 * cotangent, 0.0)


JACOBIAN_MODES = ("full", "first-order")


@dataclass(frozen=True)
class GuidanceConfig:
    lam: float = 1.0
    steps: int = 50
    jacobian_mode: str = "full"
    ensemble_size: int = 10
    # keep the clean estimate inside the latent range before the DDIM move
    clip_denoised: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("guidance strength must be non-negative")
        if self.steps < 1:
            raise ValueError("need at least one step")
        if self.jacobian_mode not in JACOBIAN_MODES:
            raise ValueError(f"jacobian_mode must be one of {JACOBIAN_MODES}")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be at least 1")


@dataclass(frozen=True, eq=False)
class LatentState:
    z: np.ndarray
    t: int
    rng_seed: int | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.z)):
            raise NonFiniteLoss("latent contains non-finite values", {"t": self.t})
        if self.t < 0:
            raise ValueError("step index must be non-negative")


@dataclass(frozen=True)
class StepRecord:
    step: int
    t: int
    loss: float
    s_raw: float
    t_raw: float
    grad_s: float
    grad_t: float
    n_valid: int


@dataclass
class Trajectory:
    seed: int | None
    g_s: float
    records: list = field(default_factory=list)

    @property
    def n_updates(self) -> int:
        return len(self.records)


def tweedie(z_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """One-step clean-latent estimate from the predicted noise."""
    a = schedule.alpha_bar[t]
    return (z_t - math.sqrt(1.0 - a) * eps_hat) / math.sqrt(a)


def ddim_update(z0_hat: np.ndarray, eps_hat: np.ndarray, a_prev: float) -> np.ndarray:
    """Deterministic DDIM move to the noise level ``a_prev``."""
    return math.sqrt(a_prev) * z0_hat + math.sqrt(1.0 - a_prev) * eps_hat


def clipped_estimates(z_t, t: int, z0_hat, schedule: NoiseSchedule, lo: float = -1.0, hi: float = 1.0):
    """Clip the clean estimate to [lo, hi] and re-derive the matching noise.

    A weak denoiser's clean estimate at high noise can land far outside the
    data range; dividing by sqrt(alpha_bar) then amplifies it step after step.
    """
    a = schedule.alpha_bar[t]
    z0c = np.clip(z0_hat, lo, hi)
    return z0c, (z_t - math.sqrt(a) * z0c) / math.sqrt(1.0 - a)


@dataclass(frozen=True, eq=False)
class GuidanceEval:
    """Everything computed from one latent: loss pieces and all gradients."""

    eps: np.ndarray
    z0: np.ndarray
    relative: np.ndarray
    depth: DepthMap
    loss: float
    n_valid: int
    grad_s: float
    grad_t: float
    grad_z: np.ndarray | None


def evaluate_guidance(
    z: np.ndarray,
    t: int,
    model: DenoiserModel,
    pair: ViewPair,
    params: ScaleShiftParams,
    schedule: NoiseSchedule,
    loss_cfg: GeoLossConfig,
    jacobian_mode: str = "full",
    decoder=None,
    need_grad_z: bool = True,
    pixel_normalized: bool = True,
) -> GuidanceEval:
    """Run denoiser, Tweedie, decoder, metric map, warp and loss; backpropagate.

    ``pixel_normalized`` multiplies the latent gradient by the number of valid
    pixels so per-pixel guidance does not shrink with image size (the loss
    itself is a per-pixel mean).
    """
    decoder = decoder or AffineDecoder()
    cond = pair.left_image.data
    eps = model.predict(z, t, schedule, cond)
    z0 = tweedie(z, t, eps, schedule)
    x = decoder.decode(z0)
    depth = to_metric(DepthMap(x, None, relative=True), params)
    warped = backward_warp(pair, depth)
    lv = geo_loss(pair.left_image, warped, loss_cfg, params)
    if not math.isfinite(lv.total):
        raise NonFiniteLoss("reprojection loss is not finite", {"t": t, "s_raw": params.s_raw})

    grad_depth = np.sum(lv.grad_wrt_rendered * warped.depth_jacobian, axis=-1)
    grad_x, grad_s, grad_t = metric_grads(x, params, grad_depth)
    grad_s += 2.0 * loss_cfg.gamma * params.s_raw
    grad_t += 2.0 * loss_cfg.gamma * params.t_raw

    grad_z = None
    if need_grad_z:
        a = schedule.alpha_bar[t]
        g0 = decoder.vjp(z0, grad_x)
        if jacobian_mode == "full":
            grad_z = (g0 - math.sqrt(1.0 - a) * model.vjp(z, t, schedule, cond, g0)) / math.sqrt(a)
        else:
            grad_z = g0 / math.sqrt(a)
        if pixel_normalized:
            grad_z = grad_z * lv.n_valid
    return GuidanceEval(eps, z0, x, depth, lv.total, lv.n_valid, grad_s, grad_t, grad_z)


def guided_step(
    state: LatentState,
    model: DenoiserModel,
    pair: ViewPair,
    params: ScaleShiftParams,
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
    loss_cfg: GeoLossConfig | None = None,
    decoder=None,
):
    """One guided DDIM step from ``state.t`` to ``state.t - 1``.

    Returns ``(next_state, new_params, record, metric_depth)``; the metric depth
    is the one-step estimate computed with the parameters before the update.
    """
    t = state.t
    if t < 1:
        raise ValueError("cannot step below t = 0")
    loss_cfg = loss_cfg or GeoLossConfig()
    ev = evaluate_guidance(
        state.z, t, model, pair, params, schedule, loss_cfg, cfg.jacobian_mode, decoder,
        need_grad_z=cfg.lam > 0,
    )
    new_params = update_params(params, ev.grad_s, ev.grad_t)
    z0, eps = ev.z0, ev.eps
    if cfg.clip_denoised:
        z0, eps = clipped_estimates(state.z, t, z0, schedule)
    z_next = ddim_update(z0, eps, schedule.alpha_bar[t - 1])
    if cfg.lam > 0:
        z_next = z_next - cfg.lam * ev.grad_z
    if not np.all(np.isfinite(z_next)):
        raise NonFiniteLoss("latent update is not finite", {"t": t, "loss": ev.loss})
    record = StepRecord(
        step=schedule.T - t,
        t=t,
        loss=ev.loss,
        s_raw=new_params.s_raw,
        t_raw=new_params.t_raw,
        grad_s=ev.grad_s,
        grad_t=ev.grad_t,
        n_valid=ev.n_valid,
    )
    return LatentState(z_next, t - 1, state.rng_seed), new_params, record, ev.depth


def initial_latent(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def sample_metric_depth(
    pair: ViewPair,
    model: DenoiserModel,
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
    seed: int,
    params: ScaleShiftParams,
    loss_cfg: GeoLossConfig | None = None,
    decoder=None,
) -> tuple[DepthMap, Trajectory]:
    """Full guided trajectory from seeded noise; ``schedule`` is the sampling schedule.

    ``params`` carries the pre-selected global scale and initial raw scale/shift.
    """
    state = LatentState(initial_latent(pair.shape, seed), schedule.T, seed)
    traj = Trajectory(seed=seed, g_s=params.g_s)
    depth = None
    while state.t > 0:
        state, params, record, depth = guided_step(
            state, model, pair, params, cfg, schedule, loss_cfg, decoder
        )
        traj.records.append(record)
    return depth, traj


def ensemble_estimate(
    pair: ViewPair,
    model: DenoiserModel,
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
    seeds,
    params: ScaleShiftParams,
    loss_cfg: GeoLossConfig | None = None,
    decoder=None,
) -> tuple[DepthMap, list[Trajectory], list[DepthMap]]:
    """Per-pixel median of independent guided samples, one per seed."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    samples, trajectories = [], []
    for seed in seeds:
        depth, traj = sample_metric_depth(pair, model, cfg, schedule, seed, params, loss_cfg, decoder)
        samples.append(depth)
        trajectories.append(traj)
    stack = np.stack([d.data for d in samples])
    return DepthMap(np.median(stack, axis=0)), trajectories, samples


def unguided_ddim(
    model: DenoiserModel, schedule: NoiseSchedule, z_T: np.ndarray, cond=None, clip_denoised: bool = True
):
    """Plain deterministic DDIM; returns the final latent."""
    z = z_T
    for t in range(schedule.T, 0, -1):
        eps = model.predict(z, t, schedule, cond)
        z0 = tweedie(z, t, eps, schedule)
        if clip_denoised:
            z0, eps = clipped_estimates(z, t, z0, schedule)
        z = ddim_update(z0, eps, schedule.alpha_bar[t - 1])
    return z
