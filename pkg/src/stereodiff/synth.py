"""Procedural rectified stereo scenes with exact ground-truth depth.

Depth and texture are continuous functions of the left-image pixel
coordinates. The left image samples the texture on the pixel grid; the right
image is rendered by solving, row by row, for the left coordinate that every
right pixel sees (nearest surface wins), then evaluating the same texture
there. Backward-warping the right image with the true depth therefore
reproduces the left image up to bilinear interpolation error.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .scene import CameraView, DepthMap, Image, ViewPair, intrinsics, rigid

LAYOUTS = ("planes", "slanted", "sphere", "heightfield")
TEXTURES = ("smooth", "checker", "dots")

SUPERSAMPLE = 8
# a jump of this many pixels of disparity between neighbouring fine samples
# marks a depth discontinuity rather than a surface
EDGE_DISPARITY_JUMP = 0.5
TEXTURE_VAR_FLOOR = 2e-3
TEXTURE_WINDOW = 7
TEXTURE_MIN_FRACTION = 0.9


@dataclass(frozen=True)
class SceneSpec:
    layout: str = "slanted"
    depth_range: tuple[float, float] = (4.0, 16.0)
    texture: str = "smooth"
    baseline: float = 0.5
    focal: float = 60.0
    width: int = 48
    height: int = 32
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        d_min, d_max = self.depth_range
        if not 0 < d_min < d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.depth_range}")
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}, expected one of {LAYOUTS}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}, expected one of {TEXTURES}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.width < 8 or self.height < 8:
            raise ValueError("images must be at least 8x8")


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    pair: ViewPair
    gt_depth_left: DepthMap
    gt_relative_left: DepthMap
    spec: SceneSpec
    d_min: float
    d_max: float
    # left pixels hidden from the right camera by a nearer surface
    left_occluded: np.ndarray = field(default=None)
    # right pixels no left-visible surface maps to; filled from the nearest neighbour
    right_filled: np.ndarray = field(default=None)


def rig(spec: SceneSpec) -> tuple[CameraView, CameraView]:
    """Left camera at the origin, right camera ``baseline`` meters along +x."""
    K = intrinsics(spec.focal, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0)
    return CameraView(K, np.eye(4)), CameraView(K, rigid(translation=[spec.baseline, 0.0, 0.0]))


# -- depth layouts ------------------------------------------------------------


def _smooth_field(rng, n_waves: int, min_wavelength: float, max_wavelength: float):
    wavelengths = rng.uniform(min_wavelength, max_wavelength, n_waves)
    angles = rng.uniform(0, 2 * np.pi, n_waves)
    phases = rng.uniform(0, 2 * np.pi, n_waves)
    amps = rng.uniform(0.5, 1.0, n_waves)
    kx = 2 * np.pi * np.cos(angles) / wavelengths
    ky = 2 * np.pi * np.sin(angles) / wavelengths

    def f(u, v):
        u = np.asarray(u, dtype=np.float64)[..., None]
        v = np.asarray(v, dtype=np.float64)[..., None]
        return np.sum(amps * np.sin(kx * u + ky * v + phases), axis=-1) / np.sqrt(n_waves)

    return f


def _make_depth_fn(spec: SceneSpec, rng):
    d_min, d_max = spec.depth_range
    w, h = spec.width, spec.height
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    if spec.layout == "planes":
        rects = []
        depths = [d_min] + list(rng.uniform(d_min, d_max, 1))
        for d in depths:
            rw = rng.uniform(0.25, 0.45) * w
            rh = rng.uniform(0.3, 0.6) * h
            x0 = rng.uniform(0.05 * w, w - rw - 0.05 * w)
            y0 = rng.uniform(0.05 * h, h - rh - 0.05 * h)
            rects.append((x0, y0, x0 + rw, y0 + rh, d))

        def depth(u, v):
            out = np.full(np.broadcast(u, v).shape, d_max)
            for x0, y0, x1, y1, d in rects:
                inside = (u >= x0) & (u <= x1) & (v >= y0) & (v <= y1)
                out = np.where(inside, np.minimum(out, d), out)
            return out

        return depth

    if spec.layout == "slanted":
        # a 3-D plane has inverse depth affine in pixel coordinates
        theta = rng.uniform(0, 2 * np.pi)
        a, b = np.cos(theta), np.sin(theta)
        corners = np.array([a * x + b * y for x in (0, w - 1) for y in (0, h - 1)])
        lo, hi = corners.min(), corners.max()
        inv_far, inv_near = 1.0 / d_max, 1.0 / d_min

        def depth(u, v):
            r = (a * np.asarray(u) + b * np.asarray(v) - lo) / (hi - lo)
            inv = inv_far + r * (inv_near - inv_far)
            return 1.0 / np.maximum(inv, 0.5 * inv_far)

        return depth

    if spec.layout == "sphere":
        radius_px = rng.uniform(0.22, 0.32) * min(w, h)
        pu = rng.uniform(0.35 * w, 0.65 * w)
        pv = rng.uniform(0.35 * h, 0.65 * h)
        ray_c = np.array([(pu - cx) / spec.focal, (pv - cy) / spec.focal, 1.0])
        # centre placed so the sphere's nearest point is roughly at d_min
        zc = d_min / (1.0 - radius_px / spec.focal)
        centre = ray_c * zc
        radius = radius_px * zc / spec.focal

        def depth(u, v):
            rx = (np.asarray(u, dtype=np.float64) - cx) / spec.focal
            ry = (np.asarray(v, dtype=np.float64) - cy) / spec.focal
            rr = rx * rx + ry * ry + 1.0
            rc = rx * centre[0] + ry * centre[1] + centre[2]
            disc = rc * rc - rr * (centre @ centre - radius**2)
            hit = disc >= 0
            z = (rc - np.sqrt(np.where(hit, disc, 0.0))) / rr
            return np.where(hit, np.minimum(np.maximum(z, d_min), d_max), d_max)

        return depth

    field_fn = _smooth_field(rng, 6, 1.2 * max(w, h), 3.0 * max(w, h))
    v_grid, u_grid = np.mgrid[0:h, 0:w].astype(np.float64)
    vals = field_fn(u_grid, v_grid)
    lo, hi = vals.min(), vals.max()

    def depth(u, v):
        r = np.clip((field_fn(u, v) - lo) / (hi - lo), 0.0, 1.0)
        return d_min + r * (d_max - d_min)

    return depth


# -- textures -------------------------------------------------------------------


def _make_texture_fn(spec: SceneSpec, rng):
    channel_fns = []
    for _ in range(spec.channels):
        if spec.texture == "smooth":
            f = _smooth_field(rng, 16, 4.0, 14.0)
            channel_fns.append(lambda u, v, f=f: 0.5 + 0.3 * f(u, v))
        elif spec.texture == "checker":
            period = rng.uniform(8.0, 12.0)
            ox, oy = rng.uniform(0, period, 2)

            def f(u, v, period=period, ox=ox, oy=oy):
                s = np.sin(2 * np.pi * (u + ox) / period) * np.sin(2 * np.pi * (v + oy) / period)
                return 0.5 + 0.35 * np.tanh(1.5 * s)

            channel_fns.append(f)
        else:
            area = (spec.width + 80) * spec.height
            n = int(area / 18)
            pu = rng.uniform(-40, spec.width + 40, n)
            pv = rng.uniform(-2, spec.height + 2, n)
            sig = rng.uniform(1.3, 2.5, n)
            amp = rng.uniform(-0.45, 0.45, n)

            def f(u, v, pu=pu, pv=pv, sig=sig, amp=amp):
                u = np.asarray(u, dtype=np.float64)[..., None]
                v = np.asarray(v, dtype=np.float64)[..., None]
                blobs = amp * np.exp(-((u - pu) ** 2 + (v - pv) ** 2) / (2 * sig**2))
                return 0.5 + np.sum(blobs, axis=-1)

            channel_fns.append(f)

    def texture(u, v):
        return np.clip(np.stack([f(u, v) for f in channel_fns], axis=-1), 0.0, 1.0)

    return texture


def texture_is_rich(img: np.ndarray, window: int = TEXTURE_WINDOW) -> bool:
    """True when enough local windows have intensity variance above the floor."""
    from numpy.lib.stride_tricks import sliding_window_view

    gray = img.mean(axis=-1)
    win = sliding_window_view(gray, (window, window))
    var = win.var(axis=(-2, -1))
    return bool(np.mean(var > TEXTURE_VAR_FLOOR) >= TEXTURE_MIN_FRACTION)


# -- right-view rendering -------------------------------------------------------------


def _visible_surface(u_l, disp, query):
    """For right-image columns ``query`` find the nearest surface seen there.

    ``u_l``/``disp`` are fine samples along one row of the left image. Returns
    the left coordinate and disparity of the visible point, NaN where nothing
    valid maps (disocclusions and regions outside the sampled span).
    """
    u_r = u_l - disp
    a, b = u_r[:-1], u_r[1:]
    ok = (b > a) & (np.abs(np.diff(disp)) < EDGE_DISPARITY_JUMP)
    q = np.asarray(query, dtype=np.float64)[:, None]
    covers = ok & (a <= q) & (q <= b)
    s = np.where(covers, (q - a) / np.where(ok, b - a, 1.0), 0.0)
    seg_disp = disp[:-1] + s * (disp[1:] - disp[:-1])
    # nearest surface has the largest disparity
    seg_disp = np.where(covers, seg_disp, -np.inf)
    k = np.argmax(seg_disp, axis=1)
    rows = np.arange(q.shape[0])
    hit = covers[rows, k]
    best_u = u_l[k] + s[rows, k] * (u_l[k + 1] - u_l[k])
    best_d = seg_disp[rows, k]
    return np.where(hit, best_u, np.nan), np.where(hit, best_d, np.nan)


def _render_right(spec: SceneSpec, depth_fn, texture_fn, gt_left: np.ndarray):
    w, h = spec.width, spec.height
    fb = spec.focal * spec.baseline
    max_disp = fb / spec.depth_range[0]
    pad = max_disp + 2.0
    u_fine = np.arange(-2.0 * SUPERSAMPLE, (w - 1 + pad) * SUPERSAMPLE + 1) / SUPERSAMPLE
    cols = np.arange(w, dtype=np.float64)

    right = np.zeros((h, w, spec.channels))
    filled = np.zeros((h, w), dtype=bool)
    occluded = np.zeros((h, w), dtype=bool)
    for i in range(h):
        v_fine = np.full_like(u_fine, float(i))
        disp = fb / depth_fn(u_fine, v_fine)
        src_u, _ = _visible_surface(u_fine, disp, cols)
        hole = np.isnan(src_u)
        if np.all(hole):
            src_u = cols.copy()
            hole[:] = True
        elif np.any(hole):
            good = np.flatnonzero(~hole)
            nearest = good[np.abs(good[None, :] - np.flatnonzero(hole)[:, None]).argmin(axis=1)]
            src_u[hole] = src_u[nearest]
        right[i] = texture_fn(src_u, np.full(w, float(i)))
        filled[i] = hole

        # a left pixel is occluded when the right camera sees a nearer surface there
        left_disp = fb / gt_left[i]
        target = cols - left_disp
        inside = (target >= 0) & (target <= w - 1)
        _, seen_disp = _visible_surface(u_fine, disp, np.clip(target, 0, w - 1))
        occluded[i] = inside & ~(np.abs(seen_disp - left_disp) <= 1e-3 * left_disp + 1e-9)
    return right, filled, occluded


def generate_scene(spec: SceneSpec, max_texture_tries: int = 20) -> SyntheticScene:
    """Build a seeded scene; identical specs give bit-identical scenes."""
    rng = np.random.default_rng(spec.seed)
    depth_fn = _make_depth_fn(spec, rng)
    v, u = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    gt = depth_fn(u, v)

    for _ in range(max_texture_tries):
        texture_fn = _make_texture_fn(spec, rng)
        left = texture_fn(u, v)
        if texture_is_rich(left):
            break
    else:
        raise RuntimeError(f"could not synthesise a textured image for {spec}")

    right, filled, occluded = _render_right(spec, depth_fn, texture_fn, gt)
    left_view, right_view = rig(spec)
    pair = ViewPair(left_view, Image(left), right_view, Image(right), left_mask=~occluded)
    d_min, d_max = float(gt.min()), float(gt.max())
    rel = (gt - d_min) / (d_max - d_min)
    return SyntheticScene(
        pair=pair,
        gt_depth_left=DepthMap(gt),
        gt_relative_left=DepthMap(rel, relative=True),
        spec=spec,
        d_min=d_min,
        d_max=d_max,
        left_occluded=occluded,
        right_filled=filled,
    )


def relative_depth(spec: SceneSpec) -> np.ndarray:
    """Ground-truth relative depth of a spec without rendering any images."""
    rng = np.random.default_rng(spec.seed)
    depth_fn = _make_depth_fn(spec, rng)
    v, u = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    gt = depth_fn(u, v)
    return (gt - gt.min()) / (gt.max() - gt.min())


def generate_corpus(n: int, spec_template: SceneSpec, seed: int) -> list[np.ndarray]:
    """``n`` independent relative-depth fields mapped to the latent range [-1, 1]."""
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
    return [2.0 * relative_depth(replace(spec_template, seed=int(s))) - 1.0 for s in seeds]
