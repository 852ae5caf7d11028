"""Differentiable backward warping between two calibrated views.

The reference (source) depth map decides where every reference pixel lands in
the other view; the other view's image is then gathered there with bilinear
interpolation. Derivatives are taken with respect to the reference depth only,
and since each output pixel depends on the depth of that same pixel alone, the
Jacobian is stored densely as one value per pixel and channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .scene import CameraView, DepthMap, Image, ViewPair, relative_transform


@dataclass(frozen=True, eq=False)
class CorrespondenceField:
    """Continuous target coordinates for every source pixel.

    ``coords[..., 0]`` is the column coordinate u, ``coords[..., 1]`` the row
    coordinate v. ``coords_grad`` holds d(coords)/d(source depth) per pixel.
    """

    coords: np.ndarray
    in_bounds_mask: np.ndarray
    coords_grad: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True, eq=False)
class WarpResult:
    image: Image
    validity: np.ndarray
    depth_jacobian: np.ndarray
    field: CorrespondenceField | None = None


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Column and row coordinate arrays of pixel centres."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def map_coordinates(
    src: CameraView,
    dst: CameraView,
    depth: DepthMap,
    shape: tuple[int, int] | None = None,
    border: float = 0.0,
) -> CorrespondenceField:
    """Transfer every source pixel through its depth into the destination image.

    ``shape`` is the (height, width) of the destination image used for the
    bounds test and defaults to the depth map's shape.
    """
    h, w = depth.shape
    th, tw = (h, w) if shape is None else shape
    u, v = pixel_grid(h, w)
    d = depth.data

    # unit-depth ray through each source pixel
    rx = (u - src.cx) / src.fx
    ry = (v - src.cy) / src.fy
    T = relative_transform(src, dst)
    R, t = T[:3, :3], T[:3, 3]
    # ray direction in the destination frame, scaled by depth, plus translation
    ax = R[0, 0] * rx + R[0, 1] * ry + R[0, 2]
    ay = R[1, 0] * rx + R[1, 1] * ry + R[1, 2]
    az = R[2, 0] * rx + R[2, 1] * ry + R[2, 2]
    qx = d * ax + t[0]
    qy = d * ay + t[1]
    qz = d * az + t[2]

    front = depth.valid_mask & (qz > 0)
    safe_z = np.where(front, qz, 1.0)
    if np.array_equal(T, np.eye(4)) and np.array_equal(src.K, dst.K):
        # identical views: keep the pixel grid bit-exact
        u2, v2 = u, v
    else:
        u2 = dst.fx * qx / safe_z + dst.cx
        v2 = dst.fy * qy / safe_z + dst.cy
    # quotient rule on q(d) = d * a + t
    du = dst.fx * (ax * safe_z - qx * az) / safe_z**2
    dv = dst.fy * (ay * safe_z - qy * az) / safe_z**2

    mask = (
        front
        & (u2 >= border)
        & (u2 <= tw - 1 - border)
        & (v2 >= border)
        & (v2 <= th - 1 - border)
    )
    coords = np.stack([np.where(front, u2, 0.0), np.where(front, v2, 0.0)], axis=-1)
    grad = np.stack([np.where(front, du, 0.0), np.where(front, dv, 0.0)], axis=-1)
    return CorrespondenceField(coords=coords, in_bounds_mask=mask, coords_grad=grad)


def _bilinear(data: np.ndarray, u: np.ndarray, v: np.ndarray, mask: np.ndarray):
    """Gather ``data`` (H, W, C) at (u, v); returns values and d/du, d/dv."""
    h, w = data.shape[:2]
    # lower corner is clipped so a coordinate on the last row/column uses the
    # final cell with weight 1 on its far corner
    x0 = np.clip(np.floor(np.where(mask, u, 0.0)), 0, w - 2).astype(np.intp)
    y0 = np.clip(np.floor(np.where(mask, v, 0.0)), 0, h - 2).astype(np.intp)
    ax = (np.where(mask, u, 0.0) - x0)[..., None]
    ay = (np.where(mask, v, 0.0) - y0)[..., None]

    i00 = data[y0, x0]
    i01 = data[y0, x0 + 1]
    i10 = data[y0 + 1, x0]
    i11 = data[y0 + 1, x0 + 1]

    top = (1.0 - ax) * i00 + ax * i01
    bottom = (1.0 - ax) * i10 + ax * i11
    out = (1.0 - ay) * top + ay * bottom
    d_du = (1.0 - ay) * (i01 - i00) + ay * (i11 - i10)
    d_dv = bottom - top

    m = mask[..., None]
    return np.where(m, out, 0.0), np.where(m, d_du, 0.0), np.where(m, d_dv, 0.0)


def bilinear_sample(img: Image, field: CorrespondenceField) -> tuple[Image, np.ndarray]:
    """Sample ``img`` at the field's coordinates.

    Pixels whose coordinate is masked out or whose 2x2 neighbourhood leaves the
    image are invalid and set to zero.
    """
    u = field.coords[..., 0]
    v = field.coords[..., 1]
    h, w = img.shape
    valid = field.in_bounds_mask & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    out, _, _ = _bilinear(img.data, u, v, valid)
    return Image(out), valid


def backward_warp(pair: ViewPair, depth_left: DepthMap, border: float = 0.0) -> WarpResult:
    """Re-render the left image from the right image using the left depth."""
    if depth_left.shape != pair.left_image.shape:
        raise DimensionMismatch(
            f"depth {depth_left.shape} does not match left image {pair.left_image.shape}"
        )
    field = map_coordinates(
        pair.left_view, pair.right_view, depth_left, shape=pair.right_image.shape, border=border
    )
    u = field.coords[..., 0]
    v = field.coords[..., 1]
    valid = field.in_bounds_mask
    if pair.left_mask is not None:
        valid = valid & pair.left_mask
    out, d_du, d_dv = _bilinear(pair.right_image.data, u, v, valid)
    jac = d_du * field.coords_grad[..., 0:1] + d_dv * field.coords_grad[..., 1:2]
    jac = np.where(valid[..., None], jac, 0.0)
    return WarpResult(image=Image(out), validity=valid, depth_jacobian=jac, field=field)
