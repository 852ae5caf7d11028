"""Images, depth maps, pinhole cameras and single-point projection.

Conventions used throughout the package:

* pixel ``(i, j)`` (row, column) sits at continuous coordinate ``(u, v) = (j, i)``,
  so integer coordinates are pixel centres;
* camera frame is right-handed with +z forward, +x right, +y down;
* extrinsics ``E`` are camera-to-world rigid transforms in meters;
* all arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonPositiveDepth, NonRigidExtrinsic

RIGID_TOL = 1e-9


def _frozen(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major intensity grid of shape ``(height, width, channels)``.

    A 2-D array is promoted to a single channel. Values are clamped to [0, 1];
    NaN or Inf are rejected.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise DimensionMismatch(f"image must be HxW, HxWx1 or HxWx3, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(np.clip(data, 0.0, 1.0)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Row-major depth grid in meters with a per-pixel validity mask.

    Valid depths must be finite and strictly positive. Relative maps
    (``relative=True``) hold affine-invariant values in [0, 1] instead, where 0
    is allowed. Invalid entries are stored with NaN/Inf replaced by 0.
    """

    data: np.ndarray
    valid_mask: np.ndarray | None = None
    relative: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionMismatch(f"depth map must be 2-D, got {data.shape}")
        if self.valid_mask is None:
            mask = np.ones(data.shape, dtype=bool)
        else:
            mask = np.asarray(self.valid_mask, dtype=bool)
            if mask.shape != data.shape:
                raise DimensionMismatch(f"mask {mask.shape} does not match depth {data.shape}")
        vals = data[mask]
        if not np.all(np.isfinite(vals)):
            raise ValueError("depth map contains NaN or Inf at valid pixels")
        if self.relative:
            if np.any(vals < 0) or np.any(vals > 1):
                raise ValueError("relative depth must lie in [0, 1]")
        elif np.any(vals <= 0):
            raise NonPositiveDepth("valid depths must be strictly positive")
        data = np.where(mask, data, np.nan_to_num(data, nan=0.0, posinf=0.0, neginf=0.0))
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "valid_mask", _frozen(mask, bool))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def intrinsics(f: float, cx: float, cy: float, fy: float | None = None) -> np.ndarray:
    """Zero-skew pinhole matrix."""
    fy = f if fy is None else fy
    return np.array([[f, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def rigid(rotation=None, translation=None) -> np.ndarray:
    """4x4 homogeneous transform from a rotation block and a translation."""
    E = np.eye(4)
    if rotation is not None:
        E[:3, :3] = rotation
    if translation is not None:
        E[:3, 3] = translation
    return E


def check_rigid(E, tol: float = RIGID_TOL) -> None:
    E = np.asarray(E, dtype=np.float64)
    if E.shape != (4, 4):
        raise NonRigidExtrinsic(f"extrinsic must be 4x4, got {E.shape}")
    if not np.all(np.isfinite(E)):
        raise NonRigidExtrinsic("extrinsic contains NaN or Inf")
    R = E[:3, :3]
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise NonRigidExtrinsic("rotation block is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise NonRigidExtrinsic(f"rotation determinant is {np.linalg.det(R):.6g}, expected +1")
    if np.max(np.abs(E[3] - [0.0, 0.0, 0.0, 1.0])) > tol:
        raise NonRigidExtrinsic("bottom row must be (0, 0, 0, 1)")


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole intrinsics ``K`` plus camera-to-world extrinsics ``E``."""

    K: np.ndarray
    E: np.ndarray = None

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        E = np.eye(4) if self.E is None else np.asarray(self.E, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError(f"K must be 3x3, got {K.shape}")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if K[0, 1] != 0 or np.any(K[2] != [0.0, 0.0, 1.0]) or K[1, 0] != 0:
            raise ValueError("K must be zero-skew with last row (0, 0, 1)")
        check_rigid(E)
        object.__setattr__(self, "K", _frozen(K))
        object.__setattr__(self, "E", _frozen(E))

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])


@dataclass(frozen=True, eq=False)
class ViewPair:
    """Calibrated stereo pair; the left view is the reference.

    ``left_mask`` optionally marks left pixels that may be compared with the
    right view at all (False for pixels known to be occluded there).
    """

    left_view: CameraView
    left_image: Image
    right_view: CameraView
    right_image: Image
    left_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.left_image.data.shape != self.right_image.data.shape:
            raise DimensionMismatch(
                f"left {self.left_image.data.shape} and right {self.right_image.data.shape} differ"
            )
        if self.left_mask is not None:
            mask = np.asarray(self.left_mask, dtype=bool)
            if mask.shape != self.left_image.shape:
                raise DimensionMismatch(f"left mask {mask.shape} does not match {self.left_image.shape}")
            object.__setattr__(self, "left_mask", _frozen(mask, bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.left_image.shape


def invert_rigid(E) -> np.ndarray:
    R = E[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ E[:3, 3]
    return out


def relative_transform(src: CameraView, dst: CameraView) -> np.ndarray:
    """Map from ``src`` camera coordinates to ``dst`` camera coordinates (E_dst^-1 E_src)."""
    return invert_rigid(dst.E) @ src.E


def project_point(view: CameraView, p_cam) -> tuple[np.ndarray, float]:
    x, y, z = (float(v) for v in p_cam)
    if not z > 0:
        raise NonPositiveDepth(f"point has depth {z} <= 0 (behind the camera)")
    c = np.array([view.fx * x / z + view.cx, view.fy * y / z + view.cy])
    return c, z


def unproject_pixel(view: CameraView, c, depth: float) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth {depth} <= 0")
    u, v = (float(a) for a in c)
    return np.array([(u - view.cx) / view.fx * depth, (v - view.cy) / view.fy * depth, depth])
