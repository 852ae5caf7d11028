import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stereodiff.scene import CameraView, Image, ViewPair, intrinsics, rigid
from stereodiff.synth import SceneSpec

settings.register_profile("repo", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

LAYOUTS = ("planes", "slanted", "sphere", "heightfield")
TEXTURES = ("smooth", "checker", "dots")


def suite_specs(n: int = 20) -> list[SceneSpec]:
    """The standard 20-scene suite: near depths log-spaced 2..25 m, far up to 50 m.

    The baseline is chosen so the nearest surface has 6 px of disparity.
    """
    ratios = [3, 4, 2.5, 3, 2, 2.5, 5, 4]
    specs = []
    for k, d_min in enumerate(np.geomspace(2.0, 25.0, n)):
        d_min = float(d_min)
        d_max = min(d_min * ratios[k % len(ratios)], 50.0)
        specs.append(
            SceneSpec(
                layout=LAYOUTS[k % 4],
                texture=TEXTURES[k % 3],
                depth_range=(d_min, d_max),
                baseline=6.0 * d_min / 60.0,
                seed=k,
            )
        )
    return specs


def rectified_views(f=100.0, cx=32.0, cy=24.0, baseline=0.5):
    K = intrinsics(f, cx, cy)
    return CameraView(K, np.eye(4)), CameraView(K, rigid(translation=[baseline, 0.0, 0.0]))


def smooth_image(h, w, seed=0, channels=1):
    rng = np.random.default_rng(seed)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w, channels))
    for c in range(channels):
        for _ in range(4):
            fx, fy = rng.uniform(0.15, 0.5, 2)
            ph = rng.uniform(0, 2 * np.pi)
            out[:, :, c] += np.sin(fx * u + fy * v + ph)
    out = (out - out.min()) / (out.max() - out.min())
    return 0.1 + 0.8 * out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_pair(h=16, w=16, seed=0, baseline=0.3, f=20.0):
    """A rectified pair whose right image is a smooth texture (not tied to any depth)."""
    K = intrinsics(f, (w - 1) / 2, (h - 1) / 2)
    left = CameraView(K, np.eye(4))
    right = CameraView(K, rigid(translation=[baseline, 0.0, 0.0]))
    return ViewPair(left, Image(smooth_image(h, w, seed)), right, Image(smooth_image(h, w, seed + 1)))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
