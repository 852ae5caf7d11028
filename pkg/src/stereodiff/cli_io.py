"""File formats, run configuration and the ``stereodiff`` command line.

Formats
-------
* Depth maps: grayscale PFM (``Pf``), float32, rows stored bottom-to-top,
  negative scale meaning little-endian. Invalid pixels are written as 0 and
  read back as invalid.
* Calibration: text, one camera per pair of lines, ``#`` starts a comment::

      left fx=60 fy=60 cx=23.5 cy=15.5
      left E 1 0 0 0  0 1 0 0  0 0 1 0  0 0 0 1
      right fx=60 fy=60 cx=23.5 cy=15.5
      right E 1 0 0 0.5  0 1 0 0  0 0 1 0  0 0 0 1

  ``E`` is the camera-to-world transform, 16 numbers row-major.
* Images: 8-bit PNG, PGM or PPM (chosen by extension); masks are 8-bit
  images where non-zero means True.
* Run configuration: YAML mapping of the ``RunConfig`` fields.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image as PILImage

from .diffusion import GuidanceConfig, NoiseSchedule
from .errors import (
    ConfigError,
    DimensionMismatch,
    MalformedHeader,
    MissingField,
    NonRigidExtrinsic,
    StereoDiffError,
    TruncatedData,
)
from .estimate import MODES, EstimateSettings, estimate
from .evaluation import evaluate
from .metric_param import S_IDENTITY, T_INIT
from .photometric import GeoLossConfig
from .prior import AnalyticGaussianDenoiser, ToyConfig, ToyDenoiser, train_toy_denoiser
from .scene import CameraView, DepthMap, Image, ViewPair, check_rigid
from .synth import SceneSpec, generate_corpus, generate_scene

CALIBRATION_RIGID_TOL = 1e-6

# file names inside a scene directory
SCENE_FILES = {
    "left_image": "left.png",
    "right_image": "right.png",
    "calibration": "calib.txt",
    "left_mask": "mask.png",
    "ground_truth": "gt_depth.pfm",
    "prior_mean": "relative.pfm",
}


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# PFM


def pfm_bytes(depth: DepthMap) -> bytes:
    data = np.where(depth.valid_mask, depth.data, 0.0).astype("<f4")
    h, w = data.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(data[::-1]).tobytes()


def write_pfm(path, depth: DepthMap) -> None:
    atomic_write_bytes(path, pfm_bytes(depth))


def parse_pfm(buf: bytes) -> DepthMap:
    lines, pos = [], 0
    for _ in range(3):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise MalformedHeader("PFM header is incomplete")
        lines.append(buf[pos:end].decode("ascii", errors="replace").strip())
        pos = end + 1
    magic, dims, scale_line = lines
    if magic == "PF":
        raise MalformedHeader("PFM colour format 'PF' found; a grayscale 'Pf' depth map is required")
    if magic != "Pf":
        raise MalformedHeader(f"not a PFM file (magic {magic!r})")
    try:
        w, h = (int(v) for v in dims.split())
        scale = float(scale_line)
    except ValueError as exc:
        raise MalformedHeader(f"bad PFM dimensions or scale: {exc}") from exc
    if w <= 0 or h <= 0 or scale == 0:
        raise MalformedHeader(f"bad PFM header: size {w}x{h}, scale {scale}")
    count = w * h
    payload = buf[pos:]
    if len(payload) < 4 * count:
        raise TruncatedData(f"PFM payload has {len(payload)} bytes, expected {4 * count}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload[: 4 * count], dtype=dtype).reshape(h, w)[::-1].astype(np.float64)
    valid = np.isfinite(data) & (data > 0)
    return DepthMap(np.where(valid, data, 0.0), valid)


def read_pfm(path) -> DepthMap:
    with open(path, "rb") as fh:
        return parse_pfm(fh.read())


def read_relative_pfm(path) -> np.ndarray:
    """PFM holding a relative map in [0, 1] (zeros are legitimate values here)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    dm = parse_pfm(buf)
    # zeros came back as invalid; for a relative map they are just the near end
    return np.where(dm.valid_mask, dm.data, 0.0)


def write_relative_pfm(path, rel: np.ndarray) -> None:
    # bypass DepthMap's positivity check; a relative map may contain exact zeros
    data = np.asarray(rel, dtype="<f4")
    h, w = data.shape
    atomic_write_bytes(path, f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + np.ascontiguousarray(data[::-1]).tobytes())


# ---------------------------------------------------------------------------
# calibration


def _nearest_rotation(R):
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def parse_calibration(text: str) -> tuple[CameraView, CameraView]:
    found: dict[str, dict] = {"left": {}, "right": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        cam = tokens[0]
        if cam not in found:
            raise MalformedHeader(f"line {lineno}: unknown camera {cam!r}")
        if len(tokens) > 1 and tokens[1] == "E":
            try:
                vals = [float(v) for v in tokens[2:]]
            except ValueError as exc:
                raise MalformedHeader(f"line {lineno}: {exc}") from exc
            if len(vals) != 16:
                raise MalformedHeader(f"line {lineno}: extrinsic needs 16 numbers, got {len(vals)}")
            found[cam]["E"] = np.array(vals).reshape(4, 4)
            continue
        for tok in tokens[1:]:
            key, sep, val = tok.partition("=")
            if not sep or key not in ("fx", "fy", "cx", "cy"):
                raise MalformedHeader(f"line {lineno}: unexpected token {tok!r}")
            try:
                found[cam][key] = float(val)
            except ValueError as exc:
                raise MalformedHeader(f"line {lineno}: {exc}") from exc
    views = []
    for cam in ("left", "right"):
        rec = found[cam]
        for key in ("fx", "fy", "cx", "cy", "E"):
            if key not in rec:
                raise MissingField(f"calibration lacks {key} for the {cam} camera")
        E = rec["E"]
        check_rigid(E, CALIBRATION_RIGID_TOL)
        E = E.copy()
        E[:3, :3] = _nearest_rotation(E[:3, :3])
        K = np.array([[rec["fx"], 0.0, rec["cx"]], [0.0, rec["fy"], rec["cy"]], [0.0, 0.0, 1.0]])
        views.append(CameraView(K, E))
    return views[0], views[1]


def read_calibration(path) -> tuple[CameraView, CameraView]:
    with open(path, encoding="utf-8") as fh:
        return parse_calibration(fh.read())


def calibration_text(left: CameraView, right: CameraView) -> str:
    out = ["# pinhole intrinsics and camera-to-world extrinsics (row-major)"]
    for name, view in (("left", left), ("right", right)):
        out.append(f"{name} fx={view.fx!r} fy={view.fy!r} cx={view.cx!r} cy={view.cy!r}")
        out.append(f"{name} E " + " ".join(repr(float(v)) for v in view.E.ravel()))
    return "\n".join(out) + "\n"


def write_calibration(path, left: CameraView, right: CameraView) -> None:
    atomic_write_text(path, calibration_text(left, right))


# ---------------------------------------------------------------------------
# images


def _pil_format(path) -> str:
    ext = Path(path).suffix.lower()
    formats = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}
    if ext not in formats:
        raise ConfigError(f"unsupported image extension {ext!r}; use .png, .pgm or .ppm")
    return formats[ext]


def read_image(path) -> Image:
    with PILImage.open(path) as im:
        im.load()
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        return Image(np.asarray(im, dtype=np.float64) / 255.0)


def image_bytes(img: Image, path) -> bytes:
    import io

    data = np.round(img.data * 255.0).astype(np.uint8)
    data = data[:, :, 0] if data.shape[2] == 1 else data
    buf = io.BytesIO()
    PILImage.fromarray(data).save(buf, format=_pil_format(path))
    return buf.getvalue()


def write_image(path, img: Image) -> None:
    atomic_write_bytes(path, image_bytes(img, path))


def read_mask(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_mask(path, mask) -> None:
    img = Image(np.asarray(mask, dtype=np.float64))
    atomic_write_bytes(path, image_bytes(img, path))


# ---------------------------------------------------------------------------
# run configuration


PRIORS = ("analytic", "toy")


@dataclass
class RunConfig:
    """Every tunable of the four commands, with the defaults they run with."""

    mode: str = "full"
    seed: int = 0
    # sampler and guidance
    ensemble: int = 10
    lam: float = 1.0
    steps: int = 50
    jacobian_mode: str = "full"
    clip_denoised: bool = True
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    # reprojection loss
    eta: float = 0.85
    ssim_window: int = 7
    ssim_c1: float = 1e-4
    ssim_c2: float = 9e-4
    gamma: float = 1e-2
    # scale / shift
    lr: float = 1e-2
    s_init: float = S_IDENTITY
    t_init: float = T_INIT
    global_scale: float | None = None
    scale_min: float = 0.5
    scale_max: float = 100.0
    scale_count: int = 24
    range_search: bool = True
    reprojection_iters: int = 50
    # prior
    prior: str = "analytic"
    prior_checkpoint: str | None = None
    prior_mean: str | None = None
    sigma0: float = 0.05
    # inputs and outputs; None means "take it from --scene"
    left_image: str | None = None
    right_image: str | None = None
    calibration: str | None = None
    left_mask: str | None = None
    prediction: str | None = None
    ground_truth: str | None = None
    out: str = "out"
    # synthetic scene
    layout: str = "slanted"
    depth_min: float = 4.0
    depth_max: float = 16.0
    texture: str = "smooth"
    baseline: float = 0.5
    focal: float = 60.0
    width: int = 48
    height: int = 32
    channels: int = 1
    # prior training
    corpus_size: int = 1000
    train_steps: int = 800
    train_batch: int = 16
    train_lr: float = 2e-3
    net_width: int = 24

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.prior not in PRIORS:
            raise ConfigError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if self.ensemble < 1 or self.steps < 1 or self.T < self.steps:
            raise ConfigError("need ensemble >= 1 and 1 <= steps <= T")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.global_scale is not None and not self.global_scale > 0:
            raise ConfigError("global_scale must be positive")
        try:
            self.loss_config()
            self.guidance_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def loss_config(self) -> GeoLossConfig:
        return GeoLossConfig(self.eta, self.ssim_window, self.ssim_c1, self.ssim_c2, self.gamma)

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(self.lam, self.steps, self.jacobian_mode, self.ensemble, self.clip_denoised)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.T, self.beta_start, self.beta_end).subsample(self.steps)

    def estimate_settings(self) -> EstimateSettings:
        return EstimateSettings(
            mode=self.mode,
            guidance=self.guidance_config(),
            loss=self.loss_config(),
            lr=self.lr,
            global_scale=self.global_scale,
            scale_candidates=(self.scale_min, self.scale_max, self.scale_count),
            range_search=self.range_search,
            s_init=self.s_init,
            t_init=self.t_init,
            reprojection_iters=self.reprojection_iters,
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            layout=self.layout,
            depth_range=(self.depth_min, self.depth_max),
            texture=self.texture,
            baseline=self.baseline,
            focal=self.focal,
            width=self.width,
            height=self.height,
            channels=self.channels,
            seed=self.seed,
        )

    def toy_config(self) -> ToyConfig:
        return ToyConfig(width=self.net_width, steps=self.train_steps, batch=self.train_batch, lr=self.train_lr)

    def to_yaml(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=False)

    @classmethod
    def from_mapping(cls, data) -> "RunConfig":
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"configuration is not valid YAML: {exc}") from exc
        return cls.from_mapping(data)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_yaml(fh.read())


def save_config(path, cfg: RunConfig) -> None:
    atomic_write_text(path, cfg.to_yaml())


# ---------------------------------------------------------------------------
# commands


def _scene_path(cfg: RunConfig, scene, key):
    explicit = getattr(cfg, key)
    if explicit is not None:
        return Path(explicit)
    if scene is None:
        return None
    return Path(scene) / SCENE_FILES[key]


def load_pair(cfg: RunConfig, scene=None) -> ViewPair:
    paths = {k: _scene_path(cfg, scene, k) for k in ("left_image", "right_image", "calibration")}
    missing = [k for k, p in paths.items() if p is None]
    if missing:
        raise ConfigError(f"no input given for {', '.join(missing)} (set them or pass --scene)")
    left_view, right_view = read_calibration(paths["calibration"])
    left, right = read_image(paths["left_image"]), read_image(paths["right_image"])
    mask_path = _scene_path(cfg, scene, "left_mask")
    mask = read_mask(mask_path) if mask_path is not None and mask_path.exists() else None
    return ViewPair(left_view, left, right_view, right, left_mask=mask)


def load_prior(cfg: RunConfig, scene, shape):
    if cfg.prior == "toy":
        if cfg.prior_checkpoint is None:
            raise ConfigError("prior 'toy' needs prior_checkpoint")
        return ToyDenoiser.load(cfg.prior_checkpoint)
    path = _scene_path(cfg, scene, "prior_mean")
    if path is None:
        raise ConfigError("prior 'analytic' needs prior_mean (a relative-depth PFM)")
    rel = read_relative_pfm(path)
    if rel.shape != tuple(shape):
        raise DimensionMismatch(f"prior mean {rel.shape} does not match images {tuple(shape)}")
    return AnalyticGaussianDenoiser(2.0 * rel - 1.0, cfg.sigma0)


def trajectory_text(traj) -> str:
    lines = [f"# seed={traj.seed} g_s={traj.g_s!r}", "# step t loss s_raw t_raw grad_s grad_t n_valid"]
    for r in traj.records:
        lines.append(
            f"{r.step} {r.t} {r.loss!r} {r.s_raw!r} {r.t_raw!r} {r.grad_s!r} {r.grad_t!r} {r.n_valid}"
        )
    return "\n".join(lines) + "\n"


def parse_trajectory(text: str) -> list[dict]:
    keys = ("step", "t", "loss", "s_raw", "t_raw", "grad_s", "grad_t", "n_valid")
    out = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        vals = line.split()
        rec = {k: float(v) for k, v in zip(keys, vals)}
        for k in ("step", "t", "n_valid"):
            rec[k] = int(rec[k])
        out.append(rec)
    return out


def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    scene = generate_scene(cfg.scene_spec())
    write_image(out / SCENE_FILES["left_image"], scene.pair.left_image)
    write_image(out / SCENE_FILES["right_image"], scene.pair.right_image)
    write_calibration(out / SCENE_FILES["calibration"], scene.pair.left_view, scene.pair.right_view)
    write_mask(out / SCENE_FILES["left_mask"], ~scene.left_occluded)
    write_pfm(out / SCENE_FILES["ground_truth"], scene.gt_depth_left)
    write_relative_pfm(out / SCENE_FILES["prior_mean"], scene.gt_relative_left.data)
    save_config(out / "config.yaml", cfg)
    print(f"scene written to {out} (depth {scene.d_min:.3f}..{scene.d_max:.3f} m)")
    return 0


def cmd_train_prior(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    spec = SceneSpec(width=cfg.width, height=cfg.height)
    corpus = generate_corpus(cfg.corpus_size, spec, cfg.seed)
    schedule = NoiseSchedule.linear(cfg.T, cfg.beta_start, cfg.beta_end)
    model, report = train_toy_denoiser(corpus, schedule, cfg.toy_config(), cfg.seed)
    model.save(out / "prior.gdp")
    log = ["# step loss"] + [f"{i} {v!r}" for i, v in enumerate(report.losses)]
    log.append(f"# validation initial={report.val_initial!r} final={report.val_final!r}")
    atomic_write_text(out / "training_log.txt", "\n".join(log) + "\n")
    print(f"validation loss {report.val_initial:.6g} -> {report.val_final:.6g}; checkpoint {out / 'prior.gdp'}")
    return 0


def cmd_estimate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    scene = getattr(args, "scene", None)
    pair = load_pair(cfg, scene)
    model = load_prior(cfg, scene, pair.shape)
    seeds = range(cfg.seed, cfg.seed + cfg.ensemble)
    result = estimate(pair, model, cfg.schedule(), cfg.estimate_settings(), seeds)
    write_pfm(out / "depth.pfm", result.depth)
    for i, traj in enumerate(result.trajectories):
        atomic_write_text(out / f"trajectory_{i:02d}.txt", trajectory_text(traj))
    p = result.initial_params
    summary = {
        "mode": cfg.mode,
        "ensemble": len(result.trajectories),
        "g_s": p.g_s,
        "s_raw_init": p.s_raw,
        "t_raw_init": p.t_raw,
    }
    atomic_write_text(out / "estimate.yaml", yaml.safe_dump(summary, sort_keys=False))
    save_config(out / "config.yaml", cfg)
    print(f"depth written to {out / 'depth.pfm'} ({len(result.trajectories)} samples, g_s={p.g_s:.4g})")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    scene = getattr(args, "scene", None)
    pred_path = Path(cfg.prediction) if cfg.prediction else None
    gt_path = _scene_path(cfg, scene, "ground_truth")
    if pred_path is None or gt_path is None:
        raise ConfigError("eval needs a prediction and a ground truth (--pred, --gt or --scene)")
    raw, aligned = evaluate(read_pfm(pred_path), read_pfm(gt_path))
    text = raw.to_record() + "\n" + aligned.to_record() + "\n"
    atomic_write_text(out / "metrics.jsonl", text)
    print(f"raw: {raw.to_record()}")
    print(f"aligned: {aligned.to_record()}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train-prior": cmd_train_prior,
    "estimate": cmd_estimate,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stereodiff", description="Metric depth from a calibrated stereo pair.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--out", help="output directory")
        p.add_argument("--ensemble", type=int)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--global-scale", dest="global_scale", type=float, help="fixed g_s; skips the sweep")
        p.add_argument("--steps", type=int)
        p.add_argument("--scene", help="scene directory written by 'synth'")
        if name == "eval":
            p.add_argument("--pred", dest="prediction")
            p.add_argument("--gt", dest="ground_truth")
        if name == "estimate":
            p.add_argument("--prior", choices=PRIORS)
            p.add_argument("--checkpoint", dest="prior_checkpoint")
    return parser


def resolve_config(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"configuration is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
    overrides = ("seed", "mode", "out", "ensemble", "lam", "global_scale", "steps",
                 "prediction", "ground_truth", "prior", "prior_checkpoint")
    for key in overrides:
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    return RunConfig.from_mapping(data)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except StereoDiffError as exc:
        print(f"error: {exc.category}: {exc}".replace("\n", " "), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: IOError: {exc}".replace("\n", " "), file=sys.stderr)
        return 14


if __name__ == "__main__":
    sys.exit(main())
