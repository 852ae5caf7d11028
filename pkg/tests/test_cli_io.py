import json
import struct

import numpy as np
import pytest
import yaml

from stereodiff.cli_io import (
    RunConfig,
    calibration_text,
    load_config,
    main,
    parse_calibration,
    parse_pfm,
    parse_trajectory,
    pfm_bytes,
    read_image,
    read_mask,
    read_pfm,
    save_config,
    write_image,
    write_mask,
    write_pfm,
)
from stereodiff.errors import ConfigError, MalformedHeader, MissingField, NonRigidExtrinsic, TruncatedData
from stereodiff.scene import CameraView, DepthMap, Image, intrinsics, relative_transform, rigid


def test_pfm_round_trip(tmp_path, rng):
    d = DepthMap(rng.uniform(0.5, 80, (7, 11)))
    write_pfm(tmp_path / "d.pfm", d)
    back = read_pfm(tmp_path / "d.pfm")
    np.testing.assert_array_equal(back.data, d.data.astype(np.float32).astype(np.float64))


def test_pfm_invalid_pixels_round_trip(tmp_path):
    mask = np.array([[True, False], [True, True]])
    d = DepthMap(np.array([[1.0, 0.0], [2.0, 3.0]]), mask)
    back = parse_pfm(pfm_bytes(d))
    np.testing.assert_array_equal(back.valid_mask, mask)


def test_pfm_hand_encoded_little_endian():
    # rows stored bottom-to-top: bottom row (3, 4) first
    buf = b"Pf\n2 2\n-1.0\n" + struct.pack("<4f", 3.0, 4.0, 1.0, 2.0)
    np.testing.assert_array_equal(parse_pfm(buf).data, [[1.0, 2.0], [3.0, 4.0]])
    assert pfm_bytes(DepthMap(np.array([[1.0, 2.0], [3.0, 4.0]]))) == buf
    big = b"Pf\n2 2\n1.0\n" + struct.pack(">4f", 3.0, 4.0, 1.0, 2.0)
    np.testing.assert_array_equal(parse_pfm(big).data, [[1.0, 2.0], [3.0, 4.0]])


def test_pfm_errors():
    with pytest.raises(MalformedHeader, match="PF"):
        parse_pfm(b"PF\n2 2\n-1.0\n" + bytes(48))
    with pytest.raises(MalformedHeader):
        parse_pfm(b"P6\n2 2\n-1.0\n" + bytes(16))
    with pytest.raises(MalformedHeader):
        parse_pfm(b"Pf\n2 x\n-1.0\n" + bytes(16))
    with pytest.raises(MalformedHeader):
        parse_pfm(b"Pf\n2 2\n")
    with pytest.raises(TruncatedData):
        parse_pfm(b"Pf\n2 2\n-1.0\n" + bytes(15))


RIG = """# test rig
left fx=100 fy=100 cx=32 cy=24
left E 1 0 0 0  0 1 0 0  0 0 1 0  0 0 0 1
right fx=100 fy=100 cx=32 cy=24   # same intrinsics
right E 1 0 0 0.5  0 1 0 0  0 0 1 0  0 0 0 1
"""


def test_calibration_examples():
    left, right = parse_calibration(RIG)
    np.testing.assert_array_equal(left.K, intrinsics(100.0, 32.0, 24.0))
    np.testing.assert_array_equal(left.E, np.eye(4))
    np.testing.assert_allclose(relative_transform(left, right)[:3, 3], [-0.5, 0, 0], atol=1e-15)


def test_calibration_round_trip(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.linalg.det(q))
    left = CameraView(intrinsics(71.5, 20.25, 14.0, 70.0), rigid(q, [0.1, -0.2, 0.3]))
    right = CameraView(intrinsics(71.5, 20.25, 14.0, 70.0), rigid(translation=[0.5, 0, 0]))
    l2, r2 = parse_calibration(calibration_text(left, right))
    np.testing.assert_allclose(l2.E, left.E, atol=1e-15)
    np.testing.assert_array_equal(l2.K, left.K)
    np.testing.assert_array_equal(r2.E, right.E)


def test_calibration_errors():
    with pytest.raises(NonRigidExtrinsic):
        parse_calibration(RIG.replace("right E 1 0 0 0.5", "right E -1 0 0 0.5"))
    with pytest.raises(NonRigidExtrinsic):
        parse_calibration(RIG.replace("right E 1 0 0 0.5", "right E 1.01 0 0 0.5"))
    with pytest.raises(MissingField):
        parse_calibration(RIG.replace(" cy=24", "", 1))
    with pytest.raises(MissingField):
        parse_calibration("\n".join(RIG.splitlines()[:4]))
    with pytest.raises(MalformedHeader):
        parse_calibration(RIG.replace("left E 1 0 0 0 ", "left E 1 0 0 "))
    with pytest.raises(MalformedHeader):
        parse_calibration(RIG + "middle fx=1\n")


def test_images_and_masks(tmp_path, rng):
    for ext, ch in ((".png", 1), (".png", 3), (".pgm", 1), (".ppm", 3)):
        data = np.round(rng.uniform(size=(5, 6, ch)) * 255) / 255
        write_image(tmp_path / f"i{ch}{ext}", Image(data))
        np.testing.assert_allclose(read_image(tmp_path / f"i{ch}{ext}").data, data, atol=1e-12)
    mask = rng.uniform(size=(5, 6)) > 0.5
    write_mask(tmp_path / "m.png", mask)
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), mask)
    with pytest.raises(ConfigError):
        write_image(tmp_path / "x.jpg", Image(np.zeros((2, 2))))


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(mode="scale-shift-only", lam=0.5, global_scale=12.5, prior="toy", prior_checkpoint="p.gdp")
    save_config(tmp_path / "c.yaml", cfg)
    assert load_config(tmp_path / "c.yaml") == cfg
    assert RunConfig.from_yaml(RunConfig().to_yaml()) == RunConfig()


def test_run_config_defaults_and_validation():
    cfg = RunConfig()
    assert (cfg.gamma, cfg.lr, cfg.ensemble, cfg.steps, cfg.eta) == (1e-2, 1e-2, 10, 50, 0.85)
    for bad in ({"mode": "x"}, {"ensemble": 0}, {"lam": -1.0}, {"eta": 2.0}, {"global_scale": 0.0}, {"prior": "x"}):
        with pytest.raises(ConfigError):
            RunConfig(**bad)
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"lambda_": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_yaml("- a\n- b\n")


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--out", str(d), "--seed", "3"]) == 0
    return d


def test_synth_writes_scene(scene_dir):
    for name in ("left.png", "right.png", "calib.txt", "mask.png", "gt_depth.pfm", "relative.pfm", "config.yaml"):
        assert (scene_dir / name).exists()


def test_cli_round_trip_and_determinism(scene_dir, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    args = ["estimate", "--scene", str(scene_dir), "--ensemble", "3"]
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    for name in ("depth.pfm", "trajectory_00.txt", "trajectory_02.txt", "estimate.yaml"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    recs = parse_trajectory((out1 / "trajectory_00.txt").read_text())
    assert len(recs) == 50 and [r["step"] for r in recs] == list(range(50))
    assert main(["eval", "--scene", str(scene_dir), "--pred", str(out1 / "depth.pfm"), "--out", str(out1)]) == 0
    raw, aligned = [json.loads(l) for l in (out1 / "metrics.jsonl").read_text().splitlines()]
    assert not raw["aligned"] and aligned["aligned"]
    assert raw["abs_rel"] < 0.05


def test_cli_modes_and_config_file(scene_dir, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"ensemble": 1, "steps": 10, "reprojection_iters": 10}))
    for mode in ("scale-shift-only", "reprojection-only"):
        out = tmp_path / mode
        assert main(["estimate", "--config", str(cfg), "--scene", str(scene_dir), "--mode", mode, "--out", str(out)]) == 0
        assert len(parse_trajectory((out / "trajectory_00.txt").read_text())) == 10
        assert load_config(out / "config.yaml").mode == mode


def test_cli_global_scale_flag(scene_dir, tmp_path):
    out = tmp_path / "g"
    assert main(["estimate", "--scene", str(scene_dir), "--ensemble", "1", "--steps", "5", "--global-scale", "7.5", "--out", str(out)]) == 0
    assert yaml.safe_load((out / "estimate.yaml").read_text())["g_s"] == 7.5


def test_cli_eval_dimension_mismatch(scene_dir, tmp_path, capsys):
    write_pfm(tmp_path / "small.pfm", DepthMap(np.ones((4, 4))))
    code = main(["eval", "--scene", str(scene_dir), "--pred", str(tmp_path / "small.pfm"), "--out", str(tmp_path)])
    assert code == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: DimensionMismatch:")


def test_cli_error_categories(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense_key: 1\n")
    assert main(["estimate", "--config", str(bad)]) == 2
    assert "ConfigError" in capsys.readouterr().err
    assert main(["eval", "--pred", str(tmp_path / "missing.pfm"), "--gt", str(tmp_path / "missing.pfm")]) == 14


def test_cli_train_and_use_toy_prior(scene_dir, tmp_path):
    cfg = tmp_path / "t.yaml"
    cfg.write_text(yaml.safe_dump({"corpus_size": 20, "train_steps": 5, "train_batch": 4, "net_width": 4}))
    assert main(["train-prior", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    log = (tmp_path / "training_log.txt").read_text().splitlines()
    assert len([l for l in log if not l.startswith("#")]) == 5
    out = tmp_path / "est"
    code = main(["estimate", "--scene", str(scene_dir), "--prior", "toy", "--checkpoint", str(tmp_path / "prior.gdp"),
                 "--ensemble", "1", "--steps", "5", "--out", str(out)])
    assert code == 0 and read_pfm(out / "depth.pfm").shape == (32, 48)
