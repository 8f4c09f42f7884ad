import struct

import numpy as np
import pytest

from flowvo import formats
from flowvo.errors import FormatError
from flowvo.evaluation import integrate
from flowvo.geometry import RelativeMotion
from flowvo.synthgen import SceneConfig
from flowvo.trainer import build_dataset


def test_flow_round_trip_and_layout(tmp_path):
    flow = np.random.default_rng(0).normal(size=(3, 4, 2)).astype(np.float32)
    path = tmp_path / "a.uvfl"
    formats.write_flow(path, flow)
    raw = path.read_bytes()
    assert raw[:4] == b"UVFL"
    assert struct.unpack("<II", raw[4:12]) == (4, 3)
    # interleaved u, v per pixel, row-major
    assert struct.unpack("<ff", raw[12:20]) == (flow[0, 0, 0], flow[0, 0, 1])
    np.testing.assert_array_equal(formats.read_flow(path), flow)


def test_flow_truncated(tmp_path):
    path = tmp_path / "a.uvfl"
    formats.write_flow(path, np.zeros((3, 4, 2)))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        formats.read_flow(path)
    path.write_bytes(b"XXXX" + b"\0" * 8)
    with pytest.raises(FormatError):
        formats.read_flow(path)


def test_mask_round_trip(tmp_path):
    mask = np.random.default_rng(1).random((5, 7)) > 0.5
    path = tmp_path / "a.msk"
    formats.write_mask(path, mask)
    assert path.read_bytes()[:4] == b"MASK"
    assert len(path.read_bytes()) == 12 + 5
    np.testing.assert_array_equal(formats.read_mask(path), mask)


def trajectory():
    rng = np.random.default_rng(2)
    return integrate([RelativeMotion(rng.normal(size=3), rng.normal(0, 0.2, 3)) for _ in range(9)])


@pytest.mark.parametrize("fmt", [formats.KITTI, formats.TUM])
def test_trajectory_round_trip(tmp_path, fmt):
    traj = trajectory()
    formats.write_trajectory(tmp_path / "t.txt", traj, fmt)
    back, sniffed = formats.read_trajectory(tmp_path / "t.txt")
    assert sniffed == fmt
    np.testing.assert_allclose(back.positions, traj.positions, atol=1e-12)
    np.testing.assert_allclose(back.rotations, traj.rotations, atol=1e-12)


def test_trajectory_parse_errors(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("1 2 3\n")
    with pytest.raises(FormatError, match="line 1"):
        formats.read_trajectory(p)
    p.write_text(" ".join(["0"] * 8) + "\n" + " ".join(["1"] * 12) + "\n")
    with pytest.raises(FormatError, match="line 2"):
        formats.read_trajectory(p)
    p.write_text("# only a comment\n")
    with pytest.raises(FormatError):
        formats.read_trajectory(p)


def test_match_by_timestamp():
    traj = trajectory()
    sub = type(traj)(traj.timestamps[2:7], traj.positions[2:7], traj.rotations[2:7])
    est, gt = formats.match_trajectories(sub, traj, by_time=True)
    np.testing.assert_array_equal(gt.positions, sub.positions)
    shifted = type(traj)(traj.timestamps[:4] + 0.5, traj.positions[:4], traj.rotations[:4])
    assert formats.match_trajectories(shifted, traj, by_time=True) is None
    assert formats.match_trajectories(sub, traj) is None


SCHEMA = {"count": int, "lr": float, "depth_range": tuple, "use_il": bool, "name": str}


def test_config_parse():
    text = "# comment\ncount = 10\nlr = 1e-3  # trailing\ndepth_range = 1, 20\nuse_il = false\nname = x\n"
    assert formats.parse_config(text, SCHEMA) == {
        "count": 10, "lr": 1e-3, "depth_range": (1.0, 20.0), "use_il": False, "name": "x"}


@pytest.mark.parametrize("text, line", [
    ("count = 1\nbogus = 2\n", 2),
    ("count = ten\n", 1),
    ("\n\ncount 3\n", 3),
    ("count = 1\ncount = 2\n", 2),
    ("use_il = maybe\n", 1),
])
def test_config_errors_carry_line(text, line):
    with pytest.raises(FormatError, match=f"line {line}:"):
        formats.parse_config(text, SCHEMA)


def test_config_format_round_trip():
    values = {"count": 3, "lr": 0.1, "depth_range": (1.0, 20.0), "use_il": True, "name": "a"}
    assert formats.parse_config(formats.format_config(values), SCHEMA) == values


def test_dataset_round_trip(tmp_path):
    ds = build_dataset(SceneConfig(seed=1), range(2), 5)
    formats.write_dataset(tmp_path, ds, {"seed": 1})
    back, meta = formats.read_dataset(tmp_path)
    assert meta["seed"] == "1" and len(back) == 5
    np.testing.assert_array_equal(back.flows, ds.flows)
    np.testing.assert_array_equal(back.masks, ds.masks)
    np.testing.assert_array_equal(back.motions, ds.motions)
    assert back.intrinsics == ds.intrinsics
    assert len((tmp_path / "motions.txt").read_text().splitlines()) == 5
