import math

import numpy as np
import pytest

from roomcross.sensors import (KINECT_HFOV, RECOVERY_OFFSET, CameraModel, CameraRig, cast_rays, expert_camera,
                               min_albedo, ray_directions, raycast_depth, recovery_views, render_rgb,
                               student_rgb_camera, write_ppm)
from roomcross.world import DroneState, ObstacleSpec, RoomSpec, make_room_one


def _symmetric_room():
    # full-width block and overhang plus a centered wall opening: mirror symmetric in x
    obstacles = (ObstacleSpec("block", -8, 1, block_height=1.0),
                 ObstacleSpec("wall", 0, 0.5, opening_width=20.0, side="left"),
                 ObstacleSpec("overhang", 8, 1, clearance=1.5))
    return RoomSpec(99, obstacles, light_dir=(0.0, -0.5, math.sqrt(0.75)))


def test_rig_offsets():
    rig = CameraRig.around(expert_camera())
    assert rig.left.yaw_offset == RECOVERY_OFFSET
    assert rig.right.yaw_offset == -RECOVERY_OFFSET
    assert rig.center.yaw_offset == 0.0
    assert RECOVERY_OFFSET == pytest.approx(0.2618, abs=1e-4)


def test_camera_defaults():
    cam = CameraModel()
    assert cam.horizontal_fov == pytest.approx(1.0123, abs=1e-4)
    assert (cam.width, cam.height, cam.max_range) == (32, 24, 4.0)
    # square pixels
    assert math.tan(cam.vertical_fov / 2) / math.tan(cam.horizontal_fov / 2) == pytest.approx(24 / 32)


def test_rays_are_unit_and_centered():
    d = ray_directions(DroneState((0, 0, 1.5), 0.0), CameraModel())
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
    mean = d.mean(axis=0)
    assert mean[0] == pytest.approx(0, abs=1e-12) and mean[2] == pytest.approx(0, abs=1e-12)


def test_depth_facing_flat_wall_matches_pinhole_geometry():
    room = make_room_one(0)
    state = DroneState((0.0, 13.0, 1.5), 0.0)  # past every obstacle, facing the end wall at y = 20
    cam = CameraModel(max_range=40.0)
    depth = raycast_depth(room, state, cam)
    d = ray_directions(state, cam)
    t = 7.0 / d[:, 1]
    z_hit = 1.5 + t * d[:, 2]
    on_wall = ((z_hit > 0) & (z_hit < 4)).reshape(cam.height, cam.width)
    assert on_wall.sum() > cam.width * 10
    assert np.allclose(depth[on_wall], t.reshape(cam.height, cam.width)[on_wall], atol=1e-9)
    # rays that miss the end wall hit the floor or ceiling sooner
    assert np.all(depth[~on_wall] < t.reshape(cam.height, cam.width)[~on_wall])


def test_depth_clipped_to_range():
    room = make_room_one(0)
    depth = raycast_depth(room, DroneState((0, -16, 1.5), 0.0), expert_camera())
    assert depth.max() <= 4.0 and depth.min() > 0


def test_depth_rejects_state_outside_room():
    with pytest.raises(ValueError):
        raycast_depth(make_room_one(0), DroneState((0, 25, 1.5)), expert_camera())


def test_first_hit_is_nearest_box():
    room = make_room_one(0)
    # looking straight at the block from 3 units away at block mid-height
    dist, surface, normal = cast_rays(room, (0.0, -11.5, 0.4), np.array([[0.0, 1.0, 0.0]]))
    assert dist[0] == pytest.approx(3.0)
    assert surface[0] == 6
    assert np.allclose(normal[0], [0, -1, 0])


def test_symmetric_scene_gives_mirrored_recovery_views():
    room = _symmetric_room()
    state = DroneState((0.0, -14.0, 1.5), 0.0)
    rig = CameraRig.around(CameraModel(max_range=40.0))
    left, right = recovery_views(room, state, rig, "depth")
    assert np.allclose(left, right[:, ::-1], atol=1e-9)


def test_edge_bearing_lands_in_left_view_center():
    cam = CameraModel()
    rig = CameraRig.around(cam)
    bearing = math.radians(10.0)
    col_center = cam.column_of_bearing(bearing)
    col_left = cam.column_of_bearing(bearing - rig.left.yaw_offset)
    assert abs(col_left - cam.width / 2) < abs(col_center - cam.width / 2)
    assert abs(col_left - cam.width / 2) < 0.2 * cam.width


def test_rgb_is_deterministic_and_bounded():
    room = make_room_one(2)
    state = DroneState((0.3, -15, 1.2), 0.1)
    cam = student_rgb_camera()
    a, b = render_rgb(room, state, cam), render_rgb(room, state, cam)
    assert a.dtype == np.uint8 and a.shape == (72, 128, 3)
    assert np.array_equal(a, b)
    # ambient floor keeps every pixel above 0.2 * darkest albedo
    assert a.min() >= math.floor(0.2 * min_albedo(room) * 255)


def test_ppm_export(tmp_path):
    room = make_room_one(0)
    state = DroneState((0, -16, 1.5))
    write_ppm(tmp_path / "rgb.ppm", render_rgb(room, state, CameraModel(8, 6)))
    write_ppm(tmp_path / "depth.pgm", raycast_depth(room, state, CameraModel(8, 6)), 4.0)
    assert (tmp_path / "rgb.ppm").read_bytes().startswith(b"P6\n8 6\n255\n")
    assert len((tmp_path / "depth.pgm").read_bytes()) == len(b"P5\n8 6\n255\n") + 48


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(horizontal_fov=math.pi)
    assert KINECT_HFOV == pytest.approx(math.radians(58))
