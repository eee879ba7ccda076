# %% [markdown]
# # Rooms, sensors and the expert
#
# A room is 40 units long and 20 wide with three obstacles: a low block to fly
# over, a wall with an opening to fly around, and an overhang to fly under. The
# drone starts at y = -16 and has to reach y = 16.
#
# This script builds a room, looks at it through the depth camera and lets the
# behavior-arbitration expert fly it.

# %%
import numpy as np

from roomcross.evaluation import TEST_START, ExpertController, export_trajectories, rollout
from roomcross.expert import plan_waypoints
from roomcross.sensors import CameraRig, render, student_depth_camera
from roomcross.world import make_room_one, room_to_text

room = make_room_one(0)
print(room_to_text(room))

# %% [markdown]
# The expert plans one waypoint in the middle of the wall opening and a final
# one past the goal line.

# %%
plan = plan_waypoints(room)
for target in plan.targets:
    print(target)

# %% [markdown]
# What the student sees from the start: a 32x24 depth raster. The far wall is
# 36 units away; the block is 8 units ahead and fills the lower rows.

# %%
cam = student_depth_camera()
depth = render(room, TEST_START, cam, "depth")
print(depth.shape, depth.min().round(2), depth.max().round(2))
print(np.array2string(depth[::4, ::4], precision=1, max_line_width=120))

# %% [markdown]
# The recovery cameras look 15 degrees to either side. Their frames get a yaw
# label that turns the drone back within two seconds.

# %%
rig = CameraRig.around(cam)
left = render(room, TEST_START, rig.left, "depth")
print("left camera yaw offset", round(rig.left.yaw_offset, 4), "rad")
print("mean depth center/left:", depth.mean().round(2), left.mean().round(2))

# %% [markdown]
# Fly the expert and export a top-down plot.

# %%
traj = rollout(room, ExpertController(), TEST_START)
print(traj.outcome, len(traj), "frames, max y", round(traj.max_y, 2))
paths = export_trajectories([traj], "demo_out/expert", "svg", {room.id: room})
print("wrote", [str(p) for p in paths])
