"""Built-in warehouse scenarios: a static scene, a rearranged scene, and a moving robot.

Wall faces sit at odd multiples of 5 cm so every face lies mid-cell on the
10 cm evaluation grid.
"""
from __future__ import annotations

import math

import numpy as np

from .poses import CameraModel, Pose
from .simworld import Mover, SceneObject, SceneScript, TrajectoryScript

WALL = np.array([[-1.2, -0.4], [1.2, -0.4], [1.2, 0.4], [-1.2, 0.4]])
FENCE = np.array([[-1.2, -0.2], [1.2, -0.2], [1.2, 0.2], [-1.2, 0.2]])
ROBOT = np.array([[0.35, 0.0], [0.0, 0.35], [-0.35, 0.0], [0.0, -0.35]])
WALL_HEIGHT = 1.25
ROW_Y = 2.55
SLOT_PITCH = 3.6

EYE_HEIGHT = 1.9
PITCH = math.radians(25.0)
YAW_OFFSET = math.radians(35.0)


def default_camera():
    return CameraModel.from_fov(160, 120, 70.0, max_range=4.5)


def slot_centers(n_slots):
    return [0.05 + SLOT_PITCH * (k - (n_slots - 1) / 2.0) for k in range(n_slots)]


def _view(eye, heading):
    fwd = np.array([math.cos(heading) * math.cos(PITCH), math.sin(heading) * math.cos(PITCH), -math.sin(PITCH)])
    return Pose.look_at(eye, np.asarray(eye) + fwd)


def row_passes(x_lo, x_hi, rows=(-1, 1), outer_y=5.4, speed=1.0, t0=0.0):
    """Corridor and outside passes along each row, each done twice with the view swung left and right.

    A pass is a straight drive at constant heading; consecutive passes are joined
    by a one-second hop so no frame falls between them at 1 Hz.
    """
    waypoints = []
    t = t0
    direction = 1
    for sign in rows:
        for line_y, face in ((0.0, sign), (sign * outer_y, -sign)):
            base = math.copysign(math.pi / 2, face)
            for offset in (YAW_OFFSET, -YAW_OFFSET):
                xs = (x_lo, x_hi) if direction > 0 else (x_hi, x_lo)
                heading = base + offset
                if waypoints:
                    t += 1.0
                waypoints.append((t, _view([xs[0], line_y, EYE_HEIGHT], heading)))
                t += abs(x_hi - x_lo) / speed
                waypoints.append((t, _view([xs[1], line_y, EYE_HEIGHT], heading)))
                direction = -direction
    return waypoints


def _walls(n_slots, classes=None):
    xs = slot_centers(n_slots)
    objects = []
    for r, y in enumerate((-ROW_Y, ROW_Y)):
        for s, x in enumerate(xs):
            oid = r * n_slots + s
            cls = classes.get(oid, "box") if classes else "box"
            objects.append(SceneObject(oid, cls, FENCE if cls == "fence" else WALL, WALL_HEIGHT, [(x, y, 0.0)]))
    return objects


def _span(n_slots, margin=1.6):
    xs = slot_centers(n_slots)
    return round(xs[0] - 1.2 - margin), round(xs[-1] + 1.2 + margin)


def static_scene(seed=11, noise_std=0.01):
    """Ten walls in two rows, observed in two identical traversals."""
    objects = _walls(5, {2: "fence", 7: "fence"})
    for o in objects:
        o.poses = o.poses * 2
    lo, hi = _span(5)
    traj = TrajectoryScript(row_passes(lo, hi), 1.0)
    return SceneScript(objects, 2, default_camera(), [traj, traj], noise_std=noise_std, seed=seed)


S2_MOVED_OUT = (1, 10)  # shifted 1 m away from the corridor
S2_MOVED_ALONG = 4         # slides one slot along its row
S2_REMOVED = 6
S2_ADDED = 12
S2_EMPTY = (5, 9)          # free slots in the first traversal; slot 9 receives the new wall


def semistatic_scene(seed=23, noise_std=0.01):
    """Two rows of six slots; the second traversal moves three walls, removes one and adds one.

    The second traversal repeats the route twice so the changes settle.
    """
    n_slots = 6
    xs = slot_centers(n_slots)
    base = _walls(n_slots, {3: "fence", 7: "fence"})
    objects = []
    for o in base:
        if o.id in S2_EMPTY:
            continue
        x, y, phi = o.poses[0]
        second = (x, y, phi)
        if o.id in S2_MOVED_OUT:
            second = (x, y + math.copysign(1.0, y), phi)
        elif o.id == S2_MOVED_ALONG:
            second = (xs[5], y, phi)
        elif o.id == S2_REMOVED:
            second = None
        o.poses = [o.poses[0], second]
        objects.append(o)
    objects.append(SceneObject(S2_ADDED, "box", WALL, WALL_HEIGHT, [None, (xs[3], ROW_Y, 0.0)]))
    lo, hi = _span(n_slots)
    first = row_passes(lo, hi)
    second = row_passes(lo, hi)
    second = second + [(t + second[-1][0] + 1.0, p) for t, p in row_passes(lo, hi)]
    trajs = [TrajectoryScript(first, 1.0), TrajectoryScript(second, 1.0)]
    return SceneScript(objects, 2, default_camera(), trajs, noise_std=noise_std, seed=seed)


S3_ROBOT = 100


def dynamic_scene(seed=5, noise_std=0.01):
    """A row of four walls watched from the front while a robot crosses in between."""
    xs = slot_centers(4)
    objects = [SceneObject(k, "box", WALL, WALL_HEIGHT, [(x, ROW_Y, 0.0)]) for k, x in enumerate(xs)]
    robot = Mover(S3_ROBOT, "robot", ROBOT, 0.6, 0, start=(-4.95, 0.85, 0.0), velocity=(0.6, 0.0),
                  t_start=2.0, t_stop=14.0)
    heading = math.pi / 2
    waypoints = [(0.0, _view([-6.0, -1.0, EYE_HEIGHT], heading)),
                 (14.0, _view([2.4, -1.0, EYE_HEIGHT], heading)),
                 (18.0, _view([2.4, -1.0, EYE_HEIGHT], heading))]
    return SceneScript(objects, 1, default_camera(), [TrajectoryScript(waypoints, 1.0)], [robot],
                       noise_std=noise_std, seed=seed)


SCENARIOS = {"static": static_scene, "semistatic": semistatic_scene, "dynamic": dynamic_scene}
