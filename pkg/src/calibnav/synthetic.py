"""Synthetic data with a known generative process.

Pedestrians walk in straight lines at constant speed. Observed positions are
exact; future positions get i.i.d. isotropic Gaussian noise, so the ideal
predictor is the constant-velocity mean with covariance ``noise**2 * I`` at
every step.
"""

from __future__ import annotations

import numpy as np

from .predictor import FRAME_DT, OBS_LEN, PRED_LEN, TrajectoryWindow


def linear_motion_windows(
    n: int,
    seed: int = 0,
    noise: float = 0.0,
    speed_range: tuple[float, float] = (0.3, 1.8),
    scene_id: str = "synthetic",
    frames_per_scene: int = 32,
) -> list[TrajectoryWindow]:
    rng = np.random.default_rng(seed)
    start = rng.uniform(-10.0, 10.0, size=(n, 2))
    heading = rng.uniform(-np.pi, np.pi, size=n)
    speed = rng.uniform(*speed_range, size=n)
    vel = np.stack([np.cos(heading), np.sin(heading)], axis=1) * (speed * FRAME_DT)[:, None]
    t = np.arange(OBS_LEN + PRED_LEN, dtype=float)
    tracks = start[:, None, :] + t[None, :, None] * vel[:, None, :]
    tracks[:, OBS_LEN:] += noise * rng.standard_normal((n, PRED_LEN, 2))
    # several pedestrians share each start frame so batches mix pedestrians
    return [
        TrajectoryWindow(i, tracks[i, :OBS_LEN], tracks[i, OBS_LEN:], scene_id, int(i % frames_per_scene))
        for i in range(n)
    ]


def crowd_scenarios(
    n: int,
    seed: int = 0,
    n_peds: int = 8,
    size: float = 10.0,
    speed_range: tuple[float, float] = (0.6, 1.4),
    n_frames: int = 40,
):
    """Square workspaces crossed by constant-velocity pedestrians.

    Each pedestrian starts on a random edge, walks towards a random point on
    the opposite edge and is logged for 7 frames of history plus the scenario
    frames. Start-goal variants cycle through the four standard pairs.
    """
    from .datasets import VARIANTS, Scenario, start_goal

    rng = np.random.default_rng(seed)
    rect = (0.0, 0.0, size, size)
    frames = np.arange(-(OBS_LEN - 1), n_frames, dtype=float)
    out = []
    for k in range(n):
        peds = {}
        for pid in range(n_peds):
            side = rng.integers(4)
            a, b = rng.uniform(0.1, 0.9, size=2) * size
            ends = {
                0: ((a, 0.0), (b, size)),
                1: ((a, size), (b, 0.0)),
                2: ((0.0, a), (size, b)),
                3: ((size, a), (0.0, b)),
            }[int(side)]
            p0, p1 = np.array(ends[0]), np.array(ends[1])
            direction = (p1 - p0) / np.linalg.norm(p1 - p0)
            speed = rng.uniform(*speed_range)
            # shift so the pedestrian is mid-crossing at a random time in the scenario
            t_mid = rng.uniform(0.0, n_frames * FRAME_DT)
            centre = 0.5 * (p0 + p1)
            pos = centre[None, :] + ((frames * FRAME_DT - t_mid) * speed)[:, None] * direction[None, :]
            peds[pid] = np.column_stack([frames, pos])
        variant = VARIANTS[k % len(VARIANTS)]
        start, goal = start_goal(rect, variant)
        out.append(Scenario("crowd", k, variant, rect, start, goal, peds, n_frames))
    return out
