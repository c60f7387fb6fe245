"""
The synthetic scene, its cameras and the exact ground truth
===========================================================

The default scene is a ring of five spheres and two boxes around the room's
center. A camera orbits close to the center looking outward, so each stretch
of the orbit sees different objects. This script renders one view per step,
compares the renderer's quadrature with the analytic tracer, and writes a
contact sheet to ``demo_out/steps.ppm``.

Run with ``python3 demos/scene_and_rays.py``.
"""
from pathlib import Path

import numpy as np

from unikd import diffcore as dc
from unikd.evalkit import image_grid, write_ppm
from unikd.geometry import Intrinsics, rays_for_view
from unikd.renderer import SamplingConfig, render_rays
from unikd.sceneworld import SceneField, TrajectorySpec, default_scene, render_gt_image, trace_rays_gt, \
    trajectory_poses

out = Path("demo_out")
out.mkdir(exist_ok=True)

scene = default_scene()
K = Intrinsics.from_fov(64, 64, 45)
traj = TrajectorySpec()
poses = trajectory_poses(traj, np.random.default_rng(0))
print(f"{len(scene.primitives)} primitives, {traj.n_views} views in {traj.steps} steps")

# first view of every step: the orbit faces a new part of the scene each time
per = traj.n_views // traj.steps
firsts = [render_gt_image(scene, poses[t * per], K, 0.4, 2.6) for t in range(traj.steps)]
for t, img in enumerate(firsts):
    print(f"step {t}: yaw {np.degrees(poses[t * per].gamma):7.1f} deg, "
          f"covered pixels {np.mean(img.max(axis=-1) > 0.05):.0%}")
write_ppm(out / "steps.ppm", image_grid([firsts[:5], firsts[5:]]))

# the renderer integrates the same medium by sampling; its error shrinks with the sample count
rays = rays_for_view(poses[0], K, None, 0.4, 2.6)
exact = trace_rays_gt(scene, rays)
for n in (16, 64, 256):
    t = 0.4 + 2.2 * (np.arange(n) + 0.5) / n
    with dc.no_grad():
        res, _ = render_rays(SceneField(scene), rays, SamplingConfig(n, 0, False),
                             t_values=np.tile(t, (len(rays), 1)))
    print(f"{n:4d} samples: mean |renderer - exact| = {np.mean(np.abs(res.color.values - exact)):.5f}")

print(f"wrote {out / 'steps.ppm'}")
