"""Incremental neural radiance fields with uncertainty-filtered teacher distillation.

Modules
-------
diffcore    reverse-mode autodiff, parameters, Adam, finite-difference checks
geometry    poses, intrinsics, rays, pose ranges
field       the MLP field with density, color and uncertainty heads
renderer    sampling and emission-absorption compositing
objectives  rendering, uncertainty-weighted and distillation losses
sceneworld  procedural scenes, ground-truth rendering, incremental datasets
continual   strategies, the uncertainty filter, memory accounting, experiments
evalkit     PSNR/SSIM and report files
config, cli experiment configuration and the command line
"""

__version__ = "0.1.0"
