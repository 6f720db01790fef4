"""
The one-cycle schedule
======================

Learning rate climbs linearly to its peak while momentum falls, then both
walk back. Four stages: warm-up, ramp-up, ramp-down, ending.
"""

from manifold_ssl.trainer import TrainConfig, schedule_at, stage_at

cfg = TrainConfig(iters=5000)
print("stage boundaries", cfg.boundaries())

for it in range(0, cfg.iters + 1, 250):
    lr, mom = schedule_at(cfg, it)
    stage = stage_at(cfg, min(it, cfg.iters - 1))
    print(f"{it:5d}  {stage:8s}  lr={lr:.5f}  momentum={mom:.3f}  " + "#" * int(lr * 2000))
