"""
Noise schedules and the DDIM sampler
====================================

A walk through the forward noising process and the deterministic sampler
that stage 1 uses to generate frames.
"""

import numpy as np

from tempo4d.schedule import ddim_plan, ddim_step, linear_schedule, predict_x0_from_eps, q_sample

## The schedule
# Betas rise linearly from 1e-6 to 1e-2 over 1000 steps. The cumulative
# product alpha_bar tells how much of the clean signal survives at step t.
s = linear_schedule(1000, 1e-6, 1e-2)
for t in (1, 250, 500, 750, 1000):
    print(f"t={t:4d}  beta={s.betas[t]:.2e}  alpha_bar={s.alpha_bars[t]:.4f}")

## Jumping straight to step t
# q_sample noises a clean frame in one shot. If we know the noise we can
# undo it exactly.
rng = np.random.default_rng(0)
x0 = np.clip(rng.standard_normal((16, 16)) * 0.3, -1, 1)
noise = rng.standard_normal(x0.shape)
x_t = q_sample(s, x0, 600, noise)
back = predict_x0_from_eps(s, x_t, 600, noise)
print("max reconstruction error:", np.abs(back - x0).max())

## Sampling with 50 DDIM steps
# With a perfect noise oracle the deterministic sampler lands back on x0.
plan = ddim_plan(s, 50)
print("first and last planned steps:", plan.timesteps[:3], "...", plan.timesteps[-3:])
x = q_sample(s, x0, 1000, rng.standard_normal(x0.shape))
steps = plan.timesteps
for i in range(len(steps) - 1, -1, -1):
    t = steps[i]
    t_prev = steps[i - 1] if i else 0
    eps = (x - np.sqrt(s.alpha_bars[t]) * x0) / np.sqrt(1 - s.alpha_bars[t])
    x = ddim_step(s, x, t, t_prev, eps)
print("RMS error after 50 oracle steps:", np.sqrt(np.mean((x - x0) ** 2)))
