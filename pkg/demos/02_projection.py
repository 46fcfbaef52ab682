# %% [markdown]
# Projecting scores onto the fair set
#
# For a fixed target value ``c`` the fairness constraints are linear in the
# scores, and the closest fair score vector under KL, JS or squared
# distance can be found through one multiplier per group.

# %%
import numpy as np

from fairgrad.projection import ProjectionSolverConfig, divergence, solve_projection
from fairgrad.statistics import group_statistics
from fairgrad.data import SyntheticSpec, synthesize

data = synthesize(SyntheticSpec.with_gap(0.3, n=2000, group_shift=2.0, seed=0))
h = np.clip(data.meta["bayes_scores"], 1e-6, 1 - 1e-6)
print("group positive rates before:", group_statistics("dp", data, h).per_group.numpy())

# %%
config = ProjectionSolverConfig(max_iterations=200)
for kind in ("kl", "js", "sed"):
    res = solve_projection(kind, "dp", data, h, config)
    after = group_statistics("dp", data, res.f_star).per_group.numpy()
    print(f"{kind:>3}: {res.iterations} Newton steps, max residual {np.abs(res.residuals).max():.1e}, "
          f"mean divergence {divergence(kind, res.f_star, h).mean():.5f}, rates after {np.round(after, 6)}")

# %% [markdown]
# The squared-distance projection shifts every score of a group by the same
# amount and clips at 0 and 1. The KL projection shifts logits instead,
# which moves confident scores less.

# %%
sed = solve_projection("sed", "dp", data, h, config).f_star
kl = solve_projection("kl", "dp", data, h, config).f_star
g0 = data.meta["groups"] == 0
for lo, hi in ((0.0, 0.2), (0.4, 0.6), (0.8, 1.0)):
    sel = g0 & (h >= lo) & (h < hi)
    print(f"group 0, h in [{lo}, {hi}): mean shift SED {np.mean(sed[sel] - h[sel]):+.4f}, "
          f"KL {np.mean(kl[sel] - h[sel]):+.4f}")

# %% [markdown]
# Capping the number of Newton steps returns a feasible but possibly
# suboptimal projection, so the penalty can only be overestimated.

# %%
full = divergence("kl", kl, h).mean()
for cap in (1, 2, 3):
    capped = solve_projection("kl", "dp", data, h, ProjectionSolverConfig(max_iterations=cap))
    print(f"cap {cap}: R = {divergence('kl', capped.f_star, h).mean():.6f} (converged value {full:.6f})")
