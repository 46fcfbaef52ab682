# %% [markdown]
# Fairness penalties on a fixed score vector
#
# Two groups, four people each. Group 0 gets higher scores than group 1, so
# demographic parity is violated. We look at the per-group statistics, the
# violation vector, every penalty, and the gradient each one sends back.

# %%
import numpy as np

from fairgrad import autodiff as ad
from fairgrad.model import make_fairret
from fairgrad.statistics import SampleBatch, group_statistics, violation

groups = np.array([0, 0, 0, 0, 1, 1, 1, 1])
labels = np.array([1, 1, 0, 0, 1, 0, 0, 0], dtype=float)
h = np.array([0.9, 0.8, 0.6, 0.5, 0.5, 0.3, 0.2, 0.2])
batch = SampleBatch(np.zeros((8, 1)), labels, np.eye(2)[groups], partition=True)

# %%
gs = group_statistics("demographic_parity", batch, h)
print("per-group positive rate:", gs.per_group.numpy(), "overall:", gs.overall.item())
print("violation vector:", violation("demographic_parity", batch, h).numpy())

# %% [markdown]
# The same scores under the other statistics. Predictive parity and treatment
# equality divide by score-dependent quantities, so their values move
# differently from the rate-based notions.

# %%
for stat in ("equal_opportunity", "predictive_parity", "treatment_equality"):
    print(f"{stat:>20}: v = {np.round(violation(stat, batch, h).numpy(), 4)}")

# %%
for name in ("norm1", "norm2", "norminf", "smoothmax", "kl", "js", "sed"):
    fairret = make_fairret(name, "demographic_parity", max_iterations=50)
    value, g = ad.grad(lambda t: fairret(batch, t), h)
    print(f"{name:>9}: R = {value:.4f}  dR/dh = {np.round(g, 4)}")

# %% [markdown]
# Violation penalties push each group's scores by the same amount: the
# gradient is constant within a group. Projection penalties instead move
# each score towards its own projected value, so the push depends on the
# individual score as well.
