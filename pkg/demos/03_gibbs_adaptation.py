# %% [markdown]
# # Adapting the assignment matrix with a collapsed Gibbs sampler
#
# Every training image carries a group label. Counts of (group, class) pairs
# give a posterior over Psi; resampling labels lets classes drift to the group
# the classifier actually predicts for them.

# %%
import numpy as np

from lmm import apply_nonoverlap, estimate_psi, gibbs_posterior, gibbs_sweep
from lmm.adaptation import CountMatrix, tally

np.set_printoptions(precision=4, suppress=True)

# %% [markdown]
# The conditional for one image combines how popular its class already is in
# each group with the classifier's group probabilities.

# %%
omega = np.array([[2, 0, 1], [0, 3, 0]])
print("posterior for a class-0 image, even classifier:", gibbs_posterior(omega, 0, np.ones(3), [0.5, 0.5]))
print("same image, classifier prefers group 1:", gibbs_posterior(omega, 0, np.ones(3), [0.1, 0.9]))

# %% [markdown]
# A toy: class 2 starts in group 0, but its images look like group 1.

# %%
y = np.repeat([0, 1, 2], 20)
labels = np.array([0] * 20 + [1] * 20 + [0] * 20)
probs = np.vstack([np.tile([0.95, 0.05], (20, 1)), np.tile([0.05, 0.95], (40, 1))])
counts = CountMatrix(1, tally(labels, y, 2, 3), labels.copy())
rng = np.random.default_rng(0)
for sweep in range(5):
    moves = gibbs_sweep(counts, y, probs, np.ones(3), rng)
    print(f"sweep {sweep}: {moves} moves, counts\n{counts.omega}")

# %%
psi = estimate_psi(counts.omega, np.ones(3))
print("estimated Psi:\n", psi)
(pruned,), dead = apply_nonoverlap([psi])
print("after keeping each class's strongest group:\n", pruned)
