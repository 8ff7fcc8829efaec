# %% [markdown]
# # Building a class hierarchy from class means
#
# Synthetic data with planted superclusters: classes inside a supercluster
# share a nearby mean. Clustering class means with a self-tuned similarity
# kernel should find the superclusters again.

# %%
import numpy as np

from lmm import HierarchyConfig, SynthSpec, build_hierarchy, class_representations, generate_synthetic, similarity_matrix
from lmm.trainer import purity

data, planted = generate_synthetic(SynthSpec(num_superclusters=4, classes_per_supercluster=5, seed=0))
print(data.size, "samples,", data.num_classes, "classes, input dim", data.input_dim)

# %% [markdown]
# Each class is represented by its mean. The kernel bandwidth of a class is
# the distance to its k-th nearest other class.

# %%
cfg = HierarchyConfig(num_levels=3, group_counts=(4, 10), self_tune_k=7)
sim = similarity_matrix(class_representations(data), cfg)
print("local scales:", np.round(sim.sigmas, 2))
print("within-supercluster mean similarity:",
      np.mean([sim.values[i, j] for i in range(20) for j in range(20)
               if i != j and planted.class_to_supercluster[i] == planted.class_to_supercluster[j]]).round(3))
print("across-supercluster mean similarity:",
      np.mean([sim.values[i, j] for i in range(20) for j in range(20)
               if planted.class_to_supercluster[i] != planted.class_to_supercluster[j]]).round(3))

# %%
h = build_hierarchy(sim, cfg)
print("level sizes:", h.group_counts(), "nesting violations:", h.nesting_violations())
for level in (1, 2):
    print(f"level {level}:", h.groups(level))
print("purity of the 4-group level:", purity(h.memberships[0], planted.class_to_supercluster))
