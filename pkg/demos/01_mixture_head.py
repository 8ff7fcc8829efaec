# %% [markdown]
# # The level-wise mixture head
#
# Each level of a class hierarchy gets its own softmax over groups. A group
# spreads its probability over member classes through an assignment matrix
# Psi, and the levels are averaged with weights theta.

# %%
import numpy as np

from lmm import LevelClassifier, LMMHead, loss, mix, predict_topk
from lmm.hierarchy import Hierarchy, init_psi

np.set_printoptions(precision=4, suppress=True)

# %% [markdown]
# Two levels, three classes. Group 0 holds classes 0 and 1, group 1 holds class 2.

# %%
z1 = np.array([0.6, 0.4])
z2 = np.array([0.2, 0.3, 0.5])
psi1 = np.array([[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
z = mix([0.5, 0.5], [z1, z2], [psi1, np.eye(3)])
print("mixture:", z, "sum", z.sum())
print("loss for class 2:", loss(z, [2]))

# %% [markdown]
# Putting all the weight on the bottom level recovers an ordinary N-way softmax.

# %%
rng = np.random.default_rng(0)
h = Hierarchy.from_groupings([[0, 0, 1, 1, 1]])
heads = {}
for theta in ([0.5, 0.5], [0.0, 1.0]):
    clfs = [LevelClassifier(rng.normal(size=(k, 4)), np.zeros(k)) for k in h.group_counts()]
    heads[tuple(theta)] = LMMHead(clfs, np.array(theta), init_psi(h))
x = rng.normal(size=(3, 4))
flat = heads[(0.0, 1.0)]
pred = flat.forward(x)
logits = x @ flat.classifiers[1].weight.T
plain = np.exp(logits - logits.max(1, keepdims=True))
plain /= plain.sum(1, keepdims=True)
print("bottom-only head equals plain softmax:", np.allclose(pred.z, plain, atol=1e-15))
print("top-2 classes per sample:\n", predict_topk(heads[(0.5, 0.5)].forward(x).z, 2))

# %% [markdown]
# Gradients reach every level. A level only receives signal through the
# groups whose Psi entry for the true class is nonzero.

# %%
head = heads[(0.5, 0.5)]
y = np.array([0, 3, 4])
gw, gb, gx = head.backward(head.forward(x), y, x)
for l, g in enumerate(gw, start=1):
    print(f"level {l} weight gradient norm {np.linalg.norm(g):.4f}")
