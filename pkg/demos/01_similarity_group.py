# %% [markdown]
# # Similarity transforms
#
# A monocular agent knows its map only up to scale, so every submap frame
# is related to the shared frame by a 7-DoF similarity: rotation,
# translation and one uniform scale.  This script walks through the
# `Sim3` type and its tangent space.

# %%
import numpy as np

from sim3fuse import liegroup as lg
from sim3fuse.liegroup import Sim3

rng = np.random.default_rng(0)

# %% [markdown]
# Tangent vectors are ordered `(nu, omega, lam)`: a translation-like part,
# a rotation vector and the log-scale.

# %%
x = lg.tangent(nu=(0.5, 0.0, 0.2), omega=(0.0, 0.0, np.pi / 4), lam=np.log(2.0))
T = lg.exp(x)
print(T)
print("scale", T.scale, "rotation angle (deg)", np.degrees(np.linalg.norm(lg.log(T)[3:6])))
print("log(exp(x)) - x =", np.abs(lg.log(T) - x).max())

# %% [markdown]
# Transforms compose with `@`, act on points and invert exactly.

# %%
p = rng.normal(size=(4, 3))
A, B = lg.exp(rng.normal(size=7)), lg.exp(rng.normal(size=7))
print(np.abs((A @ B).act(p) - A.act(B.act(p))).max())
print((A @ A.inverse()).allclose(Sim3.identity(), 1e-12))

# %% [markdown]
# The adjoint moves a tangent vector across a transform:
# `A exp(y) A^-1 = exp(Ad_A y)`.  The pose-graph rewrite rules rely on it.

# %%
y = rng.normal(scale=0.3, size=7)
lhs = A @ lg.exp(y) @ A.inverse()
rhs = lg.exp(lg.adjoint(A, y))
print("adjoint identity error", np.abs(lhs.matrix() - rhs.matrix()).max())

# %% [markdown]
# `Sim3Batch` holds many transforms as arrays; the solver uses it to
# evaluate every edge residual in one call.

# %%
xs = rng.normal(scale=0.5, size=(1000, 7))
batch = lg.Sim3Batch.stack(lg.exp(v) for v in xs)
print("batched round trip", np.abs(batch.log() - xs).max())
