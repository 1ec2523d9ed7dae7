# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # A metric for a system that is not feedback linearizable
#
# The planar system
#
#     x1' = -x1 - x1^3 + x2^2
#     x2' = u
#
# has a constant input direction and a drift that cannot be cancelled by a
# change of coordinates. This notebook checks the candidate certificate
# `W = I`, `rho = 1 + 2 x2^2` at rate `lam = 0.1` on a grid, looks at where
# it holds, and runs the open-loop controller built from it.

# %%
import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from ccmkit import (DifferentialFeedback, GridSpec, Multiplier, PolyMatrix, TrajectorySource,
                    check_ccm_rho, check_ccm_weak, check_killing, open_loop, parse_poly)
from ccmkit.metric import ccm_rho_matrices
from ccmkit.systems import planar_example

sys_ = planar_example()
W = PolyMatrix.identity(2, 2)
rho = Multiplier(parse_poly("1 + 2*x2^2", 2))
lam = 0.1

# %% [markdown]
# At the origin the multiplier-form matrix is diagonal:

# %%
ccm_rho_matrices(sys_, W, rho, lam, np.zeros((1, 2)))[0]

# %% [markdown]
# The weak condition only looks at the unactuated direction `x1`, where the
# value is `2(-1 - 3 x1^2) + 0.2`. It holds everywhere.

# %%
big = GridSpec.box(3.0, 2, 50)
print(check_ccm_weak(sys_, W, lam, big).to_text())

# %% [markdown]
# The multiplier form is stricter. On `[-3, 3]^2` it fails near the top and
# bottom edges: at `x1 = 0` the determinant of the 2x2 matrix is
# `1.44 - 0.4 x2^2`, which turns negative once `|x2| > 1.9`.

# %%
rep = check_ccm_rho(sys_, W, rho, lam, big)
rep.max_eig, rep.worst_point

# %%
X = big.points()
top = np.linalg.eigvalsh(ccm_rho_matrices(sys_, W, rho, lam, X))[:, -1]
fig, ax = plt.subplots(figsize=(5, 4))
sc = ax.scatter(X[:, 0], X[:, 1], c=top, cmap="coolwarm", vmin=-1, vmax=1, s=12)
ax.contour(*np.meshgrid(*big.axes(), indexing="ij"), top.reshape(50, 50), levels=[0], colors="k")
ax.set_xlabel("x1")
ax.set_ylabel("x2")
fig.colorbar(sc, label="largest eigenvalue")
fig.savefig("planar_certificate.png", dpi=120)

# %% [markdown]
# On the smaller box `[-1.5, 1.5]^2` the certificate passes, and since `W`
# is constant the Killing condition holds trivially.

# %%
small = GridSpec.box(1.5, 2, 50)
check_ccm_rho(sys_, W, rho, lam, small).passed, check_killing(sys_, W, small).passed

# %% [markdown]
# ## Open-loop control from the forward image of a geodesic
#
# With a constant metric the geodesic is a straight segment. Each node of
# the segment is pushed forward under the control obtained by integrating
# the differential gain from the target end. The Riemannian length of the
# moving curve must shrink at least as fast as `exp(-lam t)`.

# %%
fb = DifferentialFeedback(sys_, W, lam, rho=rho)
origin = TrajectorySource.equilibrium([0.0, 0.0], [0.0], sys_)
r = open_loop([1.2, -1.0], 0.0, 5.0, origin, fb, N=16, dt=0.01, record_every=10)
ratio = r.lengths / (np.exp(-lam * r.times) * r.lengths[0])
print(f"worst ratio to the exp(-lam t) bound: {ratio.max():.4f}")

# %%
fig, ax = plt.subplots(figsize=(5, 3))
ax.semilogy(r.times, r.lengths, label="length of forward image")
ax.semilogy(r.times, r.lengths[0] * np.exp(-lam * r.times), "--", label="exp(-0.1 t) bound")
ax.set_xlabel("t")
ax.legend()
fig.savefig("planar_open_loop.png", dpi=120)
