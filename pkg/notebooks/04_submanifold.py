# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Convergence to a submanifold
#
# Two coupled states `x1' = -x1 + x2`, `x2' = x1 - x2` do not converge to
# a point (every point on the diagonal is an equilibrium). They do converge
# to the diagonal `z(x) = x1 - x2 = 0`. A metric that is invariant along
# the level sets of `z` certifies this with a condition projected on
# `dz/dx`.

# %%
import numpy as np

from ccmkit import GridSpec, PolyMatrix, SimConfig, TrajectorySource, simulate
from ccmkit.manifold import ManifoldSpec, build_virtual, check_corollary2, verify_convergence
from ccmkit.systems import consensus_system

sys_ = consensus_system()
spec = ManifoldSpec.from_strings(["x1 - x2"], 2, 0.0)
grid = GridSpec.box(3.0, 2, 11)

# %% [markdown]
# The tangent directions of the level sets span the null space of `dz/dx`.
# Adding them as fictitious inputs gives the virtual control system.

# %%
vs = build_virtual(sys_, spec, grid)
vs.G.constant_value()

# %% [markdown]
# With `W = I` the projected condition is the constant `-8 + 4 lam`. It
# holds for `lam = 0.5` and fails for `lam = 3`.

# %%
for lam in (0.5, 2.0, 3.0):
    rep = check_corollary2(sys_, spec, PolyMatrix.identity(2, 2), lam, grid)
    print(f"lam = {lam}: value {rep.max_eig:+.3f}, passed = {rep.passed}")

# %% [markdown]
# The residual obeys `z' = -2 z`, so the fitted rate should be 2.

# %%
origin = TrajectorySource.equilibrium([0.0, 0.0], [], sys_)
tr = simulate(sys_, None, origin, [2.0, -1.0], SimConfig(dt=1e-3, horizon=3.0))
verify_convergence(spec, tr)
