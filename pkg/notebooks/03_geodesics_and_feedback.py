# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Geodesics, energy rates and the choice of controller
#
# A geodesic here is a polygon with `N` segments whose interior nodes
# minimize the discrete energy `N * sum_k d_k' M(mid_k) d_k`. Two small
# examples show what the solver returns. Then the different ways of
# turning a geodesic into a control are compared on the planar system.

# %%
import numpy as np

from ccmkit import (DifferentialFeedback, GeodesicFeedback, MetricEvaluator, Multiplier,
                    PolyMatrix, SampledFeedback, SimConfig, TrajectorySource, geodesic,
                    parse_poly, simulate)
from ccmkit.controller import MinNormFeedback
from ccmkit.geodesic import PrimalMetricEvaluator, energy_first_variation
from ccmkit.systems import planar_example

# %% [markdown]
# ## A one-dimensional metric with a closed form
#
# With `M(x) = (1 + x)^2` the length of `[0, 3]` is `int_0^3 (1 + x) dx = 7.5`,
# so the energy of the constant-speed parametrization is `56.25`.
# Constant Riemannian speed means the Euclidean steps shrink as `1 / (1 + x)`.

# %%
one_d = PrimalMetricEvaluator(PolyMatrix([[parse_poly("(1 + x1)^2", 1)]]))
g = geodesic([0.0], [3.0], one_d, 16)
g.energy, g.length, g.converged

# %%
np.round(np.diff(g.curve.nodes[:, 0]), 4)

# %% [markdown]
# ## First variation of the energy
#
# Moving the endpoints changes the energy at a rate given by the boundary
# tangents. The finite-difference check below is the oracle used to fix the
# sign convention.

# %%
W = PolyMatrix([[parse_poly("1 + 0.5*x1^2", 2), parse_poly("0.2*x1", 2)],
                [parse_poly("0.2*x1", 2), parse_poly("1", 2)]], symmetric=True)
M = MetricEvaluator(W)
a, b = np.array([-1.0, 0.5]), np.array([2.0, -1.0])
va, vb = np.array([0.3, -0.2]), np.array([-0.5, 0.4])
g = geodesic(a, b, M, 64)
h = 1e-4
fd = 0.5 * (geodesic(a + h * va, b + h * vb, M, 64).energy
            - geodesic(a - h * va, b - h * vb, M, 64).energy) / (2 * h)
energy_first_variation(g, va, vb), fd

# %% [markdown]
# ## Four controllers on the planar system
#
# * continuous feedback: fresh geodesic every step, gain integrated along it
# * Sontag-type differential feedback, which only uses the metric
# * pointwise min-norm control that keeps `dE/dt <= -2 lam E`
# * sampled data: a geodesic every 0.25 s, its forward image in between

# %%
sys_ = planar_example()
W = PolyMatrix.identity(2, 2)
rho = Multiplier(parse_poly("1 + 2*x2^2", 2))
lam = 0.1
origin = TrajectorySource.equilibrium([0.0, 0.0], [0.0], sys_)
strong = DifferentialFeedback(sys_, W, lam, rho=rho)
sontag = DifferentialFeedback(sys_, W, lam, form="sontag")
controllers = {
    "continuous": GeodesicFeedback(strong, origin, N=16),
    "sontag": GeodesicFeedback(sontag, origin, N=16),
    "min-norm": MinNormFeedback(sys_, MetricEvaluator(W), origin, lam, N=16),
    "sampled": SampledFeedback(strong, origin, 0.25, N=16, dt=0.01),
}
cfg = SimConfig(dt=0.01, horizon=5.0, energy_every=10, geodesic_N=16)
for name, ctl in controllers.items():
    tr = simulate(sys_, ctl, origin, [1.0, 1.2], cfg, metric=MetricEvaluator(W))
    effort = float(np.sum(tr.controls[:-1, 0] ** 2) * cfg.dt)
    print(f"{name:>10}: |x(5)| = {np.linalg.norm(tr.final_state):.3e}, "
          f"control energy = {effort:.3f}")

# %% [markdown]
# The min-norm law uses the least control that meets the decay target, so
# it ends furthest from the origin but spends the least effort. The
# multiplier-based laws over-satisfy the target.
