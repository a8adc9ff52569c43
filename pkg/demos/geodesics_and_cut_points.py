# %% [markdown]
# Null geodesics in a weak lens, and where they stop being optimizing.
#
# The lens is a slab in x^1, x^2 where light moves slower, so nearby rays
# bend towards each other and eventually a second, shorter route appears.

# %%
import numpy as np

from threewave.causality import cut_time, jacobi_conjugate_time, time_separation
from threewave.geodesics import CoordinateBox, exit_time, integrate_geodesic
from threewave.manifold import Minkowski, PerturbedMinkowski, TangentVector

lens = PerturbedMinkowski(2, 0.15, (0.0, 0.0, 0.0), (100.0, 1.0, 1.0))
box = CoordinateBox(np.array([-3.0, -6.0, -6.0]), np.array([9.0, 6.0, 6.0]))
v = TangentVector(np.array([-0.9, -2.95, 0.0]), np.array([1.0, 1.0, 0.0]))

# %%
geo = integrate_geodesic(lens, v, (0.0, 6.0))
for s in (0.0, 2.0, 4.0, 6.0):
    print(f"s = {s:3.1f}  x = {np.round(geo.point(s), 4)}")
print("leaves the box at s =", round(exit_time(geo, box), 4))

# %% [markdown]
# The cut point comes no later than the first conjugate point.

# %%
cut = cut_time(lens, v, box)
print("cut time      ", round(cut.rho, 4))
print("conjugate time", round(jacobi_conjugate_time(lens, v, 8.0), 4))

# %%
# time separation is the proper time of the longest causal curve
print("tau flat      ", time_separation(Minkowski(2), (0, 0, 0), (2, 1, 0)), np.sqrt(3.0))
