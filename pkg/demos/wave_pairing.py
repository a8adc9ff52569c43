# %% [markdown]
# The third mixed derivative of the measurement, taken by finite differences
# of full semilinear solves, against the triple product of linear waves.

# %%
from threewave.manifold import Minkowski
from threewave.wavesolver import WaveGrid, compact_source, solve_linear, three_fold_pairing

grid = WaveGrid(0.0, 6.0, (-8.0,), (8.0,), 0.04, 0.5)
sources = [compact_source((1.0, -1.5), (0.6, 0.6)),
           compact_source((1.0, 1.5), (0.6, 0.6)),
           compact_source((1.2, 0.0), (0.6, 0.6))]
probe = compact_source((4.0, 0.5), (0.6, 0.6))

# %%
u = solve_linear(grid, Minkowski(1), sources[0])
print("grid", grid.shape, " max |u| =", abs(u.values).max())

# %%
r = three_fold_pairing(grid, Minkowski(1), probe, sources, eps=0.05)
print("mixed derivative", r.lhs)
print("triple product  ", r.rhs)
print("relative gap    ", r.rel_diff, "from", r.solves, "solves")
