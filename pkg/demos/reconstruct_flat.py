# %% [markdown]
# Recovering earliest observation sets from the relation alone, then the
# conformal factor from the scaled interaction data.

# %%
import numpy as np

from threewave.causality import TimelikePath
from threewave.manifold import Constant, Minkowski, TangentVector
from threewave.reconstruct import (ConformalConfig, Neighborhood, compare_with_direct,
                                   recover_conformal_factor, recover_E_family)
from threewave.relation import Foliation, RelationOracle

m = Minkowski(2)
fin = Foliation(m, TimelikePath.vertical([-2.0, 0.0], t0=0.0), 0.25, "in")
fout = Foliation(m, TimelikePath.vertical([2.0, 0.0], t0=3.4), 0.5, "out")
oracle = RelationOracle(fin, fout)
th = 0.3
v1 = TangentVector(np.array([0.1, -2 + 0.1 * np.cos(th), 0.1 * np.sin(th)]), np.array([1.0, np.cos(th), np.sin(th)]))

# %%
rep = recover_E_family(oracle, v1, 0.0, Neighborhood([0.3, 1.7]), budget=2000, pitch=0.1)
for c in rep.recovered:
    print(f"r = {c.r}: {len(c.E)} light vectors, first arrival f0 = {c.f0:.4f}")
cmp = compare_with_direct(rep, oracle)
print("Hausdorff to direct sets", [round(p["hausdorff"], 4) for p in cmp["pairs"]])

# %%
est = recover_conformal_factor(np.zeros(3), 2, 3, ConformalConfig(m, Constant(4.0)))
print("c recovered", est.c, "true", est.c_true)
