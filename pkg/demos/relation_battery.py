# %% [markdown]
# The three-to-one scattering relation on a battery of flat quadruples with
# known answers: three light rays out of the source tube and one into the
# observation tube, either meeting at a point or with one ray shifted away.

# %%
from collections import Counter

from threewave.causality import TimelikePath
from threewave.manifold import Minkowski
from threewave.relation import Foliation, RelationOracle, minkowski_battery, separation_conditions

m = Minkowski(2)
fin = Foliation(m, TimelikePath.vertical([-2.0, 0.0], t0=0.0), 0.5, "in")
fout = Foliation(m, TimelikePath.vertical([2.0, 0.0], t0=3.0), 0.5, "out")
print(separation_conditions(fin, fout))

# %%
quads, certified = minkowski_battery(fin, fout, 60, seed=1)
oracle = RelationOracle(fin, fout)
verdicts = [oracle.membership(*q) for q in quads]
print(Counter((bool(c), r.verdict) for c, r in zip(certified, verdicts)))

# %%
first = next(r for r in verdicts if r.verdict == "member")
print("witness", first.witness.y, "gap", first.min_gap)
