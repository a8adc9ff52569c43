# %% [markdown]
# Four beams meeting at the origin of 1+2 Minkowski space.  The scaled
# four-fold product tends to a value fixed by the combined phase there.

# %%
import numpy as np

from threewave.interaction import InteractionConfig, eval_D_semi, prepare_interaction
from threewave.manifold import Minkowski, TangentVector


def rays(shift=0.0):
    xi = [(1, 0, -1), (1, 1, 0), (1, -1, 0), (1, 0, 1)]
    x = [(3, 0, -3), (-2, -2, 0), (-2, 2, 0), (-2, 0, -2 + shift)]
    return [TangentVector(np.array(p, float), np.array(d, float)) for p, d in zip(x, xi)]


m = Minkowski(2)
prep = prepare_interaction(InteractionConfig(m, rays()))
print("interaction point", np.round(prep.y, 8))

# %%
lams = (40.0, 60.0, 90.0, 135.0)
r = eval_D_semi(prep, lams)
print("scaled values", np.round(r.full, 5))
print("extrapolated  ", round(r.full_limit, 5), "+-", round(r.full_error, 5))
print("predicted     ", round(r.predicted, 5))

# %%
# move one ray off the common point: the product decays instead
off = prepare_interaction(InteractionConfig(m, rays(0.5), kappas=list(prep.kappas)))
print(np.abs(eval_D_semi(off, lams).full))
