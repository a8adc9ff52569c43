# %% [markdown]
# Gaussian beams: the Riccati system, its conserved quantity, and the
# residual of the truncated beam as the frequency grows.

# %%
import numpy as np

from threewave.beams import beam_residual, build_beam, truncated_residual_exponent
from threewave.manifold import Minkowski, PerturbedMinkowski, TangentVector

flat = Minkowski(2)
v = TangentVector(np.zeros(3), np.array([1.0, 1.0, 0.0]))
beam = build_beam(flat, v, kappa=1.0, lam=40.0, delta=4.0, s_range=(0.0, 3.0))

# %%
# in flat space Y(s) = diag(1, 1 + 2is) and the amplitude is det(Y)^{-1/2}
s = np.linspace(0.0, 3.0, 4)
print(np.round(beam.riccati.Y(s)[:, 1, 1], 12))
print("a00(1) =", beam.riccati.a00(np.array([1.0]))[0], " expected", (1 + 2j) ** -0.5)

# %%
lens = PerturbedMinkowski(2, 0.15, (0.0, 0.0, 0.0), (100.0, 1.0, 1.0))
bent = build_beam(lens, TangentVector(np.array([0.0, -2.0, 0.0]), np.array([1.0, 1.0, 0.0])),
                  1.0, 40.0, delta=0.2, s_range=(0.0, 3.0))
r = bent.riccati
print("conservation drift", r.conservation_drift())
print("smallest eigenvalue of Im H", r.min_imag_eig())

# %% [markdown]
# ||Box U_lam|| over a chart tube; the slope is compared with the order count.

# %%
rep = beam_residual(lens, bent, [40.0, 60.0, 90.0, 135.0], s_range=(1.5, 2.0))
print("norms", np.round(rep.norms, 3))
print("slope", round(rep.slope, 3), "predicted", truncated_residual_exponent(2))
