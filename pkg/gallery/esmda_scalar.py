"""ES-MDA on a scalar linear-Gaussian problem.

Prior z ~ N(0, 1), datum d = z observed as 1 with unit error variance.
The exact posterior is N(0.5, 0.5).  One Kalman step (alpha = 1) and four
steps with alpha = 4 (inverse inflations summing to one) both land there.
"""
import numpy as np

from faciesmda.assimilate import RATE, LatentEnsemble, ObservationSet, default_schedule, esmda_update

obs = ObservationSet([RATE], ["W"], [1.0], [1.0], [1.0])
z0 = np.random.default_rng(0).standard_normal((1, 100_000))

single = esmda_update(LatentEnsemble(z0), z0, obs, 1.0, seed=1)
print(f"one step:   mean {single.z.mean():.4f}  variance {single.z.var(ddof=1):.4f}")

ens = LatentEnsemble(z0)
schedule = default_schedule(4)
for k, alpha in enumerate(schedule.alphas):
    ens = esmda_update(ens, ens.z, obs, alpha, seed=10 + k)
    print(f"MDA step {k + 1} (alpha {alpha:g}): mean {ens.z.mean():.4f}  "
          f"variance {ens.z.var(ddof=1):.4f}")
print("analytic:   mean 0.5000  variance 0.5000")
