# %% [markdown]
# # Where is a forecaster miscalibrated?
#
# The synthetic geospatial data exposes its true conditional law. A forecast
# that is right on average but shifted north-up / south-down looks fine
# globally and poor locally.

# %%
import numpy as np

from calikit import data as D
from calikit import experiment as E
from calikit import kernels as K
from calikit import metrics as M
from calikit.forecast import GaussianForecast

ds = D.synth_geo(10_000, seed=0)
std = D.Standardizer.fit(ds)
phi = std.x(ds.features)[:, :2]
truth = ds.truth(ds.features)
u = (ds.features[:, 0] - D.GEO_LAT[0]) / (D.GEO_LAT[1] - D.GEO_LAT[0])
shifted = GaussianForecast(truth.mu + 0.5 * truth.sigma * (2 * u - 1), truth.sigma)

print("global QCE  truth %.4f  shifted %.4f" % (M.qce(truth, ds.labels), M.qce(shifted, ds.labels)))

# %%
grid = 8
shades = " .:-=+*#%@"
for name, f in (("truth", truth), ("shifted", shifted)):
    _, totals, _ = E.lce_grid(f, ds.labels, phi, phi.min(0), phi.max(0), grid, K.RBF(0.3))
    T = totals.reshape(grid, grid)
    print(f"\n{name}: mean LCE {np.nanmean(T):.5f}  (rows: latitude south to north)")
    for row in T:
        print("  " + "".join(shades[min(int(v / 0.002), 9)] * 2 for v in row))
