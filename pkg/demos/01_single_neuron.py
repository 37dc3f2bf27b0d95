"""Why a converted network misfires: one IF neuron, up close.

Run with ``python demos/01_single_neuron.py``. No data needed.
"""

# %%
import numpy as np

from snncvt.analysis import single_neuron_rpe_experiment
from snncvt.snn import SpikingLayer, construct_fig2_instances, rate_and_estimate, run_layer
from snncvt.nn import Linear

# %% [markdown]
# A constant input current is the easy case. The spike count is the floor of
# the accumulated charge over the threshold, so the rate lands on the grid
# {0, 1/T, ..., 1} and matches the clipped floor estimate exactly.

# %%
T, theta = 8, 1.0
layer = SpikingLayer([Linear(np.eye(1), np.zeros(1))], theta, u0=0.0)
for v in (0.1, 0.3, 0.55, 0.9, 1.4):
    spikes, rec = run_layer(layer, np.array([[v]], np.float32), T, analog=True)
    print(f"v={v:4.2f}  spikes={''.join('|' if s else '.' for s in spikes[:, 0, 0])}  "
          f"rate={rec.rate[0, 0]:.3f}  floor estimate={min(np.floor(v * T / theta), T) / T:.3f}")

# %% [markdown]
# Hidden layers do not see a constant current, they see spikes. Three tiny
# instances at T=6 show what can happen: the neuron fires less than the
# estimate, more than the estimate, or exactly as estimated.

# %%
for case in construct_fig2_instances(T=6):
    r, g = rate_and_estimate(case.layer, case.input_spikes)
    w = case.layer.weight.data.ravel()
    trains = ["".join("|" if s else "." for s in case.input_spikes[:, 0, j]) for j in range(2)]
    print(f"{case.name:12s} w={w}  inputs={trains}  rate={r * 6:.0f}/6  estimate={g * 6:.0f}/6")

# %% [markdown]
# The same gap shows up for smooth inputs. Feed 100 sine-shaped currents into
# one neuron and compare the real rate with the estimate from the mean input.

# %%
res = single_neuron_rpe_experiment(n_sequences=100, T=10)
off = res.deviation > 0
print(f"{off.sum()} of {len(off)} sequences off the diagonal, max |g - r| = {res.max_deviation:.2f}")
print("first rows of the scatter CSV:")
print("\n".join(res.to_csv().splitlines()[:6]))
