"""Where the error sits and what the spikes cost.

Run with ``python demos/03_energy_and_drift.py``.
"""

# %%
import numpy as np

from snncvt import analysis as an
from snncvt.config import config_from_dict
from snncvt.pipeline import load_data, stage1, train_ann
from snncvt.qc import set_time_steps
from snncvt.snn import convert_to_snn

cfg = config_from_dict({"seed": 1, "data": {"source": "gaussian-blobs", "n_samples": 1200, "n_features": 8,
                                            "n_classes": 4, "noise": 2.5},
                        "model": {"arch": "mlp:64,64"}, "train": {"epochs": 15}})
data = load_data(cfg)
ann = train_ann(cfg, data)
qc = stage1(cfg, ann, data, 4)
x, y = data.eval_split()

# %% [markdown]
# Cosine similarity between QC-ANN activations and SNN rates, per layer, as the
# number of time steps grows.

# %%
for T in (2, 4, 8, 16, 32):
    q = set_time_steps(qc.copy(), T)
    prof = an.cosine_similarity_profile(q, convert_to_snn(q, T=T), x)
    print(f"T={T:>2}  " + "  ".join(f"layer{k} {s:.4f}" for k, s in enumerate(prof)))

# %% [markdown]
# Share of neurons whose final membrane potential left [0, theta), i.e. the
# ones whose rate can differ from the quantized activation.

# %%
snn = convert_to_snn(qc, T=4)
for s in an.rpe_incidence(snn, x):
    print(f"layer {s.layer}: {100 * s.fraction:.1f}% of {s.n_trials} trials, "
          f"rate != estimate in {100 * s.fraction_mismatch:.1f}%")

print(an.error_decomposition(ann, qc, snn, x, y).to_tsv())

# %% [markdown]
# Energy: the ANN pays one multiply-accumulate per synapse, the SNN one
# accumulate per spike per outgoing synapse.

# %%
rep = an.energy_report(ann, snn, x)
print(rep.to_tsv())
print(f"SNN uses {rep.ratio:.1f}% of the ANN's energy at T={rep.T}")
