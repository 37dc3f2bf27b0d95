"""Convert a small CNN to an SNN, with and without the two correction stages.

Run with ``python demos/02_two_stage_conversion.py``. Needs scikit-learn for
its bundled 8x8 digits, which are written out as IDX files first so the run
goes through the same loader as real MNIST files. About a minute on a laptop.
"""

# %%
import os
import tempfile

import numpy as np
from sklearn.datasets import load_digits

from snncvt.config import config_from_dict
from snncvt.data import write_idx
from snncvt.pipeline import load_data, run_arm, train_ann

root = tempfile.mkdtemp()
digits = load_digits()
write_idx(os.path.join(root, "images.idx"), np.clip(digits.images * 16, 0, 255).astype(np.uint8))
write_idx(os.path.join(root, "labels.idx"), digits.target.astype(np.uint8))

cfg = config_from_dict({
    "seed": 0,
    "data": {"source": "idx", "images": "images.idx", "labels": "labels.idx", "normalization": "scale255",
             "val_fraction": 0.17, "test_fraction": 0.22, "n_calib": 256},
    "model": {"arch": "cnn:16,32"},
    "train": {"epochs": 30},
}, base_dir=root)
data = load_data(cfg)
ann = train_ann(cfg, data)
x_test, y_test = data.eval_split()
print(f"source ANN test accuracy: {np.mean(ann.predict(x_test).argmax(1) == y_test):.4f}")

# %% [markdown]
# Every arm starts from the same trained ANN. "just-copy" moves the weights
# over unchanged. Stage-I finetunes a quantized copy first; Stage-II calibrates
# the spiking network layer by layer afterwards. The gap is widest at T=2.

# %%
cache = {}
print(f"{'T':>3} {'arm':>14} {'qc-ann':>8} {'snn':>8} {'rate err':>17}")
for T in (2, 4, 8):
    for arm in ("just-copy", "stage1-only", "stage2-only", "stage1+stage2"):
        r = run_arm(cfg, ann, data, T, arm, cache)
        err = f"{r.err_before:.4f}->{r.err_after:.4f}" if r.report else ""
        print(f"{T:>3} {arm:>14} {r.score_qc:8.4f} {r.score_snn:8.4f} {err:>17}")

# %% [markdown]
# Per-layer calibration report of the last run. Layer 0 receives the analog
# image, so with the half-threshold start it already matches its target.

# %%
print(r.report.to_tsv())
