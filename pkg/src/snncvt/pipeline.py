"""End-to-end conversion: source ANN -> BN fusion -> QC finetuning -> SNN -> calibration -> eval."""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationReport, run_stage2
from .config import ARMS, ConfigError, PipelineConfig
from .data import DatasetHandle, ingest_dataset
from .modelfile import model_hash, save_model
from .nn import Network, build_network, fuse_batchnorm, train_source_ann
from .optim import OptimizerState
from .qc import convert_to_qcann, default_noise_probability, finetune_qcann, make_deterministic
from .rng import substream
from .snn import SpikingNetwork, convert_to_snn

log = logging.getLogger(__name__)


def score(model, x, y, task: str) -> float:
    """Accuracy for recognition, negative MSE for regression (higher is better)."""
    pred = model.predict(x)
    if task == "regression":
        return -float(np.mean((pred - np.asarray(y).reshape(pred.shape)) ** 2))
    return float(np.mean(pred.argmax(axis=1) == np.asarray(y)))


def load_data(cfg: PipelineConfig) -> DatasetHandle:
    data = ingest_dataset(dataclasses.replace(cfg.data, seed=cfg.seed))
    if cfg.task and cfg.task != data.task:
        raise ConfigError("task", f"configured as {cfg.task} but dataset {cfg.data.source!r} is {data.task}")
    return data


def train_ann(cfg: PipelineConfig, data: DatasetHandle) -> Network:
    """Build and train the source ANN, then fold BatchNorm into the preceding affine layers."""
    activation = "clip_unit" if cfg.model.recipe == "direct-clip" else "clip_scaled"
    net = build_network(cfg.model.arch, data.input_shape, data.n_outputs, substream(cfg.seed, "init"),
                        activation=activation, batchnorm=cfg.model.batchnorm)
    t = cfg.train
    hyper = OptimizerState(t.optimizer, t.lr, momentum=t.momentum, weight_decay=t.weight_decay)
    net = train_source_ann(net, data, cfg.model.recipe, hyper, t.epochs, t.batch_size, cfg.seed,
                           train_theta=t.train_theta)
    return fuse_batchnorm(net)


def stage1(cfg: PipelineConfig, ann: Network, data: DatasetHandle, T: int) -> Network:
    """QC-ANN at ``T``; finetuned with quantization noise when Stage-I is enabled."""
    s = cfg.stage1
    if not s.enabled:
        return make_deterministic(convert_to_qcann(ann, T, 0.0, cfg.seed))
    p = s.p if s.p is not None else default_noise_probability(T)
    qc = convert_to_qcann(ann, T, p, cfg.seed)
    hyper = OptimizerState("sgd", s.lr, momentum=s.momentum)
    return finetune_qcann(qc, data, hyper, s.epochs, s.batch_size, cfg.seed)


def stage2(cfg: PipelineConfig, snn: SpikingNetwork, qc: Network, data: DatasetHandle):
    """Layer-wise calibration on the calibration subset; a no-op when both CC and FC are off."""
    if not (cfg.stage2.cc or cfg.stage2.fc) or len(data.calib_index) == 0:
        return snn, None
    return run_stage2(snn, qc, data.x_calib, cfg.stage2_config(data.task))


@dataclass
class ArmResult:
    arm: str
    T: int
    score_ann: float
    score_qc: float
    score_snn: float
    err_before: float | None = None
    err_after: float | None = None
    snn_hash: str = ""
    seconds: float = 0.0
    qcann: Network | None = field(default=None, repr=False)
    snn: SpikingNetwork | None = field(default=None, repr=False)
    report: CalibrationReport | None = field(default=None, repr=False)


def run_arm(cfg: PipelineConfig, ann: Network, data: DatasetHandle, T: int, arm: str | None = None,
            cache: dict | None = None) -> ArmResult:
    """Stage-I, conversion, Stage-II and evaluation at one ``T``.

    ``cache`` shares QC-ANNs between arms with the same Stage-I setting.
    """
    if arm is not None:
        cfg = cfg.with_arm(arm)
    arm = cfg.arm() or "custom"
    t0 = time.perf_counter()
    x_eval, y_eval = data.eval_split()
    key = (T, cfg.stage1.enabled)
    if cache is not None and key in cache:
        qc = cache[key]
    else:
        qc = stage1(cfg, ann, data, T)
        if cache is not None:
            cache[key] = qc
    snn = convert_to_snn(qc, cfg.convert.shift_mode, T)
    snn, report = stage2(cfg, snn, qc, data)
    res = ArmResult(arm, T, score(ann, x_eval, y_eval, data.task), score(qc, x_eval, y_eval, data.task),
                    score(snn, x_eval, y_eval, data.task), qcann=qc, snn=snn, report=report)
    if report is not None:
        res.err_before, res.err_after = report.mean_error_before(), report.mean_error_after()
    res.snn_hash = model_hash(snn)
    res.seconds = time.perf_counter() - t0
    log.info("arm %s T=%d: ann %.4f qc %.4f snn %.4f (%.1fs)", arm, T, res.score_ann, res.score_qc,
             res.score_snn, res.seconds)
    return res


@dataclass
class PipelineResult:
    config: PipelineConfig
    data: DatasetHandle
    ann: Network
    arms: list

    def table(self) -> str:
        """Score-vs-T table as TSV."""
        fmt = lambda v: "" if v is None else f"{v:.6g}"
        rows = ["arm\tT\tscore_ann\tscore_qc\tscore_snn\trate_err_before\trate_err_after\tsnn_sha256"]
        for r in self.arms:
            rows.append(f"{r.arm}\t{r.T}\t{r.score_ann:.6g}\t{r.score_qc:.6g}\t{r.score_snn:.6g}\t"
                        f"{fmt(r.err_before)}\t{fmt(r.err_after)}\t{r.snn_hash}")
        return "\n".join(rows) + "\n"

    def final(self) -> ArmResult:
        """The arm at the configured T (last one run if several match)."""
        hits = [r for r in self.arms if r.T == self.config.T]
        return (hits or self.arms)[-1]


def run_pipeline(cfg: PipelineConfig, ablation: str | None = None, out_dir: str | None = None,
                 ann: Network | None = None, data: DatasetHandle | None = None) -> PipelineResult:
    """Train (or reuse) the ANN, then run each requested arm at every T of ``cfg.time_steps()``.

    ``ablation`` is an arm name, ``"all"``, or None for the stage toggles in
    ``cfg``. With ``out_dir`` the ANN, the final QC-ANN / SNN and all reports
    are written there.
    """
    if ablation == "all":
        arms = list(ARMS)
    elif ablation is None:
        arms = [None]
    else:
        if ablation not in ARMS:
            raise ConfigError("ablation", f"unknown arm {ablation!r}; choose from {sorted(ARMS)} or 'all'")
        arms = [ablation]
    data = data or load_data(cfg)
    ann = ann or train_ann(cfg, data)
    results, cache = [], {}
    for T in cfg.time_steps():
        for arm in arms:
            results.append(run_arm(cfg, ann, data, T, arm, cache))
    out = PipelineResult(cfg, data, ann, results)
    if out_dir:
        write_outputs(out, out_dir)
    return out


def write_outputs(res: PipelineResult, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    final = res.final()
    paths = {
        "ann": os.path.join(out_dir, "ann.snnc"),
        "qcann": os.path.join(out_dir, "qcann.snnc"),
        "snn": os.path.join(out_dir, "snn.snnc"),
        "table": os.path.join(out_dir, "accuracy_vs_T.tsv"),
    }
    save_model(paths["ann"], res.ann)
    save_model(paths["qcann"], final.qcann)
    save_model(paths["snn"], final.snn)
    with open(paths["table"], "w") as fh:
        fh.write(res.table())
    if final.report is not None:
        paths["calibration"] = os.path.join(out_dir, "calibration.tsv")
        with open(paths["calibration"], "w") as fh:
            fh.write(final.report.to_tsv())
    return paths
