"""Command-line entry point.

Exit codes: 0 success, 1 other failure, 2 malformed config or arguments,
3 missing file, 4 numeric failure (non-finite values, diverged training).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import __version__
from .config import ARMS, ConfigError, PipelineConfig, load_config
from .modelfile import load_model, model_hash, save_model
from .nn import Network, TrainingDiverged
from .qc import QCActivation, set_time_steps
from .snn import SHIFT_MODES, SpikingNetwork, convert_to_snn, set_snn_time_steps

log = logging.getLogger("snncvt")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4
EXPERIMENTS = ("fig5a", "rpe", "cosine", "energy", "decomposition", "scatter")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed, data=dataclasses.replace(cfg.data, seed=args.seed))
    if getattr(args, "T", None) is not None:
        cfg.stage1.T = args.T
    return cfg


def _write(text: str, path: str | None):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
        log.info("wrote %s", path)
    else:
        sys.stdout.write(text)


def _load(path, kind=None):
    model = load_model(path)
    if kind is not None and not isinstance(model, kind):
        raise ValueError(f"{path}: expected a {kind.__name__}, found {type(model).__name__}")
    return model


# -- subcommands -----------------------------------------------------------------

def cmd_train_ann(args):
    from .pipeline import load_data, score, train_ann
    cfg = _config(args)
    data = load_data(cfg)
    ann = train_ann(cfg, data)
    digest = save_model(args.out, ann)
    x, y = data.eval_split()
    print(f"ann score {score(ann, x, y, data.task):.6g} sha256 {digest}")


def cmd_finetune_qc(args):
    from .pipeline import load_data, score, stage1
    cfg = _config(args)
    if args.no_finetune:
        cfg.stage1.enabled = False
    data = load_data(cfg)
    ann = _load(args.model, Network)
    qc = stage1(cfg, ann, data, cfg.T)
    digest = save_model(args.out, qc)
    x, y = data.eval_split()
    print(f"qcann T={cfg.T} score {score(qc, x, y, data.task):.6g} sha256 {digest}")


def cmd_convert(args):
    qc = _load(args.model, Network)
    snn = convert_to_snn(qc, args.shift_mode, args.T)
    digest = save_model(args.out, snn)
    print(f"snn T={snn.T} layers {len(snn.layers)} sha256 {digest}")


def cmd_calibrate(args):
    from .pipeline import load_data, stage2
    cfg = _config(args)
    if args.no_cc:
        cfg.stage2.cc = False
    if args.no_fc:
        cfg.stage2.fc = False
    data = load_data(cfg)
    snn = _load(args.model, SpikingNetwork)
    qc = _load(args.qcann, Network)
    snn, report = stage2(cfg, snn, qc, data)
    digest = save_model(args.out, snn)
    if report is not None:
        _write(report.to_tsv(), args.report)
    print(f"calibrated snn sha256 {digest}", file=sys.stderr if not args.report else sys.stdout)


def cmd_eval(args):
    from .pipeline import load_data, score
    cfg = _config(args)
    data = load_data(cfg)
    model = _load(args.model)
    if args.T is not None:
        if isinstance(model, SpikingNetwork):
            set_snn_time_steps(model, args.T)
        else:
            set_time_steps(model, args.T)
    x, y = data.eval_split()
    s = score(model, x, y, data.task)
    metric = "mse" if data.task == "regression" else "accuracy"
    value = -s if data.task == "regression" else s
    T = getattr(model, "T", None) or next((l.T for l in model.layers if isinstance(l, QCActivation)), "-")
    print(f"{metric}\t{value:.6g}\tT\t{T}\tn\t{len(x)}\tsha256\t{model_hash(model)}")


def cmd_analyze(args):
    from . import analysis as an
    exp = args.experiment
    if exp == "fig5a":
        res = an.single_neuron_rpe_experiment(args.n_sequences, args.T or 10, args.theta, seed=args.seed or 0)
        _write(res.to_csv(), args.out)
        log.info("max |g - r| = %.4g", res.max_deviation)
        return
    from .pipeline import load_data
    cfg = _config(args)
    data = load_data(cfg)
    x, y = data.eval_split()
    x = x[:args.samples or cfg.eval.analysis_samples]
    y = y[:len(x)]
    if exp == "rpe":
        snn = _load(_need(args.model, "--model"), SpikingNetwork)
        rows = ["layer\tfraction\tfraction_mismatch\tmean_deviation\tmax_deviation\ttrials"]
        for r in an.rpe_incidence(snn, x):
            rows.append(f"{r.layer}\t{r.fraction:.6g}\t{r.fraction_mismatch:.6g}\t{r.mean_deviation:.6g}\t"
                        f"{r.max_deviation:.6g}\t{r.n_trials}")
        _write("\n".join(rows) + "\n", args.out)
    elif exp == "cosine":
        qc = _load(_need(args.qcann, "--qcann"), Network)
        rows = ["T,layer,similarity"]
        for T in args.T_list or [2, 4, 8, 16, 32]:
            qt = set_time_steps(qc.copy(), T)
            snn = convert_to_snn(qt, cfg.convert.shift_mode, T)
            for k, s in enumerate(an.cosine_similarity_profile(qt, snn, x)):
                rows.append(f"{T},{k},{s:.6g}")
        _write("\n".join(rows) + "\n", args.out)
    elif exp == "energy":
        ann = _load(_need(args.ann, "--ann"), Network)
        snn = _load(_need(args.model, "--model"), SpikingNetwork)
        _write(an.energy_report(ann, snn, x, T=args.T).to_tsv(), args.out)
    elif exp == "decomposition":
        ann = _load(_need(args.ann, "--ann"), Network)
        qc = _load(_need(args.qcann, "--qcann"), Network)
        snn = _load(_need(args.model, "--model"), SpikingNetwork)
        _write(an.error_decomposition(ann, qc, snn, x, y if data.task == "recognition" else None).to_tsv(),
               args.out)
    elif exp == "scatter":
        snn = _load(_need(args.model, "--model"), SpikingNetwork)
        _write(an.pairs_to_csv(an.gr_scatter(snn, x, args.layer), ("g", "r")), args.out)


def _need(value, flag):
    if not value:
        raise ConfigError(flag, "required for this experiment")
    return value


def cmd_pipeline(args):
    from .pipeline import run_pipeline
    cfg = _config(args)
    if args.T_list:
        cfg.eval.T_list = list(args.T_list)
    res = run_pipeline(cfg, args.ablation, args.out_dir)
    sys.stdout.write(res.table())


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snncvt", description="Two-stage ANN to SNN conversion and calibration.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, T=True):
        sp.add_argument("--config", help="TOML pipeline config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the root seed")
        if T:
            sp.add_argument("--T", type=int, help="time steps")

    sp = sub.add_parser("train-ann", help="train the source ANN and fold BatchNorm")
    common(sp, T=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_ann)

    sp = sub.add_parser("finetune-qc", help="Stage-I: QC-ANN with quantization noise")
    common(sp)
    sp.add_argument("--model", required=True, help="source ANN (.snnc)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-finetune", action="store_true", help="copy weights only")
    sp.set_defaults(func=cmd_finetune_qc)

    sp = sub.add_parser("convert", help="copy a QC-ANN into an IF network")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--T", type=int)
    sp.add_argument("--shift-mode", choices=SHIFT_MODES, default="init-half-theta")
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("calibrate", help="Stage-II: coarse and fine layer-wise calibration")
    common(sp, T=False)
    sp.add_argument("--model", required=True, help="SNN (.snnc)")
    sp.add_argument("--qcann", required=True, help="QC-ANN providing the targets")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", help="TSV path for the per-layer report (stdout if omitted)")
    sp.add_argument("--no-cc", action="store_true")
    sp.add_argument("--no-fc", action="store_true")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("eval", help="score a saved model on the held-out split")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="diagnostic experiments")
    common(sp)
    sp.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    sp.add_argument("--model", help="SNN (.snnc)")
    sp.add_argument("--qcann", help="QC-ANN (.snnc)")
    sp.add_argument("--ann", help="source ANN (.snnc)")
    sp.add_argument("--out", help="output path (stdout if omitted)")
    sp.add_argument("--samples", type=int)
    sp.add_argument("--n-sequences", type=int, default=100)
    sp.add_argument("--theta", type=float, default=1.0)
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--T-list", type=int, nargs="+", dest="T_list")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("pipeline", help="all stages in order, optionally as an ablation")
    common(sp)
    sp.add_argument("--ablation", choices=list(ARMS) + ["all"])
    sp.add_argument("--out-dir")
    sp.add_argument("--T-list", type=int, nargs="+", dest="T_list")
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    from .data import DataFormatError
    from .modelfile import ModelFormatError

    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "T", None) is not None and args.T < 1:
        print("error: --T must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FloatingPointError, TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, ModelFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
