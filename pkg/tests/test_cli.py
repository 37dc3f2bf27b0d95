import numpy as np
import pytest

from snncvt.cli import main
from snncvt.modelfile import load_model, save_model


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, digits_idx):
    d = tmp_path_factory.mktemp("cli")
    images, labels = digits_idx
    (d / "c.toml").write_text(f"""
seed = 1

[data]
source = "idx"
images = "{images}"
labels = "{labels}"
normalization = "scale255"
limit = 600

[model]
arch = "mlp:32"

[train]
epochs = 4

[stage1]
T = 4
epochs = 1

[stage2]
epochs = 1
""")
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_stage_by_stage(workdir, capsys):
    c, w = workdir / "c.toml", workdir
    assert run(capsys, "train-ann", "--config", c, "--out", w / "ann.snnc")[0] == 0
    assert run(capsys, "finetune-qc", "--config", c, "--model", w / "ann.snnc", "--out", w / "qc.snnc")[0] == 0
    code, out, _ = run(capsys, "convert", "--model", w / "qc.snnc", "--out", w / "snn.snnc")
    assert code == 0 and "T=4" in out
    code, out, _ = run(capsys, "calibrate", "--config", c, "--model", w / "snn.snnc", "--qcann", w / "qc.snnc",
                       "--out", w / "cal.snnc", "--report", w / "cal.tsv")
    assert code == 0 and (w / "cal.tsv").read_text().startswith("layer\t")
    first = run(capsys, "eval", "--config", c, "--model", w / "cal.snnc", "--T", 4)
    second = run(capsys, "eval", "--config", c, "--model", w / "cal.snnc", "--T", 4)
    assert first[0] == 0 and first[1] == second[1] and first[1].startswith("accuracy\t")


@pytest.mark.parametrize("exp, extra", [
    ("rpe", ["--model", "snn.snnc"]),
    ("cosine", ["--qcann", "qc.snnc", "--T-list", "2", "8"]),
    ("energy", ["--model", "snn.snnc", "--ann", "ann.snnc"]),
    ("decomposition", ["--model", "snn.snnc", "--ann", "ann.snnc", "--qcann", "qc.snnc"]),
    ("scatter", ["--model", "snn.snnc", "--layer", "0"]),
])
def test_analyze(workdir, capsys, exp, extra):
    if not (workdir / "snn.snnc").exists():
        pytest.skip("needs test_stage_by_stage artifacts")
    extra = [str(workdir / e) if e.endswith(".snnc") else e for e in extra]
    code, out, err = run(capsys, "analyze", "--experiment", exp, "--config", workdir / "c.toml",
                         "--samples", 100, *extra)
    assert code == 0, err
    assert len(out.splitlines()) >= 2


def test_fig5a_csv(tmp_path, capsys):
    code, out, _ = run(capsys, "analyze", "--experiment", "fig5a", "--n-sequences", 20)
    assert code == 0
    rows = out.splitlines()
    assert rows[0] == "g,r" and len(rows) == 21
    assert run(capsys, "analyze", "--experiment", "fig5a", "--out", tmp_path / "f.csv")[0] == 0
    assert (tmp_path / "f.csv").read_text().startswith("g,r")


def test_pipeline_stage1_only(workdir, capsys, tmp_path):
    code, out, _ = run(capsys, "pipeline", "--config", workdir / "c.toml", "--ablation", "stage1-only",
                       "--T-list", 2, 4, "--out-dir", tmp_path)
    assert code == 0
    rows = out.splitlines()
    assert rows[0].startswith("arm\tT") and [r.split("\t")[:2] for r in rows[1:]] == [["stage1-only", "2"],
                                                                                   ["stage1-only", "4"]]
    assert (tmp_path / "accuracy_vs_T.tsv").read_text() == out
    assert not (tmp_path / "calibration.tsv").exists()


def test_exit_codes(tmp_path, capsys):
    (tmp_path / "bad.toml").write_text("[stage1]\nT = 0\n")
    code, _, err = run(capsys, "pipeline", "--config", tmp_path / "bad.toml")
    assert code == 2 and "stage1.T" in err
    assert run(capsys, "eval", "--model", tmp_path / "none.snnc")[0] == 3
    assert run(capsys, "pipeline", "--config", tmp_path / "none.toml")[0] == 3
    (tmp_path / "junk.snnc").write_bytes(b"nope")
    assert run(capsys, "convert", "--model", tmp_path / "junk.snnc", "--out", tmp_path / "x.snnc")[0] == 1
    assert run(capsys, "eval", "--T", 0, "--model", "x")[0] == 2


def test_numeric_failure_exit_code(tmp_path, capsys):
    from snncvt.nn import build_network
    from snncvt.rng import substream
    net = build_network("mlp:4", (2,), 3, substream(0, "init"), batchnorm=False)
    net.layers[0].weight.data[:] = 3e38
    save_model(tmp_path / "huge.snnc", net)
    (tmp_path / "c.toml").write_text("[data]\nn_samples = 50\nnoise = 100.0\n")
    with np.errstate(over="ignore", invalid="ignore"):
        code, _, err = run(capsys, "eval", "--config", tmp_path / "c.toml", "--model", tmp_path / "huge.snnc")
    assert code == 4, err
    assert isinstance(load_model(tmp_path / "huge.snnc"), type(net))
