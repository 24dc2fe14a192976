"""Drive every subcommand on a tiny cohort."""
import csv

import numpy as np
import pytest

from stcnn.cli import main, parse_synth_spec
from stcnn.dictionary import load_match
from stcnn.volume import read_map, read_series, read_volume4d

TRAIN_CONFIG = """\
stage1_steps = 4
stage2_steps = 4
stage3_steps = 4
levels = 2
base_channels = 4
checkpoint_every = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cohort.txt").write_text("subjects = 3\nseed = 1\ndims = 32 8 8 8\nsigma = 0.5\n")
    (root / "train.txt").write_text(TRAIN_CONFIG)
    assert main(["synth", "--spec", str(root / "cohort.txt"), "--out", str(root / "data")]) == 0
    assert main(["dictlearn", "--data", str(root / "data"), "--template",
                 str(root / "data" / "template.vol4"), "--k", "4", "--iters", "3",
                 "--out", str(root / "labels")]) == 0
    return root


def test_synth_layout(workspace):
    data = workspace / "data"
    vols = sorted(p.name for p in data.glob("sub-*.vol4") if ".mask." not in p.name)
    assert vols == ["sub-000.vol4", "sub-001.vol4", "sub-002.vol4"]
    vol = read_volume4d(data / "sub-000.vol4")
    assert vol.data.shape == (32, 8, 8, 8) and vol.mask is not None
    assert read_map(data / "truth" / "sub-000" / "net0.map.vol4").shape == (8, 8, 8)
    assert read_series(data / "truth" / "sub-000" / "net0.series.csv").shape == (32,)


def test_explicit_synth_spec():
    specs = parse_synth_spec("dims = 16 6 6 6\nsigma = 0\nnetwork.0.blobs = 2 2 2 1.5; 4 4 4 1\n"
                             "network.0.onsets = 1 9\nnetwork.0.durations = 4 4\n")
    assert len(specs) == 1 and len(specs[0].networks[0].blobs) == 2


def test_dictlearn_outputs(workspace):
    labels = workspace / "labels" / "sub-000"
    rows = (labels / "atoms.csv").read_text().strip().splitlines()
    assert len(rows) == 4 and len(rows[0].split(",")) == 32
    assert (labels / "coef_03.vol4").exists()
    assert 0 <= load_match(labels).best_index < 4


def test_train_infer_eval(workspace, capsys):
    root = workspace
    assert main(["train", "--data", str(root / "data"), "--labels", str(root / "labels"),
                 "--config", str(root / "train.txt"), "--out", str(root / "run")]) == 0
    assert (root / "run" / "model" / "unet.ckpt").exists()
    assert (root / "run" / "checkpoints" / "joint_finetune.cae.ckpt").exists()
    trace = (root / "run" / "trace.csv").read_text().splitlines()
    assert trace[0] == "# w_spatial = 10.0" and len(trace) == 3 + 12
    assert main(["infer", "--ckpt", str(root / "run" / "model"), "--data", str(root / "data"),
                 "--out", str(root / "pred")]) == 0
    assert read_series(root / "pred" / "sub-001" / "series.csv").shape == (32,)
    report = root / "eval" / "report.csv"
    assert main(["eval", "--pred", str(root / "pred"), "--truth", str(root / "data" / "truth"),
                 "--template", str(root / "data" / "template.vol4"),
                 "--baseline", str(root / "labels"), "--data", str(root / "data"),
                 "--k", "4", "--out", str(report)]) == 0
    rows = list(csv.reader(report.open()))
    assert rows[0][0] == "subject" and rows[-1][0] == "mean" and len(rows) == 5
    assert all(np.isfinite(float(v)) for v in rows[1][1:])
    assert (root / "eval" / "plots" / "sub-000.map.pgm").exists()


def test_train_single_stage_resumes(workspace):
    root = workspace
    args = ["train", "--data", str(root / "data"), "--labels", str(root / "labels"),
            "--config", str(root / "train.txt"), "--out", str(root / "staged")]
    assert main(args + ["--stage", "1"]) == 0
    assert main(args + ["--stage", "2"]) == 0
    assert main(args + ["--stage", "3"]) == 0
    stages = [l.split(",")[0] for l in (root / "staged" / "trace.csv").read_text().splitlines()[3:]]
    assert stages == ["spatial_only"] * 4 + ["temporal_only"] * 4 + ["joint_finetune"] * 4


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert "23/23 checks passed" in out
