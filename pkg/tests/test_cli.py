import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ctx3d.cli import dispatch, resolve_values, UsageError
from ctx3d.ct import Annotation, Volume, read_volume, write_annotations, write_volume
from ctx3d.detection import Detection
from ctx3d.detection.io import read_detections, write_detections

SYNTH = ["--set", "synth.shape=[16,48,48]", "--set", "synth.n_lesions=1", "--set", "synth.n_confusers=1",
         "--set", "synth.radius_mm=[4.0,6.0]"]
MODEL = ["--set", "model.fc7_width=16", "--set", "model.anchor_scales=[8,16,32]",
         "--set", "model.anchor_ratios=[1.0]", "--set", "model.roi_batch_size=16",
         "--set", "model.rpn_batch_size=32"]


def run(*argv):
    return dispatch([str(a) for a in argv])


def manifest(out):
    with open(os.path.join(out, "manifest.json")) as fh:
        return json.load(fh)


def files_in(path):
    return sorted(os.path.relpath(os.path.join(r, f), path) for r, _, fs in os.walk(path) for f in fs)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("synth", "--n-volumes", 5, "--out", out, "--seed", 2, *SYNTH) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--data", dataset, "--epochs", 1, "--out", out, "--seed", 1, *MODEL) == 0
    return out


# ---------------------------------------------------------------------------
# synth / train / infer
# ---------------------------------------------------------------------------

def test_synth_layout(dataset):
    names = files_in(dataset)
    assert {"annotations.csv", "train.csv", "val.csv", "test.csv", "manifest.json"} <= set(names)
    assert sum(n.endswith(".ctvol") for n in names) == 5
    m = manifest(dataset)
    assert m["command"] == "synth" and m["seed"] == 2
    assert m["config"]["synth.shape"] == [16, 48, 48]
    assert not any(".staging-" in n for n in names)


def test_synth_rerun_is_hash_identical(dataset, tmp_path):
    assert run("synth", "--n-volumes", 5, "--out", tmp_path, "--seed", 2, *SYNTH) == 0
    assert manifest(tmp_path)["outputs"] == manifest(dataset)["outputs"]


def test_manifest_hashes_match_files(trained):
    from ctx3d.cli import sha256_file

    m = manifest(trained)
    assert set(m["outputs"]) == {"loss_trace.csv", "model.ckpt", "config.toml", "epoch1.ckpt"}
    for rel, digest in m["outputs"].items():
        assert sha256_file(os.path.join(trained, rel)) == digest
    assert m["wall_clock_s"] >= 0 and m["version"]


def test_train_rerun_is_hash_identical(dataset, trained, tmp_path):
    assert run("train", "--data", dataset, "--epochs", 1, "--out", tmp_path, "--seed", 1, *MODEL) == 0
    assert manifest(tmp_path)["outputs"] == manifest(trained)["outputs"]


def test_train_override_recorded(dataset, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("model.M = 5\nmodel.fc7_width = 16\nmodel.base_lr = 0.002\n")
    out = tmp_path / "out"
    assert run("train", "--config", cfg, "--set", "model.M=3", "--seed", 7, "--data", dataset,
               "--epochs", 1, "--out", out, *MODEL[2:]) == 0
    m = manifest(out)
    assert m["config"]["model.M"] == 3          # --set beats file
    assert m["config"]["model.base_lr"] == 0.002  # file beats default
    assert m["config"]["model.momentum"] == 0.9   # default
    assert m["seed"] == 7
    assert "model.M = 3" in (out / "config.toml").read_text()


def test_resolve_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("# comment\nmodel.M = 5\nsynth.n_lesions = 4\n")
    assert resolve_values(None, []) == {}
    assert resolve_values(str(cfg), []) == {"model.M": 5, "synth.n_lesions": 4}
    assert resolve_values(str(cfg), ["model.M=9"]) == {"model.M": 9, "synth.n_lesions": 4}
    with pytest.raises(UsageError):
        resolve_values(None, ["train.M=3"])
    with pytest.raises(UsageError):
        resolve_values(None, ["model.M"])


def test_infer_slices_all_row_count(dataset, trained, tmp_path):
    vol_path = sorted((dataset / "volumes").iterdir())[0]
    nz = read_volume(vol_path).shape[0]
    out = tmp_path / "inf"
    assert run("infer", "--checkpoint", trained / "model.ckpt", "--volume", vol_path, "--slices", "all",
               "--set", "model.max_detections=3", "--out", out) == 0
    dets = read_detections(out / "detections.csv")
    per_slice = {}
    for d in dets:
        per_slice[d.image_id[1]] = per_slice.get(d.image_id[1], 0) + 1
    assert sorted(per_slice) == list(range(nz))
    assert set(per_slice.values()) == {3}
    assert len(dets) == nz * 3


def test_infer_cache_flag_same_output(dataset, trained, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("infer", "--checkpoint", trained / "model.ckpt", "--data", dataset, "--out", a) == 0
    assert run("infer", "--checkpoint", trained / "model.ckpt", "--data", dataset, "--no-cache", "--out", b) == 0
    assert (a / "detections.csv").read_bytes() == (b / "detections.csv").read_bytes()
    assert manifest(a)["inputs"]["config"]["path"].endswith("config.toml")


def test_infer_selected_slices(dataset, trained, tmp_path):
    vol_path = sorted((dataset / "volumes").iterdir())[0]
    assert run("infer", "--checkpoint", trained / "model.ckpt", "--volume", vol_path, "--slices", "2,5",
               "--out", tmp_path) == 0
    assert {d.image_id[1] for d in read_detections(tmp_path / "detections.csv")} <= {2, 5}


# ---------------------------------------------------------------------------
# preprocess / eval
# ---------------------------------------------------------------------------

def test_preprocess(tmp_path):
    vox = np.full((9, 40, 40), -1024, np.int16)
    vox[:, 5:35, 5:35] = 40
    src = tmp_path / "scan.ctvol"
    write_volume(src, Volume(vox, (1.0, 0.8, 0.8), "scan"))
    ann = tmp_path / "ann.csv"
    write_annotations(ann, [Annotation("scan", 4, (10.0, 10.0, 20.0, 20.0), 1, 8.0, 1.0)])
    out = tmp_path / "out"
    assert run("preprocess", "--volume", src, "--annotations", ann, "--out", out) == 0
    vol = read_volume(out / "scan.ctvol")
    assert vol.shape == (5, 30, 30)
    moved = (out / "annotations.csv").read_text().splitlines()[1].split(",")
    assert moved[:6] == ["scan", "2", "5.0", "5.0", "15.0", "15.0"]
    assert manifest(out)["config"]["transform"]["x_offset"] == 5


@pytest.fixture
def eval_files(tmp_path):
    dets = [
        Detection(("A", 0), (0, 0, 10, 10), 0.9),
        Detection(("B", 0), (40, 40, 50, 50), 0.8),
        Detection(("B", 0), (0, 0, 10, 10), 0.7),
        Detection(("A", 0), (0, 0, 10, 10), 0.6),
        Detection(("A", 0), (20, 20, 30, 30), 0.5),
        Detection(("B", 0), (60, 60, 70, 70), 0.4),
    ]
    gts = [Annotation("A", 0, (0.0, 0.0, 10.0, 10.0), 1, 12.0, 1.0),
           Annotation("A", 0, (20.0, 20.0, 30.0, 30.0), 1, 12.0, 1.0),
           Annotation("B", 0, (0.0, 0.0, 10.0, 10.0), 2, 40.0, 5.0)]
    write_detections(tmp_path / "d.csv", dets)
    write_annotations(tmp_path / "g.csv", gts)
    return tmp_path / "d.csv", tmp_path / "g.csv"


def test_eval_happy_path(eval_files, tmp_path, capsys):
    d, g = eval_files
    out = tmp_path / "ev"
    assert run("eval", "--dets", d, "--gt", g, "--criterion", "iou", "--threshold", 0.5, "--out", out) == 0
    printed = capsys.readouterr().out
    assert "0.5" in printed and "16" in printed
    with open(out / "froc.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    with open(out / "sensitivity.csv", newline="") as fh:
        sens = list(csv.reader(fh))
    assert sens[0][1:] == ["0.5", "1", "2", "4", "8", "16"]
    assert [float(v) for v in sens[1][1:]] == pytest.approx([66.67, 100, 100, 100, 100, 100])  # percent
    assert set(files_in(out)) == {"froc.csv", "sensitivity.csv", "stratified.csv", "report.txt", "manifest.json"}


# ---------------------------------------------------------------------------
# exit codes and atomicity
# ---------------------------------------------------------------------------

def test_unknown_flag_is_usage_error(eval_files, tmp_path, capsys):
    d, g = eval_files
    assert run("eval", "--dets", d, "--gt", g, "--bogus", 1, "--out", tmp_path / "x") == 1
    assert "--bogus" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


@pytest.mark.parametrize("argv", [[], ["fly"], ["train", "--data", "d"], ["synth", "--out", "o", "--set", "nope=1"]])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(*argv) == 1


def test_missing_input_is_data_error(tmp_path, capsys):
    assert run("eval", "--dets", tmp_path / "none.csv", "--gt", tmp_path / "g.csv", "--out", tmp_path / "o") == 2
    assert "data error" in capsys.readouterr().err


def test_corrupt_checkpoint_is_data_error(dataset, trained, tmp_path):
    bad = tmp_path / "model.ckpt"
    bad.write_bytes((trained / "model.ckpt").read_bytes()[:-7])
    (tmp_path / "config.toml").write_bytes((trained / "config.toml").read_bytes())
    out = tmp_path / "out"
    assert run("infer", "--checkpoint", bad, "--data", dataset, "--out", out) == 2
    assert files_in(out) == []


@pytest.mark.filterwarnings("ignore:overflow")
def test_numeric_failure_leaves_no_outputs(dataset, tmp_path):
    out = tmp_path / "out"
    code = run("train", "--data", dataset, "--epochs", 1, "--out", out, "--set", "model.pixel_std=1e-320", *MODEL)
    assert code == 3
    assert files_in(out) == []


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ctx3d", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("ctx3d ")
