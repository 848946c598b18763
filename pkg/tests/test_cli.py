import csv
import subprocess
import sys

import numpy as np
import pytest

from hfgd import cli, hfgt
from hfgd import config as cfgio

FAST = ["--set", "total_iters=2", "batch_size=4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--out", d, "--n", 4, "--seed", 1, "--overwrite") == 0
    return d


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--data", dataset, "--eval-data", dataset, "--out", out,
               "--overwrite", *FAST) == 0
    return out


def test_gen_data_files(tmp_path):
    assert run("gen-data", "--out", tmp_path / "d", "--n", 8, "--seed", 0) == 0
    assert len(list((tmp_path / "d").glob("*.hfgt"))) == 16
    assert (tmp_path / "d" / "manifest.txt").exists()


def test_gen_data_refuses_overwrite(tmp_path, capsys):
    (tmp_path / "keep.txt").write_text("x")
    assert run("gen-data", "--out", tmp_path, "--n", 1, "--seed", 0) == 2
    assert (tmp_path / "keep.txt").exists()
    assert "--overwrite" in capsys.readouterr().err


def test_gen_data_bad_n(tmp_path):
    assert run("gen-data", "--out", tmp_path / "d", "--n", 0, "--seed", 0) == 2


def test_missing_required_flag():
    assert run("gen-data", "--n", 3) == 2


def test_unknown_command():
    assert run("fly") == 2


def test_help_lists_every_key(capsys):
    assert run("--help") == 0
    text = capsys.readouterr().out
    for key in cfgio.valid_keys():
        assert f"  {key} = " in text


def test_train_help_lists_keys(capsys):
    assert run("train", "--help") == 0
    assert "lambda_car = 0.1" in capsys.readouterr().out


def test_unknown_config_key(tmp_path, dataset, capsys):
    code = run("train", "--data", dataset, "--out", tmp_path / "r", "--set", "lr=0.1")
    assert code == 2 and "lr0" in capsys.readouterr().err


def test_invalid_combination(tmp_path, dataset):
    assert run("train", "--data", dataset, "--out", tmp_path / "r",
               "--set", "upsampler=sfpn", "target_os=2") == 2


def test_missing_dataset_is_runtime_failure(tmp_path):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "r", *FAST) == 1


def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"checkpoint", "train_log.csv", "metrics.csv", "run_manifest.txt"} <= names
    log = list(csv.reader((trained / "train_log.csv").open()))
    assert log[0][:3] == ["step", "lr", "total"] and len(log) == 3
    metrics = list(csv.reader((trained / "metrics.csv").open()))
    assert metrics[0][:4] == ["row", "seed", "miou", "pixel_acc"]
    assert len(metrics[0]) == 4 + 6


def test_manifest_records_config(trained):
    text = (trained / "run_manifest.txt").read_text()
    assert "# command: train" in text and "# finished:" in text
    assert "total_iters=2" in text


def test_eval(trained, dataset, capsys):
    assert run("eval", "--checkpoint", trained / "checkpoint", "--data", dataset) == 0
    assert capsys.readouterr().out.startswith("miou ")


def test_eval_bad_checkpoint(tmp_path, dataset):
    assert run("eval", "--checkpoint", tmp_path, "--data", dataset) == 1


def test_predict(trained, dataset, tmp_path):
    out = tmp_path / "pred"
    assert run("predict", "--checkpoint", trained / "checkpoint", "--input", dataset,
               "--out", out, "--tokens-csv") == 0
    pred = hfgt.load(out / "00000_pred.hfgt")
    assert pred.shape == (64, 64) and pred.dtype == np.uint16 and pred.max() < 6
    ppm = (out / "00000_pred.ppm").read_bytes()
    assert ppm.startswith(b"P6 64 64 255\n") and len(ppm) == len(b"P6 64 64 255\n") + 64 * 64 * 3
    sim = list(csv.reader((out / "token_similarity.csv").open()))
    assert len(sim) == 7 and sim[1][1] == "1.000000"
    assert len(list(out.glob("*_pred.hfgt"))) == 4


def test_predict_single_image(trained, dataset, tmp_path):
    out = tmp_path / "one"
    assert run("predict", "--checkpoint", trained / "checkpoint",
               "--input", dataset / "00002_image.hfgt", "--out", out) == 0
    assert [p.name for p in sorted(out.glob("*.hfgt"))] == ["00000_pred.hfgt"]


def test_predict_rejects_label_file(trained, dataset, tmp_path):
    assert run("predict", "--checkpoint", trained / "checkpoint",
               "--input", dataset / "00000_labels.hfgt", "--out", tmp_path / "x") == 1


def test_palette():
    pal = cli.palette(6)
    assert pal.shape == (6, 3) and pal.dtype == np.uint8
    assert pal[0].tolist() == [128, 128, 128]
    assert len({tuple(c) for c in pal.tolist()}) == 6


def test_ppm_render():
    colors = np.array([[0, 0, 0], [255, 0, 0]], dtype=np.uint8)
    blob = cli.ppm_bytes(np.array([[0, 1]]), colors)
    assert blob == b"P6 2 1 255\n" + bytes([0, 0, 0, 255, 0, 0])


def test_audit_default_passes(capsys):
    assert run("audit", "--batches", 1) == 0
    assert "zero-by-topology" in capsys.readouterr().out


def test_audit_without_barriers_fails():
    assert run("audit", "--batches", 1, "--set", "lateral_stop_grad_enabled=false") == 1


def test_audit_expected_negative(capsys, tmp_path):
    assert run("audit", "--batches", 1, "--expect-negative", "--out", tmp_path / "a",
               "--set", "lateral_stop_grad_enabled=false") == 0
    out = capsys.readouterr().out
    assert "CHANGED" in out and "expected-negative mode" in out
    assert (tmp_path / "a" / "audit.txt").exists()


def test_gradcheck_ops(capsys):
    assert run("gradcheck", "--ops-only") == 0
    assert "max rel err" in capsys.readouterr().out


def test_ablate_unknown_row(tmp_path):
    assert run("ablate", "--out", tmp_path / "a", "--rows", "nope", *FAST) == 2


def test_ablate_bad_seeds(tmp_path):
    assert run("ablate", "--out", tmp_path / "a", "--seeds", "x,y", *FAST) == 2


def test_ablate_subset(tmp_path, dataset):
    out = tmp_path / "a"
    assert run("ablate", "--out", out, "--rows", "sfpn_identity", "--seeds", "0",
               "--data", dataset, "--eval-data", dataset, *FAST) == 0
    table = list(csv.reader((out / "ablation.csv").open()))
    assert table[0] == ["row", "seed0", "median"] and len(table) == 11


def test_training_is_deterministic_and_replayable(tmp_path, dataset, trained):
    again = tmp_path / "again"
    assert run("train", "--data", dataset, "--eval-data", dataset, "--out", again,
               *FAST) == 0
    for rel in ("checkpoint/params.hfgt", "train_log.csv", "metrics.csv"):
        assert (again / rel).read_bytes() == (trained / rel).read_bytes()
    replay = tmp_path / "replay"
    assert run("train", "--data", dataset, "--eval-data", dataset, "--out", replay,
               "--config", trained / "run_manifest.txt") == 0
    assert ((replay / "checkpoint/params.hfgt").read_bytes()
            == (trained / "checkpoint/params.hfgt").read_bytes())


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hfgd", "gen-data"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "error" in proc.stderr
