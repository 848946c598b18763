import csv
import dataclasses
import io
import math

import numpy as np
import pytest

from hfgd import checkpoint
from hfgd import config as cfgio
from hfgd import experiments as ex
from hfgd.data import SceneSpec, generate_arrays
from hfgd.model import HFGD, ModelConfig
from hfgd.train import TrainConfig

TINY = TrainConfig(batch_size=4, total_iters=2)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_arrays(8, 0, SceneSpec()), generate_arrays(4, 99, SceneSpec())


def test_ten_rows_with_unique_names():
    rows = ex.ablation_rows()
    names = [n for n, _ in rows]
    assert len(rows) == 10 and len(set(names)) == 10
    assert "usfpn_full_os2" in names and "sfpn_identity" in names


def test_row_flags():
    rows = dict(ex.ablation_rows())
    assert not rows["sfpn_identity"].hfg_guidance_enabled
    assert not rows["sfpn_identity"].cae_enabled
    assert rows["full_cae"].hfgm_aa_enabled and rows["full_cae"].lateral_stop_grad_enabled
    assert rows["usfpn_full_os2"].target_os == 2


def test_row_configs_round_trip():
    for _, cfg in ex.ablation_rows():
        m, _ = cfgio.build(cfgio.parse_lines(cfgio.dump(cfg)))
        assert m == cfg


def test_non_guidance_rows_drop_teacher_loss():
    rows = dict(ex.ablation_rows())
    assert ex.row_train_config(rows["aa_identity"], TrainConfig()).lambda_teacher == 0.0
    assert ex.row_train_config(rows["full_identity"], TrainConfig()).lambda_teacher == 1.0


def test_ablation_table_shape_and_meta(tiny_data):
    train, ev = tiny_data
    rep = ex.ablation_matrix(tcfg=TINY, seeds=(0, 1), train_data=train, eval_data=ev,
                             only=["sfpn_identity"])
    table = list(csv.reader(io.StringIO(rep.to_csv())))
    assert table[0] == ["row", "seed0", "seed1", "median"]
    assert len(table) == 11 and all(len(r) == 4 for r in table)
    done = next(r for r in table if r[0] == "sfpn_identity")
    assert 0.0 <= float(done[3]) <= 1.0
    assert rep.meta["reference_deltas"]["full_hfgm"] == 1.80
    assert rep.meta["reference_ablation"]["full"] == 48.94
    assert "[usfpn_full_os2]" in rep.configs_text()
    assert len(rep.runs_csv().splitlines()) == 3


def test_ablation_seed_fixes_result(tiny_data):
    train, ev = tiny_data
    kw = dict(tcfg=TINY, seeds=(3,), train_data=train, eval_data=ev, only=["aa_identity"])
    a = ex.ablation_matrix(**kw).results[("aa_identity", 3)]
    b = ex.ablation_matrix(**kw).results[("aa_identity", 3)]
    assert a.miou == b.miou and np.array_equal(a.per_class_iou, b.per_class_iou,
                                               equal_nan=True)


def test_probe_runs_structure():
    runs = ex.probe_runs(tcfg=TINY)
    assert [n for n, _, _ in runs] == ["fcn_only", "joint_aux", "stopgrad_aux"]
    (_, fcn, tf), (_, joint, tj), (_, stop, ts) = runs
    assert tf.lambda_student == 0.0 and tj.lambda_student == 1.0
    assert stop.teacher_input_stop_grad and not joint.teacher_input_stop_grad
    # joint and stop-gradient differ only in the barrier
    assert dataclasses.replace(stop, teacher_input_stop_grad=False) == joint
    assert tj == ts


def test_probe_report(tiny_data):
    train, ev = tiny_data
    rep = ex.aux_probe_experiment(tcfg=TINY, seeds=(0,), train_data=train, eval_data=ev)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["run", "seed", "aux_miou", "main_miou", "reference_aux_miou"]
    assert len(rows) == 4
    assert math.isnan(rep.main[("fcn_only", 0)])
    assert rep.ordering() in ("pass", "warn")
    assert rep.meta["reference"]["stopgrad_aux"] == 40.04


def test_probe_ordering_logic():
    rep = ex.ProbeReport(runs=[], seeds=[0])
    rep.aux = {("fcn_only", 0): 0.5, ("joint_aux", 0): 0.4, ("stopgrad_aux", 0): 0.3}
    assert rep.ordering() == "pass"
    rep.aux[("stopgrad_aux", 0)] = 0.45
    assert rep.ordering() == "warn"


def test_classification_set_has_foreground_labels():
    images, labels = ex.classification_set(16, 0, SceneSpec())
    assert images.shape == (16, 3, 64, 64) and labels.min() >= 1 and labels.max() <= 5


def test_pretrained_backbone_loads_cleanly(tmp_path):
    res = ex.pretrain_backbone(ModelConfig(), ex.PretrainConfig(n_samples=16, iters=2,
                                                                batch_size=4),
                               out_dir=tmp_path)
    model = HFGD(ModelConfig(), seed=5)
    assert ex.load_backbone(model, tmp_path) == ([], [])
    key = next(k for k, _ in model.named_parameters() if k.startswith("backbone."))
    src = dict(res.model.named_parameters())[key].data
    assert np.array_equal(dict(model.named_parameters())[key].data, src)
    assert ex.load_backbone(HFGD(ModelConfig(), seed=6), res.model) == ([], [])


def test_pretraining_beats_chance():
    res = ex.pretrain_backbone(ModelConfig(), ex.PretrainConfig(n_samples=256, iters=150))
    assert res.train_acc > 1 / 5
    assert res.losses[-1] < res.losses[0]


def test_backbone_mismatch_raises(tiny_data):
    train, ev = tiny_data
    other = ex.Classifier(ModelConfig(backbone_stage_channels=(8, 8, 8, 8)))
    with pytest.raises(checkpoint.CheckpointMismatch):
        ex.run_row("x", ModelConfig(), TINY, train, ev, 0, other)


def test_pretrain_comparison_csv(tiny_data):
    train, ev = tiny_data
    init = ex.Classifier(ModelConfig(), seed=1)
    out = ex.pretrain_vs_scratch(tcfg=TINY, seeds=(0,), train_data=train, eval_data=ev,
                                 backbone_init=init)
    rows = list(csv.reader(io.StringIO(out.to_csv())))
    assert rows[0] == ["init", "seed", "miou", "reference_miou"] and len(rows) == 3
    assert out.meta["reference"] == {"pretrained": 45.87, "scratch": 26.13}


def test_os_ablation_meta():
    rep = ex.os_ablation(tcfg=TINY, seeds=(0,), n_train=4, n_eval=2)
    assert [n for n, _ in rep.rows] == ["usfpn_full_os4", "usfpn_full_os2"]
    assert rep.meta["thin_line_classes"] == [4]


def test_pretrain_comparison_fcn_variant(tiny_data):
    train, ev = tiny_data
    cfg = ex.fcn_config()
    assert not cfg.cae_enabled and cfg.upsampler == "sfpn"
    out = ex.pretrain_vs_scratch(cfg, TINY, seeds=(1,), train_data=train, eval_data=ev,
                                 backbone_init=ex.Classifier(cfg), head="teacher")
    assert 0.0 <= out.pretrained[1] <= 1.0 and 0.0 <= out.scratch[1] <= 1.0
