import dataclasses

import numpy as np
import pytest

from hfgd import checkpoint
from hfgd import config as cfgio
from hfgd.model import HFGD, ConfigError, ModelConfig
from hfgd.tensor import Tensor, no_grad
from hfgd.train import TrainConfig


def test_defaults_round_trip():
    text = cfgio.dump(ModelConfig(), TrainConfig())
    m, t = cfgio.build(cfgio.parse_lines(text))
    assert m == ModelConfig() and t == TrainConfig()


def test_custom_round_trip(tmp_path):
    m0 = ModelConfig(upsampler="usfpn", target_os=2, width_mult=1 / 32,
                     backbone_stage_channels=(8, 8, 16, 16))
    t0 = TrainConfig(lr0=0.02, flip_augment=False, teacher_supervision="nearest")
    (tmp_path / "c.txt").write_text(cfgio.dump(m0, t0))
    assert cfgio.load(tmp_path / "c.txt") == (m0, t0)


def test_fraction_values():
    m, _ = cfgio.build({"width_mult": "1/16"})
    assert m.width_mult == 1 / 16


@pytest.mark.parametrize("text,value", [("true", True), ("off", False), ("1", True)])
def test_bool_values(text, value):
    m, _ = cfgio.build({"cae_enabled": text})
    assert m.cae_enabled is value


def test_unknown_key():
    with pytest.raises(cfgio.UnknownKeyError) as exc:
        cfgio.build({"learning_rate": "0.1"})
    assert "lr0" in str(exc.value)


def test_bad_value():
    with pytest.raises(ConfigError):
        cfgio.build({"total_iters": "many"})


def test_invalid_combination_is_config_error():
    with pytest.raises(ConfigError):
        cfgio.build({"upsampler": "sfpn", "target_os": "2"})
    with pytest.raises(ConfigError):
        cfgio.build({"batch_size": "1"})


def test_comments_and_blank_lines():
    assert cfgio.parse_lines("# hi\n\nlr0 = 0.5  # note\n") == {"lr0": "0.5"}
    with pytest.raises(ConfigError):
        cfgio.parse_lines("just words")


def test_valid_keys_cover_both_structs():
    keys = cfgio.valid_keys()
    for f in dataclasses.fields(ModelConfig) + dataclasses.fields(TrainConfig):
        assert f.name in keys


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = HFGD(ModelConfig(), seed=4)
    model.train()
    with no_grad():
        model(Tensor(np.random.default_rng(0).random((4, 3, 64, 64))))
    checkpoint.save(model, tmp_path, TrainConfig())
    back = checkpoint.load(tmp_path)
    x = Tensor(np.random.default_rng(1).random((2, 3, 64, 64)))
    model.eval()
    back.eval()
    with no_grad():
        assert np.array_equal(model(x).student_logits.data, back(x).student_logits.data)


def test_checkpoint_files(tmp_path):
    checkpoint.save(HFGD(ModelConfig(), seed=0), tmp_path)
    assert {p.name for p in tmp_path.iterdir()} == {"params.hfgt", "manifest.txt", "config.txt"}
    row = (tmp_path / "manifest.txt").read_text().splitlines()[0].split("\t")
    assert len(row) == 4 and row[1] in ("param", "buffer")


def test_checkpoint_mismatch_names_parameter(tmp_path):
    checkpoint.save(HFGD(ModelConfig(), seed=0), tmp_path)
    other = HFGD(ModelConfig(num_classes=5), seed=0)
    with pytest.raises(checkpoint.CheckpointMismatch, match="tokens"):
        checkpoint.load_state(other, checkpoint.read(tmp_path))


def test_checkpoint_missing_entry_named(tmp_path):
    checkpoint.save(HFGD(ModelConfig(hfgm_aa_enabled=False), seed=0), tmp_path)
    with pytest.raises(checkpoint.CheckpointMismatch, match="hfgm_aa"):
        checkpoint.load_state(HFGD(ModelConfig(), seed=0), checkpoint.read(tmp_path))


def test_backbone_prefix_load(tmp_path):
    src = HFGD(ModelConfig(), seed=1)
    checkpoint.save(src, tmp_path)
    dst = HFGD(ModelConfig(cae_enabled=False, upsampler="sfpn"), seed=2)
    missing, extra = checkpoint.load_state(dst, checkpoint.read(tmp_path), prefix="backbone.")
    assert missing == [] and extra == []
    name = "backbone.stem.conv.weight"
    params = dict(dst.named_parameters())
    key = name if name in params else next(k for k in params if k.startswith("backbone."))
    assert np.array_equal(params[key].data, dict(src.named_parameters())[key].data)
