import struct

import numpy as np
import pytest

from surgfusion import tensor as T
from surgfusion.config import ModelConfig
from surgfusion.data import MODALITIES
from surgfusion.formats import (
    FormatError,
    diff_checkpoints,
    dump_config,
    load_checkpoint,
    load_config,
    load_dataset,
    profile,
    read_features,
    save_checkpoint,
    save_dataset,
    write_features,
)
from surgfusion.fusion import SurgFusionNet
from surgfusion.synthdata import SynthConfig, generate_dataset


def test_feature_file_layout(tmp_path):
    x = np.array([[1.0, -2.5, 0.125], [3.0, 4.0, 5.0]])
    p = tmp_path / "x.sfn"
    write_features(str(p), x)
    blob = p.read_bytes()
    assert blob[:4] == b"SFN1"
    assert struct.unpack("<II", blob[4:12]) == (2, 3)
    assert blob[12:] == struct.pack("<6f", 1.0, -2.5, 0.125, 3.0, 4.0, 5.0)
    np.testing.assert_array_equal(read_features(str(p)), x)


def test_feature_file_errors(tmp_path):
    p = tmp_path / "bad.sfn"
    p.write_bytes(b"XXXX" + struct.pack("<II", 1, 1) + b"\0" * 4)
    with pytest.raises(FormatError):
        read_features(str(p))
    p.write_bytes(b"SFN1" + struct.pack("<II", 2, 2) + b"\0" * 4)
    with pytest.raises(FormatError):
        read_features(str(p))


def test_dataset_round_trip(tmp_path):
    recs, _ = generate_dataset(SynthConfig(n_videos=5, d=8, T=6))
    index = save_dataset(recs, str(tmp_path))
    header = open(index).readline().strip()
    assert header == "video_id,user_id,supertrial_id,task,raw_label,rgb_path,flow_path,mask_path"
    back = load_dataset(index)
    for a, b in zip(recs, back):
        assert (a.video_id, a.user_id, a.supertrial_id, a.task, a.raw_label) == \
               (b.video_id, b.user_id, b.supertrial_id, b.task, b.raw_label)
        for m in MODALITIES:
            np.testing.assert_array_equal(a.features[m], b.features[m])


def test_missing_index():
    with pytest.raises(FileNotFoundError):
        load_dataset("/nonexistent/index.csv")


def test_checkpoint_round_trip(tmp_path):
    model = SurgFusionNet(ModelConfig(d=4, fusion_nets=2), seed=0)
    for p in model.parameters():
        p.data = np.random.default_rng(0).normal(size=p.shape).astype(np.float32).astype(np.float64)
    save_checkpoint(model, str(tmp_path / "a"))
    other = SurgFusionNet(ModelConfig(d=4, fusion_nets=2), seed=1)
    load_checkpoint(other, str(tmp_path / "a"))
    sa, sb = model.state_dict(), other.state_dict()
    assert sa.keys() == sb.keys()
    for k in sa:
        np.testing.assert_array_equal(sa[k], sb[k])
    save_checkpoint(other, str(tmp_path / "b"))
    assert diff_checkpoints(str(tmp_path / "a"), str(tmp_path / "b")) == []
    other.fusion.head.linear.bias.data += 1.0
    save_checkpoint(other, str(tmp_path / "c"))
    assert diff_checkpoints(str(tmp_path / "a"), str(tmp_path / "c")) == ["fusion.head.linear.bias"]


def test_config_round_trip(tmp_path):
    cfg = profile("desk")
    cfg.model.heads, cfg.train.phase2.epochs, cfg.train.grad_clip, cfg.synth.mode = 4, 7, 1.5, "joint"
    p = tmp_path / "c.ini"
    p.write_text(dump_config(cfg))
    assert load_config(str(p)) == cfg


def test_paper_profile():
    cfg = profile("paper")
    assert (cfg.model.d, cfg.model.fusion_nets, cfg.model.heads, cfg.train.loss_alpha) == (256, 10, 2, 0.5)
    assert cfg.train.phase1.epochs == cfg.train.phase2.epochs == 300
    assert (cfg.train.phase1.optimizer, cfg.train.phase1.lr_max, cfg.train.phase1.lr_min) == ("sgd", 1e-2, 5e-6)
    assert (cfg.train.phase2.optimizer, cfg.train.phase2.lr_max) == ("adamw", 1e-3)
    cfg.validate()


def test_config_errors(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[model]\nwidth = 3\n")
    with pytest.raises(T.ConfigError, match="width"):
        load_config(str(p))
    p.write_text("[model]\nheads = two\n")
    with pytest.raises(T.ConfigError, match="heads"):
        load_config(str(p))
    p.write_text("[optimizer]\nlr = 1\n")
    with pytest.raises(T.ConfigError, match="optimizer"):
        load_config(str(p))
