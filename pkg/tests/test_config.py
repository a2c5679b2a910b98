import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from avff.config import (
    ARCH_KEYS, ConfigError, ModelConfig, derive_geometry, load_config, parse_overrides, preset,
)


def test_default_geometry():
    g = derive_geometry(ModelConfig())
    assert (g.audio_tokens_total, g.audio_tokens_per_slice) == (384, 48)
    assert (g.visual_tokens_total, g.visual_tokens_per_slice) == (1568, 196)
    assert (g.patch_dim_audio, g.patch_dim_visual) == (256, 1536)


def test_desk_geometry():
    g = derive_geometry(preset("desk"))
    assert (g.audio_tokens_total, g.audio_tokens_per_slice) == (64, 8)
    assert (g.visual_tokens_total, g.visual_tokens_per_slice) == (512, 64)
    assert (g.patch_dim_audio, g.patch_dim_visual) == (64, 384)


def test_masked_slice_count():
    assert ModelConfig().masked_slices == 4


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.conf"
    path.write_text("# nothing here\n")
    cfg = load_config(path)
    assert cfg == ModelConfig()
    assert cfg.clip_seconds == 3.2 and cfg.mel_bins == 128 and cfg.num_slices == 8
    assert cfg.loss_weights == (0.01, 1.0, 0.1)


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("encoder_dim = 96  # comment\nloss_weights = 0.1, 1, 0.2\n")
    cfg = load_config(path, {"encoder_dim": "48", "augment_stage1": "false"})
    assert cfg.encoder_dim == 48 and cfg.loss_weights == (0.1, 1.0, 0.2) and not cfg.augment_stage1


def test_mask_ratio_overrides():
    assert load_config(None, {"mask_ratio": "0.75"}).masked_slices == 6
    with pytest.raises(ConfigError, match="not an integer"):
        load_config(None, {"mask_ratio": "0.3"})


@pytest.mark.parametrize("overrides, match", [
    ({"no_such_key": "1"}, "unknown config key"),
    ({"encoder_dim": "abc"}, "type mismatch"),
    ({"encoder_dim": "1.5"}, "type mismatch"),
    ({"audio_patch": "16"}, "type mismatch"),
    ({"temperature": "0"}, "temperature"),
    ({"loss_weights": "0, 1, 1"}, "loss_weights"),
    ({"wgan_clip": "-1"}, "wgan_clip"),
    ({"visual_size": "200"}, "visual_size"),
    ({"audio_frames": "760"}, "audio_frames"),
    ({"audio_frames": "512"}, "clip_seconds"),
])
def test_rejections(overrides, match):
    with pytest.raises(ConfigError, match=match):
        load_config(None, overrides)


def test_bad_line(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("encoder_dim 96\n")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(path)


def test_parse_overrides():
    assert parse_overrides(["a=1", " b = x=y "]) == {"a": "1", "b": "x=y"}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])


def test_text_round_trip(tmp_path):
    cfg = preset("tiny", seed=7)
    path = tmp_path / "t.conf"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg


def test_config_files_match_presets():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    assert load_config(root / "tiny.conf") == preset("tiny")
    assert load_config(root / "desk.conf") == preset("desk")


def test_fingerprint_covers_architecture_only():
    cfg = preset("tiny")
    assert cfg.fingerprint() == cfg.replace(stage2_lr=0.5, seed=3, stage2_epochs=1).fingerprint()
    assert cfg.fingerprint() != cfg.replace(encoder_dim=32).fingerprint()
    assert set(ARCH_KEYS) <= {f.name for f in dataclasses.fields(ModelConfig)}


def test_frozen():
    with pytest.raises(dataclasses.FrozenInstanceError):
        ModelConfig().encoder_dim = 3


@settings(max_examples=60, deadline=None)
@given(k=st.sampled_from([1, 2, 4, 8]), pt=st.sampled_from([2, 4, 8, 16]),
       pf=st.sampled_from([4, 8, 16]), ph=st.sampled_from([4, 8, 16]), depth=st.sampled_from([1, 2]))
def test_geometry_arithmetic(k, pt, pf, ph, depth):
    try:
        cfg = preset("desk", num_slices=k, audio_patch=(pt, pf), visual_patch=(depth, ph, ph),
                     mask_ratio=0.5 if k > 1 else 0.0)
    except ConfigError:
        return
    g = derive_geometry(cfg)
    assert g.audio_tokens_per_slice * k == g.audio_tokens_total
    assert g.visual_tokens_per_slice * k == g.visual_tokens_total
    assert g.patch_dim_audio == pt * pf
    assert g.patch_dim_visual == depth * ph * ph * cfg.channels
    assert derive_geometry(cfg) == g
