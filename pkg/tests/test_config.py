import dataclasses

import pytest

from mvpolicy.config import AblationConfig, OptimConfig, RunConfig


@pytest.mark.parametrize("preset", ["fast", "micro", "tiny"])
def test_presets_are_internally_consistent(preset):
    cfg = getattr(RunConfig, preset)()
    assert cfg.decoder.horizon % cfg.decoder.upsample_factor == 0
    assert cfg.decoder.exec_horizon <= cfg.decoder.horizon
    assert cfg.camera.width % max(cfg.camera.strides) == 0 or \
        cfg.camera.width // max(cfg.camera.strides) >= 1
    assert cfg.encoder.token_dim % cfg.decoder.heads == 0
    assert cfg.fusion.d_min < cfg.fusion.d_max
    assert cfg.world.episode_len >= cfg.decoder.horizon


def test_round_trip_through_json(tmp_path):
    cfg = RunConfig.fast()
    cfg.seed = 17
    path = tmp_path / "cfg.json"
    cfg.save(path)
    loaded = RunConfig.load(path)
    assert loaded == cfg
    assert loaded.config_hash == cfg.config_hash


def test_non_semantic_fields_do_not_move_hash():
    a, b = RunConfig(), RunConfig()
    b.seed = 999
    b.rig_path = "/elsewhere/rig.json"
    b.log_every = 7
    b.ckpt_every = 123
    assert a.config_hash == b.config_hash


def test_semantic_fields_move_hash():
    base = RunConfig()
    narrow = RunConfig()
    narrow.camera = dataclasses.replace(base.camera, width=64)
    assert narrow.config_hash != base.config_hash

    ablated = RunConfig()
    ablated.ablation = dataclasses.replace(base.ablation, disable_language=True)
    assert ablated.config_hash != base.config_hash

    fewer_views = RunConfig()
    fewer_views.ablation = dataclasses.replace(base.ablation, views=("head",))
    assert fewer_views.config_hash != base.config_hash


def test_run_hash_binds_rig_and_chain_digests():
    cfg = RunConfig()
    assert cfg.run_hash("rig_a", "chain_a") != cfg.run_hash("rig_b", "chain_a")
    assert cfg.run_hash("rig_a", "chain_a") != cfg.run_hash("rig_a", "chain_b")
    assert cfg.run_hash("rig_a", "chain_a") == cfg.run_hash("rig_a", "chain_a")


def test_base_len_property_and_validation():
    cfg = RunConfig()
    assert cfg.decoder.base_len == 8   # 64 / 8
    bad = dataclasses.replace(cfg.decoder, horizon=62)
    with pytest.raises(ValueError):
        _ = bad.base_len


def test_optimizer_defaults_match_training_recipe():
    opt = OptimConfig()
    assert opt.lr == pytest.approx(1.414e-4)
    assert opt.weight_decay == 5e-4
    assert opt.rgb_lr_scale == 0.1
    assert opt.warmup_steps == 500
    assert opt.decay_milestone == 0.9
    assert opt.batch_size == 8
    assert opt.max_step == 20000


def test_default_ablation_is_all_views_nothing_disabled():
    abl = AblationConfig()
    assert abl.views == ("front", "head", "left_wrist", "right_wrist")
    assert not (abl.disable_pair_fusion or abl.disable_aggregation
                or abl.disable_language or abl.disable_depth_loss)


def test_from_dict_rejects_unknown_keys():
    doc = RunConfig().to_dict()
    doc["typo_section"] = {}
    with pytest.raises((ValueError, TypeError)):
        RunConfig.from_dict(doc)
