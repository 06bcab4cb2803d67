import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from mvpolicy.config import RunConfig
from mvpolicy.kinematics import dual_arm_chain
from mvpolicy.model import build_model
from mvpolicy.synthworld import default_rig, gen_toy_trajectories

torch.set_num_threads(1)

settings.register_profile(
    "ci", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture(scope="session")
def tiny_cfg() -> RunConfig:
    return RunConfig.tiny()


@pytest.fixture(scope="session")
def chain():
    return dual_arm_chain()


@pytest.fixture(scope="session")
def tiny_rig(tiny_cfg):
    return default_rig(tiny_cfg.camera, tiny_cfg.world.narrow_fov)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg, chain, tiny_rig):
    """Session-shared deterministic model; tests must not mutate it."""
    model = build_model(tiny_cfg, chain, tiny_rig)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_episodes(tiny_cfg, chain, tiny_rig):
    sub = tiny_rig.subset(tiny_cfg.ablation.views)
    left = gen_toy_trajectories(chain, sub, tiny_cfg.world, "reach-left", 2, 0)
    right = gen_toy_trajectories(chain, sub, tiny_cfg.world, "reach-right", 2, 0)
    return left + right


def fresh_model(cfg=None):
    cfg = cfg or RunConfig.tiny()
    rig = default_rig(cfg.camera, cfg.world.narrow_fov)
    return build_model(cfg, dual_arm_chain(), rig)
