import numpy as np
import pytest

from vpl import datahub as D
from vpl import trainlab as L
from vpl.backbone import Backbone, BackboneConfig

TINY = BackboneConfig(
    image_size=8, patch_size=4, in_channels=1, dim=16, depth=2, heads=2, num_classes=3
)

# small hypers keep finite-difference sweeps fast on the tiny config
TINY_HYPER = {
    "adapter": {"bottleneck": 4},
    "moe-adapter": {"bottleneck": 4},
    "gmoe-adapter": {"bottleneck": 4},
    "vpt-shallow": {"prompt_len": 4},
    "vpt-deep": {"prompt_len": 2},
    "sidetune": {"side_width": 8},
    "mlp3": {"head_hidden": 8},
}

PRETRAIN_CFG = L.TrainConfig(steps=300, batch_size=16, learning_rate=3e-3, seed=0, eval_every=100)


def pretrain_domain(tag, seed):
    return D.SyntheticDomainSpec(
        domain_tag=tag,
        num_classes=3,
        image_size=8,
        class_mean_scale=3.0,
        noise_std=0.25,
        patient_count=12,
        per_patient_shift_std=0.05,
        seed=seed,
    )


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def tiny_backbone():
    return Backbone.init(TINY, seed=7)


@pytest.fixture(scope="session")
def experts():
    """One pretrained expert per domain; experts are frozen in every test."""
    general, _ = L.pretrain_expert(pretrain_domain("general", 5), TINY, PRETRAIN_CFG)
    medical, _ = L.pretrain_expert(
        pretrain_domain("medical", 6), TINY, L.TrainConfig(**{**PRETRAIN_CFG.to_dict(), "seed": 1})
    )
    return {"general": general, "medical": medical}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def build_tiny_model(method, experts_or_backbone, num_classes=3, seed=0):
    from vpl import adaptation as A

    hyper = TINY_HYPER.get(method)
    if method in A.DUAL_BACKBONE_METHODS:
        pair = [experts_or_backbone["general"], experts_or_backbone["medical"]]
        return A.build_plan(method, pair, num_classes=num_classes, hyper=hyper, seed=seed)
    bb = (
        experts_or_backbone["general"]
        if isinstance(experts_or_backbone, dict)
        else experts_or_backbone
    )
    return A.build_plan(method, bb, num_classes=num_classes, hyper=hyper, seed=seed)
