import numpy as np
import pytest

from mfm import set_precision
from mfm.encoder import (
    EncoderConfig,
    PretrainBudget,
    PretrainObjective,
    init_encoder,
    pretrain,
)
from mfm.probe import DatasetSpec, ProbeBudget, gen_dataset, layer_sweep
from mfm.seeding import split_seed
from mfm.tensor import precision


@pytest.fixture(autouse=True)
def float64_mode():
    # gradient checks require the 64-bit mode; individual tests switch as needed
    set_precision(64)
    yield
    set_precision(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_dataset():
    return gen_dataset(seed=0, n=320, spec=DatasetSpec())


@pytest.fixture(scope="session")
def toy_encoder_cfg():
    return EncoderConfig(seed=0)


@pytest.fixture(scope="session")
def supervised_encoders(toy_dataset, toy_encoder_cfg):
    """Three 500-step supervised pretrains (training precision), keyed by seed."""
    out = {}
    with precision(32):
        init = init_encoder(toy_encoder_cfg)
        for seed in (0, 1, 2):
            out[seed] = pretrain(
                init,
                PretrainObjective.GLOBAL_SUPERVISED,
                toy_dataset,
                PretrainBudget(steps=500, lr=2e-3),
                toy_encoder_cfg,
                seed=split_seed(seed, "pretrain"),
            )
    return out


@pytest.fixture(scope="session")
def contrastive_encoder(toy_dataset, toy_encoder_cfg):
    """A second frozen encoder for fusion tests (instance-contrastive analog)."""
    cfg = EncoderConfig(seed=11)
    with precision(32):
        return (
            pretrain(
                init_encoder(cfg),
                PretrainObjective.INSTANCE_CONTRASTIVE,
                toy_dataset,
                PretrainBudget(steps=200, lr=2e-3),
                cfg,
                seed=split_seed(0, "pretrain/b"),
            ),
            cfg,
        )


@pytest.fixture(scope="session")
def supervised_sweeps(supervised_encoders, toy_dataset, toy_encoder_cfg):
    """Layer sweeps (500-step probes) for the three supervised encoders."""
    reports = {}
    with precision(32):
        for seed, frozen in supervised_encoders.items():
            reports[seed] = layer_sweep(
                frozen,
                toy_encoder_cfg,
                toy_dataset,
                ProbeBudget(steps=500),
                objective="global_supervised",
                seed=seed,
            )
    return reports
