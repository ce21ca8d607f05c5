"""Small shared fixtures for trainer / cli / acceptance tests."""

import numpy as np

from gatefuse.data import SyntheticSpec, generate
from gatefuse.losses import LossConfig
from gatefuse.model import ModelConfig
from gatefuse.trainer import TrainConfig


def tiny_model_cfg(**kw) -> ModelConfig:
    base = dict(dim_v=5, dim_t=4, width=8, heads=2, ff_mult=2, embed_dim=6,
                precision="f32")
    base.update(kw)
    return ModelConfig(**base)


def tiny_records(pairs=8, missing_rate=0.0, seed=7, pair_noise=0.05,
                 dim_v=5, dim_t=4):
    return generate(SyntheticSpec(pairs=pairs, latent_dim=4, tokens_v=2,
                                  tokens_t=2, dim_v=dim_v, dim_t=dim_t,
                                  pair_noise=pair_noise, token_noise=0.05,
                                  missing_rate=missing_rate, seed=seed))


def tiny_train_cfg(**kw) -> TrainConfig:
    base = dict(learning_rate=1e-3, batch_size=4, steps=10, seed=0,
                weight_decay=0.0)
    base.update(kw)
    return TrainConfig(**base)


def tiny_loss_cfg(**kw) -> LossConfig:
    base = dict(k_neighbors=2, k_hard=2)
    base.update(kw)
    return LossConfig(**base)


def params_equal(a: dict, b: dict) -> bool:
    if set(a) != set(b):
        return False
    return all(np.array_equal(a[k], b[k]) for k in a)
