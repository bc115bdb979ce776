"""Small, fast experiment configs for harness and CLI tests."""

from dataclasses import replace

from oetrade import config
from oetrade.data import DatasetSpec, default_ood_specs


def tiny_config(**overrides) -> config.ExperimentConfig:
    base = config.ExperimentConfig()
    data = config.DataConfig(
        id_train=DatasetSpec("id_train", n_max=20, seed=11),
        id_test=DatasetSpec("id_test", n_max=10, seed=12),
        outlier_pool=DatasetSpec("outlier_pool", size=300, seed=13),
        ood_tests=tuple(default_ood_specs(size=60)),
    )
    cfg = replace(
        base,
        name="tiny",
        data=data,
        model=config.ModelConfig(hidden=(16,), feature_dim=8, embedding_dim=8),
        sampling=config.SamplingConfig(q=0.5, step=1, m=60),
        optimizer=replace(base.optimizer, epochs_pretrain=3, epochs_finetune=2, batch_in=64, batch_out=32),
        seeds=(1, 2),
    )
    return replace(cfg, **overrides)
