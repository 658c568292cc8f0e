"""Shared, lazily trained full-size models (each is trained at most once per session)."""

from functools import cached_property

import pytest

from neuroeq.harness import default_config, train_cnn
from neuroeq.models import NetworkSpec, joint_finetune, train_nnd_awgn


class TrainedModels:
    def __init__(self):
        self.linear_config = default_config("fig3_linear")
        self.nonlinear_config = default_config("fig6_joint")
        self.boundary_config = default_config("boundary")

    @cached_property
    def linear_cnn(self):
        return train_cnn(self.linear_config)

    @cached_property
    def nonlinear_cnn(self):
        return train_cnn(self.nonlinear_config)

    @cached_property
    def nnd(self):
        cfg = self.nonlinear_config
        net, _ = train_nnd_awgn(cfg.training(cfg.nnd_iterations), NetworkSpec("dnn", cfg.dnn_structure))
        return net

    @cached_property
    def joint(self):
        cfg = self.nonlinear_config
        return joint_finetune(
            self.nonlinear_cnn,
            self.nnd,
            cfg.training(),
            cfg.channel(),
            iterations=cfg.finetune_iterations,
            learning_rate=cfg.finetune_learning_rate,
        )

    @cached_property
    def boundary_cnn(self):
        return train_cnn(self.boundary_config)


@pytest.fixture(scope="session")
def trained():
    return TrainedModels()
