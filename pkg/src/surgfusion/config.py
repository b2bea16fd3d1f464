"""Model hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import ConfigError


@dataclass
class ModelConfig:
    """Architecture settings shared by the unimodal and fusion branches.

    ``fusionnet_source`` chooses which unimodal features feed the
    FusionNets at stage i: ``"inputs"`` (length T_i) or the pooled stage
    ``"outputs"`` (length T_{i+1}, the same tensors the cross-stage block
    attends over).
    """

    d: int = 64
    stages: int = 3
    kernel_width: int = 3
    fusion_nets: int = 10
    heads: int = 2
    dropout: float = 0.3
    eps: float = 1e-8
    bn_momentum: float = 0.1
    policy_temperature: float = 1.0
    learnable_fusion_init: bool = False
    fusionnet_source: str = "inputs"
    y_min: float = 6.0
    y_max: float = 30.0

    def validate(self) -> None:
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.stages != 3:
            raise ConfigError("the architecture has exactly three stages")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ConfigError(f"kernel_width must be odd, got {self.kernel_width}")
        if self.fusion_nets < 1:
            raise ConfigError("fusion_nets must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.policy_temperature <= 0:
            raise ConfigError("policy_temperature must be > 0")
        if self.fusionnet_source not in ("inputs", "outputs"):
            raise ConfigError(f"fusionnet_source must be 'inputs' or 'outputs', got {self.fusionnet_source!r}")
        if not self.y_min < self.y_max:
            raise ConfigError(f"label bounds must satisfy y_min < y_max ({self.y_min}, {self.y_max})")


PAPER_MODEL = dict(d=256, fusion_nets=10, heads=2)
