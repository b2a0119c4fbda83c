"""Model configuration and its structured-text (YAML/JSON) form."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml


@dataclass(frozen=True)
class ModelConfig:
    bands: int = 28
    step: int = 2
    # denoiser
    channels: int = 32
    levels: int = 3
    blocks: tuple[int, ...] = (1, 1, 1)
    heads: tuple[int, ...] = (1, 2, 4)
    gdfn_expansion: float = 2.0
    denoiser: str = "mixs2"  # or "identity"
    use_spatial_branch: bool = True
    use_bidirectional: bool = True
    use_block_interaction: bool = True
    # unfolding
    stages: int = 3
    share_stages: bool = True
    use_stage_interaction: bool = True
    use_residual_degradation: bool = True
    recompute_degradation: bool = True
    dlcb_blocks: int = 3
    dlcb_channels: int = 32
    rho_init: float | None = None  # None: 2 / bands, about 1 / mean diag(Phi Phi^T) for a half-open mask

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if self.bands < 1 or self.step < 0:
            raise ValueError("bands must be >= 1 and step >= 0")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.blocks) != self.levels or len(self.heads) != self.levels:
            raise ValueError("blocks and heads need one entry per level")
        if any(b < 1 for b in self.blocks):
            raise ValueError("every level needs at least one block")
        if self.denoiser not in ("mixs2", "identity"):
            raise ValueError(f"unknown denoiser {self.denoiser!r}")
        for i, h in enumerate(self.heads):
            width = self.channels * 2 ** i
            if width % 4 or width % h:
                raise ValueError(f"level {i}: {width} channels not divisible by 4 and by {h} heads")
        if self.gdfn_expansion <= 0:
            raise ValueError("gdfn_expansion must be positive")

    @property
    def initial_rho(self) -> float:
        return 2.0 / self.bands if self.rho_init is None else float(self.rho_init)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def load_config(path: str | Path) -> ModelConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return ModelConfig.from_dict(data)


def save_config(config: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))


# Desk-scale network used by the smoke/overfit runs.
MICRO = ModelConfig(channels=8, dlcb_channels=16, dlcb_blocks=2)
# Closer to the reference scale (nine shared stages); far too slow for CPU.
FULL = ModelConfig(channels=32, stages=9, dlcb_channels=32)
