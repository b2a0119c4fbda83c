"""Unfolded proximal gradient descent with a learned correction of the
sensing operator.

Each stage estimates ``Phi_hat = Phi + R(y, Phi)`` with a small conv net,
takes a gradient step on ``0.5 * ||Phi_hat x - y||^2`` with a learnable step
size and hands the result to a denoiser acting as the proximal map. With
stage sharing on, stages 2..K-1 are the same module object.
"""
from __future__ import annotations

from collections import Counter

import torch
import torch.nn as nn

from .cassi import OperatorRep, apply_adjoint, apply_forward, shift_cube, unshift_cube
from .config import ModelConfig
from .mixs2 import IdentityDenoiser, MixS2Transformer, StageInteraction


class DLCB(nn.Module):
    """x + act(DConv(Conv1x1(x)))."""

    def __init__(self, dim: int):
        super().__init__()
        self.pw = nn.Conv2d(dim, dim, 1)
        self.dw = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.act = nn.GELU()

    def forward(self, x):
        return x + self.act(self.dw(self.pw(x)))


class ResidualDegradation(nn.Module):
    """Predicts an additive correction R with the same shape as the shifted mask."""

    def __init__(self, bands: int, features: int = 32, n_blocks: int = 3):
        super().__init__()
        self.bands = bands
        self.head = nn.Conv2d(2 * bands, features, 1)
        self.body = nn.Sequential(*[DLCB(features) for _ in range(n_blocks)])
        self.proj = nn.Conv2d(features, bands, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def lift(self, y, op: OperatorRep):
        """Copy y into every band, restricted to the columns that band disperses onto."""
        expanded = y.unsqueeze(-3).expand(*y.shape[:-2], op.bands, *y.shape[-2:])
        lifted = shift_cube(unshift_cube(expanded, op.step, op.scene_width), op.step)
        # measurement sums ~bands/2 mask-weighted voxels per pixel
        return lifted * (2.0 / op.bands)

    def forward(self, y, op: OperatorRep) -> OperatorRep:
        if y.ndim == 2:
            y = y.unsqueeze(0)
        if tuple(y.shape[-2:]) != (op.height, op.sensor_width):
            raise ValueError(f"measurement {tuple(y.shape)} does not match operator")
        phi = op.shifted_mask
        if phi.ndim == 3:
            phi = phi.unsqueeze(0)
        phi = phi.expand(y.shape[0], *phi.shape[1:])
        feats = self.head(torch.cat([self.lift(y, op), phi], dim=1))
        return op.corrected(self.proj(self.body(feats)))


def residual_degradation(y, op: OperatorRep, module: ResidualDegradation | None) -> OperatorRep:
    if module is None:
        return op
    return module(y, op)


def gradient_step(x_prev, y, op_hat: OperatorRep, rho):
    """v = x - rho * Phi_hat^T (Phi_hat x - y)."""
    return x_prev - rho * apply_adjoint(apply_forward(x_prev, op_hat) - y, op_hat)


def stage_interaction(feats_prev, feat_cur, n: int, module: StageInteraction | None):
    """Modulate block ``n``'s features with block ``n`` and its mirror from the previous stage."""
    if feats_prev is None or module is None:
        return feat_cur
    return module(feat_cur, feats_prev[n], feats_prev[len(feats_prev) - 1 - n])


class Stage(nn.Module):
    def __init__(self, config: ModelConfig, first: bool):
        super().__init__()
        self.rho = nn.Parameter(torch.tensor(config.initial_rho))
        if config.use_residual_degradation:
            self.degradation = ResidualDegradation(config.bands, config.dlcb_channels, config.dlcb_blocks)
        else:
            self.degradation = None
        if config.denoiser == "identity":
            self.denoiser = IdentityDenoiser()
        else:
            self.denoiser = MixS2Transformer(config, stage_interaction=config.use_stage_interaction and not first)


def stage_layout(stages: int, share: bool) -> list[int]:
    """Map stage k (0-based) to the index of the module that holds its parameters."""
    if not share or stages <= 2:
        return list(range(stages))
    return [0] + [1] * (stages - 2) + [2]


class RDLUF(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.layout = stage_layout(config.stages, config.share_stages)
        n_unique = max(self.layout) + 1
        self.stages = nn.ModuleList([Stage(config, first=(i == 0)) for i in range(n_unique)])

    def stage(self, k: int) -> Stage:
        return self.stages[self.layout[k]]

    def iterate(self, y, op: OperatorRep):
        """Yield x_0 = Phi^T y and then each stage's (unclamped) output."""
        if y.ndim == 2:
            y = y.unsqueeze(0)
        x = apply_adjoint(y, op)
        yield x
        feats = None
        op_hat = None
        for k in range(self.config.stages):
            stage = self.stage(k)
            if op_hat is None or self.config.recompute_degradation:
                op_hat = residual_degradation(y, op, stage.degradation)
            v = gradient_step(x, y, op_hat, stage.rho)
            x, feats = stage.denoiser(v, feats)
            yield x

    def forward(self, y, op: OperatorRep, clamp: bool = True, return_stages: bool = False):
        """Reconstruct ``(B, C, H, W)`` cubes from ``(B, H, W')`` measurements.

        ``clamp`` bounds only the final output to [0, 1]; intermediate stages
        are returned unclamped when ``return_stages`` is set.
        """
        history = list(self.iterate(y, op))
        x = history[-1]
        out = x.clamp(0.0, 1.0) if clamp else x
        if return_stages:
            return out, history
        return out


def run_unfolding(y, op: OperatorRep, model: RDLUF, clamp: bool = True):
    return model(y, op, clamp=clamp)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_census(model: RDLUF) -> dict:
    """Per-stage parameter counts, owning module for each stage, and unique total."""
    owners = Counter(model.layout)
    return {
        "stages": [
            {"stage": k + 1, "module": idx, "params": count_parameters(model.stages[idx]), "shared_by": owners[idx]}
            for k, idx in enumerate(model.layout)
        ],
        "total": count_parameters(model),
    }
