"""Loss, learning-rate schedule, training loop, checkpoints and evaluation reports."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .cassi import OperatorRep, add_shot_noise, apply_forward
from .config import ModelConfig
from .hsi_data import CodedMask, HSICube, augment, random_crop
from .metrics import psnr, spectral_correlation, ssim
from .unfolding import RDLUF

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "snapspec-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    steps_per_epoch: int = 100
    peak_lr: float = 2e-4
    warmup_steps: int = 1000
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    patch_size: int | None = 64  # None trains on whole scenes
    seed: int = 0
    augment: bool = True
    noise_bits: int | None = None
    charbonnier_eps: float = 1e-3

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


class TrainingDiverged(RuntimeError):
    pass


def charbonnier_loss(pred, target, eps: float = 1e-3):
    """mean(sqrt((pred - target)^2 + eps^2))."""
    return torch.sqrt((pred - target) ** 2 + eps ** 2).mean()


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then half-cosine decay to 0 at ``total_steps``."""
    peak, warm = config.peak_lr, config.warmup_steps
    if warm > 0 and step < warm:
        return peak * step / warm
    if total_steps <= warm:
        return peak
    progress = min(max((step - warm) / (total_steps - warm), 0.0), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def cube_to_tensor(cube: HSICube) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(cube.data.transpose(2, 0, 1)))


def tensor_to_cube(x: torch.Tensor) -> HSICube:
    arr = x.detach().cpu().float().clamp(0, 1).numpy()
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("expected a single cube")
        arr = arr[0]
    return HSICube(arr.transpose(1, 2, 0))


def build_model(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> RDLUF:
    torch.manual_seed(seed)
    return RDLUF(config).to(dtype)


def _sample_seed(seed: int, step: int, item: int) -> int:
    return int(np.random.SeedSequence([seed, step, item]).generate_state(1)[0])


def make_batch(dataset: Sequence[HSICube], step: int, config: TrainConfig) -> torch.Tensor:
    cubes = []
    for b in range(config.batch_size):
        s = _sample_seed(config.seed, step, b)
        cube = dataset[s % len(dataset)]
        if config.patch_size is not None:
            cube = random_crop(cube, config.patch_size, seed=s)
        if config.augment:
            cube = augment(cube, seed=s + 1)
        cubes.append(cube_to_tensor(cube))
    return torch.stack(cubes)


def synthesize(x: torch.Tensor, op: OperatorRep, noise_bits: int | None, seed: int) -> torch.Tensor:
    with torch.no_grad():
        y = apply_forward(x, op)
        if noise_bits is not None:
            y = add_shot_noise(y, bits=noise_bits, seed=seed)
    return y


def _stage_diagnostics(model: RDLUF, y, op) -> str:
    lines = []
    with torch.no_grad():
        try:
            for k, x in enumerate(model.iterate(y, op)):
                finite = torch.isfinite(x)
                vals = x[finite]
                lo = float(vals.min()) if vals.numel() else float("nan")
                hi = float(vals.max()) if vals.numel() else float("nan")
                lines.append(f"stage {k}: nonfinite={int((~finite).sum())} min={lo:.4g} max={hi:.4g}")
        except FloatingPointError as exc:
            lines.append(f"stage {len(lines)}: {exc}")
    return "\n".join(lines)


@dataclass
class TrainResult:
    model: RDLUF
    log: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [row[2] for row in self.log]

    def log_text(self) -> str:
        return "".join(f"{s},{lr:.10g},{loss:.10g}\n" for s, lr, loss in self.log)


def train(
    model: RDLUF,
    dataset: Sequence[HSICube],
    mask: CodedMask,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Adam on the Charbonnier loss of the unclamped reconstruction.

    Measurements are synthesized on the fly from crops of ``dataset`` through
    ``mask`` (which must match the crop size). Deterministic for a fixed
    ``config.seed`` and model initialization.
    """
    if not dataset:
        raise ValueError("empty dataset")
    dtype = next(model.parameters()).dtype
    op = OperatorRep.from_mask(mask, model.config.bands, model.config.step, dtype=dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.peak_lr, betas=(config.beta1, config.beta2))
    result = TrainResult(model)
    total = config.total_steps
    model.train()
    step = 0
    for epoch in range(config.epochs):
        for _ in range(config.steps_per_epoch):
            x = make_batch(dataset, step, config).to(dtype)
            if tuple(x.shape[-2:]) != (op.height, op.scene_width):
                raise ValueError(f"mask {(op.height, op.scene_width)} does not match patches {tuple(x.shape[-2:])}")
            y = synthesize(x, op, config.noise_bits, _sample_seed(config.seed, step, 10_000))
            lr = lr_schedule(step, total, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            try:
                pred = model(y, op, clamp=False)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{exc} at step {step}\n{_stage_diagnostics(model, y, op)}") from exc
            loss = charbonnier_loss(pred, x, config.charbonnier_eps)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}\n{_stage_diagnostics(model, y, op)}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            result.log.append((step, lr, float(loss.detach())))
            log.debug("step %d lr %.3g loss %.6f", step, lr, result.log[-1][2])
            step += 1
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.pt", step=step)
    model.eval()
    return result


def save_checkpoint(model: RDLUF, path: str | Path, **extra) -> None:
    """Container: format tag, version, config echo, named parameter tensors."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> RDLUF:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    model = RDLUF(ModelConfig.from_dict(payload["config"]))
    dtype = next(iter(payload["state_dict"].values())).dtype
    model.to(dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


@torch.no_grad()
def reconstruct(model: RDLUF, y: np.ndarray, mask: CodedMask) -> HSICube:
    dtype = next(model.parameters()).dtype
    op = OperatorRep.from_mask(mask, model.config.bands, model.config.step, dtype=dtype)
    out = model(torch.as_tensor(np.asarray(y), dtype=dtype).unsqueeze(0), op)
    return tensor_to_cube(out)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class SceneScore:
    name: str
    psnr: float
    ssim: float
    correlation: float | None = None


@dataclass
class EvalReport:
    scenes: list[SceneScore]

    @property
    def avg_psnr(self) -> float:
        return float(np.mean([s.psnr for s in self.scenes]))

    @property
    def avg_ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.scenes]))

    @property
    def avg_correlation(self) -> float | None:
        vals = [s.correlation for s in self.scenes if s.correlation is not None]
        return float(np.mean(vals)) if vals else None

    def to_text(self) -> str:
        """Comma-separated table: one row per scene, then an ``Avg`` row."""
        with_corr = any(s.correlation is not None for s in self.scenes)
        header = "scene,psnr_db,ssim" + (",spectral_corr" if with_corr else "")
        rows = [header]

        def row(name, p, s, c):
            line = f"{name},{p:.4f},{s:.6f}"
            if with_corr:
                line += "," + ("" if c is None else f"{c:.6f}")
            return line

        for s in self.scenes:
            rows.append(row(s.name, s.psnr, s.ssim, s.correlation))
        rows.append(row("Avg", self.avg_psnr, self.avg_ssim, self.avg_correlation))
        return "\n".join(rows) + "\n"


def evaluate(preds: Sequence[HSICube], truths: Sequence[HSICube], names: Sequence[str] | None = None,
             roi=None) -> EvalReport:
    if len(preds) != len(truths):
        raise ValueError("need one prediction per ground truth")
    names = list(names) if names is not None else [f"scene{i + 1}" for i in range(len(preds))]
    scores = []
    for name, p, t in zip(names, preds, truths):
        corr = spectral_correlation(p.data, t.data, roi) if roi is not None else None
        scores.append(SceneScore(name, psnr(p.data, t.data), ssim(p.data, t.data), corr))
    return EvalReport(scores)
