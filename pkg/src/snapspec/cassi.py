"""CASSI sensing operator: mask modulation, per-band dispersion shift and
sensor summation, its adjoint, a dense matrix oracle, and shot noise.

Tensors use the torch layout ``(..., C, H, W)`` for cubes and ``(..., H, W')``
for measurements, where ``W' = W + step * (C - 1)``. Leading batch dimensions
broadcast against the operator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .hsi_data import CodedMask, HSICube, Measurement

MAX_DENSE_VOXELS = 100_000


class DenseOperatorTooLarge(RuntimeError):
    pass


def sensor_width(width: int, bands: int, step: int) -> int:
    return width + step * (bands - 1)


def shift_cube(x: torch.Tensor, step: int) -> torch.Tensor:
    """Place band ``c`` at column offset ``step * c`` on a zero canvas."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step == 0:
        return x
    C = x.shape[-3]
    extra = step * (C - 1)
    bands = [torch.nn.functional.pad(x[..., c, :, :], (step * c, extra - step * c)) for c in range(C)]
    return torch.stack(bands, dim=-3)


def unshift_cube(z: torch.Tensor, step: int, width: int | None = None) -> torch.Tensor:
    """Inverse of :func:`shift_cube`; entries outside each band's support are dropped."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    C = z.shape[-3]
    if width is None:
        width = z.shape[-1] - step * (C - 1)
    if width <= 0 or width + step * (C - 1) != z.shape[-1]:
        raise ValueError(f"width {z.shape[-1]} is inconsistent with C={C}, step={step}")
    if step == 0:
        return z
    return torch.stack([z[..., c, :, step * c:step * c + width] for c in range(C)], dim=-3)


@dataclass(frozen=True)
class OperatorRep:
    """Shifted-mask representation of the sensing matrix.

    ``shifted_mask`` has shape ``(C, H, W')`` or ``(B, C, H, W')``; band ``c``
    carries the mask at column offset ``step * c``. A learned correction is
    simply another OperatorRep whose values need not vanish off-support.
    """

    shifted_mask: torch.Tensor
    step: int

    @classmethod
    def from_mask(cls, mask, bands: int, step: int = 2, dtype=torch.float32) -> "OperatorRep":
        if isinstance(mask, CodedMask):
            mask = mask.data
        m = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask, dtype=dtype)
        if m.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {tuple(m.shape)}")
        if bands < 1:
            raise ValueError("bands must be >= 1")
        stacked = m.unsqueeze(0).expand(bands, *m.shape)
        return cls(shift_cube(stacked, step).contiguous(), step)

    @property
    def bands(self) -> int:
        return self.shifted_mask.shape[-3]

    @property
    def height(self) -> int:
        return self.shifted_mask.shape[-2]

    @property
    def sensor_width(self) -> int:
        return self.shifted_mask.shape[-1]

    @property
    def scene_width(self) -> int:
        return self.sensor_width - self.step * (self.bands - 1)

    def to(self, *args, **kwargs) -> "OperatorRep":
        return OperatorRep(self.shifted_mask.to(*args, **kwargs), self.step)

    def corrected(self, residual: torch.Tensor) -> "OperatorRep":
        if residual.shape[-3:] != self.shifted_mask.shape[-3:]:
            raise ValueError(
                f"residual shape {tuple(residual.shape)} does not match operator {tuple(self.shifted_mask.shape)}"
            )
        return OperatorRep(self.shifted_mask + residual, self.step)


def _check_cube(x: torch.Tensor, op: OperatorRep) -> None:
    expected = (op.bands, op.height, op.scene_width)
    if x.ndim < 3 or tuple(x.shape[-3:]) != expected:
        raise ValueError(f"cube shape {tuple(x.shape)} does not match operator (C, H, W) = {expected}")


def _check_measurement(y: torch.Tensor, op: OperatorRep) -> None:
    expected = (op.height, op.sensor_width)
    if y.ndim < 2 or tuple(y.shape[-2:]) != expected:
        raise ValueError(f"measurement shape {tuple(y.shape)} does not match operator (H, W') = {expected}")


def apply_forward(x: torch.Tensor, op: OperatorRep) -> torch.Tensor:
    """y = sum_c shifted_mask[c] * shift(x)[c]."""
    _check_cube(x, op)
    return (op.shifted_mask * shift_cube(x, op.step)).sum(dim=-3)


def apply_adjoint(y: torch.Tensor, op: OperatorRep) -> torch.Tensor:
    """Exact transpose of :func:`apply_forward`: band c = unshift(shifted_mask[c] * y)."""
    _check_measurement(y, op)
    return unshift_cube(op.shifted_mask * y.unsqueeze(-3), op.step, op.scene_width)


def sensing_diag(op: OperatorRep) -> torch.Tensor:
    """Diagonal of Phi Phi^T as an (H, W') image (rows of Phi have disjoint support)."""
    return (op.shifted_mask ** 2).sum(dim=-3)


def vec_cube(x) -> np.ndarray:
    """Flatten a (C, H, W) tensor in HSIC payload order (H, then W, then C)."""
    x = x.detach().cpu().numpy() if torch.is_tensor(x) else np.asarray(x)
    return np.transpose(x, (1, 2, 0)).reshape(-1)


def unvec_cube(v: np.ndarray, C: int, H: int, W: int) -> np.ndarray:
    return np.transpose(np.asarray(v).reshape(H, W, C), (2, 0, 1))


def build_dense_operator(op: OperatorRep, H: int, W: int, C: int) -> np.ndarray:
    """Materialize Phi as a dense float64 matrix of shape (H*W', H*W*C).

    Rows index sensor pixels row-major; columns index voxels in ``vec_cube``
    order. Built by direct enumeration of voxels, without calling the fast path.
    """
    if H * W * C > MAX_DENSE_VOXELS:
        raise DenseOperatorTooLarge(f"{H}x{W}x{C} exceeds the dense oracle cap of {MAX_DENSE_VOXELS} voxels")
    if (op.bands, op.height, op.scene_width) != (C, H, W):
        raise ValueError("operator does not match the requested dimensions")
    sm = op.shifted_mask.detach().cpu().double().numpy()
    if sm.ndim != 3:
        raise ValueError("dense oracle requires an unbatched operator")
    step = op.step
    Wp = W + step * (C - 1)
    A = np.zeros((H * Wp, H * W * C))
    for h in range(H):
        for w in range(W):
            for c in range(C):
                col = (h * W + w) * C + c
                wp = w + step * c
                A[h * Wp + wp, col] = sm[c, h, wp]
    return A


def add_shot_noise(y, bits: int = 11, seed: int = 0):
    """Poisson shot noise at a full-well scale of ``2**bits - 1`` counts.

    ``y_noisy = Poisson(s * y) / s`` with ``s = (2**bits - 1) / max(y)`` taken
    per measurement (over the last two axes). Accepts a tensor or an ndarray
    and returns the same kind.
    """
    as_numpy = not torch.is_tensor(y)
    t = torch.as_tensor(np.asarray(y)) if as_numpy else y
    if (t < 0).any():
        raise ValueError("shot noise requires a non-negative measurement")
    if bits < 1:
        raise ValueError("bits must be >= 1")
    peak = t.amax(dim=(-2, -1), keepdim=True)
    scale = torch.where(peak > 0, (2.0 ** bits - 1.0) / torch.where(peak > 0, peak, torch.ones_like(peak)),
                        torch.zeros_like(peak))
    gen = torch.Generator().manual_seed(int(seed))
    counts = torch.poisson((t * scale).detach().double().cpu(), generator=gen).to(t.dtype)
    safe = torch.where(scale > 0, scale, torch.ones_like(scale))
    out = torch.where(scale > 0, counts / safe, torch.zeros_like(t))
    return out.numpy() if as_numpy else out


def simulate_measurement(
    cube: HSICube, mask: CodedMask, step: int = 2, noise_bits: int | None = None, seed: int = 0
) -> Measurement:
    if (mask.height, mask.width) != (cube.height, cube.width):
        raise ValueError("mask and cube spatial sizes differ")
    op = OperatorRep.from_mask(mask, cube.bands, step)
    x = torch.from_numpy(np.ascontiguousarray(cube.data.transpose(2, 0, 1)))
    y = apply_forward(x, op)
    meta = None
    if noise_bits is not None:
        y = add_shot_noise(y, bits=noise_bits, seed=seed)
        meta = {"model": "poisson", "bits": int(noise_bits), "seed": int(seed)}
    return Measurement(y.numpy(), bands=cube.bands, step=step, scene_width=cube.width, noise_meta=meta)
