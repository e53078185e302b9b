"""2-D Cohen-Daubechies-Feauveau 9/7 wavelet transform via lifting.

The transform projects glyph images into a multi-scale coefficient space in
which the reconstruction likelihood is evaluated. Each 1-D level is four
lifting shears followed by a paired channel scaling (low x ZETA, high / ZETA),
so the full transform is linear with |det| = 1: log-densities computed on
coefficients need no Jacobian term.

Pyramids are stored packed in Mallat layout: the coarse LL block occupies the
top-left corner and each level's detail bands occupy the L-shaped remainder
of its quadrant. ``flatten_pyramid`` defines the canonical coefficient order
(see docs/wavelet-layout.md).

All transforms accept ``numpy`` arrays or ``torch`` tensors shaped
``(..., S, S)`` with a power-of-two side S, run on torch internally, and are
differentiable when handed tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

# Lifting factorization of the 9/7 analysis filters: two predict steps, two
# update steps and the final channel scaling. The constants are verified by
# the perfect-reconstruction and determinant tests rather than trusted as
# typed.
PREDICT1 = -1.586134342059924
UPDATE1 = -0.052980118572961
PREDICT2 = 0.882911075530934
UPDATE2 = 0.443506852043971
ZETA = 1.149604398860242


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def max_levels(side: int) -> int:
    """Full dyadic depth for a power-of-two side."""
    return int(side).bit_length() - 1


def _check_geometry(side: int, levels: int) -> None:
    if not _is_power_of_two(side):
        raise ValueError(f"side must be a power of two, got {side}")
    if not 1 <= levels <= max_levels(side):
        raise ValueError(
            f"levels must be in [1, {max_levels(side)}] for side {side}, got {levels}"
        )


def lift_forward_1d(x: torch.Tensor) -> torch.Tensor:
    """One analysis level along the last axis, packed as [low | high].

    Whole-sample symmetric extension at both ends; the length must be even.
    """
    even = x[..., 0::2]
    odd = x[..., 1::2]
    nxt = torch.cat([even[..., 1:], even[..., -1:]], dim=-1)
    d = odd + PREDICT1 * (even + nxt)
    prv = torch.cat([d[..., :1], d[..., :-1]], dim=-1)
    s = even + UPDATE1 * (prv + d)
    nxts = torch.cat([s[..., 1:], s[..., -1:]], dim=-1)
    d = d + PREDICT2 * (s + nxts)
    prv = torch.cat([d[..., :1], d[..., :-1]], dim=-1)
    s = s + UPDATE2 * (prv + d)
    return torch.cat([s * ZETA, d / ZETA], dim=-1)


def lift_inverse_1d(c: torch.Tensor) -> torch.Tensor:
    """Exact inverse of :func:`lift_forward_1d`."""
    m = c.shape[-1] // 2
    s = c[..., :m] / ZETA
    d = c[..., m:] * ZETA
    prv = torch.cat([d[..., :1], d[..., :-1]], dim=-1)
    s = s - UPDATE2 * (prv + d)
    nxts = torch.cat([s[..., 1:], s[..., -1:]], dim=-1)
    d = d - PREDICT2 * (s + nxts)
    prv = torch.cat([d[..., :1], d[..., :-1]], dim=-1)
    even = s - UPDATE1 * (prv + d)
    nxt = torch.cat([even[..., 1:], even[..., -1:]], dim=-1)
    odd = d - PREDICT1 * (even + nxt)
    out = torch.stack([even, odd], dim=-1)
    return out.reshape(*c.shape[:-1], 2 * m)


def _level_forward_2d(block: torch.Tensor) -> torch.Tensor:
    block = lift_forward_1d(block)
    block = lift_forward_1d(block.transpose(-1, -2)).transpose(-1, -2)
    return block


def _level_inverse_2d(block: torch.Tensor) -> torch.Tensor:
    block = lift_inverse_1d(block.transpose(-1, -2)).transpose(-1, -2)
    block = lift_inverse_1d(block)
    return block


def forward_packed(x: torch.Tensor, levels: int) -> torch.Tensor:
    """Multi-level 2-D analysis on ``(..., S, S)`` tensors, Mallat-packed."""
    side = x.shape[-1]
    if x.shape[-2] != side:
        raise ValueError(f"image must be square, got {tuple(x.shape[-2:])}")
    _check_geometry(side, levels)
    out = x.clone()
    m = side
    for _ in range(levels):
        out = torch.cat(
            [
                torch.cat([_level_forward_2d(out[..., :m, :m]), out[..., :m, m:]], dim=-1),
                out[..., m:, :],
            ],
            dim=-2,
        )
        m //= 2
    return out


def inverse_packed(c: torch.Tensor, levels: int) -> torch.Tensor:
    """Inverse of :func:`forward_packed`."""
    side = c.shape[-1]
    if c.shape[-2] != side:
        raise ValueError(f"pyramid must be square, got {tuple(c.shape[-2:])}")
    _check_geometry(side, levels)
    out = c.clone()
    m = side >> (levels - 1)
    for _ in range(levels):
        out = torch.cat(
            [
                torch.cat([_level_inverse_2d(out[..., :m, :m]), out[..., :m, m:]], dim=-1),
                out[..., m:, :],
            ],
            dim=-2,
        )
        m *= 2
    return out


@lru_cache(maxsize=32)
def flatten_permutation(side: int, levels: int) -> np.ndarray:
    """Index permutation from row-major packed layout to canonical order.

    Canonical order: coarsest LL block first, then per level from coarsest to
    finest the HL, LH and HH bands, each row-major. HL denotes the band that
    is high-pass along x and low-pass along y (the top-right quadrant).
    """
    _check_geometry(side, levels)
    idx = np.arange(side * side).reshape(side, side)
    m = side >> levels
    parts = [idx[:m, :m].ravel()]
    for lvl in range(levels, 0, -1):
        m = side >> lvl
        parts.append(idx[:m, m : 2 * m].ravel())
        parts.append(idx[m : 2 * m, :m].ravel())
        parts.append(idx[m : 2 * m, m : 2 * m].ravel())
    return np.concatenate(parts)


def band_layout(side: int, levels: int) -> list[tuple[str, int, int, int]]:
    """Canonical layout table: (band, level, start offset, length) entries."""
    _check_geometry(side, levels)
    out = []
    offset = 0
    m = side >> levels
    out.append(("LL", levels, offset, m * m))
    offset += m * m
    for lvl in range(levels, 0, -1):
        m = side >> lvl
        for band in ("HL", "LH", "HH"):
            out.append((band, lvl, offset, m * m))
            offset += m * m
    return out


@dataclass
class WaveletPyramid:
    """Packed multi-level coefficient set for images of side ``side``.

    ``data`` is the Mallat-packed array, either a numpy array or a torch
    tensor of shape ``(..., side, side)``.
    """

    data: np.ndarray | torch.Tensor
    side: int
    levels: int

    def __post_init__(self):
        if self.data.shape[-2:] != (self.side, self.side):
            raise ValueError(
                f"coefficient block {tuple(self.data.shape[-2:])} does not match "
                f"side {self.side}"
            )
        _check_geometry(self.side, self.levels)

    def band(self, level: int, name: str) -> np.ndarray | torch.Tensor:
        """One sub-band; ``name`` in {LL, HL, LH, HH}. LL only at the top level."""
        if not 1 <= level <= self.levels:
            raise ValueError(f"level {level} outside [1, {self.levels}]")
        m = self.side >> level
        if name == "LL":
            if level != self.levels:
                raise ValueError("LL exists only at the coarsest level")
            return self.data[..., :m, :m]
        if name == "HL":
            return self.data[..., :m, m : 2 * m]
        if name == "LH":
            return self.data[..., m : 2 * m, :m]
        if name == "HH":
            return self.data[..., m : 2 * m, m : 2 * m]
        raise ValueError(f"unknown band {name!r}")

    def flatten(self) -> np.ndarray | torch.Tensor:
        return flatten_pyramid(self.data, self.side, self.levels)


def _to_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, False
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return torch.from_numpy(arr), True


def cdf97_forward(image, levels: int | None = None) -> WaveletPyramid:
    """Forward transform of a square power-of-two image (or batch).

    ``levels`` defaults to the full dyadic depth. The pyramid's ``data``
    matches the input backend (numpy in, numpy out).
    """
    x, was_numpy = _to_tensor(image)
    side = x.shape[-1]
    if levels is None:
        if not _is_power_of_two(side):
            raise ValueError(f"side must be a power of two, got {side}")
        levels = max_levels(side)
    packed = forward_packed(x, levels)
    if was_numpy:
        packed = packed.numpy()
    return WaveletPyramid(packed, side, levels)


def cdf97_inverse(pyramid: WaveletPyramid):
    """Reconstruct the image from a pyramid; exact up to float error."""
    if pyramid.data.shape[-2:] != (pyramid.side, pyramid.side):
        raise ValueError("coefficient count does not match side^2")
    x, was_numpy = _to_tensor(pyramid.data)
    out = inverse_packed(x, pyramid.levels)
    return out.numpy() if was_numpy else out


def flatten_pyramid(packed, side: int, levels: int):
    """Packed coefficients -> canonical 1-D vector (see flatten_permutation)."""
    if packed.shape[-2:] != (side, side):
        raise ValueError(
            f"packed block {tuple(packed.shape[-2:])} does not match side {side}"
        )
    perm = flatten_permutation(side, levels)
    if isinstance(packed, torch.Tensor):
        idx = torch.from_numpy(perm).to(packed.device)
        return packed.reshape(*packed.shape[:-2], side * side)[..., idx]
    return packed.reshape(*packed.shape[:-2], side * side)[..., perm]


def unflatten_pyramid(vec, side: int, levels: int):
    """Inverse of :func:`flatten_pyramid`."""
    if vec.shape[-1] != side * side:
        raise ValueError(f"expected {side * side} coefficients, got {vec.shape[-1]}")
    perm = flatten_permutation(side, levels)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    if isinstance(vec, torch.Tensor):
        idx = torch.from_numpy(inv).to(vec.device)
        return vec[..., idx].reshape(*vec.shape[:-1], side, side)
    return vec[..., inv].reshape(*vec.shape[:-1], side, side)
