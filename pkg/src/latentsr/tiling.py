"""Overlapping-patch decomposition and feather-blended reassembly.

Positions step by ``stride = patch * (1 - overlap)`` with the final
position clamped to the image boundary, so a 1000x750 input at patch 128
and 25% overlap yields 11 x 8 = 88 tiles and 512x512 yields 5 x 5 = 25.
Blending uses a separable raised-cosine weight, normalized per output
pixel by the accumulated weight, and accumulates in plan order so the
result is independent of the order tiles were computed in.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .resample import upsample


def raised_cosine_mask(n: int) -> np.ndarray:
    """1D strictly-positive raised-cosine window sampled at cell centers."""
    k = np.arange(n, dtype=np.float64)
    return np.sin(np.pi * (k + 0.5) / n) ** 2


@dataclass
class TilePlan:
    patch: int
    overlap_fraction: float
    stride: int
    positions: list  # (x, y) top-left LR coordinates, row-major
    weight_mask: np.ndarray  # (patch, patch) separable raised cosine
    image_size: tuple  # (width, height) of the planned LR image
    pad: tuple | None = None  # (left, top, right, bottom) when image < patch

    @property
    def num_tiles(self) -> int:
        return len(self.positions)


def _axis_positions(dim: int, patch: int, stride: int) -> list:
    count = math.ceil((dim - patch) / stride) + 1
    return [min(i * stride, dim - patch) for i in range(count)]


def plan_tiles(width: int, height: int, patch: int = 128,
               overlap_fraction: float = 0.25) -> TilePlan:
    """Plan overlapping patch positions covering the full image."""
    if patch < 1:
        raise InvalidArgument("patch must be >= 1")
    if not 0.0 <= overlap_fraction < 1.0:
        raise InvalidArgument("overlap_fraction must lie in [0, 1)")
    stride = max(1, round(patch * (1.0 - overlap_fraction)))
    mask1d = raised_cosine_mask(patch)
    mask = np.outer(mask1d, mask1d)
    if width < patch or height < patch:
        pad_w = max(0, patch - width)
        pad_h = max(0, patch - height)
        pad = (pad_w // 2, pad_h // 2, pad_w - pad_w // 2, pad_h - pad_h // 2)
        return TilePlan(patch=patch, overlap_fraction=overlap_fraction,
                        stride=stride, positions=[(0, 0)], weight_mask=mask,
                        image_size=(width, height), pad=pad)
    xs = _axis_positions(width, patch, stride)
    ys = _axis_positions(height, patch, stride)
    positions = [(x, y) for y in ys for x in xs]
    return TilePlan(patch=patch, overlap_fraction=overlap_fraction,
                    stride=stride, positions=positions, weight_mask=mask,
                    image_size=(width, height))


def blend(patch_outputs: list, plan: TilePlan, scale: int) -> np.ndarray:
    """Weighted-average reassembly of per-tile HR outputs.

    Accumulation runs in plan order with float64 sums, so callers may
    compute tiles in any order (or in parallel) without changing the
    result bit for bit.
    """
    if len(patch_outputs) != plan.num_tiles:
        raise InvalidArgument(
            f"got {len(patch_outputs)} patch outputs for {plan.num_tiles} tiles")
    hp = plan.patch * scale
    width, height = plan.image_size
    if plan.pad is not None:
        width += plan.pad[0] + plan.pad[2]
        height += plan.pad[1] + plan.pad[3]
    channels = patch_outputs[0].shape[0]
    mask1d = raised_cosine_mask(hp)
    mask = np.outer(mask1d, mask1d)
    den = np.zeros((height * scale, width * scale), dtype=np.float64)
    for x, y in plan.positions:
        den[y * scale:y * scale + hp, x * scale:x * scale + hp] += mask
    if np.any(den <= 0):
        raise InvalidArgument("blend coverage hole: some pixels got no tile")
    # normalize the weights first: a pixel covered by one tile then gets
    # weight exactly 1.0, so single-tile plans reproduce the patch bit-for-bit
    blended = np.zeros((channels, height * scale, width * scale), dtype=np.float64)
    for (x, y), out in zip(plan.positions, patch_outputs):
        if out.shape != (channels, hp, hp):
            raise InvalidArgument(
                f"patch output shape {out.shape} != ({channels}, {hp}, {hp})")
        xs, ys = x * scale, y * scale
        w = mask / den[ys:ys + hp, xs:xs + hp]
        blended[:, ys:ys + hp, xs:xs + hp] += w * out.astype(np.float64)
    if plan.pad is not None:
        left, top, right, bottom = (p * scale for p in plan.pad)
        blended = blended[:, top:blended.shape[1] - bottom,
                          left:blended.shape[2] - right]
    return blended


def accumulated_weight(plan: TilePlan, scale: int = 1) -> np.ndarray:
    """Total blend weight per output pixel (for coverage checks)."""
    hp = plan.patch * scale
    width, height = plan.image_size
    if plan.pad is not None:
        width += plan.pad[0] + plan.pad[2]
        height += plan.pad[1] + plan.pad[3]
    mask1d = raised_cosine_mask(hp)
    mask = np.outer(mask1d, mask1d)
    den = np.zeros((height * scale, width * scale), dtype=np.float64)
    for x, y in plan.positions:
        den[y * scale:y * scale + hp, x * scale:x * scale + hp] += mask
    return den


def pad_image(lr: np.ndarray, plan: TilePlan) -> np.ndarray:
    if plan.pad is None:
        return lr
    left, top, right, bottom = plan.pad
    return np.pad(lr, ((0, 0), (top, bottom), (left, right)), mode="edge")


def tiled_upscale(model, lr: np.ndarray, plan: TilePlan, scale: int):
    """Run the per-tile model over the plan and blend.

    ``model(lr_patch, tile_index)`` maps a (C, patch, patch) array to a
    (C, patch*scale, patch*scale) array; implementations derive their RNG
    from the tile index so results do not depend on evaluation order.
    Returns (hr_image, stats) where stats counts model evaluations.
    """
    if lr.ndim != 3:
        raise InvalidArgument("expected (C, H, W) LR input")
    h, w = lr.shape[1:]
    if (w, h) != plan.image_size:
        raise InvalidArgument(
            f"plan was made for {plan.image_size}, image is {(w, h)}")
    padded = pad_image(lr, plan)
    outputs = []
    for idx, (x, y) in enumerate(plan.positions):
        tile = padded[:, y:y + plan.patch, x:x + plan.patch]
        outputs.append(model(tile, idx))
    stats = {"tiles": plan.num_tiles, "model_evaluations": plan.num_tiles}
    return blend(outputs, plan, scale), stats


def bicubic_tile_model(scale: int):
    """Identity 'model': bicubic x-scale per tile (oracle for blending)."""

    def model(tile, tile_index):
        return upsample(tile, scale, "bicubic")

    return model
