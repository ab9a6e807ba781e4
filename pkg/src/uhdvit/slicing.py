"""Slice planning: thumbnail plus a best-aspect grid of square views.

Geometry only; no pixels are decoded or resampled.  Slice rectangles are
expressed on the resized canvas of ``cols * view_px`` by ``rows * view_px``
pixels, so every grid cell maps onto exactly one square view.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

from .errors import BudgetError, ConfigError

THUMBNAIL, SLICE, GLOBAL = "thumbnail", "slice", "global"
BUDGET_RATIOS = (1, 4, 16)


@dataclass(frozen=True)
class ImageSpec:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image dims must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True, order=True)
class SliceGrid:
    rows: int
    cols: int

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def transpose(self) -> "SliceGrid":
        return SliceGrid(self.cols, self.rows)


@dataclass(frozen=True)
class ViewSpec:
    role: str
    src_rect: tuple[int, int, int, int]  # x0, y0, x1, y1; half-open
    view_px: int
    token_rows: int
    token_cols: int

    @property
    def n_tokens(self) -> int:
        return self.token_rows * self.token_cols

    @property
    def grid(self) -> tuple[int, int]:
        return (self.token_rows, self.token_cols)

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "src_rect": list(self.src_rect),
            "view_px": self.view_px,
            "token_rows": self.token_rows,
            "token_cols": self.token_cols,
        }


@dataclass(frozen=True)
class SlicePlan:
    image: ImageSpec
    max_slices: int
    grid: SliceGrid
    views: tuple[ViewSpec, ...] = field(default=())

    @property
    def total_tokens(self) -> int:
        return sum(v.n_tokens for v in self.views)

    @property
    def view_tokens(self) -> list[int]:
        return [v.n_tokens for v in self.views]

    @property
    def token_grids(self) -> list[tuple[int, int]]:
        return [v.grid for v in self.views]

    def to_dict(self) -> dict:
        return {
            "width": self.image.width,
            "height": self.image.height,
            "max_slices": self.max_slices,
            "grid": {"rows": self.grid.rows, "cols": self.grid.cols},
            "views": [v.to_dict() for v in self.views],
        }

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "SlicePlan":
        views = tuple(
            ViewSpec(v["role"], tuple(v["src_rect"]), v["view_px"], v["token_rows"], v["token_cols"])
            for v in d["views"]
        )
        return cls(
            ImageSpec(d["width"], d["height"]),
            d["max_slices"],
            SliceGrid(d["grid"]["rows"], d["grid"]["cols"]),
            views,
        )


def enumerate_grids(max_slices: int) -> list[SliceGrid]:
    if max_slices < 1:
        raise ConfigError("max_slices must be >= 1")
    return [SliceGrid(r, c) for r in range(1, max_slices + 1) for c in range(1, max_slices // r + 1)]


def grid_score(grid: SliceGrid, width: int, height: int) -> float:
    """``|log((cols/rows) / (width/height))|``.

    Evaluated as the log of max/min of the integer cross products so that the
    score is exactly symmetric under transposition and exactly scale invariant.
    """
    p = grid.cols * height
    q = grid.rows * width
    return math.log(max(p, q) / min(p, q))


def select_grid(image: ImageSpec, max_slices: int) -> SliceGrid:
    """Grid with the closest aspect ratio; ties go to more slices, then fewer rows."""
    return min(
        enumerate_grids(max_slices),
        key=lambda g: (grid_score(g, image.width, image.height), -g.count, g.rows),
    )


def _tokens_per_side(view_px: int, patch_px: int) -> int:
    if view_px < 1 or patch_px < 1 or view_px % patch_px:
        raise ConfigError(f"view_px={view_px} is not a multiple of patch_px={patch_px}")
    side = view_px // patch_px
    if side % 4:
        raise ConfigError(f"view token side {side} must be divisible by 4")
    return side


def build_plan(
    image: ImageSpec,
    max_slices: int,
    view_px: int = 448,
    patch_px: int = 14,
    grid: Optional[SliceGrid] = None,
) -> SlicePlan:
    side = _tokens_per_side(view_px, patch_px)
    if grid is None:
        grid = select_grid(image, max_slices)
    elif grid.rows < 1 or grid.cols < 1 or grid.count > max_slices:
        raise ConfigError(f"grid {grid.rows}x{grid.cols} exceeds max_slices={max_slices}")
    canvas_w, canvas_h = grid.cols * view_px, grid.rows * view_px
    views = [ViewSpec(THUMBNAIL, (0, 0, canvas_w, canvas_h), view_px, side, side)]
    for r in range(grid.rows):
        for c in range(grid.cols):
            rect = (c * view_px, r * view_px, (c + 1) * view_px, (r + 1) * view_px)
            views.append(ViewSpec(SLICE, rect, view_px, side, side))
    return SlicePlan(image, max_slices, grid, tuple(views))


def global_plan(image: ImageSpec, budget_px: int, patch_px: int = 14) -> SlicePlan:
    """Global encoding as one view, aspect preserved, ``token_rows*token_cols*patch_px**2 <= budget_px``.

    Token dims are kept even (at least 2 each) so the view stays windowable.
    """
    if budget_px < 4 * patch_px * patch_px:
        raise ConfigError(f"budget {budget_px}px is below one 2x2 patch window")
    scale = math.sqrt(budget_px / (image.width * image.height))
    cols = max(2, int(image.width * scale / patch_px + 1e-9) // 2 * 2)
    rows = max(2, int(image.height * scale / patch_px + 1e-9) // 2 * 2)
    while rows * cols * patch_px * patch_px > budget_px:
        if cols >= rows and cols > 2:
            cols -= 2
        else:
            rows -= 2
    w_px, h_px = cols * patch_px, rows * patch_px
    view = ViewSpec(GLOBAL, (0, 0, w_px, h_px), max(w_px, h_px), rows, cols)
    return SlicePlan(image, 1, SliceGrid(1, 1), (view,))


def token_budget(plan: SlicePlan, ratio: int) -> int:
    if ratio not in BUDGET_RATIOS:
        raise BudgetError(f"ratio must be one of {BUDGET_RATIOS}, got {ratio}")
    for v in plan.views:
        if v.n_tokens % ratio:
            raise BudgetError(f"view with {v.n_tokens} tokens is not divisible by {ratio}")
    return plan.total_tokens // ratio
