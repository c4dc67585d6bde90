"""Anchor-grid geometry.

Anchors are the centers of the cells of a (2h/k) x (2w/k) grid, i.e. they are
spaced k/2 apart with the first anchor at (k/4, k/4). Each anchor owns a k x k
sprite centered on it, which may translate by up to +-k/2 per axis, so the
reachable footprint of one anchor (its "stamp") is a 2k x 2k window centered
on the anchor. All coordinates are (y, x) with the origin at the top-left and
y pointing down, in pixel units.
"""

from __future__ import annotations


def grid_shape(h: int, w: int, k: int) -> tuple[int, int]:
    if h % (k // 2) != 0 or w % (k // 2) != 0:
        raise ValueError(f"frame dims {w}x{h} must be multiples of k/2={k // 2}")
    return 2 * h // k, 2 * w // k


def anchor_center(row: int, col: int, k: int) -> tuple[int, int]:
    """Center of the anchor's cell. Integral because k is a multiple of 4."""
    return row * (k // 2) + k // 4, col * (k // 2) + k // 4


def sprite_topleft(row: int, col: int, k: int, dy: int = 0, dx: int = 0) -> tuple[int, int]:
    """Top-left of the k x k sprite at integer offset (dy, dx) from its anchor."""
    cy, cx = anchor_center(row, col, k)
    return cy - k // 2 + dy, cx - k // 2 + dx


def stamp_topleft(row: int, col: int, k: int) -> tuple[int, int]:
    """Top-left of the 2k x 2k stamp window covering all reachable offsets."""
    cy, cx = anchor_center(row, col, k)
    return cy - k, cx - k


def nearest_anchor(top_y: int, top_x: int, k: int, grid_h: int, grid_w: int) -> tuple[int, int, int, int]:
    """Map a sprite top-left position to (row, col, dy, dx) on the anchor grid.

    Picks the anchor whose unshifted sprite position is nearest; the residual
    offset is then at most k/4 per axis, well inside the +-k/2 range.
    """
    half = k // 2
    # sprite_topleft(row, col) = (row * half - k/4, col * half - k/4)
    row = round((top_y + k // 4) / half)
    col = round((top_x + k // 4) / half)
    row = min(max(row, 0), grid_h - 1)
    col = min(max(col, 0), grid_w - 1)
    y0, x0 = sprite_topleft(row, col, k)
    dy, dx = top_y - y0, top_x - x0
    if abs(dy) > half or abs(dx) > half:
        raise ValueError(f"position ({top_y},{top_x}) not reachable from any anchor")
    return row, col, dy, dx
