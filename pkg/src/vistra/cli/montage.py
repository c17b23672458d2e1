"""Deterministic image grids with labeled gutters.

Every cell occupies ``cell + gutter`` pixels in both directions: a gutter
strip above and left of the image. Column labels go in the top gutters of
the first row, row labels (rotated) in the left gutters of the first
column. Text is drawn with a built-in 3x5 bitmap font so the output does
not depend on system fonts.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

_GLYPHS = {
    "0": "111101101101111", "1": "010110010010111", "2": "111001111100111", "3": "111001111001111",
    "4": "101101111001001", "5": "111100111001111", "6": "111100111101111", "7": "111001001010010",
    "8": "111101111101111", "9": "111101111001111",
    "a": "010101111101101", "b": "110101110101110", "c": "011100100100011", "d": "110101101101110",
    "e": "111100110100111", "f": "111100110100100", "g": "011100101101011", "h": "101101111101101",
    "i": "111010010010111", "j": "001001001101010", "k": "101101110101101", "l": "100100100100111",
    "m": "101111111101101", "n": "110101101101101", "o": "010101101101010", "p": "110101110100100",
    "q": "010101101110011", "r": "110101110101101", "s": "011100010001110", "t": "111010010010010",
    "u": "101101101101111", "v": "101101101101010", "w": "101101111111101", "x": "101101010101101",
    "y": "101101010010010", "z": "111001010100111",
    ":": "000010000010000", "/": "001001010100100", "-": "000000111000000", "_": "000000000000111",
    ".": "000000000000010", "=": "000111000111000", " ": "000000000000000", "(": "010100100100010",
    ")": "010001001001010", ",": "000000000010100", "+": "000010111010000", "?": "111001010000010",
}
GLYPH_W, GLYPH_H, ADVANCE = 3, 5, 4

BACKGROUND = 255
INK = 0
PLACEHOLDER = 128


def text_bitmap(text: str) -> np.ndarray:
    """Boolean (5, 4*len-1) bitmap of ``text``; unknown characters become '?'."""
    if not text:
        return np.zeros((GLYPH_H, 0), bool)
    out = np.zeros((GLYPH_H, ADVANCE * len(text) - 1), bool)
    for i, ch in enumerate(text.lower()):
        bits = _GLYPHS.get(ch, _GLYPHS["?"])
        out[:, i * ADVANCE : i * ADVANCE + GLYPH_W] = np.array([b == "1" for b in bits]).reshape(GLYPH_H, GLYPH_W)
    return out


def abbreviate(label: str) -> str:
    return label.replace("branch", "b").replace("mixed", "m")


def _stamp(canvas: np.ndarray, bitmap: np.ndarray, y: int, x: int, max_w: int, max_h: int) -> None:
    bm = bitmap[:max_h, :max_w]
    canvas[y : y + bm.shape[0], x : x + bm.shape[1]][bm] = INK


def compose(
    cells: list[list[np.ndarray | None]],
    row_labels: list[str] | None = None,
    col_labels: list[str] | None = None,
    gutter: int = 12,
) -> np.ndarray:
    """Place (H, W, 3) uint8 cells row-major; ``None`` cells become a gray
    placeholder with a cross. Returns the (rows*(c+g), cols*(c+g), 3) canvas."""
    rows = len(cells)
    cols = max((len(r) for r in cells), default=0)
    present = [c for r in cells for c in r if c is not None]
    if rows == 0 or cols == 0:
        raise ValueError("montage has no cells")
    if not present:
        raise ValueError("montage has only placeholders")
    size = present[0].shape[0]
    for c in present:
        if c.shape != (size, size, 3):
            raise ValueError(f"cells must all be {size}x{size} RGB, got {c.shape}")
    step = size + gutter
    canvas = np.full((rows * step, cols * step, 3), BACKGROUND, np.uint8)
    for r, row in enumerate(cells):
        for c in range(cols):
            img = row[c] if c < len(row) else None
            y, x = r * step + gutter, c * step + gutter
            if img is None:
                ph = np.full((size, size, 3), PLACEHOLDER, np.uint8)
                diag = np.arange(size)
                ph[diag, diag] = INK
                ph[diag, size - 1 - diag] = INK
                img = ph
            canvas[y : y + size, x : x + size] = img
    pad = max((gutter - GLYPH_H) // 2, 0)
    for c, label in enumerate(col_labels or []):
        _stamp(canvas, text_bitmap(label), pad, c * step + gutter, size, gutter)
    for r, label in enumerate(row_labels or []):
        rotated = np.rot90(text_bitmap(label))  # reads bottom to top
        y0 = r * step + gutter + max(size - rotated.shape[0], 0)
        _stamp(canvas, rotated, y0, pad, gutter, size)
    return canvas


def load_cell(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def save_png(canvas: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(canvas).save(tmp, format="PNG")
    tmp.replace(path)
    return path
