"""Synthetic gesture glyphs: the desk-scale stand-in for hand photographs.

Each gesture class is a small connected bitmap drawn bright on a dark
textured background, so a threshold detector can recover it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GLYPH_THRESHOLD = 0.6
BACKGROUND_MAX = 0.45

_BITMAPS = {
    "phone call": [
        "#...#",
        "##.##",
        ".###.",
        ".###.",
        ".###.",
    ],
    "four": [
        "#.#.#",
        "#.#.#",
        "#####",
        "#####",
        ".###.",
    ],
    "like": [
        "..#..",
        ".##..",
        "#####",
        "#####",
        "####.",
    ],
    "mute": [
        "..#..",
        "..#..",
        "#####",
        "#####",
        "#####",
    ],
    "ok": [
        ".###.",
        "#..##",
        ".####",
        "..###",
        "..##.",
    ],
    "palm": [
        "#.#.#",
        "#####",
        "#####",
        "#####",
        ".###.",
    ],
}

GESTURES: tuple[str, ...] = tuple(_BITMAPS)
TEXTURES: tuple[str, ...] = ("plain", "striped", "checkered", "noisy")
SIZE_WORDS = {1: "small", 2: "large"}
_ROW_WORDS = ("top", "middle", "bottom")
_COL_WORDS = ("left", "center", "right")


def glyph_mask(gesture: str) -> np.ndarray:
    try:
        rows = _BITMAPS[gesture]
    except KeyError:
        raise KeyError(f"unknown gesture {gesture!r}; known: {', '.join(GESTURES)}") from None
    return np.array([[c == "#" for c in r] for r in rows], dtype=bool)


def slug(gesture: str) -> str:
    return gesture.replace(" ", "_")


def position_phrase(cy: float, cx: float, size: int) -> str:
    """Coarse 3x3 location of a point in an image of side `size`."""
    r = _ROW_WORDS[min(2, int(3 * cy / size))]
    c = _COL_WORDS[min(2, int(3 * cx / size))]
    if r == "middle" and c == "center":
        return "center"
    if r == "middle":
        return f"middle {c}"
    return f"{r} {c}" if c != "center" else r


@dataclass(frozen=True)
class GlyphScene:
    image: np.ndarray  # [1, H, W] float32
    gesture: str
    scale: int
    top: int
    left: int
    texture: str
    mask: np.ndarray  # [H, W] bool, glyph pixels

    @property
    def center(self) -> tuple[float, float]:
        """Glyph centroid (row, col) in pixel-centre coordinates."""
        rows, cols = np.nonzero(self.mask)
        return float(rows.mean()), float(cols.mean())

    def caption(self) -> str:
        cy, cx = self.center
        where = position_phrase(cy + 0.5, cx + 0.5, self.mask.shape[0])
        return f"a {SIZE_WORDS[self.scale]} glyph at the {where} on a {self.texture} background"


def _texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.05, 0.25)
    if kind == "plain":
        bg = np.full((size, size), base)
    elif kind == "striped":
        period = int(rng.integers(2, 5))
        rows = (np.arange(size) // (period // 2 or 1)) % 2
        bg = base + 0.15 * rows[:, None] * np.ones((1, size))
    elif kind == "checkered":
        cell = int(rng.integers(2, 4))
        idx = np.arange(size) // cell
        bg = base + 0.15 * ((idx[:, None] + idx[None, :]) % 2)
    elif kind == "noisy":
        bg = base + rng.uniform(0.0, 0.18, size=(size, size))
    else:
        raise KeyError(f"unknown texture {kind!r}")
    return np.clip(bg, 0.0, BACKGROUND_MAX)


def render_glyph(
    gesture: str,
    size: int = 16,
    rng: np.random.Generator | None = None,
    *,
    scale: int | None = None,
    top: int | None = None,
    left: int | None = None,
    texture: str | None = None,
) -> GlyphScene:
    """Draw one glyph at a random (or given) scale, position and background."""
    rng = np.random.default_rng() if rng is None else rng
    mask = glyph_mask(gesture)
    if scale is None:
        scale = int(rng.integers(1, 3)) if size >= 2 * mask.shape[0] + 2 else 1
    mask = np.kron(mask, np.ones((scale, scale), dtype=bool))
    gh, gw = mask.shape
    if gh > size or gw > size:
        raise ValueError(f"glyph of {gh}x{gw} px does not fit a {size}px image")
    if texture is None:
        texture = TEXTURES[int(rng.integers(len(TEXTURES)))]
    bg = _texture(texture, size, rng)
    if top is None:
        top = int(rng.integers(0, size - gh + 1))
    if left is None:
        left = int(rng.integers(0, size - gw + 1))
    full = np.zeros((size, size), dtype=bool)
    full[top:top + gh, left:left + gw] = mask
    ink = rng.uniform(0.8, 1.0)
    img = np.where(full, ink, bg).astype(np.float32)
    return GlyphScene(img[None], gesture, scale, top, left, texture, full)
