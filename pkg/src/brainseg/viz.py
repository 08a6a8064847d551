"""Qualitative panels: input slice, pseudo ground truth, prediction, probability heatmaps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import OutOfRange, ShapeMismatch

# fixed class colors: background black, gray matter red, white matter green
CLASS_COLORS = {0: (0, 0, 0), 1: (255, 0, 0), 2: (0, 255, 0)}

CELL_MARGIN = 8
CAPTION_HEIGHT = 16
PANEL_CAPTIONS = (
    "input",
    "pseudo ground truth",
    "prediction",
    "p(background)",
    "p(gray matter)",
    "p(white matter)",
)


def _to_gray_rgb(image01: np.ndarray) -> np.ndarray:
    gray = np.clip(np.rint(np.asarray(image01) * 255.0), 0, 255).astype(np.uint8)
    return np.stack([gray, gray, gray], axis=-1)


def render_mask(label: np.ndarray) -> np.ndarray:
    """Solid class-color rendering of a label mask (black background)."""
    label = np.asarray(label)
    out = np.zeros((*label.shape, 3), dtype=np.uint8)
    for cls, color in CLASS_COLORS.items():
        out[label == cls] = color
    return out


def render_overlay(image01: np.ndarray, label: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Tint tissue pixels with their class color over the grayscale slice.

    Background pixels show the raw image unchanged.
    """
    image01 = np.asarray(image01)
    label = np.asarray(label)
    if image01.shape != label.shape:
        raise ShapeMismatch(f"image shape {image01.shape} != label shape {label.shape}")
    out = _to_gray_rgb(image01).astype(np.float64)
    for cls in (1, 2):
        sel = label == cls
        color = np.asarray(CLASS_COLORS[cls], dtype=np.float64)
        out[sel] = (1.0 - alpha) * out[sel] + alpha * color
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def render_heatmap(prob_map: np.ndarray) -> np.ndarray:
    """Monotone brightness ramp: 0.0 renders darkest, 1.0 brightest."""
    prob_map = np.asarray(prob_map)
    if prob_map.size and (prob_map.min() < 0.0 or prob_map.max() > 1.0):
        raise OutOfRange(
            f"probabilities outside [0,1]: min={prob_map.min():g} max={prob_map.max():g}"
        )
    v = np.rint(prob_map * 255.0).astype(np.uint8)
    return np.stack([v, v, v], axis=-1)


def compose_panel(image01, gt, pred, probs, out_path) -> Path:
    """Write the 2x3 qualitative grid PNG.

    Top row: input slice, ground-truth mask, predicted mask. Bottom row:
    per-class probability heatmaps. Identical inputs produce byte-identical
    files.
    """
    image01 = np.asarray(image01)
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    probs = np.asarray(probs)
    if not (image01.shape == gt.shape == pred.shape == probs.shape[1:]) or probs.shape[0] != 3:
        raise ShapeMismatch(
            f"panel inputs misaligned: image {image01.shape}, gt {gt.shape}, "
            f"pred {pred.shape}, probs {probs.shape}"
        )

    cells = [
        _to_gray_rgb(image01),
        render_mask(gt),
        render_mask(pred),
        render_heatmap(probs[0]),
        render_heatmap(probs[1]),
        render_heatmap(probs[2]),
    ]
    ch, cw = image01.shape
    width = 3 * cw + 4 * CELL_MARGIN
    height = 2 * (ch + CAPTION_HEIGHT) + 3 * CELL_MARGIN
    canvas = Image.new("RGB", (width, height), (30, 30, 30))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for i, (cell, caption) in enumerate(zip(cells, PANEL_CAPTIONS)):
        row, col = divmod(i, 3)
        x = CELL_MARGIN + col * (cw + CELL_MARGIN)
        y = CELL_MARGIN + row * (ch + CAPTION_HEIGHT + CELL_MARGIN)
        draw.text((x, y + 2), caption, fill=(220, 220, 220), font=font)
        canvas.paste(Image.fromarray(cell), (x, y + CAPTION_HEIGHT))

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path, format="PNG")
    return out_path


def panel_filename(model_id: str, plane: str, subject_id: str, index: int) -> str:
    return f"{model_id}_{plane}_{subject_id}_{index:04d}_panel.png"


def cell_region(row: int, col: int, cell_h: int, cell_w: int) -> tuple[int, int, int, int]:
    """Pixel box (left, top, right, bottom) of a grid cell's image area."""
    x = CELL_MARGIN + col * (cell_w + CELL_MARGIN)
    y = CELL_MARGIN + row * (cell_h + CAPTION_HEIGHT + CELL_MARGIN) + CAPTION_HEIGHT
    return (x, y, x + cell_w, y + cell_h)
