"""Training-curve SVG: mean episode return against iteration, one line per policy."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..errors import FormatError, StorageError

logger = logging.getLogger(__name__)

WIDTH = 800
HEIGHT = 480
MARGIN_LEFT = 80
MARGIN_RIGHT = 150
MARGIN_TOP = 40
MARGIN_BOTTOM = 60
TICKS = 5
REQUIRED_COLUMNS = ("iteration", "policy_index", "mean_return")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _span(lo: float, hi: float) -> Tuple[float, float]:
    if hi > lo:
        return lo, hi
    return lo - 0.5, hi + 0.5


@dataclass(frozen=True)
class ChartLayout:
    """Affine map from data space to the plot area; pixel y grows downward."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    left: float = MARGIN_LEFT
    right: float = WIDTH - MARGIN_RIGHT
    top: float = MARGIN_TOP
    bottom: float = HEIGHT - MARGIN_BOTTOM

    @classmethod
    def fit(cls, xs: Sequence[float], ys: Sequence[float]) -> "ChartLayout":
        x_min, x_max = _span(float(np.min(xs)), float(np.max(xs)))
        y_min, y_max = _span(float(np.min(ys)), float(np.max(ys)))
        return cls(x_min=x_min, x_max=x_max, y_min=y_min, y_max=y_max)

    def x_to_px(self, x: float) -> float:
        return self.left + (x - self.x_min) / (self.x_max - self.x_min) * (self.right - self.left)

    def y_to_px(self, y: float) -> float:
        return self.bottom - (y - self.y_min) / (self.y_max - self.y_min) * (self.bottom - self.top)


class SvgCanvas:
    def __init__(self, width: int = WIDTH, height: int = HEIGHT):
        self.parts: List[str] = [
            '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        ]

    def line(self, x1: float, y1: float, x2: float, y2: float, stroke: str = "black", extra: str = "") -> None:
        self.parts.append(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="{stroke}" {extra}/>'
        )

    def polyline(self, points: Sequence[Tuple[float, float]], stroke: str, label: str) -> None:
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
        self.parts.append(
            f'<polyline class="policy" data-label="{label}" points="{coords}" '
            f'fill="none" stroke="{stroke}" stroke-width="1.5"/>'
        )

    def circle(self, x: float, y: float, fill: str, label: str, r: float = 4.0) -> None:
        self.parts.append(
            f'<circle class="policy" data-label="{label}" cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{fill}"/>'
        )

    def text(self, x: float, y: float, content: str, extra: str = "", size: int = 12) -> None:
        self.parts.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-family="sans-serif" font-size="{size}" {extra}>{content}</text>'
        )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def read_metrics(csv_path: Union[str, Path]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(csv_path)
    except OSError as exc:
        raise StorageError(f"cannot read metrics {csv_path}: {exc}") from exc
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        raise FormatError(f"{csv_path} is not a metrics CSV: {exc}") from exc
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise FormatError(f"{csv_path} is missing columns: {', '.join(missing)}")
    if frame.empty:
        raise FormatError(f"{csv_path} has no data rows")
    return frame


def render_curves(frame: pd.DataFrame, title: str = "Mean episode return") -> str:
    layout = ChartLayout.fit(frame["iteration"].to_numpy(float), frame["mean_return"].to_numpy(float))
    canvas = SvgCanvas()
    canvas.text(WIDTH / 2, MARGIN_TOP / 2 + 4, title, 'text-anchor="middle"', size=14)

    canvas.line(layout.left, layout.bottom, layout.right, layout.bottom)
    canvas.line(layout.left, layout.top, layout.left, layout.bottom)
    for x in np.linspace(layout.x_min, layout.x_max, TICKS):
        px = layout.x_to_px(x)
        canvas.line(px, layout.bottom, px, layout.bottom + 5)
        canvas.text(px, layout.bottom + 18, f"{x:.4g}", 'text-anchor="middle"')
    for y in np.linspace(layout.y_min, layout.y_max, TICKS):
        py = layout.y_to_px(y)
        canvas.line(layout.left - 5, py, layout.left, py)
        canvas.text(layout.left - 8, py + 4, f"{y:.4g}", 'text-anchor="end"')
    canvas.text((layout.left + layout.right) / 2, HEIGHT - 15, "Iteration", 'text-anchor="middle"')
    canvas.text(20, (layout.top + layout.bottom) / 2, "Mean return",
                f'text-anchor="middle" transform="rotate(-90 20 {(layout.top + layout.bottom) / 2:.2f})"')

    for n, (policy, rows) in enumerate(frame.sort_values(["policy_index", "iteration"]).groupby("policy_index")):
        color = PALETTE[n % len(PALETTE)]
        label = f"Policy {int(policy) + 1}"
        points = [(layout.x_to_px(x), layout.y_to_px(y)) for x, y in zip(rows["iteration"], rows["mean_return"])]
        if len(points) == 1:
            canvas.circle(*points[0], fill=color, label=label)
        else:
            canvas.polyline(points, stroke=color, label=label)
        legend_y = layout.top + 10 + 20 * n
        canvas.line(layout.right + 15, legend_y, layout.right + 40, legend_y, stroke=color, extra='stroke-width="2"')
        canvas.text(layout.right + 46, legend_y + 4, label)
    return canvas.render()


def emit_plot(csv_path: Union[str, Path], svg_path: Union[str, Path]) -> Path:
    frame = read_metrics(csv_path)
    svg = render_curves(frame)
    out = Path(svg_path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(svg, encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write plot {out}: {exc}") from exc
    logger.info("wrote %s (%d policies)", out, frame["policy_index"].nunique())
    return out
