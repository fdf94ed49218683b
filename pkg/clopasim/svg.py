from collections.abc import Mapping
from xml.sax.saxutils import escape

from clopasim.config import ConfigError
from clopasim.evaluation import Trajectory
from clopasim.schema import METRIC_SCHEMA

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"]

MARGIN_LEFT = 56
MARGIN_RIGHT = 16
MARGIN_TOP = 32
MARGIN_BOTTOM = 44

DEFAULT_PLOT_SIZE = "640x400"


def parse_svg_dimensions(size: str) -> tuple[int, int]:
    parts = size.lower().split("x")
    try:
        width, height = int(parts[0]), int(parts[1])
    except (IndexError, ValueError):
        raise ConfigError("plot_size", f"expected WIDTHxHEIGHT, got {size!r}")
    if len(parts) != 2 or width <= MARGIN_LEFT + MARGIN_RIGHT or height <= MARGIN_TOP + MARGIN_BOTTOM:
        raise ConfigError("plot_size", f"plot size {size!r} is too small")
    return width, height


def _fmt(value: float) -> str:
    return f"{value:.2f}"


class _Frame:
    """Maps (t, value) into pixel space."""

    def __init__(self, width: int, height: int, length: int, y_max: float):
        self.x0 = MARGIN_LEFT
        self.x1 = width - MARGIN_RIGHT
        self.y0 = height - MARGIN_BOTTOM
        self.y1 = MARGIN_TOP
        self.length = max(length, 2)
        self.y_max = y_max

    def x(self, t: float) -> float:
        return self.x0 + (t - 1) / (self.length - 1) * (self.x1 - self.x0)

    def y(self, value: float) -> float:
        return self.y0 - value / self.y_max * (self.y0 - self.y1)


def _step_path(frame: _Frame, trajectory: Trajectory) -> str:
    values = trajectory.values
    parts = [f"M{_fmt(frame.x(1))},{_fmt(frame.y(values[0]))}"]
    for t in range(2, len(values) + 1):
        if values[t - 1] != values[t - 2]:
            parts.append(f"H{_fmt(frame.x(t))}V{_fmt(frame.y(values[t - 1]))}")
    parts.append(f"H{_fmt(frame.x(len(values)))}")
    return "".join(parts)


def _ticks(length: int) -> list[int]:
    if length <= 10:
        return list(range(1, length + 1))
    step = max(1, round(length / 5))
    return sorted({1, *range(step, length + 1, step), length})


def render_trajectory_svg(
    trajectories: Mapping[str, Trajectory],
    metric: str,
    threshold: float | None = None,
    nos: Mapping[str, int | None] | None = None,
    size: str = DEFAULT_PLOT_SIZE,
    title: str = "",
) -> str:
    """Step plot of run-averaged trajectories, one line per algorithm.

    Dotted verticals mark episode completions.  ``threshold`` is drawn as a
    grey dashed horizontal; ``nos`` maps algorithm names to the sample count
    that first reached it, marked with a dashed vertical in the line colour.
    """
    width, height = parse_svg_dimensions(size)
    percent = METRIC_SCHEMA.get(metric, {}).get("scale") == "percent"
    y_max = 100.0 if percent else 1.0
    length = max((t.length for t in trajectories.values()), default=1)
    frame = _Frame(width, height, length, y_max)
    label = METRIC_SCHEMA.get(metric, {}).get("label", metric)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="Arial, sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{_fmt(width / 2)}" y="18" text-anchor="middle" font-size="13">{escape(title or label)}</text>',
    ]

    # axes
    out.append(
        f'<path d="M{_fmt(frame.x0)},{_fmt(frame.y1)}V{_fmt(frame.y0)}H{_fmt(frame.x1)}" '
        'fill="none" stroke="#333333" stroke-width="1"/>'
    )
    for i in range(5):
        value = y_max * i / 4
        y = _fmt(frame.y(value))
        out.append(f'<line x1="{_fmt(frame.x0 - 4)}" y1="{y}" x2="{_fmt(frame.x0)}" y2="{y}" stroke="#333333"/>')
        tick = f"{value:g}"
        out.append(f'<text x="{_fmt(frame.x0 - 6)}" y="{y}" text-anchor="end" dominant-baseline="middle">{tick}</text>')
    for t in _ticks(length):
        x = _fmt(frame.x(t))
        out.append(f'<line x1="{x}" y1="{_fmt(frame.y0)}" x2="{x}" y2="{_fmt(frame.y0 + 4)}" stroke="#333333"/>')
        out.append(f'<text x="{x}" y="{_fmt(frame.y0 + 16)}" text-anchor="middle">{t}</text>')
    out.append(
        f'<text x="{_fmt((frame.x0 + frame.x1) / 2)}" y="{height - 8}" text-anchor="middle">number of samples</text>'
    )
    out.append(
        f'<text x="14" y="{_fmt((frame.y0 + frame.y1) / 2)}" text-anchor="middle" '
        f'transform="rotate(-90 14 {_fmt((frame.y0 + frame.y1) / 2)})">{escape(label)}</text>'
    )

    if threshold is not None:
        y = _fmt(frame.y(threshold))
        out.append(
            f'<line x1="{_fmt(frame.x0)}" y1="{y}" x2="{_fmt(frame.x1)}" y2="{y}" '
            'stroke="#888888" stroke-dasharray="6 4"/>'
        )

    for index, (name, trajectory) in enumerate(sorted(trajectories.items())):
        colour = PALETTE[index % len(PALETTE)]
        for point in trajectory.episode_points:
            if 1 <= point <= length:
                x = _fmt(frame.x(point))
                out.append(
                    f'<line x1="{x}" y1="{_fmt(frame.y0)}" x2="{x}" y2="{_fmt(frame.y1)}" '
                    f'stroke="{colour}" stroke-opacity="0.35" stroke-dasharray="1 3"/>'
                )
        reached = (nos or {}).get(name)
        if reached is not None:
            x = _fmt(frame.x(reached))
            out.append(
                f'<line class="nos" x1="{x}" y1="{_fmt(frame.y0)}" x2="{x}" y2="{_fmt(frame.y1)}" '
                f'stroke="{colour}" stroke-dasharray="4 2"/>'
            )
        out.append(f'<path d="{_step_path(frame, trajectory)}" fill="none" stroke="{colour}" stroke-width="2"/>')
        y = MARGIN_TOP + 14 * index + 4
        out.append(
            f'<line x1="{_fmt(frame.x1 - 120)}" y1="{y}" x2="{_fmt(frame.x1 - 104)}" y2="{y}" '
            f'stroke="{colour}" stroke-width="2"/>'
        )
        out.append(f'<text x="{_fmt(frame.x1 - 100)}" y="{y}" dominant-baseline="middle">{escape(name)}</text>')

    out.append("</svg>")
    return "\n".join(out) + "\n"
