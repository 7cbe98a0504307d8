"""Metrics CSV, training-log CSV, SVG scatter figures, and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import MetricsRow

METRICS_HEADER = ("metric", "value", "n_x", "n_y", "kernel", "seed")


def _fmt(value) -> str:
    # repr gives the shortest round-trip form for floats: stable and parseable
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for r in rows:
                writer.writerow(
                    [r.metric, _fmt(float(r.value)), r.n_x, r.n_y, r.kernel, r.seed]
                )
    except OSError as exc:
        raise OSError(f"failed to write metrics csv {path}: {exc}") from exc


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [
            MetricsRow(m, float(v), int(nx), int(ny), k, s)
            for m, v, nx, ny, k, s in reader
        ]


def write_trainlog_csv(path, log) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(log.COLUMNS)
        for row in log.rows:
            writer.writerow([_fmt(row[c]) for c in log.COLUMNS])


@dataclass
class FigureSpec:
    """Scatter layers rendered into one self-contained SVG."""

    layers: list[tuple[str, np.ndarray]]
    out_path: str
    x_range: tuple[float, float] = (-3.5, 3.5)
    y_range: tuple[float, float] = (-3.5, 3.5)
    size: int = 480
    point_radius: float = 1.6

    PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def render_scatter_svg(spec: FigureSpec) -> None:
    w = h = spec.size
    x0, x1 = spec.x_range
    y0, y1 = spec.y_range

    def sx(v):
        return (v - x0) / (x1 - x0) * w

    def sy(v):
        return h - (v - y0) / (y1 - y0) * h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
    ]
    for i, (label, pts) in enumerate(spec.layers):
        color = FigureSpec.PALETTE[i % len(FigureSpec.PALETTE)]
        parts.append(f'<g id="layer-{i}" data-label="{label}" fill="{color}" fill-opacity="0.6">')
        for x, y in np.atleast_2d(pts):
            parts.append(
                f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="{spec.point_radius}"/>'
            )
        parts.append("</g>")
        parts.append(
            f'<text x="8" y="{16 * (i + 1)}" fill="{color}" font-size="12" '
            f'font-family="sans-serif">{label}</text>'
        )
    parts.append("</svg>")
    try:
        Path(spec.out_path).write_text("\n".join(parts))
    except OSError as exc:
        raise OSError(f"failed to write figure {spec.out_path}: {exc}") from exc


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def write_manifest(path, config: dict, seed: int, command: str, overrides: list[str]) -> None:
    import platform

    from . import __version__

    manifest = {
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "command": command,
        "overrides": overrides,
        "versions": {
            "package": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def atomic_replace_write(path, write_fn) -> None:
    """Write to a temp file then swap in: outputs are replaced whole, never
    mutated in place."""
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
