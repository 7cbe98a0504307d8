"""Analytic 2-D target distributions used to pretrain the base generator."""

from __future__ import annotations

import numpy as np

TARGETS = ("eight-gaussians", "two-moons", "checkerboard")

EIGHT_GAUSSIANS_RADIUS = 2.0
EIGHT_GAUSSIANS_STD = 0.15
# mode centers sit strictly inside quadrants (two per quadrant)
EIGHT_GAUSSIANS_ANGLES = np.deg2rad(22.5 + 45.0 * np.arange(8))


def sample_target(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if name == "eight-gaussians":
        return sample_eight_gaussians(n, rng)
    if name == "two-moons":
        return sample_two_moons(n, rng)
    if name == "checkerboard":
        return sample_checkerboard(n, rng)
    raise ValueError(f"unknown target {name!r}")


def sample_eight_gaussians(n: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.integers(0, 8, size=n)
    centers = EIGHT_GAUSSIANS_RADIUS * np.stack(
        [np.cos(EIGHT_GAUSSIANS_ANGLES), np.sin(EIGHT_GAUSSIANS_ANGLES)], axis=1
    )
    return centers[idx] + EIGHT_GAUSSIANS_STD * rng.standard_normal((n, 2))


def sample_two_moons(n: int, rng: np.random.Generator, noise: float = 0.1) -> np.ndarray:
    t = rng.uniform(0, np.pi, size=n)
    upper = rng.integers(0, 2, size=n).astype(bool)
    x = np.where(upper, np.cos(t), 1.0 - np.cos(t))
    y = np.where(upper, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([x, y], axis=1) + noise * rng.standard_normal((n, 2))
    return 2.0 * (pts - np.array([0.5, 0.25]))


def sample_checkerboard(n: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.uniform(-2, 2, size=n)
    offset = rng.integers(0, 2, size=n) * 2.0
    y = rng.uniform(0, 1, size=n) + offset + np.floor(x) % 2
    return np.stack([x, (y % 4) - 2.0], axis=1)
