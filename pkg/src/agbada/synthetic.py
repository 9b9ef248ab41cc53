"""Generated two-class image corpora with a class-correlated colour/shape cue.

Female-labelled images carry a warm disc, Male-labelled images a cool
vertical band, both over a noisy background with random placement. Used for
smoke tests and the end-to-end check; not a stand-in for real attire photos.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .data import IndexRow
from .tensor import Rng, Stream

STYLES = {"Female": "Synthetic Wrapper", "Male": "Synthetic Agbada"}


def render_image(gender: str, size: int, rng: Rng) -> np.ndarray:
    """One ``[H, W, 3]`` uint8 image."""
    u = rng.uniform(8)
    noise = rng.uniform(size * size * 3).reshape(size, size, 3)
    img = 0.35 + 0.25 * u[0] + 0.15 * (noise - 0.5)
    yy, xx = np.mgrid[0:size, 0:size] / size
    cy, cx = 0.3 + 0.4 * u[1], 0.3 + 0.4 * u[2]
    if gender == "Female":
        radius = 0.15 + 0.1 * u[3]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < radius ** 2
        color = np.array([0.8 + 0.2 * u[4], 0.2 + 0.3 * u[5], 0.15 + 0.2 * u[6]])
    else:
        half = 0.08 + 0.06 * u[3]
        mask = (np.abs(xx - cx) < half) & (np.abs(yy - 0.5) < 0.3 + 0.1 * u[7])
        color = np.array([0.15 + 0.2 * u[4], 0.25 + 0.3 * u[5], 0.8 + 0.2 * u[6]])
    img[mask] = 0.8 * color + 0.2 * img[mask]
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def make_rows(n: int, female_fraction: float = 0.625) -> list[IndexRow]:
    n_female = round(n * female_fraction)
    rows = []
    for i in range(n):
        gender = "Female" if i < n_female else "Male"
        rows.append(IndexRow(f"{STYLES[gender].replace(' ', '_')}_{i + 1}.png", STYLES[gender], gender))
    return rows


def write_index(rows, csv_path) -> None:
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "clothing", "gender"])
        for row in rows:
            writer.writerow([row.image_id, row.clothing, row.gender])


def make_corpus(out_dir, n: int = 400, size: int = 180, female_fraction: float = 0.625,
                seed: int = 0) -> tuple[Path, Path, list[IndexRow]]:
    """Write ``images/*.png`` and ``index.csv`` under ``out_dir``.

    Returns ``(image_dir, index_csv, rows)``.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rows = make_rows(n, female_fraction)
    rng = Rng(seed, Stream.DATA)
    for row in rows:
        Image.fromarray(render_image(row.gender, size, rng)).save(image_dir / row.image_id)
    index_csv = out_dir / "index.csv"
    write_index(rows, index_csv)
    return image_dir, index_csv, rows
