"""Corpus ingestion, stratified splitting, augmentation and batch generation."""
from __future__ import annotations

import csv
import itertools
import json
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageError, ParameterError, ValidationError
from .model import CLASS_NAMES
from .tensor import Rng, Stream, derive_seed

REQUIRED_COLUMNS = ("image_id", "clothing", "gender")


@dataclass(frozen=True)
class IndexRow:
    image_id: str
    clothing: str
    gender: str | None


def _normalise_gender(value: str) -> str | None:
    for name in CLASS_NAMES:
        if value.strip().lower() == name.lower():
            return name
    return None


def load_index(csv_path, require_gender: bool = True) -> list[IndexRow]:
    """Read a label index with header ``image_id,clothing,gender``.

    Rows are numbered from 1 (the first line after the header) in error
    messages. With ``require_gender=False`` a missing gender column is
    allowed and rows carry ``gender=None`` until :func:`derive_gender`.
    """
    path = Path(csv_path)
    try:
        fh = path.open(newline="", encoding="utf-8-sig")
    except OSError as exc:
        raise OSError(f"cannot read label index {path}: {exc.strerror or exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        required = REQUIRED_COLUMNS if require_gender else REQUIRED_COLUMNS[:2]
        missing = [c for c in required if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = []
        for n, rec in enumerate(reader, start=1):
            gender = None
            if "gender" in header:
                raw = rec.get("gender") or ""
                gender = _normalise_gender(raw)
                if gender is None and (require_gender or raw.strip()):
                    raise ValidationError(
                        f"{path}: row {n}: unknown gender {raw!r} (expected one of {list(CLASS_NAMES)})")
            image_id = (rec.get("image_id") or "").strip()
            if not image_id:
                raise ValidationError(f"{path}: row {n}: empty image_id")
            rows.append(IndexRow(image_id, (rec.get("clothing") or "").strip(), gender))
    return rows


def class_distribution(rows: Sequence[IndexRow]) -> dict[str, tuple[int, float]]:
    counts: dict[str, int] = {}
    for row in rows:
        counts[row.gender] = counts.get(row.gender, 0) + 1
    total = len(rows)
    return {g: (c, c / total) for g, c in sorted(counts.items(), key=lambda kv: str(kv[0]))}


def derive_gender(rows: Sequence[IndexRow], mapping: Mapping[str, str]) -> list[IndexRow]:
    """Fill (or override) each row's gender from a clothing -> gender table."""
    out = []
    for row in rows:
        if row.clothing not in mapping:
            raise ValidationError(f"clothing style {row.clothing!r} has no gender mapping")
        gender = _normalise_gender(mapping[row.clothing])
        if gender is None:
            raise ValidationError(f"mapping for {row.clothing!r} gives unknown gender {mapping[row.clothing]!r}")
        out.append(IndexRow(row.image_id, row.clothing, gender))
    return out


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "train": list(self.train),
                           "val": list(self.val), "test": list(self.test)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        d = json.loads(text)
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]), int(d["seed"]))


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer apportionment of ``total``; ties go to the earlier slot."""
    exact = [total * f for f in fractions]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _cell_counts(group_sizes: list[int], fractions: Sequence[float]) -> list[list[int]]:
    """Per-(group, split) counts whose rows sum to the group sizes, whose
    columns sum to the largest-remainder split totals, and whose cells are
    each the floor or ceiling of the exact proportional share."""
    totals = largest_remainder(sum(group_sizes), fractions)
    exact = [[g * f for f in fractions] for g in group_sizes]
    base = [[math.floor(e) for e in row] for row in exact]
    row_need = [g - sum(b) for g, b in zip(group_sizes, base)]
    col_need = [t - sum(b[s] for b in base) for s, t in enumerate(totals)]
    cells = [(g, s) for g in range(len(group_sizes)) for s in range(len(fractions))
             if exact[g][s] > base[g][s]]
    if len(cells) > 20:
        raise ParameterError("too many classes x splits for exact stratified rounding")
    best, best_score = None, None
    for pick in itertools.product((0, 1), repeat=len(cells)):
        rows = [0] * len(group_sizes)
        cols = [0] * len(fractions)
        for on, (g, s) in zip(pick, cells):
            rows[g] += on
            cols[s] += on
        if rows != row_need or cols != col_need:
            continue
        score = sum(exact[g][s] - base[g][s] for on, (g, s) in zip(pick, cells) if on)
        if best_score is None or score > best_score:
            best, best_score = pick, score
    if best is None:
        raise ParameterError("no stratified allocation satisfies the split totals")
    for on, (g, s) in zip(best, cells):
        base[g][s] += on
    return base


def stratified_split(rows: Sequence[IndexRow], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    """Shuffle each gender with a seeded stream, then cut it into
    train/val/test so split sizes and per-gender shares are both within one
    row of exact proportionality."""
    # exact decimal fractions keep 1000 * 0.8 from rounding to 800.0000001
    fractions = tuple(Fraction(repr(float(f))) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) != 1:
        raise ParameterError(
            f"split fractions must be three non-negative numbers summing to 1, got {[float(f) for f in fractions]}")
    groups: dict[str, list[int]] = {}
    for i, row in enumerate(rows):
        groups.setdefault(row.gender, []).append(i)
    keys = sorted(groups, key=str)
    counts = _cell_counts([len(groups[k]) for k in keys], fractions)
    rng = Rng(seed, Stream.SPLIT)
    parts: list[list[int]] = [[], [], []]
    for key, cell in zip(keys, counts):
        members = groups[key]
        order = [members[j] for j in rng.permutation(len(members))]
        start = 0
        for s, c in enumerate(cell):
            parts[s].extend(order[start:start + c])
            start += c
    return SplitAssignment(*(tuple(sorted(p)) for p in parts), seed=seed)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

_8BIT_MODES = {"RGB", "RGBA", "L", "LA", "P", "PA"}


def _bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample ``img[C, H, W]`` at float coordinates with edge clamping."""
    _, h, w = img.shape
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(sy).astype(np.intp), max(h - 2, 0))
    x0 = np.minimum(np.floor(sx).astype(np.intp), max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0).astype(img.dtype)
    wx = (sx - x0).astype(img.dtype)
    top = img[:, y0, x0] * (1 - wx) + img[:, y0, x1] * wx
    bottom = img[:, y1, x0] * (1 - wx) + img[:, y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centre bilinear resize of ``img[C, H, W]`` to ``size=(H', W')``."""
    _, h, w = img.shape
    th, tw = size
    if (h, w) == (th, tw):
        return img.copy()
    sy = (np.arange(th) + 0.5) * (h / th) - 0.5
    sx = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    yy, xx = np.meshgrid(sy, sx, indexing="ij")
    return _bilinear_sample(img, yy, xx)


def load_image(path, target: tuple[int, int] = (180, 180)) -> np.ndarray:
    """Decode an 8-bit raster image into float32 ``[3, H, W]`` in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in _8BIT_MODES:
                raise ImageError(f"{path}: unsupported image mode {im.mode!r} (need 8-bit RGB/RGBA)")
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageError):
            raise
        raise ImageError(f"{path}: cannot read image ({exc})") from exc
    img = arr.transpose(2, 0, 1) / np.float32(255.0)
    img = resize_bilinear(img, tuple(target))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    horizontal_flip_prob: float = 0.5
    rotation_deg_max: float = 15.0
    shift_frac_max: float = 0.1
    zoom_frac_max: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ParameterError(f"flip probability must be in [0, 1], got {self.horizontal_flip_prob}")
        for name in ("rotation_deg_max", "shift_frac_max", "zoom_frac_max"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.zoom_frac_max >= 1.0:
            raise ParameterError(f"zoom_frac_max must be < 1, got {self.zoom_frac_max}")


def augment(img: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """Random flip, rotation, shift and zoom, in that order.

    Always consumes five uniform draws so the stream position does not
    depend on the configuration.
    """
    u = rng.uniform(5)
    if not cfg.enabled:
        return img.copy()
    out = img[:, :, ::-1] if u[0] < cfg.horizontal_flip_prob else img
    theta = math.radians((2 * u[1] - 1) * cfg.rotation_deg_max)
    _, h, w = img.shape
    tx = (2 * u[2] - 1) * cfg.shift_frac_max * w
    ty = (2 * u[3] - 1) * cfg.shift_frac_max * h
    zoom = 1.0 + (2 * u[4] - 1) * cfg.zoom_frac_max
    if theta == 0.0 and tx == 0.0 and ty == 0.0 and zoom == 1.0:
        return np.ascontiguousarray(out)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # invert the forward map: zoom, then shift, then rotation about the centre
    u_ = (xx - cx) / zoom - tx
    v_ = (yy - cy) / zoom - ty
    c, s = math.cos(theta), math.sin(theta)
    sx = c * u_ + s * v_ + cx
    sy = -s * u_ + c * v_ + cy
    res = _bilinear_sample(np.ascontiguousarray(out), sy, sx)
    return np.clip(res, 0.0, 1.0).astype(img.dtype)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    row_ids: tuple[int, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.row_ids)


ImageLoader = Callable[[IndexRow], np.ndarray]


class ImageSource:
    """Loads ``data_dir / image_id`` at a fixed size, caching decoded arrays."""

    def __init__(self, data_dir, size: int | tuple[int, int] = 180, cache: bool = True):
        self.data_dir = Path(data_dir)
        self.size = (size, size) if isinstance(size, int) else tuple(size)
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def __call__(self, row: IndexRow) -> np.ndarray:
        if self._cache is not None and row.image_id in self._cache:
            return self._cache[row.image_id]
        img = load_image(self.data_dir / row.image_id, self.size)
        if self._cache is not None:
            self._cache[row.image_id] = img
        return img

    def check(self, rows: Sequence[IndexRow]) -> None:
        """Raise FileNotFoundError naming the first row whose image is missing."""
        for n, row in enumerate(rows, start=1):
            if not (self.data_dir / row.image_id).is_file():
                raise FileNotFoundError(f"row {n}: image {self.data_dir / row.image_id} not found")


class ArraySource:
    """In-memory loader keyed by image id."""

    def __init__(self, images: Mapping[str, np.ndarray]):
        self.images = dict(images)

    def __call__(self, row: IndexRow) -> np.ndarray:
        return self.images[row.image_id]


def class_index(gender: str, class_names: Sequence[str] = CLASS_NAMES) -> int:
    return list(class_names).index(gender)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def batches(rows: Sequence[IndexRow], batch_size: int, loader: ImageLoader, shuffle: bool = False,
            seed: int = 0, augment_cfg: AugmentConfig | None = None, epoch: int = 0,
            row_ids: Sequence[int] | None = None, class_names=CLASS_NAMES) -> Iterator[Batch]:
    """Yield ``ceil(n / batch_size)`` batches; order and augmentation draws
    are fixed by ``(seed, epoch)``."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    ids = list(range(len(rows))) if row_ids is None else list(row_ids)
    if len(ids) != len(rows):
        raise ParameterError("row_ids must align with rows")
    epoch_seed = derive_seed(seed, epoch)
    order = Rng(epoch_seed, Stream.SHUFFLE).permutation(len(rows)) if shuffle else range(len(rows))
    order = list(order)
    aug_rng = Rng(epoch_seed, Stream.AUGMENT) if augment_cfg is not None else None
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        images = []
        for i in chunk:
            img = loader(rows[i])
            images.append(augment(img, augment_cfg, aug_rng) if aug_rng is not None else img)
        targets = np.array([[class_index(rows[i].gender, class_names)] for i in chunk], dtype=np.float32)
        yield Batch(np.stack(images).astype(np.float32), targets, tuple(ids[i] for i in chunk))
