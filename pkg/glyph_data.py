"""
Pseudo-character universe and glyph rendering.

Features:
- Radicals: small stroke programs (lines / arcs) in a unit box
- Characters: 1-3 radicals placed by a layout (single, left-right,
  top-bottom, enclosure); seen/unseen split with the zero-shot premise
  (every unseen radical and layout appears in some seen character)
- Printed glyphs: deterministic 4x supersampled strokes, box-downsampled
- Handwritten glyphs: per-writer slant / thickness / stroke habits plus
  per-sample jitter, component displacement and curvature noise
- Corpus I/O: directory of PNGs + UTF-8 TSV manifest (path, category, writer)

Images are uint8 internally (0 = background, 255 = ink); tensors map them
to [-1, 1] with background exactly -1.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError
from tqdm import tqdm

logger = logging.getLogger(__name__)

LAYOUTS = ('single', 'left-right', 'top-bottom', 'enclosure')
SPLIT_SEEN, SPLIT_UNSEEN = 'seen', 'unseen'
SUPERSAMPLE = 4
STROKE_WIDTH = 0.075
SEGMENT_POINTS = 24
MIN_RASTER_SIZE = 16
OVERLAP_THRESHOLD = 0.05
MANIFEST_NAME = 'manifest.tsv'

# writer style safe ranges (keep strokes on the canvas)
SLANT_RANGE = (-0.4, 0.4)
THICKNESS_RANGE = (0.4, 2.5)
JITTER_RANGE = (0.0, 2.0)
DISPLACEMENT_RANGE = (0.0, 0.1)
CURVATURE_RANGE = (0.0, 0.1)


class InfeasibleUniverseError(ValueError):
    pass


class StyleRangeError(ValueError):
    pass


class CorpusError(ValueError):
    """Manifest problem; `line` is the 1-based manifest line (0 if unknown)."""

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class MissingImageError(CorpusError):
    pass


class UndecodableImageError(CorpusError):
    pass


class DuplicatePathError(CorpusError):
    pass


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class Segment:
    """'line': (x0, y0, x1, y1); 'arc': (cx, cy, r, start, sweep) in radians."""
    kind: str
    params: Tuple[float, ...]

    def points(self, n: int = SEGMENT_POINTS) -> np.ndarray:
        s = np.linspace(0.0, 1.0, n)
        if self.kind == 'line':
            x0, y0, x1, y1 = self.params
            return np.stack([x0 + (x1 - x0) * s, y0 + (y1 - y0) * s], axis=1)
        cx, cy, r, start, sweep = self.params
        angles = start + sweep * s
        return np.stack([cx + r * np.cos(angles), cy + r * np.sin(angles)], axis=1)


@dataclass(frozen=True)
class Radical:
    id: int
    segments: Tuple[Segment, ...]

    def __post_init__(self):
        if len(self.segments) < 2:
            raise ValueError(f"Radical {self.id} needs at least 2 segments")


@dataclass(frozen=True)
class CharacterSpec:
    category: int
    layout: str
    radicals: Tuple[int, ...]
    boxes: Tuple[Tuple[float, float, float, float], ...]

    @property
    def is_empty(self) -> bool:
        return len(self.radicals) == 0


EMPTY_SPEC = CharacterSpec(category=-1, layout='single', radicals=(), boxes=())


@dataclass(frozen=True)
class WriterStyle:
    writer_id: int
    slant: float
    thickness: float
    jitter: float
    displacement: float
    curvature: float
    seed: int

    def validate(self) -> None:
        checks = (('slant', SLANT_RANGE), ('thickness', THICKNESS_RANGE), ('jitter', JITTER_RANGE),
                  ('displacement', DISPLACEMENT_RANGE), ('curvature', CURVATURE_RANGE))
        for name, (lo, hi) in checks:
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise StyleRangeError(f"Writer {self.writer_id}: {name}={value} outside [{lo}, {hi}]")

    @classmethod
    def neutral(cls, writer_id: int = 0, seed: int = 0) -> 'WriterStyle':
        return cls(writer_id, 0.0, 1.0, 0.0, 0.0, 0.0, seed)


@dataclass(frozen=True)
class ManifestEntry:
    category: int
    split: str
    spec: CharacterSpec


@dataclass
class DatasetManifest:
    radicals: Tuple[Radical, ...]
    entries: Tuple[ManifestEntry, ...]
    writers: Tuple[WriterStyle, ...]
    samples_per_pair: int
    seed: int
    test_fraction: float = 0.25
    image_size: int = 32

    def spec(self, category: int) -> CharacterSpec:
        return self.entries[category].spec

    def categories(self, split: Optional[str] = None) -> List[int]:
        return [e.category for e in self.entries if split is None or e.split == split]

    @property
    def num_categories(self) -> int:
        return len(self.entries)

    @property
    def num_writers(self) -> int:
        return len(self.writers)

    @property
    def train_samples_per_pair(self) -> int:
        return self.samples_per_pair - int(round(self.test_fraction * self.samples_per_pair))


@dataclass
class UniverseConfig:
    num_radicals: int = 8
    num_categories: int = 40
    seen_fraction: float = 0.6
    num_writers: int = 8
    samples_per_pair: int = 64
    test_fraction: float = 0.25
    image_size: int = 32
    max_components: int = 2
    seed: int = 7

    def __post_init__(self):
        if not 0.0 <= self.seen_fraction <= 1.0:
            raise ValueError(f"universe.seen_fraction must be in [0, 1], got {self.seen_fraction}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(f"universe.test_fraction must be in [0, 1), got {self.test_fraction}")
        if self.max_components not in (2, 3):
            raise ValueError("universe.max_components must be 2 or 3")

    def build(self) -> DatasetManifest:
        return build_universe(
            self.num_radicals, self.num_categories, self.seen_fraction, self.seed,
            num_writers=self.num_writers, samples_per_pair=self.samples_per_pair,
            test_fraction=self.test_fraction, image_size=self.image_size,
            max_components=self.max_components,
        )


# ============================================================================
# UNIVERSE
# ============================================================================

def layout_boxes(layout: str, n: int) -> Tuple[Tuple[float, float, float, float], ...]:
    """Placement boxes (x0, y0, x1, y1) in the unit square."""
    if layout == 'single' and n == 1:
        return ((0.1, 0.1, 0.9, 0.9),)
    if layout == 'enclosure' and n == 2:
        return ((0.06, 0.06, 0.94, 0.94), (0.32, 0.34, 0.68, 0.7))
    if layout in ('left-right', 'top-bottom') and n in (2, 3):
        margin, gap = 0.06, 0.04
        span = (1.0 - 2 * margin - (n - 1) * gap) / n
        boxes = []
        for i in range(n):
            a = margin + i * (span + gap)
            if layout == 'left-right':
                boxes.append((round(a, 6), 0.12, round(a + span, 6), 0.88))
            else:
                boxes.append((0.12, round(a, 6), 0.88, round(a + span, 6)))
        return tuple(boxes)
    raise ValueError(f"No placement for layout '{layout}' with {n} components")


def _overlap_ok(boxes, layout: str) -> bool:
    if layout == 'enclosure':
        return True
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            a, b = boxes[i], boxes[j]
            w = min(a[2], b[2]) - max(a[0], b[0])
            h = min(a[3], b[3]) - max(a[1], b[1])
            inter = max(w, 0.0) * max(h, 0.0)
            smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
            if inter / smaller > OVERLAP_THRESHOLD:
                return False
    return True


def make_radicals(num_radicals: int, rng: np.random.Generator) -> Tuple[Radical, ...]:
    """Random distinct stroke programs: grid-anchored lines and arcs."""
    grid = (0.15, 0.5, 0.85)
    anchors = [(x, y) for x in grid for y in grid]
    radicals, seen = [], set()
    attempts = 0
    while len(radicals) < num_radicals:
        attempts += 1
        if attempts > 1000 * max(num_radicals, 1):
            raise InfeasibleUniverseError(f"Could not draw {num_radicals} distinct radicals")
        segments = []
        for _ in range(int(rng.integers(2, 5))):
            if rng.random() < 0.3:
                cx, cy = (float(round(v, 4)) for v in rng.uniform(0.35, 0.65, 2))
                r = float(round(rng.uniform(0.15, 0.3), 4))
                start = float(round(rng.uniform(0.0, 2 * math.pi), 4))
                sweep = float(round(rng.uniform(0.5 * math.pi, 1.5 * math.pi), 4))
                segments.append(Segment('arc', (cx, cy, r, start, sweep)))
            else:
                i, j = rng.choice(len(anchors), size=2, replace=False)
                segments.append(Segment('line', (*anchors[i], *anchors[j])))
        key = tuple(segments)
        if key in seen:
            continue
        seen.add(key)
        radicals.append(Radical(len(radicals), key))
    return tuple(radicals)


def make_writer_styles(num_writers: int, rng: np.random.Generator) -> Tuple[WriterStyle, ...]:
    styles = []
    for w in range(num_writers):
        styles.append(WriterStyle(
            writer_id=w,
            slant=float(rng.uniform(-0.3, 0.3)),
            thickness=float(rng.uniform(0.7, 1.5)),
            jitter=float(rng.uniform(0.2, 0.8)),
            displacement=float(rng.uniform(0.01, 0.04)),
            curvature=float(rng.uniform(0.01, 0.05)),
            seed=int(rng.integers(0, 2 ** 31 - 1)),
        ))
    return tuple(styles)


def _candidate_groups(num_radicals: int, max_components: int) -> Dict[Tuple[str, int], List[Tuple[int, ...]]]:
    ids = range(num_radicals)
    groups = {('single', 1): [(r,) for r in ids]}
    for layout in ('left-right', 'top-bottom', 'enclosure'):
        groups[(layout, 2)] = list(permutations(ids, 2))
    if max_components >= 3:
        for layout in ('left-right', 'top-bottom'):
            groups[(layout, 3)] = list(permutations(ids, 3))
    return {k: v for k, v in groups.items() if v}


def build_universe(
    num_radicals: int,
    num_categories: int,
    seen_fraction: float,
    seed: int,
    num_writers: int = 8,
    samples_per_pair: int = 64,
    test_fraction: float = 0.25,
    image_size: int = 32,
    max_components: int = 2,
) -> DatasetManifest:
    """
    Deterministic (in seed) universe with a zero-shot-safe seen/unseen split.

    Raises:
        InfeasibleUniverseError: not enough distinct specs, or the seen quota
            cannot cover every radical/layout used by unseen categories
    """
    if num_radicals < 1 or num_categories < 1:
        raise InfeasibleUniverseError("Need at least one radical and one category")
    rng = np.random.default_rng(seed)
    radicals = make_radicals(num_radicals, rng)

    groups = _candidate_groups(num_radicals, max_components)
    available = sum(len(v) for v in groups.values())
    if available < num_categories:
        raise InfeasibleUniverseError(
            f"{num_radicals} radicals give only {available} distinct characters, {num_categories} requested"
        )

    pools = {k: list(v) for k, v in groups.items()}
    for k in sorted(pools):
        order = rng.permutation(len(pools[k]))
        pools[k] = [pools[k][i] for i in order]
    specs = []
    while len(specs) < num_categories:
        open_groups = sorted(k for k, v in pools.items() if v)
        layout, n = open_groups[int(rng.integers(0, len(open_groups)))]
        combo = pools[(layout, n)].pop()
        specs.append(CharacterSpec(len(specs), layout, tuple(int(r) for r in combo), layout_boxes(layout, n)))

    # seen set: greedy cover of every radical and layout first, then random fill
    n_seen = int(round(seen_fraction * num_categories))
    needed = {('r', r) for s in specs for r in s.radicals} | {('l', s.layout) for s in specs}
    covered, seen = set(), []
    for idx in rng.permutation(num_categories):
        features = {('r', r) for r in specs[idx].radicals} | {('l', specs[idx].layout)}
        if features - covered:
            seen.append(int(idx))
            covered |= features
        if covered == needed:
            break
    if n_seen < num_categories and len(seen) > n_seen:
        raise InfeasibleUniverseError(
            f"Covering every radical/layout needs {len(seen)} seen categories, only {n_seen} allowed"
        )
    rest = [i for i in rng.permutation(num_categories) if int(i) not in seen]
    seen_set = set(seen) | {int(i) for i in rest[:max(n_seen - len(seen), 0)]}

    entries = tuple(
        ManifestEntry(s.category, SPLIT_SEEN if s.category in seen_set else SPLIT_UNSEEN, s) for s in specs
    )
    writers = make_writer_styles(num_writers, rng)
    manifest = DatasetManifest(radicals, entries, writers, samples_per_pair, seed, test_fraction, image_size)
    logger.info(
        f"Universe built: {num_categories} categories "
        f"({len(manifest.categories(SPLIT_SEEN))} seen / {len(manifest.categories(SPLIT_UNSEEN))} unseen), "
        f"{num_radicals} radicals, {num_writers} writers"
    )
    return manifest


def check_zero_shot_premise(manifest: DatasetManifest) -> bool:
    seen = [e.spec for e in manifest.entries if e.split == SPLIT_SEEN]
    seen_radicals = {r for s in seen for r in s.radicals}
    seen_layouts = {s.layout for s in seen}
    for entry in manifest.entries:
        if entry.split != SPLIT_UNSEEN:
            continue
        if entry.spec.layout not in seen_layouts or not set(entry.spec.radicals) <= seen_radicals:
            return False
    return True


# ============================================================================
# RENDERING
# ============================================================================

def _rasterize(polylines: Sequence[np.ndarray], size: int, width_scale: float = 1.0) -> np.ndarray:
    """Supersampled stroke drawing -> uint8 (size, size) via box downsampling."""
    big = size * SUPERSAMPLE
    canvas = Image.new('L', (big, big), 0)
    draw = ImageDraw.Draw(canvas)
    width = max(1, int(round(STROKE_WIDTH * big * width_scale)))
    radius = width / 2.0
    for pts in polylines:
        xy = [(float(x * big), float(y * big)) for x, y in pts]
        draw.line(xy, fill=255, width=width, joint='curve')
        for x, y in (xy[0], xy[-1]):
            draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=255)
    return np.asarray(canvas.reduce(SUPERSAMPLE), dtype=np.uint8).copy()


def to_signed(image_u8: np.ndarray) -> np.ndarray:
    """uint8 -> float64 in [-1, 1]."""
    return image_u8.astype(np.float64) / 127.5 - 1.0


def _place(points: np.ndarray, box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return np.stack([x0 + points[:, 0] * (x1 - x0), y0 + points[:, 1] * (y1 - y0)], axis=1)


def _radical_lookup(radicals) -> Dict[int, Radical]:
    return radicals if isinstance(radicals, dict) else {r.id: r for r in radicals}


def render_printed_u8(spec: Optional[CharacterSpec], radicals, size: int) -> np.ndarray:
    if size < MIN_RASTER_SIZE:
        raise ValueError(f"Raster size must be >= {MIN_RASTER_SIZE}, got {size}")
    if spec is None or spec.is_empty:
        return np.zeros((size, size), dtype=np.uint8)
    lookup = _radical_lookup(radicals)
    polylines = [
        _place(seg.points(), box)
        for rid, box in zip(spec.radicals, spec.boxes)
        for seg in lookup[rid].segments
    ]
    return _rasterize(polylines, size)


def render_printed(spec: Optional[CharacterSpec], radicals, size: int) -> np.ndarray:
    """Printed condition glyph in [-1, 1]; None / EMPTY_SPEC -> null glyph."""
    return to_signed(render_printed_u8(spec, radicals, size))


def _writer_bend(style: WriterStyle, radical_id: int, seg_idx: int) -> float:
    """Fixed per-writer stroke habit for one segment of one radical."""
    habit = np.random.default_rng(np.random.SeedSequence([style.seed, radical_id, seg_idx]))
    return float(habit.normal(0.0, style.curvature))


def render_handwritten_u8(spec: CharacterSpec, style: WriterStyle, rng: np.random.Generator,
                          radicals, size: int) -> np.ndarray:
    if size < MIN_RASTER_SIZE:
        raise ValueError(f"Raster size must be >= {MIN_RASTER_SIZE}, got {size}")
    style.validate()
    if spec is None or spec.is_empty:
        return np.zeros((size, size), dtype=np.uint8)

    lookup = _radical_lookup(radicals)
    shear = math.tan(style.slant)
    s = np.linspace(0.0, 1.0, SEGMENT_POINTS)
    polylines = []
    for rid, box in zip(spec.radicals, spec.boxes):
        component_offset = rng.normal(0.0, style.displacement, 2)
        for seg_idx, seg in enumerate(lookup[rid].segments):
            pts = seg.points()
            bend = _writer_bend(style, rid, seg_idx) + rng.normal(0.0, 0.5 * style.curvature)
            chord = pts[-1] - pts[0]
            length = float(np.hypot(*chord))
            if length > 1e-6:
                normal = np.array([-chord[1], chord[0]]) / length
                pts = pts + bend * np.sin(np.pi * s)[:, None] * normal[None, :]
            pts = _place(pts, box) + component_offset + rng.normal(0.0, style.jitter / size, 2)
            pts[:, 0] = pts[:, 0] + (0.5 - pts[:, 1]) * shear
            polylines.append(pts)
    width_scale = style.thickness * (1.0 + 0.05 * style.jitter * rng.normal())
    return _rasterize(polylines, size, float(np.clip(width_scale, 0.3, 3.0)))


def render_handwritten(spec: CharacterSpec, style: WriterStyle, rng: np.random.Generator,
                       radicals, size: int) -> np.ndarray:
    """
    Handwritten-style render in [-1, 1].

    Writer-level: slant, thickness, per-segment bend habit (style.seed).
    Sample-level (rng): component displacement, segment jitter, bend noise,
    thickness modulation.

    Raises:
        StyleRangeError: style parameter outside its safe range
    """
    return to_signed(render_handwritten_u8(spec, style, rng, radicals, size))


def sample_rng(seed: int, category: int, writer: int, sample: int) -> np.random.Generator:
    """Per-sample stream; parallel rendering order never changes output."""
    return np.random.default_rng(np.random.SeedSequence([seed, category, writer, sample]))


# ============================================================================
# DATASETS
# ============================================================================

@dataclass
class GlyphDataset:
    images: np.ndarray                      # (N, H, W) uint8
    categories: np.ndarray                  # (N,) int64 indices into category_names
    writers: np.ndarray                     # (N,) int64 indices into writer_names
    category_names: List[str] = field(default_factory=list)
    writer_names: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1]) if len(self) else 0

    def to_tensor(self) -> torch.Tensor:
        """(N, 1, H, W) float32 in [-1, 1]."""
        return torch.from_numpy(self.images.astype(np.float32) / 127.5 - 1.0).unsqueeze(1)

    def subset(self, mask: np.ndarray) -> 'GlyphDataset':
        return GlyphDataset(self.images[mask], self.categories[mask], self.writers[mask],
                            list(self.category_names), list(self.writer_names))

    def category_ids(self) -> np.ndarray:
        """Universe category id per sample (names are decimal ids for synthetic corpora)."""
        lookup = np.array([int(n) for n in self.category_names], dtype=np.int64)
        return lookup[self.categories] if len(self) else np.zeros(0, dtype=np.int64)

    def writer_ids(self) -> np.ndarray:
        lookup = np.array([int(n) for n in self.writer_names], dtype=np.int64)
        return lookup[self.writers] if len(self) else np.zeros(0, dtype=np.int64)

    @classmethod
    def empty(cls, size: int) -> 'GlyphDataset':
        return cls(np.zeros((0, size, size), dtype=np.uint8), np.zeros(0, dtype=np.int64),
                   np.zeros(0, dtype=np.int64), [], [])

    @classmethod
    def concat(cls, parts: Sequence['GlyphDataset']) -> 'GlyphDataset':
        """Concatenate datasets sharing one label vocabulary."""
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("Nothing to concatenate")
        base = parts[0]
        return cls(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.categories for p in parts]),
                   np.concatenate([p.writers for p in parts]),
                   list(base.category_names), list(base.writer_names))


def generate_dataset(manifest: DatasetManifest, size: Optional[int] = None,
                     progress: bool = False) -> Tuple[GlyphDataset, GlyphDataset]:
    """
    Render every (category, writer, sample); returns (train, test).

    Samples with index >= train_samples_per_pair go to the test split.
    """
    size = size or manifest.image_size
    radicals = _radical_lookup(manifest.radicals)
    n_train = manifest.train_samples_per_pair
    images, cats, writers, is_test = [], [], [], []

    pairs = [(e, w) for e in manifest.entries for w in manifest.writers]
    for entry, style in tqdm(pairs, desc='render', disable=not progress):
        for k in range(manifest.samples_per_pair):
            rng = sample_rng(manifest.seed, entry.category, style.writer_id, k)
            images.append(render_handwritten_u8(entry.spec, style, rng, radicals, size))
            cats.append(entry.category)
            writers.append(style.writer_id)
            is_test.append(k >= n_train)

    full = GlyphDataset(
        np.stack(images) if images else np.zeros((0, size, size), dtype=np.uint8),
        np.asarray(cats, dtype=np.int64), np.asarray(writers, dtype=np.int64),
        [str(c) for c in range(manifest.num_categories)], [str(w) for w in range(manifest.num_writers)],
    )
    is_test = np.asarray(is_test, dtype=bool)
    logger.info(f"Rendered {len(full)} images ({int((~is_test).sum())} train / {int(is_test.sum())} test)")
    return full.subset(~is_test), full.subset(is_test)


def printed_glyph_bank(manifest: DatasetManifest, size: Optional[int] = None) -> torch.Tensor:
    """(num_categories, 1, H, W) printed conditions indexed by category id."""
    size = size or manifest.image_size
    radicals = _radical_lookup(manifest.radicals)
    glyphs = np.stack([render_printed(e.spec, radicals, size) for e in manifest.entries])
    return torch.from_numpy(glyphs.astype(np.float32)).unsqueeze(1)


# ============================================================================
# CORPUS I/O
# ============================================================================

def export_corpus(dataset: GlyphDataset, out_dir: Union[str, Path]) -> Path:
    """PNG per sample under images/ plus manifest.tsv; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / 'images').mkdir(parents=True, exist_ok=True)
    rows = []
    counters: Dict[Tuple[int, int], int] = {}
    for i in range(len(dataset)):
        c, w = int(dataset.categories[i]), int(dataset.writers[i])
        k = counters.get((c, w), 0)
        counters[(c, w)] = k + 1
        rel = f"images/c{c:04d}_w{w:03d}_{k:05d}.png"
        Image.fromarray(dataset.images[i], mode='L').save(out_dir / rel)
        rows.append((rel, dataset.category_names[c], dataset.writer_names[w]))
    manifest_path = out_dir / MANIFEST_NAME
    frame = pd.DataFrame(rows, columns=['path', 'category', 'writer'])
    frame.to_csv(manifest_path, sep='\t', header=False, index=False, lineterminator='\n',
                 encoding='utf-8', quoting=csv.QUOTE_NONE)
    return manifest_path


def _intern(labels: Sequence[str], vocab: Optional[Sequence[str]], kind: str, lines: Sequence[int]):
    if vocab is None:
        names: List[str] = []
        index: Dict[str, int] = {}
        for label in labels:
            if label not in index:
                index[label] = len(names)
                names.append(label)
    else:
        names = [str(v) for v in vocab]
        index = {name: i for i, name in enumerate(names)}
        for label, line in zip(labels, lines):
            if label not in index:
                raise CorpusError(f"Unknown {kind} label '{label}'", line)
    return np.array([index[l] for l in labels], dtype=np.int64), names


def load_external_corpus(
    root: Union[str, Path],
    manifest_file: Union[str, Path, None] = None,
    size: int = 32,
    category_vocab: Optional[Sequence[str]] = None,
    writer_vocab: Optional[Sequence[str]] = None,
    invert: bool = False,
) -> GlyphDataset:
    """
    Load a manifest of (relative path, category, writer) lines.

    Images are converted to one channel and resized to size x size. Labels
    are interned to dense indices (first-appearance order unless a vocab is
    given). Set invert=True for dark-ink-on-white scans.

    Raises:
        MissingImageError / UndecodableImageError / DuplicatePathError /
        CorpusError (malformed line, unknown label), all citing the line
    """
    root = Path(root)
    manifest_path = Path(manifest_file) if manifest_file else root / MANIFEST_NAME
    if not manifest_path.is_absolute() and not manifest_path.exists():
        manifest_path = root / manifest_path
    if not manifest_path.exists():
        raise MissingImageError(f"Manifest not found: {manifest_path}")

    for number, raw in enumerate(manifest_path.read_text(encoding='utf-8').splitlines(), start=1):
        if raw.strip() and raw.count('\t') != 2:
            raise CorpusError("Expected 3 tab-separated fields (path, category, writer)", number)

    try:
        frame = pd.read_csv(manifest_path, sep='\t', header=None, names=['path', 'category', 'writer'],
                            index_col=False, dtype=str, keep_default_na=False, skip_blank_lines=False,
                            quoting=csv.QUOTE_NONE, encoding='utf-8')
    except pd.errors.EmptyDataError:
        return GlyphDataset.empty(size)
    except pd.errors.ParserError as e:
        raise CorpusError(f"Malformed manifest {manifest_path}: {e}") from e

    frame = frame.fillna('')
    frame['line'] = np.arange(1, len(frame) + 1)
    frame = frame[frame['path'].str.strip() != '']
    if frame.empty:
        return GlyphDataset.empty(size)

    bad = frame[(frame['category'] == '') | (frame['writer'] == '')]
    if not bad.empty:
        raise CorpusError("Expected 3 tab-separated fields (path, category, writer)", int(bad['line'].iloc[0]))
    dup = frame[frame['path'].duplicated()]
    if not dup.empty:
        raise DuplicatePathError(f"Duplicate image path '{dup['path'].iloc[0]}'", int(dup['line'].iloc[0]))

    lines = frame['line'].tolist()
    categories, category_names = _intern(frame['category'].tolist(), category_vocab, 'category', lines)
    writers, writer_names = _intern(frame['writer'].tolist(), writer_vocab, 'writer', lines)

    images = []
    for rel, line in zip(frame['path'], lines):
        path = root / rel
        if not path.exists():
            raise MissingImageError(f"Image not found: {path}", line)
        try:
            with Image.open(path) as img:
                img.load()
                gray = img.convert('L')
        except (UnidentifiedImageError, OSError, ValueError) as e:
            raise UndecodableImageError(f"Cannot decode {path}: {e}", line) from e
        if gray.size != (size, size):
            gray = gray.resize((size, size), Image.BILINEAR)
        arr = np.asarray(gray, dtype=np.uint8)
        images.append(255 - arr if invert else arr.copy())

    logger.info(f"Corpus loaded: {len(images)} images from {manifest_path}")
    return GlyphDataset(np.stack(images), categories, writers, category_names, writer_names)


# ============================================================================
# UNIVERSE FILE
# ============================================================================

def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        'seed': manifest.seed,
        'samples_per_pair': manifest.samples_per_pair,
        'test_fraction': manifest.test_fraction,
        'image_size': manifest.image_size,
        'radicals': [{'id': r.id, 'segments': [{'kind': s.kind, 'params': list(s.params)} for s in r.segments]}
                     for r in manifest.radicals],
        'categories': [{'category': e.category, 'split': e.split, 'layout': e.spec.layout,
                        'radicals': list(e.spec.radicals), 'boxes': [list(b) for b in e.spec.boxes]}
                       for e in manifest.entries],
        'writers': [asdict(w) for w in manifest.writers],
    }


def manifest_from_dict(data: dict) -> DatasetManifest:
    radicals = tuple(
        Radical(r['id'], tuple(Segment(s['kind'], tuple(float(p) for p in s['params'])) for s in r['segments']))
        for r in data['radicals']
    )
    entries = tuple(
        ManifestEntry(c['category'], c['split'],
                      CharacterSpec(c['category'], c['layout'], tuple(c['radicals']),
                                    tuple(tuple(float(v) for v in b) for b in c['boxes'])))
        for c in data['categories']
    )
    writers = tuple(WriterStyle(**w) for w in data['writers'])
    return DatasetManifest(radicals, entries, writers, int(data['samples_per_pair']), int(data['seed']),
                           float(data['test_fraction']), int(data['image_size']))


def save_universe(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest_to_dict(manifest), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def load_universe(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Universe file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return manifest_from_dict(json.load(f))
