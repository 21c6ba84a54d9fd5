"""Synthetic slide bags with a spatially planted survival signal, plus
manifest-based dataset I/O.

Each generated slide carries a contiguous cluster of "tumor" tiles whose
features share a shifted mean on a few signal dimensions. Per-tile noise
has two parts scaled together by the signal-to-noise ratio: an i.i.d.
uniform component, and smooth low-frequency "texture" fields on the
remaining dimensions that mimic how neighboring tissue tiles correlate.
The hazard grows exponentially with the cluster's share of the slide,
survival times are exponential in that hazard, and a configurable
fraction of observations is censored uniformly before the event.

Features are nonnegative by construction so a ReLU on raw inputs cannot
destroy the signal.

Datasets serialize to one features CSV per slide plus a shared labels
CSV, tied together by a JSON manifest. Floats are written as
shortest-repr decimal text, so write -> ingest round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .graphs import TileSet
from .losses import SurvivalLabel

HAZARD_GAMMA = 5.0  # log-hazard slope in the tumor-cluster fraction
TUMOR_SHIFT = 0.4
BACKGROUND_MEAN = 0.2
FIELD_FRACTION = 3.0  # texture-field amplitude relative to the i.i.d. noise scale

_NEIGHBOR_STEPS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]


@dataclass
class SynthConfig:
    n_slides: int = 200
    tiles_per_slide: int = 64
    feature_dim: int = 32
    grid_side: int = 8
    cluster_radius: float = 4.5
    snr: float = 0.5
    censoring_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if min(self.n_slides, self.tiles_per_slide, self.feature_dim, self.grid_side) < 1:
            raise DataError("all counts must be positive")
        if not 0.0 <= self.censoring_fraction < 1.0:
            raise DataError("censoring fraction must lie in [0, 1)")
        if self.snr <= 0.0 or self.cluster_radius <= 0.0:
            raise DataError("snr and cluster radius must be positive")
        if self.tiles_per_slide > self.grid_side**2:
            raise DataError(
                f"cannot place {self.tiles_per_slide} tiles on a {self.grid_side}x{self.grid_side} grid"
            )


@dataclass
class SynthSlide:
    tiles: TileSet
    label: SurvivalLabel
    cluster_mask: np.ndarray  # bool per tile
    hazard: float

    @property
    def cluster_fraction(self) -> float:
        return float(self.cluster_mask.mean())


def _grow_cluster(coords: np.ndarray, seed_idx: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """BFS over occupied 8-neighbor cells, bounded by Euclidean radius.

    BFS keeps the cluster connected even when the grid is only partially
    occupied; the radius bound caps its extent around the seed tile.
    """
    occupied = {(int(x), int(y)): i for i, (x, y) in enumerate(coords)}
    cx, cy = int(coords[seed_idx, 0]), int(coords[seed_idx, 1])
    mask = np.zeros(len(coords), dtype=bool)
    mask[seed_idx] = True
    frontier = [(cx, cy)]
    while frontier:
        x, y = frontier.pop(0)
        steps = list(_NEIGHBOR_STEPS)
        rng.shuffle(steps)
        for dx, dy in steps:
            cell = (x + dx, y + dy)
            idx = occupied.get(cell)
            if idx is None or mask[idx]:
                continue
            if (cell[0] - cx) ** 2 + (cell[1] - cy) ** 2 <= radius * radius:
                mask[idx] = True
                frontier.append(cell)
    return mask


def _texture_fields(coords: np.ndarray, n_dims: int, amp: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-dimension linear gradients over the slide, scaled to [0, amp].

    One random direction per dimension; projections are rescaled per
    slide so every field spans exactly [0, amp]. Neighboring tiles get
    close values, distant tiles do not, mimicking tissue continuity.
    """
    span = max(coords.max() - coords.min(), 1.0)
    unit = (coords - coords.min(axis=0)) / span
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_dims)
    proj = unit @ np.vstack([np.cos(theta), np.sin(theta)])
    lo = proj.min(axis=0)
    width = proj.max(axis=0) - lo
    width[width == 0.0] = 1.0
    return amp * (proj - lo) / width


def generate(cfg: SynthConfig) -> list[SynthSlide]:
    """Deterministically generate the configured dataset."""
    slides = []
    n_signal = max(2, cfg.feature_dim // 8)
    noise_scale = TUMOR_SHIFT / cfg.snr
    for i in range(cfg.n_slides):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(i,)))
        )
        cells = rng.choice(cfg.grid_side**2, size=cfg.tiles_per_slide, replace=False)
        coords = np.column_stack([cells % cfg.grid_side, cells // cfg.grid_side]).astype(np.float64)

        seed_idx = int(rng.integers(cfg.tiles_per_slide))
        radius = rng.uniform(1.0, cfg.cluster_radius)
        mask = _grow_cluster(coords, seed_idx, radius, rng)

        features = np.full((cfg.tiles_per_slide, cfg.feature_dim), BACKGROUND_MEAN)
        features[mask, :n_signal] += TUMOR_SHIFT
        if cfg.feature_dim > n_signal:
            features[:, n_signal:] += _texture_fields(
                coords, cfg.feature_dim - n_signal, FIELD_FRACTION * noise_scale, rng
            )
        features += rng.uniform(0.0, noise_scale, size=features.shape)

        hazard = float(np.exp(HAZARD_GAMMA * mask.mean()))
        time = float(rng.exponential(1.0 / hazard))
        event = True
        if rng.random() < cfg.censoring_fraction:
            event = False
            time *= float(rng.uniform(0.05, 0.95))
        time = max(time, 1e-9)

        slides.append(
            SynthSlide(
                tiles=TileSet(slide_id=f"slide_{i:04d}", coords=coords, features=features),
                label=SurvivalLabel(time=time, event=event),
                cluster_mask=mask,
                hazard=hazard,
            )
        )
    return slides


def as_dataset(slides: list[SynthSlide]) -> list[tuple[TileSet, SurvivalLabel]]:
    return [(s.tiles, s.label) for s in slides]


def permute_labels(
    dataset: list[tuple[TileSet, SurvivalLabel]], seed: int
) -> list[tuple[TileSet, SurvivalLabel]]:
    """Reassign survival labels uniformly at random (null-signal control)."""
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    order = rng.permutation(len(dataset))
    return [(dataset[i][0], dataset[order[i]][1]) for i in range(len(dataset))]


# ---------------------------------------------------------------------------
# dataset serialization
# ---------------------------------------------------------------------------

def write_dataset(
    dataset: list[tuple[TileSet, SurvivalLabel]],
    out_dir: str | Path,
    clusters: list[np.ndarray] | None = None,
) -> Path:
    """Write per-slide feature CSVs, a shared labels CSV, and the manifest.

    Returns the manifest path. Optional cluster masks go to a side-car
    truth CSV that the ingest path ignores.
    """
    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    feature_dim = dataset[0][0].features.shape[1] if dataset else 0

    entries = []
    for tiles, _ in dataset:
        rel = f"slides/{tiles.slide_id}.csv"
        with open(out / rel, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tile_id", "x", "y"] + [f"f{j}" for j in range(tiles.features.shape[1])])
            for i in range(tiles.n_tiles):
                w.writerow(
                    [i, repr(float(tiles.coords[i, 0])), repr(float(tiles.coords[i, 1]))]
                    + [repr(float(v)) for v in tiles.features[i]]
                )
        entries.append({"slide_id": tiles.slide_id, "features_csv": rel, "labels_csv": "labels.csv"})

    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "time", "event"])
        for tiles, label in dataset:
            w.writerow([tiles.slide_id, repr(label.time), int(label.event)])

    if clusters is not None:
        with open(out / "clusters.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slide_id", "tile_id", "in_cluster"])
            for (tiles, _), mask in zip(dataset, clusters):
                for i in range(tiles.n_tiles):
                    w.writerow([tiles.slide_id, i, int(mask[i])])

    manifest = {"feature_dim": feature_dim, "slides": entries}
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def _read_labels(path: Path) -> dict[str, SurvivalLabel]:
    labels: dict[str, SurvivalLabel] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["slide_id", "time", "event"]:
            raise DataError(f"{path}: labels header must be slide_id,time,event")
        for row in reader:
            try:
                time = float(row["time"])
                event = bool(int(row["event"]))
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed label row {row}") from exc
            if time <= 0.0:
                raise DataError(f"{path}: nonpositive time for slide {row['slide_id']!r}")
            if row["slide_id"] in labels:
                raise DataError(f"{path}: duplicate slide_id {row['slide_id']!r}")
            labels[row["slide_id"]] = SurvivalLabel(time=time, event=event)
    return labels


def _read_features(path: Path, slide_id: str, feature_dim: int) -> TileSet:
    expected = ["tile_id", "x", "y"] + [f"f{j}" for j in range(feature_dim)]
    coords, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise DataError(
                f"slide {slide_id!r}: feature header does not match manifest feature_dim={feature_dim}"
            )
        for row in reader:
            if len(row) != len(expected):
                raise DataError(f"slide {slide_id!r}: ragged row of {len(row)} fields")
            try:
                coords.append((float(row[1]), float(row[2])))
                rows.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise DataError(f"slide {slide_id!r}: non-numeric field") from exc
    if not rows:
        raise DataError(f"slide {slide_id!r}: empty features file")
    return TileSet(slide_id=slide_id, coords=np.array(coords), features=np.array(rows))


def ingest(manifest_path: str | Path) -> list[tuple[TileSet, SurvivalLabel]]:
    """Load and validate a dataset from its manifest.

    An empty manifest yields an empty dataset. Errors name the offending
    slide: header/dimension mismatches, duplicate ids, nonpositive times.
    """
    mpath = Path(manifest_path)
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: malformed manifest JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "slides" not in manifest:
        raise DataError(f"{mpath}: manifest needs a 'slides' list")
    entries = manifest["slides"]
    if not entries:
        return []
    feature_dim = int(manifest.get("feature_dim", -1))
    if feature_dim < 1:
        raise DataError(f"{mpath}: manifest needs a positive feature_dim")

    base = mpath.parent
    label_cache: dict[Path, dict[str, SurvivalLabel]] = {}
    dataset = []
    seen: set[str] = set()
    for entry in entries:
        slide_id = entry.get("slide_id")
        if not slide_id or "features_csv" not in entry or "labels_csv" not in entry:
            raise DataError(f"{mpath}: slide entry missing fields: {entry}")
        if slide_id in seen:
            raise DataError(f"{mpath}: duplicate slide_id {slide_id!r}")
        seen.add(slide_id)
        labels_path = base / entry["labels_csv"]
        if labels_path not in label_cache:
            label_cache[labels_path] = _read_labels(labels_path)
        if slide_id not in label_cache[labels_path]:
            raise DataError(f"{labels_path}: no label row for slide {slide_id!r}")
        tiles = _read_features(base / entry["features_csv"], slide_id, feature_dim)
        dataset.append((tiles, label_cache[labels_path][slide_id]))
    return dataset
