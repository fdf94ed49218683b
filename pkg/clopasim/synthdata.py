"""Deterministic synthetic segmentation tasks.

Each geometry mimics one task-complexity regime: large blobby organs,
small paired structures, sparse branching vessels and hard-to-see
low-contrast lesions.  A sample is fully determined by (spec, seed).
"""

import enum
import logging
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage

from clopasim.config import ConfigError
from clopasim.util import atomic_write_text, derive_rng, derive_seed
from clopasim.volume import LabelledSample, Volume

logger = logging.getLogger("clopasim.synthdata")

TASK_FILE = "task.yaml"
SAMPLES_DIR = "samples"

BLOB_FRACTION = (0.05, 0.20)
TREE_FRACTION = (0.006, 0.018)
PAIR_RADIUS = (2.0, 4.0)
BIAS_AMPLITUDE = 0.05
BRANCH_PROBABILITY = 0.08
LOW_CONTRAST_MAX = 1.0


class Geometry(enum.Enum):
    BLOB = "blob"
    SMALL_PAIR = "small_pair"
    BRANCHING_TREE = "branching_tree"
    LOW_CONTRAST_BLOB = "low_contrast_blob"


DEFAULT_CONTRAST = {
    Geometry.BLOB: 3.0,
    Geometry.SMALL_PAIR: 3.0,
    Geometry.BRANCHING_TREE: 3.0,
    Geometry.LOW_CONTRAST_BLOB: 0.8,
}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    geometry: Geometry
    extents: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    contrast: float | None = None
    dataset_size: int = 40
    nsd_tolerance: float = 1.0
    # both written by `clopasim calibrate`
    expert_threshold: float | None = None
    calibration: Mapping[str, Any] | None = None

    @property
    def intensity_gap(self) -> float:
        return self.contrast if self.contrast is not None else DEFAULT_CONTRAST[self.geometry]

    def validate(self) -> None:
        if len(self.extents) != 3 or any(e < 16 for e in self.extents):
            raise ConfigError("extents", f"need three extents of at least 16, got {list(self.extents)}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ConfigError("spacing", f"need three positive spacings, got {list(self.spacing)}")
        if self.intensity_gap <= 0:
            raise ConfigError("contrast", f"must be positive, got {self.intensity_gap}")
        if self.geometry is Geometry.LOW_CONTRAST_BLOB and self.intensity_gap > LOW_CONTRAST_MAX:
            raise ConfigError("contrast", f"low_contrast_blob needs contrast <= {LOW_CONTRAST_MAX}")
        if self.dataset_size < 2:
            raise ConfigError("dataset_size", f"must be at least 2, got {self.dataset_size}")
        if self.nsd_tolerance <= 0:
            raise ConfigError("nsd_tolerance", f"must be positive, got {self.nsd_tolerance}")
        if self.expert_threshold is not None and not 0 < self.expert_threshold <= 1:
            raise ConfigError("expert_threshold", f"must lie in (0, 1], got {self.expert_threshold}")

    def to_mapping(self) -> dict[str, Any]:
        data = asdict(self)
        data["geometry"] = self.geometry.value
        data["extents"] = list(self.extents)
        data["spacing"] = list(self.spacing)
        if self.contrast is None:
            data["contrast"] = self.intensity_gap
        return data

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "TaskSpec":
        if not isinstance(data, Mapping):
            raise ConfigError("task", "task spec must be a mapping")
        unknown = sorted(set(data) - {f for f in cls.__dataclass_fields__})
        if unknown:
            raise ConfigError(unknown[0], "unknown task spec key")
        for key in ("name", "geometry"):
            if key not in data:
                raise ConfigError(key, "missing required key")
        try:
            geometry = Geometry(data["geometry"])
        except (TypeError, ValueError):
            choices = ", ".join(g.value for g in Geometry)
            raise ConfigError("geometry", f"unknown geometry {data['geometry']!r} (expected one of {choices})")
        kwargs: dict[str, Any] = {"name": str(data["name"]), "geometry": geometry}
        for key, convert in (
            ("extents", lambda v: tuple(int(x) for x in v)),
            ("spacing", lambda v: tuple(float(x) for x in v)),
            ("contrast", float),
            ("dataset_size", int),
            ("nsd_tolerance", float),
            ("expert_threshold", float),
        ):
            if key in data and data[key] is not None:
                try:
                    kwargs[key] = convert(data[key])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(key, f"invalid value {data[key]!r}: {exc}") from exc
        calibration = data.get("calibration")
        if calibration is not None:
            if not isinstance(calibration, Mapping):
                raise ConfigError("calibration", "expected a mapping")
            kwargs["calibration"] = dict(calibration)
        spec = cls(**kwargs)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path: Path) -> "TaskSpec":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("task", f"cannot parse {path}: {exc}") from exc
        return cls.from_mapping(data)

    def save(self, path: Path) -> None:
        atomic_write_text(path, yaml.safe_dump(self.to_mapping(), sort_keys=False))


@dataclass
class SyntheticSample(LabelledSample):
    seed: int = 0


# --- geometries ---


def _grid(extents: tuple[int, int, int]) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(e, dtype=np.float64) for e in extents], indexing="ij"))


def _smooth_noise(extents: tuple[int, int, int], sigma: float, rng: np.random.Generator) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.normal(size=extents), sigma=sigma, mode="wrap")
    std = field.std()
    return field / std if std > 0 else field


def blob_mask(extents: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Perturbed ellipsoid thresholded to a 5-20% volume fraction."""
    shape = np.array(extents, dtype=np.float64)
    centre = shape / 2 + rng.uniform(-1, 1, size=3) * shape / 8
    axes = rng.uniform(0.2, 0.35, size=3) * shape
    grid = _grid(extents)
    score = (((grid - centre[:, None, None, None]) / axes[:, None, None, None]) ** 2).sum(axis=0)
    score += 0.3 * _smooth_noise(extents, sigma=min(extents) / 8, rng=rng)
    fraction = rng.uniform(*BLOB_FRACTION)
    count = max(1, int(round(fraction * score.size)))
    order = np.argsort(score, axis=None, kind="stable")
    mask = np.zeros(score.size, dtype=bool)
    mask[order[:count]] = True
    return mask.reshape(extents)


def small_pair_mask(extents: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Two disjoint spheres of radius 2-4 voxels (at most a fifth of the extent)."""
    shape = np.array(extents, dtype=np.float64)
    grid = _grid(extents)
    radii = rng.uniform(PAIR_RADIUS[0], min(PAIR_RADIUS[1], shape.min() / 5), size=2)
    for _ in range(1000):
        centres = [rng.uniform(r + 1, shape - r - 2) for r in radii]
        if np.linalg.norm(centres[0] - centres[1]) >= radii.sum() + 2:
            break
    else:
        # opposite corners clear each other once radii are capped at a fifth of the extent
        centres = [radii[0] + 1 + np.zeros(3), shape - radii[1] - 2]
    mask = np.zeros(extents, dtype=bool)
    for centre, radius in zip(centres, radii):
        mask |= ((grid - centre[:, None, None, None]) ** 2).sum(axis=0) <= radius ** 2
    return mask


_CROSS = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


def branching_tree_mask(extents: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Random-walk tube tree of radius-1 balls grown to a 0.6-1.8% fraction.

    Consecutive centres are 26-adjacent and every branch starts on an
    existing centre, so the tree is one 26-connected component.
    """
    shape = np.array(extents)
    mask = np.zeros(extents, dtype=bool)
    target = max(8, int(rng.uniform(*TREE_FRACTION) * mask.size))
    max_length = int(shape.max())
    centres: list[np.ndarray] = []
    pending: list[tuple[np.ndarray, np.ndarray]] = []

    def _direction() -> np.ndarray:
        d = rng.normal(size=3)
        return d / np.linalg.norm(d)

    pos = shape / 2 + rng.uniform(-1, 1, size=3) * shape / 6
    direction = _direction()
    filled = 0
    for _ in range(200 * mask.size):
        length = 0
        while filled < target and length < max_length:
            voxel = np.floor(pos + 0.5).astype(int)
            if np.any(voxel < 0) or np.any(voxel >= shape):
                break
            ball = voxel + _CROSS
            ball = ball[np.all((ball >= 0) & (ball < shape), axis=1)]
            mask[ball[:, 0], ball[:, 1], ball[:, 2]] = True
            filled = int(mask.sum())
            centres.append(voxel)
            if rng.random() < BRANCH_PROBABILITY:
                pending.append((voxel.astype(np.float64), _direction()))
            direction = direction + 0.35 * rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            pos = pos + direction
            length += 1
        if filled >= target:
            break
        if pending:
            pos, direction = pending.pop()
        else:
            pos = centres[int(rng.integers(len(centres)))].astype(np.float64)
            direction = _direction()
    return mask


_GEOMETRY_MASKS = {
    Geometry.BLOB: blob_mask,
    Geometry.SMALL_PAIR: small_pair_mask,
    Geometry.BRANCHING_TREE: branching_tree_mask,
    Geometry.LOW_CONTRAST_BLOB: blob_mask,
}


def synthesize_image(label: np.ndarray, contrast: float, rng: np.random.Generator) -> np.ndarray:
    """Foreground offset of ``contrast`` noise sigmas, unit Gaussian noise, faint smooth bias."""
    noise = rng.normal(size=label.shape)
    bias = BIAS_AMPLITUDE * _smooth_noise(label.shape, sigma=min(label.shape) / 4, rng=rng)
    return (contrast * label + noise + bias).astype(np.float32)


def generate_sample(spec: TaskSpec, sample_seed: int, sample_id: int = 0) -> SyntheticSample:
    rng = derive_rng(sample_seed, spec.geometry.value)
    label = _GEOMETRY_MASKS[spec.geometry](tuple(spec.extents), rng)
    image = synthesize_image(label, spec.intensity_gap, rng)
    return SyntheticSample(
        sample_id=sample_id,
        image=image,
        label=label,
        spacing=tuple(spec.spacing),
        seed=sample_seed,
    )


# --- tasks ---


@dataclass
class TaskDataset:
    spec: TaskSpec
    master_seed: int
    samples: list[SyntheticSample]
    train_ids: list[int] = field(default_factory=list)
    holdout_ids: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._by_id = {s.sample_id: s for s in self.samples}

    def sample(self, sample_id: int) -> SyntheticSample:
        return self._by_id[sample_id]

    @property
    def train(self) -> list[SyntheticSample]:
        return [self._by_id[i] for i in self.train_ids]

    @property
    def holdout(self) -> list[SyntheticSample]:
        return [self._by_id[i] for i in self.holdout_ids]


def split_ids(n: int, master_seed: int) -> tuple[list[int], list[int]]:
    """50-50 train/holdout split; train gets the smaller half when n is odd."""
    perm = derive_rng(master_seed, "split").permutation(n)
    return sorted(int(i) for i in perm[: n // 2]), sorted(int(i) for i in perm[n // 2:])


def generate_task(spec: TaskSpec, master_seed: int) -> TaskDataset:
    samples = [generate_sample(spec, derive_seed(master_seed, i), sample_id=i) for i in range(spec.dataset_size)]
    train_ids, holdout_ids = split_ids(spec.dataset_size, master_seed)
    logger.info("generated %d %s samples (%d train, %d holdout)", len(samples), spec.geometry.value, len(train_ids), len(holdout_ids))
    return TaskDataset(spec, master_seed, samples, train_ids, holdout_ids)


def _sample_paths(task_dir: Path, sample_id: int) -> tuple[Path, Path]:
    base = Path(task_dir) / SAMPLES_DIR
    return base / f"{sample_id:04d}_image.clvx", base / f"{sample_id:04d}_label.clvx"


def write_task(dataset: TaskDataset, task_dir: Path) -> None:
    task_dir = Path(task_dir)
    for sample in dataset.samples:
        image_path, label_path = _sample_paths(task_dir, sample.sample_id)
        Volume.image(sample.image, sample.spacing).save(image_path)
        Volume.mask(sample.label, sample.spacing).save(label_path)
    meta = {
        "spec": dataset.spec.to_mapping(),
        "master_seed": dataset.master_seed,
        "train_ids": dataset.train_ids,
        "holdout_ids": dataset.holdout_ids,
        "sample_seeds": [s.seed for s in dataset.samples],
    }
    atomic_write_text(task_dir / TASK_FILE, yaml.safe_dump(meta, sort_keys=False))


def read_task(task_dir: Path) -> TaskDataset:
    task_dir = Path(task_dir)
    meta_path = task_dir / TASK_FILE
    if not meta_path.exists():
        raise FileNotFoundError(f"no task at {task_dir} (missing {TASK_FILE})")
    try:
        meta = yaml.safe_load(meta_path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("task", f"cannot parse {meta_path}: {exc}") from exc
    spec = TaskSpec.from_mapping(meta.get("spec"))
    seeds = meta.get("sample_seeds") or []
    samples = []
    for sample_id, seed in enumerate(seeds):
        image_path, label_path = _sample_paths(task_dir, sample_id)
        image = Volume.load(image_path)
        label = Volume.load(label_path)
        samples.append(SyntheticSample(sample_id, image.data, label.data, image.spacing, int(seed)))
    return TaskDataset(spec, int(meta["master_seed"]), samples, list(meta["train_ids"]), list(meta["holdout_ids"]))


def write_preview(sample: LabelledSample, path: Path) -> None:
    """Middle axial slice in grey with the label in red."""
    z = sample.image.shape[0] // 2
    slc = sample.image[z].astype(np.float64)
    lo, hi = np.percentile(slc, [1, 99])
    grey = np.clip((slc - lo) / (hi - lo if hi > lo else 1.0), 0, 1)
    rgb = np.repeat((grey * 255).astype(np.uint8)[..., None], 3, axis=2)
    rgb[sample.label[z]] = (rgb[sample.label[z]] // 2 + np.array([127, 0, 0], dtype=np.uint8))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)
