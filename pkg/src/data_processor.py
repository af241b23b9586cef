#!/usr/bin/env python3
"""
Data processing module for landmark datasets.
Handles annotation parsing, image loading, coordinate normalization,
rotation augmentation and the synthetic thermal-face generator.
"""

import logging
import math
import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import List, Dict, Any, Optional, Tuple, Union

import cv2
import numpy as np
import pandas as pd

try:
    from .errors import DatasetLoadError, ConfigurationError
    from .tensor import RngStream
except ImportError:
    from errors import DatasetLoadError, ConfigurationError
    from tensor import RngStream

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

ANNOTATION_FILE = 'annotations.csv'
DEFAULT_POINTS = 6


def annotation_columns(n_points: int = DEFAULT_POINTS) -> List[str]:
    columns = ['filename']
    for index in range(n_points):
        columns += [f'x{index}', f'y{index}']
    return columns


@dataclass
class Sample:
    """One H×W×3 image in [0, 1] with N landmark points (x, y) in pixels."""
    image: np.ndarray
    points: np.ndarray
    source_id: str
    angle: float = 0.0

    @property
    def image_dims(self) -> Tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    def normalized_points(self) -> np.ndarray:
        """2×N array: row 0 = x / W, row 1 = y / H."""
        height, width = self.image_dims
        return np.stack([self.points[:, 0] / width, self.points[:, 1] / height])


@dataclass
class Dataset:
    """Ordered samples sharing one image size."""
    samples: List[Sample] = field(default_factory=list)
    split: str = 'train'
    image_dims: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.samples and self.image_dims is None:
            self.image_dims = self.samples[0].image_dims
        for sample in self.samples:
            if sample.image_dims != self.image_dims:
                raise ConfigurationError(
                    f"sample '{sample.source_id}' is {sample.image_dims}, dataset is {self.image_dims}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        height, width = self.image_dims
        return height, width, 3

    @property
    def n_points(self) -> int:
        return int(self.samples[0].points.shape[0]) if self.samples else DEFAULT_POINTS

    def subset(self, indices, split: Optional[str] = None) -> 'Dataset':
        return Dataset([self.samples[i] for i in indices], split=split or self.split, image_dims=self.image_dims)

    def arrays(self, indices=None) -> Tuple[np.ndarray, np.ndarray]:
        """Images B×H×W×3 and normalized targets B×2×N for the given sample indices."""
        chosen = [self.samples[i] for i in (range(len(self)) if indices is None else indices)]
        images = np.stack([s.image for s in chosen]).astype(np.float64)
        targets = np.stack([s.normalized_points() for s in chosen])
        return images, targets

    def to_dict(self) -> Dict[str, Any]:
        return {
            'split': self.split,
            'n_samples': len(self),
            'image_dims': list(self.image_dims) if self.image_dims else None,
            'n_points': self.n_points
        }


def _read_image(path: Path) -> np.ndarray:
    """Decode an 8- or 16-bit PNG/PGM to H×W×3 float64 in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot read image {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValueError(f"unsupported image dtype {raw.dtype}")
    if raw.ndim == 2:
        image = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.shape[2] == 4:
        image = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB)
    elif raw.shape[2] == 3:
        image = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    else:
        image = np.repeat(raw[:, :, :1], 3, axis=2)
    return image.astype(np.float64) / scale


def load_dataset(directory: Union[str, Path], split: str = 'train') -> Dataset:
    """Load `annotations.csv` and its images; rows keep CSV order."""
    start_time = datetime.now()
    directory = Path(directory)
    csv_path = directory / ANNOTATION_FILE
    if not csv_path.is_file():
        raise DatasetLoadError(f"missing {csv_path}")
    try:
        frame = pd.read_csv(csv_path, dtype={'filename': str}, encoding='utf-8')
    except pd.errors.EmptyDataError:
        logger.info(f"Empty annotation file {csv_path}")
        return Dataset([], split=split)

    coordinate_columns = [c for c in frame.columns if c != 'filename']
    if 'filename' not in frame.columns or len(coordinate_columns) % 2:
        raise DatasetLoadError(f"bad header {list(frame.columns)}, expected filename,x0,y0,...")
    n_points = len(coordinate_columns) // 2
    if list(frame.columns) != annotation_columns(n_points):
        raise DatasetLoadError(f"bad header {list(frame.columns)}, expected {annotation_columns(n_points)}")

    samples = []
    image_dims = None
    for index, row in frame.iterrows():
        row_number = int(index) + 1
        try:
            coordinates = pd.to_numeric(row[coordinate_columns], errors='raise').to_numpy(dtype=np.float64)
        except (ValueError, TypeError) as e:
            raise DatasetLoadError(f"malformed coordinates: {e}", row=row_number)
        if not isinstance(row['filename'], str) or not np.isfinite(coordinates).all():
            raise DatasetLoadError("malformed row (empty filename or coordinate)", row=row_number)
        image_path = directory / row['filename']
        try:
            image = _read_image(image_path)
        except (FileNotFoundError, ValueError) as e:
            logger.error(f"Error loading {image_path}: {e}")
            raise DatasetLoadError(str(e), row=row_number)

        points = coordinates.reshape(n_points, 2)
        height, width = image.shape[:2]
        if image_dims is None:
            image_dims = (height, width)
        elif image_dims != (height, width):
            raise DatasetLoadError(f"image is {height}x{width}, dataset is {image_dims[0]}x{image_dims[1]}",
                                   row=row_number)
        inside = ((points[:, 0] >= 0) & (points[:, 0] < width) & (points[:, 1] >= 0) & (points[:, 1] < height))
        if not inside.all():
            raise DatasetLoadError(f"point {int(np.argmin(inside))} out of bounds for {height}x{width} image",
                                   row=row_number)
        samples.append(Sample(image=image, points=points, source_id=Path(row['filename']).stem))

    processing_time = (datetime.now() - start_time).total_seconds()
    logger.info(f"Loaded {len(samples)} samples from {directory} in {processing_time:.2f}s")
    return Dataset(samples, split=split, image_dims=image_dims)


def _safe_name(source_id: str) -> str:
    return re.sub(r'[^A-Za-z0-9_.+-]', '_', source_id)


def write_dataset(dataset: Dataset, directory: Union[str, Path], bit_depth: int = 16) -> Path:
    """Write images as PNG plus `annotations.csv` in the loader's format."""
    if bit_depth not in (8, 16):
        raise ConfigurationError(f"bit depth must be 8 or 16, got {bit_depth}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scale, dtype = (65535.0, np.uint16) if bit_depth == 16 else (255.0, np.uint8)
    n_points = dataset.n_points

    rows = []
    for index, sample in enumerate(dataset):
        filename = f"{index:05d}_{_safe_name(sample.source_id)}.png"
        pixels = np.clip(np.rint(sample.image * scale), 0, scale).astype(dtype)
        if np.array_equal(pixels[:, :, 0], pixels[:, :, 1]) and np.array_equal(pixels[:, :, 0], pixels[:, :, 2]):
            encoded = pixels[:, :, 0]
        else:
            encoded = cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)
        if not cv2.imwrite(str(directory / filename), encoded):
            raise OSError(f"failed to write {directory / filename}")
        rows.append([filename] + sample.points.reshape(-1).tolist())

    frame = pd.DataFrame(rows, columns=annotation_columns(n_points))
    frame.to_csv(directory / ANNOTATION_FILE, index=False, encoding='utf-8')
    logger.info(f"Wrote {len(rows)} samples to {directory} ({bit_depth}-bit PNG)")
    return directory


def rotate_points(points: np.ndarray, theta: float, image_dims: Tuple[int, int]) -> np.ndarray:
    """Rotate (x, y) pixel points by theta degrees about ((W-1)/2, (H-1)/2), y pointing down."""
    height, width = image_dims
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    c, s = math.cos(math.radians(theta)), math.sin(math.radians(theta))
    dx, dy = points[:, 0] - cx, points[:, 1] - cy
    return np.stack([cx + c * dx - s * dy, cy + s * dx + c * dy], axis=1)


def rotate_sample(sample: Sample, theta: float) -> Sample:
    """Rotate image (bilinear inverse map, zero fill) and points by the same angle about the center."""
    if theta == 0:
        return replace(sample, image=sample.image.copy(), points=sample.points.copy())
    height, width = sample.image_dims
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    c, s = math.cos(math.radians(theta)), math.sin(math.radians(theta))
    forward = np.array([[c, -s, cx - c * cx + s * cy],
                        [s, c, cy - s * cx - c * cy]], dtype=np.float64)
    image = cv2.warpAffine(sample.image, forward, (width, height), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if image.ndim == 2:
        image = image[:, :, None]
    return Sample(image=np.clip(image, 0.0, 1.0), points=rotate_points(sample.points, theta, (height, width)),
                  source_id=f"{sample.source_id}_rot{theta:+.2f}", angle=sample.angle + theta)


def clip_points(points: np.ndarray, image_dims: Tuple[int, int]) -> np.ndarray:
    height, width = image_dims
    upper = np.array([np.nextafter(width, 0), np.nextafter(height, 0)])
    return np.clip(points, 0.0, upper)


def augment_dataset(dataset: Dataset, rng: RngStream,
                    angle_range: Tuple[float, float] = (20.0, 30.0)) -> Dataset:
    """Originals, then one left and one right rotation per sample (triples the size)."""
    low, high = angle_range
    rotated = []
    for sample in dataset:
        left = float(rng.uniform(low, high))
        right = -float(rng.uniform(low, high))
        for theta in (left, right):
            turned = rotate_sample(sample, theta)
            turned.points = clip_points(turned.points, sample.image_dims)
            rotated.append(turned)
    logger.info(f"Augmented {len(dataset)} samples with {len(rotated)} rotations")
    return Dataset(list(dataset.samples) + rotated, split=dataset.split, image_dims=dataset.image_dims)


def split_dataset(dataset: Dataset, val_fraction: float, test_fraction: float,
                  rng: RngStream) -> Tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle split; each part keeps the source ordering."""
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise ConfigurationError(f"bad split fractions val={val_fraction}, test={test_fraction}")
    order = rng.permutation(len(dataset))
    n_val = int(round(len(dataset) * val_fraction))
    n_test = int(round(len(dataset) * test_fraction))
    val_idx = sorted(order[:n_val].tolist())
    test_idx = sorted(order[n_val:n_val + n_test].tolist())
    train_idx = sorted(order[n_val + n_test:].tolist())
    return (dataset.subset(train_idx, 'train'), dataset.subset(val_idx, 'val'),
            dataset.subset(test_idx, 'test'))


def _gaussian_spot(grid_x: np.ndarray, grid_y: np.ndarray, x: float, y: float, sigma: float) -> np.ndarray:
    return np.exp(-((grid_x - x) ** 2 + (grid_y - y) ** 2) / (2.0 * sigma * sigma))


def synth_sample(dims: Tuple[int, int], rng: RngStream, index: int = 0,
                 n_points: int = DEFAULT_POINTS) -> Sample:
    """One thermal-like image: smooth background, warm elliptical face, bright ring of landmarks."""
    height, width = dims
    grid_y, grid_x = np.mgrid[0:height, 0:width].astype(np.float64)

    coarse = rng.uniform(0.15, 0.35, (4, 5))
    background = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_CUBIC)

    face_x = rng.uniform(0.42, 0.58) * width
    face_y = rng.uniform(0.40, 0.55) * height
    axis_x = rng.uniform(0.22, 0.30) * width
    axis_y = rng.uniform(0.30, 0.38) * height
    radius = ((grid_x - face_x) / axis_x) ** 2 + ((grid_y - face_y) / axis_y) ** 2
    face = 0.3 * np.clip(1.2 - radius, 0.0, 1.0) / 1.2
    face = cv2.GaussianBlur(face, (0, 0), sigmaX=max(1.0, 0.02 * width))

    # Perinasal ring below the face center; landmarks are its control points
    ring_x, ring_y = face_x, face_y + 0.35 * axis_y
    ring_rx, ring_ry = 0.45 * axis_x, 0.22 * axis_y
    angles = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False) + rng.uniform(-0.1, 0.1)
    points = np.stack([ring_x + ring_rx * np.cos(angles), ring_y + ring_ry * np.sin(angles)], axis=1)
    points = points + rng.normal(0.0, 0.4, points.shape)
    points = np.clip(points, [1.0, 1.0], [width - 2.0, height - 2.0])

    arc = np.zeros((height, width), dtype=np.float64)
    cv2.ellipse(arc, (int(round(ring_x)), int(round(ring_y))), (int(round(ring_rx)), int(round(ring_ry))),
                0, 0, 360, 1.0, 1)
    arc = 0.08 * cv2.GaussianBlur(arc, (0, 0), sigmaX=1.0)

    sigma = max(0.8, 0.012 * width)
    spots = sum(_gaussian_spot(grid_x, grid_y, x, y, sigma) for x, y in points)
    image = background + face + arc + 0.35 * spots + rng.normal(0.0, 0.01, (height, width))
    image = np.clip(image, 0.0, 1.0)
    return Sample(image=np.repeat(image[:, :, None], 3, axis=2), points=points, source_id=f"synth_{index:05d}")


def synth_generate(count: int, dims: Tuple[int, int], rng: RngStream,
                   n_points: int = DEFAULT_POINTS) -> Dataset:
    """`count` synthetic samples of size dims (H, W); dims must be at least 24×32."""
    height, width = dims
    if height < 24 or width < 32:
        raise ConfigurationError(f"synthetic dims must be at least 24x32, got {height}x{width}")
    samples = [synth_sample(dims, rng.split(index), index, n_points) for index in range(count)]
    logger.info(f"Generated {count} synthetic samples at {height}x{width}")
    return Dataset(samples, split='train', image_dims=(height, width))
