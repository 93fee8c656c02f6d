"""
Synthetic datasets, pure functions of their seed.

blobs            centred Gaussian blob, amplitude and width set by the class
squares          one bright axis-aligned square on a dark background
shapes_captions  a circle, square or cross at the top or the bottom,
                 captioned with the shape name and the position

Images are grayscale float32 arrays in [0, 1].
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from loguru import logger as log
from PIL import Image
from radvit.data.manifest import (
    DatasetSplits,
    MemoryDataset,
    channel_stats,
    write_manifest,
)
from radvit.exceptions import DataError

SHAPES = ("circle", "square", "cross")
POSITIONS = ("top", "bottom")


@dataclass
class SyntheticSet:
    kind: str
    images: np.ndarray
    targets: List[Any]
    n_classes: Optional[int] = None

    def __len__(self) -> int:
        return len(self.images)


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    return yy, xx


def synth_blobs(
    n: int, n_classes: int = 2, seed: int = 0, size: int = 56
) -> SyntheticSet:
    if n <= 0:
        raise DataError(f"Invalid dataset size: {n}")
    if n_classes < 2:
        raise DataError(f"At least 2 classes are required, got {n_classes}")

    rng = np.random.default_rng(seed)
    yy, xx = _grid(size)
    labels = [i % n_classes for i in range(n)]
    rng.shuffle(labels)

    images = np.empty((n, size, size), dtype=np.float32)
    for i, c in enumerate(labels):
        level = c / (n_classes - 1)
        amplitude = 0.3 + 0.6 * level
        sigma = size * (0.12 + 0.12 * level)
        cy, cx = (size - 1) / 2 + rng.uniform(-1.5, 1.5, size=2)
        blob = amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        noise = rng.normal(0.0, 0.02, size=(size, size))
        images[i] = np.clip(0.05 + blob + noise, 0.0, 1.0)

    return SyntheticSet("blobs", images, labels, n_classes)


def _square_range(size: int) -> Tuple[int, int]:
    low = max(8, (size * 2 // 7) // 8 * 8)
    high = max(low, (size * 4 // 7) // 8 * 8)
    return low, high


def synth_squares(n: int, seed: int = 0, size: int = 224) -> SyntheticSet:
    """Square corners sit on multiples of 8, so the mask survives any stride <= 8"""

    if n <= 0:
        raise DataError(f"Invalid dataset size: {n}")
    if size < 16 or size % 8:
        raise DataError(f"Square images need a size multiple of 8, got {size}")

    rng = np.random.default_rng(seed)
    low, high = _square_range(size)
    images = np.empty((n, size, size), dtype=np.float32)
    masks: List[Any] = []
    for i in range(n):
        side = int(rng.integers(low // 8, high // 8 + 1)) * 8
        top = int(rng.integers(0, (size - side) // 8 + 1)) * 8
        left = int(rng.integers(0, (size - side) // 8 + 1)) * 8

        mask = np.zeros((size, size), dtype=np.int64)
        mask[top : top + side, left : left + side] = 1
        image = 0.1 + rng.normal(0.0, 0.03, size=(size, size))
        image[mask == 1] = 0.9 + rng.normal(0.0, 0.03, size=side * side)
        images[i] = np.clip(image, 0.0, 1.0)
        masks.append(mask)

    return SyntheticSet("squares", images, masks, 2)


def _draw_shape(
    shape: str, cy: float, cx: float, radius: float, size: int
) -> np.ndarray:
    yy, xx = _grid(size)
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    if shape == "circle":
        return (dy**2 + dx**2) <= radius**2
    if shape == "square":
        return (dy <= radius) & (dx <= radius)
    bar = radius / 3
    return ((dy <= radius) & (dx <= bar)) | ((dy <= bar) & (dx <= radius))


def caption_for(shape: str, position: str) -> str:
    return f"a {shape} at the {position}"


def synth_shapes_captions(n: int, seed: int = 0, size: int = 56) -> SyntheticSet:
    if n <= 0:
        raise DataError(f"Invalid dataset size: {n}")

    rng = np.random.default_rng(seed)
    combos = [(s, p) for s in SHAPES for p in POSITIONS]
    order = [combos[i % len(combos)] for i in range(n)]
    rng.shuffle(order)

    images = np.empty((n, size, size), dtype=np.float32)
    captions = []
    for i, (shape, position) in enumerate(order):
        radius = size * rng.uniform(0.14, 0.17)
        cy = size * (0.28 if position == "top" else 0.72) + rng.uniform(-1, 1)
        cx = size / 2 + rng.uniform(-2, 2)
        image = 0.1 + rng.normal(0.0, 0.02, size=(size, size))
        image[_draw_shape(shape, cy, cx, radius, size)] = 0.9
        images[i] = np.clip(image, 0.0, 1.0)
        captions.append(caption_for(shape, position))

    return SyntheticSet("shapes_captions", images, captions)


GENERATORS = {
    "blobs": ("classification", 56),
    "squares": ("segmentation", 224),
    "shapes_captions": ("captioning", 56),
}


def generate(
    kind: str,
    n: int,
    seed: int = 0,
    size: Optional[int] = None,
    n_classes: int = 2,
) -> SyntheticSet:
    if kind not in GENERATORS:
        raise DataError(
            f"Unknown synthetic dataset {kind}, expected {sorted(GENERATORS)}"
        )
    size = size or GENERATORS[kind][1]
    if kind == "blobs":
        return synth_blobs(n, n_classes, seed, size)
    if kind == "squares":
        return synth_squares(n, seed, size)
    return synth_shapes_captions(n, seed, size)


def split_indices(
    n: int, fractions: Sequence[float] = (0.75, 0.25, 0.0)
) -> Dict[str, List[int]]:
    """Contiguous train/val/test index ranges; generators already shuffle"""

    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = max(1, min(n_train, n))
    n_val = max(0, min(n_val, n - n_train))
    return {
        "train": list(range(n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, n)),
    }


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """[N, H, W] in [0, 1] -> [N, 3, H, W]"""
    return torch.from_numpy(images).unsqueeze(1).expand(-1, 3, -1, -1).contiguous()


def synthetic_splits(
    kind: str,
    n: int,
    seed: int = 0,
    size: Optional[int] = None,
    n_classes: int = 2,
    fractions: Sequence[float] = (0.75, 0.25, 0.0),
) -> DatasetSplits:
    """In-memory splits normalized with the statistics of the train split"""

    data = generate(kind, n, seed, size, n_classes)
    task = GENERATORS[kind][0]
    pixels = to_tensor(data.images)
    indices = split_indices(n, fractions)
    mean, std = channel_stats([pixels[i] for i in indices["train"]])
    m = torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1)
    normalized = (pixels - m) / s

    def targets(idx: List[int]) -> List[Any]:
        if task == "segmentation":
            return [torch.from_numpy(data.targets[i]) for i in idx]
        return [data.targets[i] for i in idx]

    datasets = {
        split: MemoryDataset(
            normalized[idx] if idx else normalized[:0],
            targets(idx),
            task,
            data.n_classes,
            names=[f"{kind}_{i:05d}" for i in idx],
        )
        for split, idx in indices.items()
    }
    return DatasetSplits(
        task=task,
        n_classes=data.n_classes,
        mean=mean,
        std=std,
        image_size=data.images.shape[-1],
        **datasets,
    )


def _to_png(array: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(array * 255).astype(np.uint8), mode="L").save(path)


def export_synthetic(
    kind: str,
    n: int,
    seed: int,
    directory: Union[str, Path],
    size: Optional[int] = None,
    n_classes: int = 2,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
) -> Path:
    """Materialize a synthetic dataset as PNG files plus manifest.json"""

    directory = Path(directory)
    data = generate(kind, n, seed, size, n_classes)
    task = GENERATORS[kind][0]

    splits: Dict[str, List[Dict[str, Any]]] = {}
    for split, idx in split_indices(n, fractions).items():
        (directory / split).mkdir(parents=True, exist_ok=True)
        samples = []
        for i in idx:
            image = f"{split}/{i:05d}.png"
            _to_png(data.images[i], directory / image)
            sample: Dict[str, Any] = {"image": image}
            if task == "classification":
                sample["label"] = int(data.targets[i])
            elif task == "segmentation":
                mask = f"{split}/{i:05d}_mask.png"
                Image.fromarray(data.targets[i].astype(np.uint8), mode="L").save(
                    directory / mask
                )
                sample["mask"] = mask
            else:
                sample["caption"] = data.targets[i]
            samples.append(sample)
        splits[split] = samples

    path = write_manifest(
        directory,
        task,
        splits,
        n_classes=data.n_classes,
        image_size=int(data.images.shape[-1]),
    )
    log.info("Exported {} synthetic {} samples to {}", n, kind, directory)
    return path
