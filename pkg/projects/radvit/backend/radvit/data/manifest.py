"""
Manifest-driven datasets.

A manifest is a JSON document stored next to the images:

    {
      "task": "classification" | "segmentation" | "captioning" | "pretrain",
      "n_classes": 2,
      "image_size": 224,
      "normalization": {"mean": [m, m, m], "std": [s, s, s]},
      "splits": {
        "train": [{"image": "train/0000.png", "label": 1}, ...],
        "val": [...],
        "test": [...]
      }
    }

Paths are relative to the manifest. Segmentation samples carry a "mask"
(single channel PNG of integer labels), captioning samples a "caption".
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from glom import glom
from loguru import logger as log
from marshmallow import RAISE, Schema, ValidationError, fields, validate
from PIL import Image
from radvit.core.seeding import epoch_generator
from radvit.exceptions import DataError
from torch.utils.data import DataLoader, Dataset
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

TASKS = ("classification", "segmentation", "captioning", "pretrain")
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"

# default resize policy per task
TASK_IMAGE_SIZE = {
    "classification": 224,
    "segmentation": 448,
    "captioning": 224,
    "pretrain": 256,
}


class SampleSchema(Schema):
    class Meta:
        unknown = RAISE

    image = fields.Str(required=True)
    label = fields.Int(load_default=None, allow_none=True)
    mask = fields.Str(load_default=None, allow_none=True)
    caption = fields.Str(load_default=None, allow_none=True)


class NormalizationSchema(Schema):
    mean = fields.List(fields.Float(), required=True, validate=validate.Length(equal=3))
    std = fields.List(fields.Float(), required=True, validate=validate.Length(equal=3))


class ManifestSchema(Schema):
    class Meta:
        unknown = RAISE

    task = fields.Str(required=True, validate=validate.OneOf(TASKS))
    n_classes = fields.Int(load_default=None, allow_none=True)
    image_size = fields.Int(load_default=None, allow_none=True)
    normalization = fields.Nested(
        NormalizationSchema, load_default=None, allow_none=True
    )
    splits = fields.Dict(
        keys=fields.Str(validate=validate.OneOf(SPLITS)),
        values=fields.List(fields.Nested(SampleSchema)),
        required=True,
    )


class MemoryDataset(Dataset):
    """Normalized images [N, 3, H, W] with their targets, kept in memory"""

    def __init__(
        self,
        images: torch.Tensor,
        targets: Sequence[Any],
        task: str,
        n_classes: Optional[int] = None,
        names: Optional[Sequence[str]] = None,
    ) -> None:
        if len(images) != len(targets):
            raise DataError(f"{len(images)} images for {len(targets)} targets")
        self.images = images
        self.targets = list(targets)
        self.task = task
        self.n_classes = n_classes
        self.names = list(names) if names is not None else [
            f"{i:05d}" for i in range(len(images))
        ]

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, Any]:
        target = self.targets[index]
        if isinstance(target, torch.Tensor):
            target = target.clone()
        return self.images[index].clone(), target


class ManifestDataset(Dataset):
    """Lazy loader of the PNG files listed by one split of a manifest"""

    def __init__(
        self,
        root: Path,
        samples: List[Dict[str, Any]],
        task: str,
        image_size: int,
        mean: Sequence[float],
        std: Sequence[float],
        n_classes: Optional[int] = None,
    ) -> None:
        self.root = root
        self.samples = samples
        self.task = task
        self.image_size = image_size
        self.mean = list(mean)
        self.std = list(std)
        self.n_classes = n_classes
        self.names = [s["image"] for s in samples]

    def __len__(self) -> int:
        return len(self.samples)

    def _image(self, relpath: str) -> torch.Tensor:
        pixels = read_image(self.root / relpath, self.image_size)
        return TF.normalize(pixels, self.mean, self.std)

    def _mask(self, relpath: str) -> torch.Tensor:
        with Image.open(self.root / relpath) as img:
            mask = torch.from_numpy(np.array(img.convert("L"), dtype=np.int64))
        mask = TF.resize(
            mask[None], [self.image_size, self.image_size], InterpolationMode.NEAREST
        )[0]
        if self.n_classes is not None and int(mask.max()) >= self.n_classes:
            raise DataError(
                f"{relpath}: mask label {int(mask.max())} out of range "
                f"[0, {self.n_classes})"
            )
        return mask

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, Any]:
        sample = self.samples[index]
        image = self._image(sample["image"])
        if self.task == "classification":
            return image, int(sample["label"])
        if self.task == "segmentation":
            return image, self._mask(sample["mask"])
        if self.task == "captioning":
            return image, sample["caption"]
        return image, 0


@dataclass
class DatasetSplits:
    task: str
    train: Dataset
    val: Dataset
    test: Dataset
    n_classes: Optional[int] = None
    mean: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    std: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    image_size: Optional[int] = None

    def split(self, name: str) -> Dataset:
        if name not in SPLITS:
            raise DataError(f"Unknown split: {name}")
        return getattr(self, name)


def read_image(path: Path, size: Optional[int] = None) -> torch.Tensor:
    """[3, H, W] float in [0, 1], grayscale replicated"""

    with Image.open(path) as img:
        gray = img.convert("L")
        if size is not None and gray.size != (size, size):
            gray = gray.resize((size, size), Image.BILINEAR)
        pixels = TF.pil_to_tensor(gray).float() / 255.0
    return pixels.expand(3, -1, -1).contiguous()


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"Manifest not found: {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}") from e
    try:
        return ManifestSchema().load(raw)
    except ValidationError as e:
        raise DataError(f"Invalid manifest {path}: {e.messages}") from e


def _check_samples(root: Path, manifest: Mapping[str, Any]) -> None:
    task = manifest["task"]
    n_classes = manifest.get("n_classes")
    seen: Dict[str, str] = {}
    for split, samples in manifest["splits"].items():
        for sample in samples:
            image = sample["image"]
            if image in seen:
                raise DataError(f"{image} is listed in both {seen[image]} and {split}")
            seen[image] = split
            files = [image] + ([sample["mask"]] if sample.get("mask") else [])
            for relpath in files:
                if not (root / relpath).exists():
                    raise DataError(f"Missing file: {root / relpath}")
            if task == "classification":
                label = sample.get("label")
                if label is None or n_classes is None or not 0 <= label < n_classes:
                    raise DataError(
                        f"{image}: label {label} out of range [0, {n_classes})"
                    )
            elif task == "segmentation" and not sample.get("mask"):
                raise DataError(f"{image}: segmentation sample without a mask")
            elif task == "captioning" and not sample.get("caption"):
                raise DataError(f"{image}: captioning sample without a caption")


def load_dataset(
    manifest_path: Union[str, Path], image_size: Optional[int] = None
) -> DatasetSplits:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = read_manifest(path)
    root = path.parent
    _check_samples(root, manifest)

    task = manifest["task"]
    size = image_size or manifest.get("image_size") or TASK_IMAGE_SIZE[task]
    mean = glom(manifest, "normalization.mean", default=None) or [0.0, 0.0, 0.0]
    std = glom(manifest, "normalization.std", default=None) or [1.0, 1.0, 1.0]

    datasets = {
        split: ManifestDataset(
            root,
            manifest["splits"].get(split, []),
            task,
            size,
            mean,
            std,
            manifest.get("n_classes"),
        )
        for split in SPLITS
    }
    log.info(
        "Loaded {} manifest {}: {}",
        task,
        path,
        {k: len(v) for k, v in datasets.items()},
    )
    return DatasetSplits(
        task=task,
        n_classes=manifest.get("n_classes"),
        mean=list(mean),
        std=list(std),
        image_size=size,
        **datasets,
    )


def channel_stats(images: Sequence[torch.Tensor]) -> Tuple[List[float], List[float]]:
    """Per-channel mean and std of [3, H, W] images in [0, 1]"""

    if not images:
        raise DataError("Cannot compute normalization statistics without images")
    stacked = torch.cat([img.double().reshape(3, -1) for img in images], dim=1)
    mean = stacked.mean(dim=1)
    std = stacked.std(dim=1).clamp_min(1e-6)
    return mean.tolist(), std.tolist()


def write_manifest(
    directory: Union[str, Path],
    task: str,
    splits: Mapping[str, List[Dict[str, Any]]],
    n_classes: Optional[int] = None,
    image_size: Optional[int] = None,
) -> Path:
    """Write manifest.json with the normalization computed on the train split"""

    directory = Path(directory)
    train = splits.get("train", [])
    mean, std = channel_stats(
        [read_image(directory / s["image"], image_size) for s in train]
    )
    manifest = {
        "task": task,
        "n_classes": n_classes,
        "image_size": image_size,
        "normalization": {"mean": mean, "std": std},
        "splits": {k: list(v) for k, v in splits.items()},
    }
    # validates before anything is written
    ManifestSchema().load(json.loads(json.dumps(manifest)))

    path = directory / MANIFEST_NAME
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    log.info("Manifest written to {}", path)
    return path


def make_loader(
    dataset: Dataset,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    drop_last: bool = False,
) -> DataLoader:
    """Single-process loader; the order is a function of (seed, epoch)"""

    if len(dataset) == 0:
        raise DataError("Cannot iterate over an empty split")
    return DataLoader(
        dataset,
        batch_size=min(batch_size, len(dataset)),
        shuffle=shuffle,
        drop_last=drop_last,
        generator=epoch_generator(seed, epoch) if shuffle else None,
        num_workers=0,
    )
