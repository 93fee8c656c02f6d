from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
from loguru import logger as log
from PIL import Image
from radvit.data.manifest import SPLITS, write_manifest
from radvit.exceptions import DataError


def _as_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 3:
        # RGB packed as [H, W, 3]
        image = image.astype(np.float32).mean(axis=-1)
    if image.dtype != np.uint8:
        image = np.clip(np.round(image), 0, 255).astype(np.uint8)
    return image


def convert_medmnist(
    npz_path: Union[str, Path], directory: Union[str, Path]
) -> Path:
    """
    Unpack a MedMNIST-style archive (train/val/test _images and _labels
    arrays) into PNG files and a classification manifest.
    """

    npz_path = Path(npz_path)
    directory = Path(directory)
    if not npz_path.exists():
        raise DataError(f"Archive not found: {npz_path}")

    with np.load(npz_path) as archive:
        arrays = {k: archive[k] for k in archive.files}

    splits: Dict[str, List[Dict[str, Any]]] = {}
    max_label = -1
    for split in SPLITS:
        images_key, labels_key = f"{split}_images", f"{split}_labels"
        if images_key not in arrays or labels_key not in arrays:
            raise DataError(f"{npz_path}: missing {images_key} or {labels_key}")
        images = arrays[images_key]
        labels = arrays[labels_key].reshape(len(images), -1)
        if labels.shape[1] != 1:
            raise DataError(
                f"{npz_path}: multi-label targets are not supported ({labels.shape[1]})"
            )

        (directory / split).mkdir(parents=True, exist_ok=True)
        samples = []
        for i, (image, label) in enumerate(zip(images, labels[:, 0])):
            relpath = f"{split}/{i:06d}.png"
            Image.fromarray(_as_gray(image), mode="L").save(directory / relpath)
            samples.append({"image": relpath, "label": int(label)})
            max_label = max(max_label, int(label))
        splits[split] = samples
        log.debug("{}: {} images", split, len(samples))

    path = write_manifest(directory, "classification", splits, n_classes=max_label + 1)
    log.info("Converted {} into {}", npz_path, path)
    return path
