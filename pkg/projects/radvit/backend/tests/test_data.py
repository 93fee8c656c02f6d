import json
from pathlib import Path
from typing import List

import numpy as np
import pytest
import torch
from faker import Faker
from PIL import Image
from radvit.data.convert import convert_medmnist
from radvit.data.manifest import (
    MANIFEST_NAME,
    DatasetSplits,
    MemoryDataset,
    channel_stats,
    load_dataset,
    make_loader,
    read_image,
)
from radvit.data.synthetic import (
    POSITIONS,
    SHAPES,
    caption_for,
    export_synthetic,
    generate,
    split_indices,
    synthetic_splits,
)
from radvit.exceptions import DataError
from tests import RadvitTests


def loader_order(dataset: MemoryDataset, seed: int, epoch: int) -> List[int]:
    loader = make_loader(dataset, 4, seed, epoch)
    return [int(t) for _, targets in loader for t in targets]


class TestApp(RadvitTests):
    def test_blobs(self, faker: Faker) -> None:

        seed = faker.pyint(max_value=10_000)
        a = generate("blobs", 20, seed=seed)
        b = generate("blobs", 20, seed=seed)
        assert np.array_equal(a.images, b.images)
        assert a.targets == b.targets
        assert not np.array_equal(a.images, generate("blobs", 20, seed=seed + 1).images)

        assert a.images.shape == (20, 56, 56)
        assert a.images.dtype == np.float32
        assert a.images.min() >= 0.0 and a.images.max() <= 1.0
        assert sorted(a.targets) == [0] * 10 + [1] * 10

        three = generate("blobs", 21, seed=seed, n_classes=3)
        assert [three.targets.count(c) for c in range(3)] == [7, 7, 7]

        # brighter and wider blobs for higher classes
        means = [a.images[np.array(a.targets) == c].mean() for c in (0, 1)]
        assert means[1] > means[0]

        with pytest.raises(DataError):
            generate("blobs", 0)
        with pytest.raises(DataError):
            generate("blobs", 4, n_classes=1)
        with pytest.raises(DataError):
            generate("circles", 4)

    def test_squares(self) -> None:

        data = generate("squares", 12, seed=0)
        assert data.images.shape == (12, 224, 224)
        for image, mask in zip(data.images, data.targets):
            assert set(np.unique(mask).tolist()) == {0, 1}
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            top, side = rows[0], len(rows)
            left = cols[0]
            assert top % 8 == 0 and left % 8 == 0 and side % 8 == 0
            assert len(cols) == side
            assert mask.sum() == side * side
            assert image[mask == 1].mean() > image[mask == 0].mean()

        assert generate("squares", 2, size=64).images.shape == (2, 64, 64)
        with pytest.raises(DataError):
            generate("squares", 2, size=60)

    def test_captions(self) -> None:

        data = generate("shapes_captions", 12, seed=0)
        expected = {caption_for(s, p) for s in SHAPES for p in POSITIONS}
        assert set(data.targets) == expected
        assert all(data.targets.count(c) == 2 for c in expected)
        assert caption_for("cross", "top") == "a cross at the top"

    def test_splits(self) -> None:

        assert split_indices(16) == {
            "train": list(range(12)),
            "val": [12, 13, 14, 15],
            "test": [],
        }
        assert split_indices(1)["train"] == [0]
        indices = split_indices(10, (0.6, 0.2, 0.2))
        assert [len(indices[s]) for s in ("train", "val", "test")] == [6, 2, 2]

        data = synthetic_splits("blobs", 16, seed=0)
        assert isinstance(data, DatasetSplits)
        assert (data.task, data.n_classes, data.image_size) == ("classification", 2, 56)
        assert (len(data.train), len(data.val), len(data.test)) == (12, 4, 0)
        assert data.train.names[0] == "blobs_00000"

        # normalized with the train statistics
        train = data.train.images
        assert torch.allclose(train.mean(dim=(0, 2, 3)), torch.zeros(3), atol=1e-4)
        assert torch.allclose(train.std(dim=(0, 2, 3)), torch.ones(3), atol=1e-2)

        squares = synthetic_splits("squares", 4, seed=0)
        image, mask = squares.train[0]
        assert squares.task == "segmentation"
        assert image.shape == (3, 224, 224)
        assert mask.shape == (224, 224) and mask.dtype == torch.int64

        with pytest.raises(DataError):
            data.split("holdout")

    def test_export(self, tmp_path: Path) -> None:

        path = export_synthetic("blobs", 10, 0, tmp_path)
        assert path == tmp_path / MANIFEST_NAME
        data = load_dataset(tmp_path)
        generated = generate("blobs", 10, seed=0)

        assert (len(data.train), len(data.val), len(data.test)) == (6, 2, 2)
        assert data.image_size == 56
        image, label = data.train[0]
        assert label == generated.targets[0]
        mean = torch.tensor(data.mean).view(3, 1, 1)
        std = torch.tensor(data.std).view(3, 1, 1)
        pixels = image * std + mean
        quantized = np.round(generated.images[0] * 255) / 255
        assert np.allclose(pixels[0].numpy(), quantized, atol=1e-5)

        export_synthetic("squares", 4, 0, tmp_path / "squares", size=64)
        squares = load_dataset(tmp_path / "squares" / MANIFEST_NAME)
        _, mask = squares.train[0]
        expected = generate("squares", 4, size=64).targets[0]
        assert torch.equal(mask, torch.from_numpy(expected))

        export_synthetic("shapes_captions", 6, 0, tmp_path / "captions")
        captions = load_dataset(tmp_path / "captions")
        assert captions.task == "captioning"
        assert isinstance(captions.train[0][1], str)

        resized = load_dataset(tmp_path, image_size=28)
        assert resized.train[0][0].shape == (3, 28, 28)

    def test_manifest_errors(self, tmp_path: Path) -> None:

        export_synthetic("blobs", 6, 0, tmp_path)
        manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())

        def write(content: dict) -> Path:
            path = tmp_path / "broken.json"
            path.write_text(json.dumps(content))
            return path

        broken = json.loads(json.dumps(manifest))
        broken["splits"]["train"][0]["label"] = 5
        with pytest.raises(DataError, match="out of range"):
            load_dataset(write(broken))

        broken = json.loads(json.dumps(manifest))
        broken["splits"]["val"].append(dict(broken["splits"]["train"][0]))
        with pytest.raises(DataError, match="both"):
            load_dataset(write(broken))

        broken = json.loads(json.dumps(manifest))
        broken["splits"]["train"][0]["image"] = "train/missing.png"
        with pytest.raises(DataError, match="Missing"):
            load_dataset(write(broken))

        broken = json.loads(json.dumps(manifest))
        broken["modality"] = "xray"
        with pytest.raises(DataError):
            load_dataset(write(broken))

        (tmp_path / "invalid.json").write_text("{")
        with pytest.raises(DataError):
            load_dataset(tmp_path / "invalid.json")
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nowhere")

        export_synthetic("squares", 2, 0, tmp_path / "squares", size=32)
        manifest = json.loads((tmp_path / "squares" / MANIFEST_NAME).read_text())
        mask = tmp_path / "squares" / manifest["splits"]["train"][0]["mask"]
        Image.fromarray(np.full((32, 32), 7, dtype=np.uint8), mode="L").save(mask)
        data = load_dataset(tmp_path / "squares")
        with pytest.raises(DataError):
            data.train[0]

    def test_convert(self, tmp_path: Path) -> None:

        rng = np.random.default_rng(0)
        arrays = {}
        for split, n in (("train", 6), ("val", 2), ("test", 2)):
            images = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
            arrays[f"{split}_images"] = images
            arrays[f"{split}_labels"] = rng.integers(0, 3, (n, 1))
        arrays["train_labels"][0, 0] = 2
        np.savez(tmp_path / "mnist.npz", **arrays)

        path = convert_medmnist(tmp_path / "mnist.npz", tmp_path / "out")
        data = load_dataset(path)
        assert data.n_classes == 3
        assert (len(data.train), len(data.val), len(data.test)) == (6, 2, 2)
        pixels = read_image(tmp_path / "out" / data.train.names[1])
        assert torch.allclose(
            pixels[0] * 255, torch.from_numpy(arrays["train_images"][1]).float()
        )
        assert data.train[1][1] == int(arrays["train_labels"][1, 0])

        rgb = dict(arrays)
        rgb["train_images"] = rng.integers(0, 256, (6, 28, 28, 3), dtype=np.uint8)
        np.savez(tmp_path / "rgb.npz", **rgb)
        path = convert_medmnist(tmp_path / "rgb.npz", tmp_path / "rgb")
        image, _ = load_dataset(path).train[0]
        assert image.shape == (3, 28, 28)

        multi = dict(arrays, train_labels=rng.integers(0, 2, (6, 3)))
        np.savez(tmp_path / "multi.npz", **multi)
        with pytest.raises(DataError):
            convert_medmnist(tmp_path / "multi.npz", tmp_path / "multi")

        partial = {k: v for k, v in arrays.items() if not k.startswith("test")}
        np.savez(tmp_path / "partial.npz", **partial)
        with pytest.raises(DataError):
            convert_medmnist(tmp_path / "partial.npz", tmp_path / "partial")
        with pytest.raises(DataError):
            convert_medmnist(tmp_path / "none.npz", tmp_path / "none")

    def test_loader(self) -> None:

        images = torch.zeros(20, 3, 14, 14)
        dataset = MemoryDataset(images, list(range(20)), "classification")
        first = loader_order(dataset, seed=0, epoch=0)
        assert sorted(first) == list(range(20))
        assert loader_order(dataset, seed=0, epoch=0) == first
        assert loader_order(dataset, seed=0, epoch=1) != first
        assert loader_order(dataset, seed=1, epoch=0) != first

        ordered = [int(t) for _, b in make_loader(dataset, 8, shuffle=False) for t in b]
        assert ordered == list(range(20))
        batches = list(make_loader(dataset, 64, shuffle=False))
        assert len(batches) == 1

        with pytest.raises(DataError):
            make_loader(MemoryDataset(images[:0], [], "classification"), 4)
        with pytest.raises(DataError):
            MemoryDataset(images[:2], [0], "classification")
        with pytest.raises(DataError):
            channel_stats([])
