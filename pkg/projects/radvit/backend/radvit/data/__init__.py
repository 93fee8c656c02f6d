from radvit.data.convert import convert_medmnist
from radvit.data.manifest import (
    DatasetSplits,
    ManifestDataset,
    MemoryDataset,
    load_dataset,
    make_loader,
    read_manifest,
    write_manifest,
)
from radvit.data.synthetic import (
    export_synthetic,
    synth_blobs,
    synth_shapes_captions,
    synth_squares,
    synthetic_splits,
)

__all__ = [
    "DatasetSplits",
    "ManifestDataset",
    "MemoryDataset",
    "convert_medmnist",
    "export_synthetic",
    "load_dataset",
    "make_loader",
    "read_manifest",
    "synth_blobs",
    "synth_shapes_captions",
    "synth_squares",
    "synthetic_splits",
    "write_manifest",
]
