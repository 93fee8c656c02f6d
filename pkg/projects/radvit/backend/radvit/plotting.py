"""
Static figures from metric CSVs and segmentation masks
"""
from pathlib import Path
from typing import List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger as log  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from PIL import Image  # noqa: E402
from radvit.exceptions import DataError  # noqa: E402

# background is transparent in overlays
OVERLAY_COLORS = ["#00000000", "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4"]


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Metric file not found: {path}")
    frame = pd.read_csv(path)
    if frame.empty:
        raise DataError(f"{path} has no rows")
    return frame


def plot_metrics(
    csv_path: Union[str, Path],
    output: Union[str, Path],
    columns: Optional[Sequence[str]] = None,
) -> Path:
    """
    One panel per metric column against step or epoch; files with a
    split column get one line per split.
    """

    frame = read_metrics(csv_path)
    x = "step" if "step" in frame.columns else "epoch"
    if x not in frame.columns:
        raise DataError(f"{csv_path} has neither a step nor an epoch column")

    skip = {x, "split"}
    metrics = [
        c
        for c in (columns or frame.columns)
        if c not in skip and pd.api.types.is_numeric_dtype(frame[c])
    ]
    if not metrics:
        raise DataError(f"{csv_path} has no numeric metric column")

    n_cols = min(3, len(metrics))
    n_rows = int(np.ceil(len(metrics) / n_cols))
    fig, axes = plt.subplots(
        n_rows, n_cols, figsize=(5 * n_cols, 4 * n_rows), squeeze=False
    )
    groups = frame.groupby("split") if "split" in frame.columns else [("", frame)]

    for ax, metric in zip(axes.flat, metrics):
        for split, rows in groups:
            values = rows[[x, metric]].dropna()
            if len(values):
                ax.plot(
                    values[x],
                    values[metric],
                    marker="o",
                    markersize=3,
                    label=split or None,
                )
        ax.set_title(metric)
        ax.set_xlabel(x)
        ax.grid(True)
        if "split" in frame.columns:
            ax.legend()
    for ax in list(axes.flat)[len(metrics) :]:
        ax.set_visible(False)

    fig.tight_layout()
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, dpi=100)
    plt.close(fig)
    log.info("Metrics of {} plotted to {}", csv_path, output)
    return output


def _gray(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


def plot_overlay(
    image_path: Union[str, Path],
    mask_path: Union[str, Path],
    output: Union[str, Path],
    alpha: float = 0.5,
) -> Path:
    image = _gray(Path(image_path))
    mask = _gray(Path(mask_path))
    if image.shape != mask.shape:
        with Image.open(mask_path) as img:
            mask = np.asarray(
                img.convert("L").resize(image.shape[::-1], Image.NEAREST)
            )

    n_colors = max(int(mask.max()) + 1, 2)
    colors = (OVERLAY_COLORS * (n_colors // len(OVERLAY_COLORS) + 1))[:n_colors]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(image, cmap="gray")
    ax.imshow(
        np.ma.masked_equal(mask, 0),
        cmap=ListedColormap(colors),
        vmin=0,
        vmax=n_colors - 1,
        alpha=alpha,
        interpolation="nearest",
    )
    ax.axis("off")

    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return output


def plot_overlays(
    images_dir: Union[str, Path],
    masks_dir: Union[str, Path],
    output_dir: Union[str, Path],
) -> List[Path]:
    """Overlay every mask on the image with the same file stem"""

    images = {p.stem: p for p in Path(images_dir).glob("*.png")}
    outputs = []
    for mask in sorted(Path(masks_dir).glob("*.png")):
        stem = mask.stem.removesuffix("_mask")
        if stem not in images:
            log.warning("No image for mask {}", mask)
            continue
        outputs.append(
            plot_overlay(images[stem], mask, Path(output_dir) / f"{stem}_overlay.png")
        )
    log.info("{} overlays written to {}", len(outputs), output_dir)
    return outputs
