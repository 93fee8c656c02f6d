import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger as log
from PIL import Image
from radvit.config import structural_keys
from radvit.core.seeding import seed_everything
from radvit.data.manifest import DatasetSplits, make_loader
from radvit.exceptions import DataError
from radvit.metrics import seg_metrics
from radvit.models.dense import DenseConfig, Segmenter, count_trainable, upsample
from radvit.models.vit import VisionTransformer
from radvit.tasks.common import (
    History,
    check_split,
    load_encoder,
    resolve_device,
    save_module,
    snapshot_state,
)
from torch.utils.data import Dataset

HISTORY_COLUMNS = ("epoch", "split", "loss", "miou", "dice", "f1")
CHECKPOINT_FILE = "segmenter.radvit"


def dense_config(
    conf: Mapping[str, Any], encoder: VisionTransformer, n_classes: int
) -> DenseConfig:
    return DenseConfig.preset(
        conf["preset"],
        embed_dim=encoder.embed_dim,
        fusion_dim=conf.get("fusion_dim"),
        decoder_dim=conf.get("decoder_dim"),
        n_classes=n_classes,
        layers=conf.get("intermediate_layers"),
    )


def segmentation_loss(
    logits: torch.Tensor, masks: torch.Tensor
) -> torch.Tensor:
    """Per-pixel cross-entropy of the logits upsampled to the mask resolution"""

    if logits.shape[0] != masks.shape[0]:
        raise DataError(f"{logits.shape[0]} predictions for {masks.shape[0]} masks")
    return F.cross_entropy(upsample(logits, masks.shape[-2:]), masks)


def _check_masks(images: torch.Tensor, masks: torch.Tensor) -> None:
    if tuple(images.shape[-2:]) != tuple(masks.shape[-2:]):
        raise DataError(
            f"Mask size {tuple(masks.shape[-2:])} does not match "
            f"image size {tuple(images.shape[-2:])}"
        )


@torch.no_grad()
def predict_masks(
    model: Segmenter, dataset: Dataset, batch_size: int, device: torch.device
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Predicted and true label maps [N, H, W] plus the mean loss"""

    model.eval()
    preds, truths, losses = [], [], []
    for images, masks in make_loader(dataset, batch_size, shuffle=False):
        _check_masks(images, masks)
        images, masks = images.to(device), masks.to(device)
        logits = upsample(model(images), images.shape[-2:])
        losses.append(float(F.cross_entropy(logits, masks)) * len(images))
        preds.append(logits.argmax(dim=1).cpu())
        truths.append(masks.cpu())
    n = sum(len(p) for p in preds)
    return torch.cat(preds).numpy(), torch.cat(truths).numpy(), sum(losses) / n


def evaluate(
    model: Segmenter,
    dataset: Dataset,
    n_classes: int,
    batch_size: int,
    device: torch.device,
) -> Dict[str, Any]:
    preds, truths, loss = predict_masks(model, dataset, batch_size, device)
    scores = seg_metrics(preds, truths, n_classes)
    scores["loss"] = loss
    return scores


@dataclass
class SegmentationResult:
    model: Segmenter
    history: History
    best_epoch: int
    best_miou: float
    test: Optional[Dict[str, Any]] = None


def train_segmenter(
    data: DatasetSplits,
    conf: Mapping[str, Any],
    encoder: Optional[VisionTransformer] = None,
    run_dir: Optional[Union[str, Path]] = None,
) -> SegmentationResult:
    """
    Train the dense adapter on top of a frozen encoder. The returned model
    carries the adapter weights of the epoch with the best validation mIoU.
    """

    seed_everything(conf["seed"])
    check_split(data, "train")
    check_split(data, "val")
    n_classes = data.n_classes or conf.get("n_classes") or 2

    device = resolve_device(conf.get("device"))
    encoder = encoder if encoder is not None else load_encoder(conf)
    model = Segmenter(encoder, dense_config(conf, encoder, n_classes)).to(device)
    optimizer = torch.optim.AdamW(
        model.adapter.parameters(),
        lr=conf["learning_rate"],
        weight_decay=conf["weight_decay"],
    )

    run_dir = Path(run_dir) if run_dir else None
    history = History(HISTORY_COLUMNS)
    best_miou, best_epoch, best_state = -1.0, -1, None
    batch_size = conf["batch_size"]
    log.info(
        "Training dense adapter: {} trainable parameters, layers {}, "
        "{} epochs x {} steps",
        count_trainable(model),
        model.layers,
        conf["epochs"],
        math.ceil(len(data.train) / batch_size),
    )

    for epoch in range(conf["epochs"]):
        model.train()
        losses = []
        for images, masks in make_loader(data.train, batch_size, conf["seed"], epoch):
            _check_masks(images, masks)
            images, masks = images.to(device), masks.to(device)
            if conf.get("augment"):
                flip = torch.rand(len(images)) < 0.5
                images[flip] = images[flip].flip(-1)
                masks[flip] = masks[flip].flip(-1)

            loss = segmentation_loss(model(images), masks)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss))

        val = evaluate(model, data.val, n_classes, batch_size, device)
        history.append(
            epoch=epoch, split="train", loss=float(np.mean(losses))
        )
        history.append(epoch=epoch, split="val", **val)
        log.info(
            "Epoch {}: loss={:.4f} val miou={:.4f} dice={:.4f} f1={:.4f}",
            epoch,
            np.mean(losses),
            val["miou"],
            val["dice"],
            val["f1"],
        )
        if val["miou"] > best_miou:
            best_miou, best_epoch = val["miou"], epoch
            best_state = snapshot_state(model.adapter)
        history.write(run_dir / "history.csv" if run_dir else None)

    if best_state is not None:
        model.adapter.load_state_dict(best_state)
    log.info("Best validation mIoU {:.4f} at epoch {}", best_miou, best_epoch)

    test = None
    if len(data.test):
        test = evaluate(model, data.test, n_classes, batch_size, device)
        log.info("Test mIoU={:.4f} dice={:.4f}", test["miou"], test["dice"])

    if run_dir:
        save_module(
            model.adapter,
            run_dir / CHECKPOINT_FILE,
            config=structural_keys(conf),
            extra={"dense": model.adapter.config.as_dict(), "best_epoch": best_epoch},
        )
    return SegmentationResult(model, history, best_epoch, best_miou, test)


def export_predictions(
    model: Segmenter,
    dataset: Dataset,
    directory: Union[str, Path],
    batch_size: int = 8,
    device: Optional[torch.device] = None,
) -> List[Path]:
    """Predicted label maps as single-channel PNG files named after the inputs"""

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    device = device or torch.device("cpu")
    preds, _, _ = predict_masks(model, dataset, batch_size, device)
    names = getattr(dataset, "names", [f"{i:05d}" for i in range(len(preds))])

    paths = []
    for name, pred in zip(names, preds):
        path = directory / f"{Path(name).stem}.png"
        Image.fromarray(pred.astype(np.uint8), mode="L").save(path)
        paths.append(path)
    log.info("{} predicted masks written to {}", len(paths), directory)
    return paths
