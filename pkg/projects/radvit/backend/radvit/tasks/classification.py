"""
Classification adaptation under three regimes.

full       every encoder and head parameter is trained
head_only  the encoder is frozen, only the linear head is trained
lora       low-rank factors on the attention projections plus the head
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger as log
from radvit.config import REGIMES, adaptation_schedule, structural_keys
from radvit.core.seeding import seed_everything
from radvit.core.types import ImageBatch
from radvit.data.manifest import DatasetSplits, make_loader
from radvit.exceptions import ConfigError, DataError
from radvit.metrics import classification_report
from radvit.models.lora import lora_wrap
from radvit.models.vit import VisionTransformer
from radvit.tasks.common import (
    History,
    apply_schedule,
    check_split,
    grad_norm,
    load_encoder,
    resolve_device,
    save_module,
    snapshot_state,
    trainable,
)
from torch import nn
from torch.utils.data import Dataset
from torchvision.transforms import v2

HISTORY_COLUMNS = ("epoch", "split", "acc", "f1", "auc")
CHECKPOINT_FILE = "classifier.radvit"


def extract_embedding(
    encoder: VisionTransformer,
    images: Union[ImageBatch, torch.Tensor],
    train_mode: bool = False,
) -> torch.Tensor:
    """Class token after the terminal norm, [B, D]"""
    return encoder.encode(images, train_mode=train_mode).class_token


class Classifier(nn.Module):
    def __init__(
        self, encoder: VisionTransformer, n_classes: int, regime: str = "full"
    ) -> None:
        super().__init__()
        if regime not in REGIMES:
            raise ConfigError(f"Unknown regime {regime}, expected one of {REGIMES}")
        self.encoder = encoder
        self.head = nn.Linear(encoder.embed_dim, n_classes)
        self.regime = regime
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)
        if regime == "head_only":
            self.encoder.requires_grad_(False)

    @property
    def encoder_frozen(self) -> bool:
        return self.regime == "head_only"

    def train(self, mode: bool = True) -> "Classifier":
        super().train(mode)
        if self.encoder_frozen:
            self.encoder.eval()
        return self

    def forward(self, images: Union[ImageBatch, torch.Tensor]) -> torch.Tensor:
        if self.encoder_frozen:
            with torch.no_grad():
                embedding = extract_embedding(self.encoder, images)
        else:
            embedding = extract_embedding(
                self.encoder, images, train_mode=self.training
            )
        return self.head(embedding)

    @torch.no_grad()
    def predict_proba(self, images: Union[ImageBatch, torch.Tensor]) -> torch.Tensor:
        return F.softmax(self(images), dim=-1)


def build_classifier(
    encoder: VisionTransformer, n_classes: int, conf: Mapping[str, Any]
) -> Classifier:
    regime = conf.get("regime", "full")
    model = Classifier(encoder, n_classes, regime)
    if regime == "lora":
        store = lora_wrap(
            model.encoder,
            conf.get("lora_targets") or ("*.attn.q", "*.attn.v"),
            r=conf["lora_r"],
            alpha=conf["lora_alpha"],
            prefix="encoder",
        )
        log.info(
            "LoRA scaling {}: {} of {} encoder parameters trainable",
            conf["lora_alpha"] / conf["lora_r"],
            store.trainable_count(),
            store.total_count(),
        )
    return model


def augmentation(image_size: int, rotation_degrees: float) -> v2.Compose:
    return v2.Compose(
        [
            v2.RandomResizedCrop(image_size, scale=(0.8, 1.0), antialias=True),
            v2.RandomHorizontalFlip(p=0.5),
            v2.RandomRotation(rotation_degrees),
        ]
    )


@torch.no_grad()
def predict(
    model: Classifier, dataset: Dataset, batch_size: int, device: torch.device
) -> Tuple[np.ndarray, np.ndarray]:
    """Labels and class probabilities of a whole split, in dataset order"""

    model.eval()
    labels, probs = [], []
    for images, targets in make_loader(dataset, batch_size, shuffle=False):
        probs.append(model.predict_proba(images.to(device)).cpu())
        labels.append(torch.as_tensor(targets))
    return torch.cat(labels).numpy(), torch.cat(probs).double().numpy()


def evaluate(
    model: Classifier,
    dataset: Dataset,
    n_classes: int,
    batch_size: int,
    device: torch.device,
) -> Dict[str, float]:
    labels, probs = predict(model, dataset, batch_size, device)
    return classification_report(labels, probs, n_classes)


@dataclass
class ClassificationResult:
    model: Classifier
    history: History
    best_epoch: int
    best_f1: float
    grad_norms: List[float] = field(default_factory=list)
    test: Optional[Dict[str, float]] = None


def train_classifier(
    data: DatasetSplits,
    conf: Mapping[str, Any],
    encoder: Optional[VisionTransformer] = None,
    run_dir: Optional[Union[str, Path]] = None,
) -> ClassificationResult:
    """
    Cross-entropy training with AdamW, linear warmup and cosine decay,
    gradient clipping. The returned model carries the weights of the
    epoch with the best validation macro F1.
    """

    seed_everything(conf["seed"])
    check_split(data, "train")
    check_split(data, "val")
    n_classes = data.n_classes or conf.get("n_classes")
    if not n_classes:
        raise DataError("The number of classes is unknown")

    device = resolve_device(conf.get("device"))
    encoder = encoder if encoder is not None else load_encoder(conf)
    model = build_classifier(encoder, n_classes, conf).to(device)
    params = trainable(model)

    batch_size = conf["batch_size"]
    steps_per_epoch = math.ceil(len(data.train) / batch_size)
    schedule = adaptation_schedule(conf, steps_per_epoch)
    optimizer = torch.optim.AdamW(
        params, lr=schedule.lr(0), weight_decay=conf["weight_decay"]
    )
    augment = (
        augmentation(data.train[0][0].shape[-1], conf["rotation_degrees"])
        if conf.get("augment")
        else None
    )

    run_dir = Path(run_dir) if run_dir else None
    history = History(HISTORY_COLUMNS)
    grad_norms: List[float] = []
    best_f1, best_epoch, best_state = -1.0, -1, None
    step = 0
    max_norm = conf.get("grad_clip") or 0.0

    log.info(
        "Training {} classifier: {} trainable parameters, {} epochs",
        model.regime,
        sum(p.numel() for p in params),
        conf["epochs"],
    )
    for epoch in range(conf["epochs"]):
        model.train()
        for images, labels in make_loader(data.train, batch_size, conf["seed"], epoch):
            if augment is not None:
                images = torch.stack([augment(img) for img in images])
            images, labels = images.to(device), labels.to(device)
            apply_schedule(optimizer, schedule.lr(min(step, schedule.total_steps)))

            loss = F.cross_entropy(model(images), labels)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if max_norm > 0:
                torch.nn.utils.clip_grad_norm_(params, max_norm)
            grad_norms.append(grad_norm(params))
            optimizer.step()
            step += 1

        for split in ("train", "val"):
            scores = evaluate(model, data.split(split), n_classes, batch_size, device)
            history.append(epoch=epoch, split=split, **scores)
        val = history.rows[-1]
        log.info(
            "Epoch {}: val acc={:.4f} f1={:.4f} auc={:.4f}",
            epoch,
            val["acc"],
            val["f1"],
            val["auc"],
        )
        if val["f1"] > best_f1:
            best_f1, best_epoch, best_state = val["f1"], epoch, snapshot_state(model)
        history.write(run_dir / "history.csv" if run_dir else None)

    if best_state is not None:
        model.load_state_dict(best_state)
    log.info("Best validation F1 {:.4f} at epoch {}", best_f1, best_epoch)

    test = None
    if len(data.test):
        test = evaluate(model, data.test, n_classes, batch_size, device)
        log.info("Test: {}", test)

    if run_dir:
        save_module(
            model,
            run_dir / CHECKPOINT_FILE,
            config=structural_keys(conf),
            extra={
                "regime": model.regime,
                "n_classes": n_classes,
                "best_epoch": best_epoch,
            },
        )
    return ClassificationResult(model, history, best_epoch, best_f1, grad_norms, test)

