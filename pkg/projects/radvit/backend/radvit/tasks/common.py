"""
Helpers shared by the training procedures
"""
import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import pandas as pd
import torch
from loguru import logger as log
from radvit.config import encoder_config
from radvit.core.checkpoint import load_checkpoint, save_checkpoint
from radvit.core.store import ParameterStore
from radvit.data.manifest import DatasetSplits, load_dataset
from radvit.data.synthetic import synthetic_splits
from radvit.exceptions import ConfigError, DataError
from radvit.models.vit import VisionTransformer, build_encoder
from torch import nn

# modules whose parameters never receive weight decay
NO_DECAY_NAMES = ("bias", "cls_token", "pos_embed", "mask_token", "gamma")

ENCODER_FILE = "encoder.radvit"


@dataclass
class History:
    """Rows of a metric CSV, rewritten as a whole after every epoch"""

    columns: Sequence[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def append(self, **values: Any) -> None:
        self.rows.append({c: values.get(c) for c in self.columns})

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(self.columns))

    def write(self, path: Optional[Union[str, Path]]) -> None:
        if path is None:
            return
        self.frame().to_csv(path, index=False)

    def __len__(self) -> int:
        return len(self.rows)


def resolve_device(name: Optional[str]) -> torch.device:
    name = name or "cpu"
    if name.startswith("cuda") and not torch.cuda.is_available():
        log.warning("CUDA is not available, falling back to cpu")
        return torch.device("cpu")
    try:
        return torch.device(name)
    except RuntimeError as e:
        raise ConfigError(f"Invalid device {name}: {e}") from e


def load_encoder(conf: Mapping[str, Any]) -> VisionTransformer:
    """
    Encoder built from the configuration, with the weights of
    conf["checkpoint"] when given. Both exported encoders and full
    pretraining checkpoints (teacher.encoder.*) are accepted.
    """

    config = encoder_config(conf)
    encoder = build_encoder(config)
    path = conf.get("checkpoint")
    if not path:
        return encoder

    store = load_checkpoint(path, expected_config=config.structural())
    if any(p.startswith("teacher.encoder.") for p in store.paths()):
        store.load_into(encoder, prefix="teacher.encoder")
    else:
        store.load_into(encoder)
    log.info("Encoder weights loaded from {} (step {})", path, store.step)
    return encoder


def export_encoder(encoder: nn.Module, path: Union[str, Path]) -> Path:
    store = ParameterStore.from_module(encoder)
    return save_checkpoint(store, path, config=encoder.config.structural())


def load_data(conf: Mapping[str, Any], task: str) -> DatasetSplits:
    """The dataset of a run: a manifest or an in-memory synthetic set"""

    if conf.get("manifest"):
        data = load_dataset(conf["manifest"], image_size=conf.get("image_size"))
    elif conf.get("synthetic"):
        data = synthetic_splits(
            conf["synthetic"],
            conf["synthetic_n"],
            seed=conf["seed"],
            size=conf.get("synthetic_image_size"),
            n_classes=conf.get("n_classes") or 2,
        )
    else:
        raise ConfigError("Either manifest or synthetic must be configured")

    if task != "pretrain" and data.task != task:
        raise ConfigError(f"A {task} dataset is required, got {data.task}")
    return data


def check_split(data: DatasetSplits, split: str) -> None:
    if len(data.split(split)) == 0:
        raise DataError(f"The {split} split is empty")


def param_groups(module: nn.Module, weight_decay: float) -> List[Dict[str, Any]]:
    """Trainable parameters split into decayed and non-decayed groups"""

    decay, no_decay = [], []
    for name, param in module.named_parameters():
        if not param.requires_grad:
            continue
        last = name.rsplit(".", 1)[-1]
        if param.ndim <= 1 or last in NO_DECAY_NAMES or "norm" in name:
            no_decay.append(param)
        else:
            decay.append(param)
    return [
        {"params": decay, "weight_decay": weight_decay, "apply_wd": True},
        {"params": no_decay, "weight_decay": 0.0, "apply_wd": False},
    ]


def apply_schedule(
    optimizer: torch.optim.Optimizer, lr: float, weight_decay: Optional[float] = None
) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
        if weight_decay is not None and group.get("apply_wd", True):
            group["weight_decay"] = weight_decay


def grad_norm(parameters: Iterable[nn.Parameter]) -> float:
    norms = [
        p.grad.detach().double().norm(2) for p in parameters if p.grad is not None
    ]
    if not norms:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack(norms), 2))


def trainable(module: nn.Module) -> List[nn.Parameter]:
    return [p for p in module.parameters() if p.requires_grad]


def snapshot_state(module: nn.Module) -> Dict[str, torch.Tensor]:
    return copy.deepcopy(module.state_dict())


def save_module(
    module: nn.Module,
    path: Optional[Union[str, Path]],
    config: Optional[Mapping[str, Any]] = None,
    extra: Optional[Mapping[str, Any]] = None,
) -> Optional[Path]:
    if path is None:
        return None
    return save_checkpoint(ParameterStore.from_module(module), path, config, extra)
