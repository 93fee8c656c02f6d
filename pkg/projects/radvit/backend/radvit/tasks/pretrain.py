"""
Self-distillation pretraining on global crops only.

The student (encoder plus a class-token head and a patch-token head) sees
masked crops, the teacher, an exponential moving average of the student,
sees the same crops unmasked. The class-token objective is computed on
pairs of different views, the patch-token objective on masked patches.
"""
import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from loguru import logger as log
from radvit.config import pretrain_schedule, structural_keys
from radvit.core.checkpoint import save_checkpoint
from radvit.core.schedules import TrainSchedule
from radvit.core.seeding import seed_everything
from radvit.core.store import ParameterStore
from radvit.core.types import ImageBatch
from radvit.data.manifest import DatasetSplits, make_loader
from radvit.exceptions import (
    ConfigError,
    DomainError,
    NumericError,
    RangeError,
    ShapeError,
)
from radvit.models.heads import ProjectionHead
from radvit.models.vit import VisionTransformer
from radvit.tasks.common import (
    ENCODER_FILE,
    History,
    apply_schedule,
    check_split,
    export_encoder,
    load_encoder,
    param_groups,
    resolve_device,
)
from torch import nn
from torchvision.transforms import v2

LOSS_COLUMNS = ("step", "lr", "momentum", "teacher_temp", "dino", "ibot", "total")
CHECKPOINT_FILE = "checkpoint_last.radvit"
COLLAPSE_TOLERANCE = 1e-3


def crop_transform(crop_size: int) -> v2.Compose:
    return v2.Compose(
        [
            v2.RandomResizedCrop(crop_size, scale=(0.32, 1.0), antialias=True),
            v2.RandomHorizontalFlip(p=0.5),
            v2.RandomApply([v2.ColorJitter(brightness=0.2, contrast=0.2)], p=0.8),
            v2.RandomApply([v2.GaussianBlur(kernel_size=9, sigma=(0.1, 2.0))], p=0.5),
        ]
    )


def make_global_crops(
    images: Union[ImageBatch, torch.Tensor],
    n_crops: int = 2,
    crop_size: int = 224,
    augment: bool = True,
) -> List[ImageBatch]:
    """
    n_crops augmented views of every image. Intensity augmentations act
    on pixel values, so the batch is de-normalized first and normalized
    again afterwards.
    """

    batch = images if isinstance(images, ImageBatch) else ImageBatch(images)
    if batch.height < crop_size or batch.width < crop_size:
        raise ShapeError(
            f"Images of {batch.height}x{batch.width} are smaller than "
            f"the {crop_size} crop"
        )
    if n_crops <= 0:
        return []

    if not augment:
        view = v2.functional.center_crop(batch.data, [crop_size, crop_size])
        return [ImageBatch(view.clone(), batch.mean, batch.std) for _ in range(n_crops)]

    mean = torch.tensor(batch.mean, dtype=batch.data.dtype).view(1, -1, 1, 1)
    std = torch.tensor(batch.std, dtype=batch.data.dtype).view(1, -1, 1, 1)
    pixels = (batch.data * std + mean).clamp(0.0, 1.0)
    transform = crop_transform(crop_size)

    crops = []
    for _ in range(n_crops):
        views = torch.stack([transform(img) for img in pixels])
        crops.append(ImageBatch((views - mean) / std, batch.mean, batch.std))
    return crops


def make_masks(
    batch_size: int,
    n_patches: int,
    ratio_min: float = 0.1,
    ratio_max: float = 0.5,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Random token masks [B, N]: round(r * N) tokens for a ratio r ~ U[min, max]"""

    if not 0.0 <= ratio_min <= ratio_max <= 1.0:
        raise RangeError(f"Invalid mask ratio range [{ratio_min}, {ratio_max}]")

    draws = torch.rand(batch_size, generator=generator)
    ratios = ratio_min + (ratio_max - ratio_min) * draws
    masks = torch.zeros(batch_size, n_patches, dtype=torch.bool)
    for i, ratio in enumerate(ratios.tolist()):
        count = int(round(ratio * n_patches))
        if count:
            masks[i, torch.randperm(n_patches, generator=generator)[:count]] = True
    return masks, ratios


def _check_temperatures(*temperatures: float) -> None:
    for t in temperatures:
        if t <= 0:
            raise DomainError(f"Temperatures must be positive, got {t}")


def teacher_targets(
    logits: torch.Tensor, temperature: float, center: torch.Tensor
) -> torch.Tensor:
    return F.softmax((logits - center) / temperature, dim=-1).detach()


def dino_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    t_student: float,
    t_teacher: float,
    center: torch.Tensor,
) -> torch.Tensor:
    """
    Cross-entropy between centered, sharpened teacher distributions and
    student predictions [V, B, P], averaged over every pair of different
    views (the same view when each side has a single one).
    """

    _check_temperatures(t_student, t_teacher)
    if student_logits.dim() != 3 or teacher_logits.dim() != 3:
        raise ShapeError("Expected logits shaped [views, batch, prototypes]")

    targets = teacher_targets(teacher_logits, t_teacher, center)
    log_probs = F.log_softmax(student_logits / t_student, dim=-1)

    pairs = [
        (s, t)
        for s in range(log_probs.shape[0])
        for t in range(targets.shape[0])
        if s != t
    ]
    if not pairs:
        pairs = [(0, 0)]

    total = student_logits.new_zeros(())
    for s, t in pairs:
        total = total + torch.sum(-targets[t] * log_probs[s], dim=-1).mean()
    return total / len(pairs)


def ibot_loss(
    student_patch_logits: torch.Tensor,
    teacher_patch_logits: torch.Tensor,
    masks: torch.Tensor,
    t_student: float,
    t_teacher: float,
    center: torch.Tensor,
) -> torch.Tensor:
    """Patch-level cross-entropy [B, N, P] averaged over masked positions only"""

    _check_temperatures(t_student, t_teacher)
    if masks.shape != student_patch_logits.shape[:2]:
        raise ShapeError(
            f"Mask {tuple(masks.shape)} does not match "
            f"{tuple(student_patch_logits.shape[:2])} patches"
        )

    if not masks.any():
        log.warning("No masked patch in the batch, patch loss set to 0")
        return student_patch_logits.sum() * 0.0

    targets = teacher_targets(teacher_patch_logits[masks], t_teacher, center)
    log_probs = F.log_softmax(student_patch_logits[masks] / t_student, dim=-1)
    return torch.sum(-targets * log_probs, dim=-1).mean()


def update_center(
    center: torch.Tensor, teacher_logits: torch.Tensor, rate: float
) -> torch.Tensor:
    if not 0.0 < rate <= 1.0:
        raise RangeError(f"Center rate must be in (0, 1], got {rate}")
    batch_mean = teacher_logits.detach().reshape(-1, center.shape[-1]).mean(dim=0)
    return (1.0 - rate) * center + rate * batch_mean


class DistillationNetwork(nn.Module):
    """Encoder with the class-token and patch-token projection heads"""

    def __init__(
        self,
        encoder: VisionTransformer,
        prototypes: int,
        head_layers: int = 3,
        hidden_dim: int = 2048,
        bottleneck_dim: int = 256,
    ) -> None:
        super().__init__()
        self.encoder = encoder
        head = dict(
            in_dim=encoder.embed_dim,
            prototypes=prototypes,
            layers=head_layers,
            hidden_dim=hidden_dim,
            bottleneck_dim=bottleneck_dim,
        )
        self.dino_head = ProjectionHead(**head)
        self.ibot_head = ProjectionHead(**head)

    def forward(
        self,
        views: torch.Tensor,
        masks: Optional[torch.Tensor] = None,
        train_mode: bool = False,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Class-token logits [B, P] and patch logits [B, N, P]"""
        tokens = self.encoder.encode(views, masks, train_mode=train_mode)
        return self.dino_head(tokens.class_token), self.ibot_head(tokens.patch_tokens)


@dataclass
class TeacherState:
    network: DistillationNetwork
    center: torch.Tensor
    patch_center: torch.Tensor
    momentum: float = 0.0

    @property
    def store(self) -> ParameterStore:
        return ParameterStore.from_module(self.network)


def update_teacher(
    student: ParameterStore,
    teacher: Union[TeacherState, ParameterStore],
    momentum: float,
) -> None:
    """teacher <- m * teacher + (1 - m) * student, in place"""

    if not 0.0 <= momentum <= 1.0:
        raise RangeError(f"Teacher momentum must be in [0, 1], got {momentum}")
    target = teacher.store if isinstance(teacher, TeacherState) else teacher
    if target.structure() != student.structure():
        raise ConfigError(
            "Teacher and student parameters are not structurally identical"
        )

    paths = [p for p in target.paths() if not target.is_buffer(p)]
    with torch.no_grad():
        teacher_tensors = [target[p] for p in paths]
        student_tensors = [student[p].detach() for p in paths]
        torch._foreach_mul_(teacher_tensors, momentum)
        torch._foreach_add_(teacher_tensors, student_tensors, alpha=1.0 - momentum)
    if isinstance(teacher, TeacherState):
        teacher.momentum = momentum


@dataclass
class PretrainState:
    conf: Dict[str, Any]
    student: DistillationNetwork
    teacher: TeacherState
    optimizer: torch.optim.Optimizer
    schedule: TrainSchedule
    step: int = 0
    history: History = field(default_factory=lambda: History(LOSS_COLUMNS))

    @property
    def student_store(self) -> ParameterStore:
        return ParameterStore.from_module(self.student)

    def to_store(self) -> ParameterStore:
        store = ParameterStore.from_module(self.student, prefix="student")
        for path, tensor in ParameterStore.from_module(
            self.teacher.network, prefix="teacher"
        ).items():
            store.add(path, tensor, frozen=True)
        store.add("center", self.teacher.center, frozen=True)
        store.add("patch_center", self.teacher.patch_center, frozen=True)
        store.step = self.step
        return store


def build_state(
    conf: Mapping[str, Any],
    steps_per_epoch: int,
    encoder: Optional[VisionTransformer] = None,
) -> PretrainState:
    encoder = encoder if encoder is not None else load_encoder(conf)
    student = DistillationNetwork(
        encoder,
        conf["dino_ibot_prototypes"],
        conf["dino_ibot_head_layers"],
        conf["dino_ibot_head_hidden_dim"],
        conf["dino_ibot_bottleneck_dim"],
    )
    teacher_net = copy.deepcopy(student)
    teacher_net.requires_grad_(False)
    prototypes = conf["dino_ibot_prototypes"]
    teacher = TeacherState(
        teacher_net,
        center=torch.zeros(prototypes),
        patch_center=torch.zeros(prototypes),
        momentum=conf["teacher_momentum_start"],
    )

    schedule = pretrain_schedule(conf, steps_per_epoch)
    optimizer = torch.optim.AdamW(
        param_groups(student, schedule.weight_decay(0)),
        lr=schedule.lr(0),
        betas=(0.9, 0.999),
        eps=1e-8,
    )
    return PretrainState(dict(conf), student, teacher, optimizer, schedule)


def pretrain_step(batch: ImageBatch, state: PretrainState) -> Dict[str, float]:
    conf = state.conf
    step = min(state.step, state.schedule.total_steps)
    values = state.schedule.state(step)
    lr, momentum, t_teacher = values["lr"], values["momentum"], values["teacher_temp"]
    apply_schedule(state.optimizer, lr, values["weight_decay"])

    crops = make_global_crops(
        batch, conf["n_global_crops"], conf["global_crop_size"], conf["augment"]
    )
    n_views = len(crops)
    views = torch.cat([c.data for c in crops])
    batch_size = batch.batch_size

    with torch.no_grad():
        t_cls, t_patch = state.teacher.network(views)

    grid = state.student.encoder.grid_size(views.shape[2], views.shape[3])
    masks, _ = make_masks(
        views.shape[0],
        grid[0] * grid[1],
        conf["mask_ratio_min"],
        conf["mask_ratio_max"],
    )
    masks = masks.to(views.device)
    s_cls, s_patch = state.student(views, masks, train_mode=True)

    t_student = conf["student_temperature"]
    dino = dino_loss(
        s_cls.view(n_views, batch_size, -1),
        t_cls.view(n_views, batch_size, -1),
        t_student,
        t_teacher,
        state.teacher.center,
    )
    ibot = ibot_loss(
        s_patch, t_patch, masks, t_student, t_teacher, state.teacher.patch_center
    )
    total = conf["dino_loss_weight"] * dino + conf["ibot_loss_weight"] * ibot

    if not torch.isfinite(total):
        log.error(
            "Non finite loss at step {}: dino={} ibot={} schedule={}",
            state.step,
            float(dino),
            float(ibot),
            values,
        )
        raise NumericError(f"Loss is {float(total)} at step {state.step}")

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()

    update_teacher(state.student_store, state.teacher, momentum)
    rate = conf["center_rate"]
    state.teacher.center = update_center(state.teacher.center, t_cls, rate)
    state.teacher.patch_center = update_center(
        state.teacher.patch_center, t_patch, rate
    )

    collapse = math.log(conf["dino_ibot_prototypes"])
    if abs(float(dino) - collapse) < COLLAPSE_TOLERANCE:
        log.warning(
            "Step {}: class-token loss {} is at log P, outputs may have collapsed",
            state.step,
            float(dino),
        )

    record = {
        "step": state.step,
        "lr": lr,
        "momentum": momentum,
        "teacher_temp": t_teacher,
        "dino": float(dino),
        "ibot": float(ibot),
        "total": float(total),
    }
    state.history.append(**record)
    state.step += 1
    return record


def save_state(state: PretrainState, path: Union[str, Path]) -> Path:
    return save_checkpoint(
        state.to_store(),
        path,
        config=structural_keys(state.conf),
        extra={"schedule": state.schedule.as_dict()},
    )


def run_pretraining(
    conf: Mapping[str, Any],
    data: DatasetSplits,
    run_dir: Optional[Union[str, Path]] = None,
) -> PretrainState:
    seed_everything(conf["seed"])
    check_split(data, "train")
    device = resolve_device(conf.get("device"))
    run_dir = Path(run_dir) if run_dir else None

    # a single process sees the batch of every replica at once
    batch_size = conf.get("effective_batch") or conf["batch_size_per_gpu"]
    steps_per_epoch = math.ceil(len(data.train) / batch_size)
    state = build_state(conf, steps_per_epoch)
    state.student.to(device)
    state.teacher.network.to(device)
    state.teacher.center = state.teacher.center.to(device)
    state.teacher.patch_center = state.teacher.patch_center.to(device)

    log.info(
        "Pretraining {} epochs x {} steps, {} trainable parameters",
        conf["epochs"],
        steps_per_epoch,
        state.student_store.trainable_count(),
    )
    loss_csv = run_dir / "loss.csv" if run_dir else None
    every = conf.get("checkpoint_every") or 0

    for epoch in range(conf["epochs"]):
        loader = make_loader(data.train, batch_size, conf["seed"], epoch)
        state.student.train()
        for images, _ in loader:
            batch = ImageBatch(images.to(device), tuple(data.mean), tuple(data.std))
            pretrain_step(batch, state)
            if run_dir and every and state.step % every == 0:
                save_state(state, run_dir / CHECKPOINT_FILE)

        last = state.history.rows[-1]
        log.info(
            "Epoch {}: dino={:.4f} ibot={:.4f} total={:.4f} lr={:.2e}",
            epoch,
            last["dino"],
            last["ibot"],
            last["total"],
            last["lr"],
        )
        state.history.write(loss_csv)

    if run_dir:
        save_state(state, run_dir / CHECKPOINT_FILE)
        export_encoder(state.teacher.network.encoder, run_dir / ENCODER_FILE)
        log.info("Teacher encoder exported to {}", run_dir / ENCODER_FILE)
    return state
