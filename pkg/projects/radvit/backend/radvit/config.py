"""
Run configurations.

A configuration is a JSON object or a flat key=value file whose keys
mirror the training hyperparameter table (teacher_momentum_start=0.994).
A JSON object may hold one section per command ("pretrain", "train-cls",
...), merged over the top-level keys for that command only. Values given
on the command line with --set are merged on top, then the result is
validated by the schema of the subcommand. Unknown keys
are rejected.
"""
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Type, Union

from loguru import logger as log
from marshmallow import RAISE, Schema, ValidationError, fields, validate
from radvit import settings
from radvit.core.schedules import TrainSchedule
from radvit.exceptions import ConfigError, DomainError
from radvit.models.lora import LORA_PRESETS
from radvit.models.vit import ENCODER_PRESETS, EncoderConfig
from webargs.fields import DelimitedList

PRESETS = sorted(ENCODER_PRESETS)
REGIMES = ("full", "head_only", "lora")
SYNTHETIC_KINDS = ("blobs", "squares", "shapes_captions")


class ListField(DelimitedList):
    """Comma separated string in flat files, plain list in JSON"""

    def _deserialize(self, value: Any, attr: Any, data: Any, **kwargs: Any) -> Any:
        if isinstance(value, (list, tuple)):
            value = self.delimiter.join(str(v) for v in value)
        return super()._deserialize(value, attr, data, **kwargs)


class RunSchema(Schema):
    class Meta:
        unknown = RAISE

    seed = fields.Int(load_default=0)
    preset = fields.Str(load_default="tiny", validate=validate.OneOf(PRESETS))
    device = fields.Str(load_default=settings.DEVICE)

    # encoder, None means "from the preset"
    depth = fields.Int(load_default=None, allow_none=True)
    embed_dim = fields.Int(load_default=None, allow_none=True)
    heads = fields.Int(load_default=None, allow_none=True)
    patch_size = fields.Int(load_default=14, validate=validate.Range(min=1))
    drop_path_rate = fields.Float(load_default=0.0)
    layer_scale = fields.Float(load_default=1e-5)
    layer_index_base = fields.Int(load_default=0, validate=validate.OneOf([0, 1]))
    # pretrained encoder to start from
    checkpoint = fields.Str(load_default=None, allow_none=True)

    # data: a manifest or a synthetic dataset generated in memory
    manifest = fields.Str(load_default=None, allow_none=True)
    synthetic = fields.Str(
        load_default=None, allow_none=True, validate=validate.OneOf(SYNTHETIC_KINDS)
    )
    synthetic_n = fields.Int(load_default=64, validate=validate.Range(min=1))
    synthetic_image_size = fields.Int(load_default=None, allow_none=True)
    n_classes = fields.Int(load_default=None, allow_none=True)
    augment = fields.Bool(load_default=True)


class PretrainSchema(RunSchema):
    batch_size_per_gpu = fields.Int(load_default=8, validate=validate.Range(min=1))
    effective_batch = fields.Int(load_default=None, allow_none=True)
    drop_path_rate = fields.Float(load_default=0.3)
    epochs = fields.Int(load_default=10, validate=validate.Range(min=1))
    warmup_epochs = fields.Float(load_default=1.0, validate=validate.Range(min=0))
    base_learning_rate = fields.Float(load_default=2e-4)
    min_learning_rate = fields.Float(load_default=1e-6)
    weight_decay_start = fields.Float(load_default=0.04)
    weight_decay_end = fields.Float(load_default=0.2)
    optimizer = fields.Str(load_default="adamw", validate=validate.OneOf(["adamw"]))
    teacher_momentum_start = fields.Float(
        load_default=0.994, validate=validate.Range(min=0, max=1)
    )
    teacher_momentum_end = fields.Float(
        load_default=1.0, validate=validate.Range(min=0, max=1)
    )
    warmup_teacher_temperature = fields.Float(load_default=0.04)
    teacher_temperature = fields.Float(load_default=0.07)
    teacher_temperature_warmup_fraction = fields.Float(
        load_default=0.3, validate=validate.Range(min=0, max=1)
    )
    student_temperature = fields.Float(load_default=0.1)
    center_rate = fields.Float(
        load_default=0.1, validate=validate.Range(min=0, max=1, min_inclusive=False)
    )
    dino_loss_weight = fields.Float(load_default=1.0)
    ibot_loss_weight = fields.Float(load_default=1.0)
    dino_ibot_prototypes = fields.Int(load_default=512, validate=validate.Range(min=2))
    dino_ibot_bottleneck_dim = fields.Int(load_default=256)
    dino_ibot_head_layers = fields.Int(load_default=3, validate=validate.Range(min=1))
    dino_ibot_head_hidden_dim = fields.Int(load_default=2048)
    global_crop_size = fields.Int(load_default=224)
    n_global_crops = fields.Int(load_default=2, validate=validate.Range(min=1))
    mask_ratio_min = fields.Float(load_default=0.1, validate=validate.Range(0, 1))
    mask_ratio_max = fields.Float(load_default=0.5, validate=validate.Range(0, 1))
    checkpoint_every = fields.Int(load_default=settings.CHECKPOINT_EVERY)


class ClassificationSchema(RunSchema):
    image_size = fields.Int(load_default=224)
    batch_size = fields.Int(load_default=128, validate=validate.Range(min=1))
    epochs = fields.Int(load_default=40, validate=validate.Range(min=1))
    learning_rate = fields.Float(load_default=1e-5)
    weight_decay = fields.Float(load_default=0.01)
    warmup_epochs = fields.Float(load_default=10.0, validate=validate.Range(min=0))
    grad_clip = fields.Float(load_default=1.0, validate=validate.Range(min=0))
    regime = fields.Str(load_default="full", validate=validate.OneOf(REGIMES))
    lora_preset = fields.Str(
        load_default=None,
        allow_none=True,
        validate=validate.OneOf(sorted(LORA_PRESETS)),
    )
    lora_r = fields.Int(load_default=8)
    lora_alpha = fields.Float(load_default=16.0)
    # derived, alpha / r
    lora_scaling = fields.Float(load_default=None, allow_none=True)
    lora_targets = ListField(fields.Str(), load_default=["*.attn.q", "*.attn.v"])
    rotation_degrees = fields.Float(load_default=15.0)


class SegmentationSchema(RunSchema):
    image_size = fields.Int(load_default=448)
    batch_size = fields.Int(load_default=16, validate=validate.Range(min=1))
    epochs = fields.Int(load_default=20, validate=validate.Range(min=1))
    learning_rate = fields.Float(load_default=1e-4)
    weight_decay = fields.Float(load_default=1e-4)
    intermediate_layers = ListField(fields.Int(), load_default=None, allow_none=True)
    fusion_dim = fields.Int(load_default=None, allow_none=True)
    decoder_dim = fields.Int(load_default=None, allow_none=True)
    augment = fields.Bool(load_default=False)


class CaptioningSchema(RunSchema):
    image_size = fields.Int(load_default=224)
    micro_batch = fields.Int(load_default=8, validate=validate.Range(min=1))
    effective_batch = fields.Int(load_default=64, validate=validate.Range(min=1))
    epochs = fields.Int(load_default=20, validate=validate.Range(min=1))
    learning_rate = fields.Float(load_default=5e-5)
    weight_decay = fields.Float(load_default=0.01)
    queries = fields.Int(load_default=64, validate=validate.Range(min=1))
    prefix_dim = fields.Int(load_default=None, allow_none=True)
    decoder_layers = fields.Int(load_default=2)
    decoder_heads = fields.Int(load_default=4)
    max_len = fields.Int(load_default=130)
    projected_merger = fields.Bool(load_default=False)
    beams = fields.Int(load_default=5, validate=validate.Range(min=1))
    max_tokens = fields.Int(load_default=64, validate=validate.Range(min=1))
    augment = fields.Bool(load_default=False)


class EmbedSchema(RunSchema):
    image_size = fields.Int(load_default=None, allow_none=True)
    batch_size = fields.Int(load_default=32, validate=validate.Range(min=1))
    split = fields.Str(
        load_default="test", validate=validate.OneOf(["train", "val", "test"])
    )


SCHEMAS: Dict[str, Type[RunSchema]] = {
    "pretrain": PretrainSchema,
    "train-cls": ClassificationSchema,
    "train-seg": SegmentationSchema,
    "train-cap": CaptioningSchema,
    "embed": EmbedSchema,
}


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Configuration file not found: {path}")

    text = path.read_text()
    if path.suffix == ".json":
        try:
            conf = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        if not isinstance(conf, dict):
            raise ConfigError(f"{path} must contain a JSON object")
        return conf

    lines = [line for line in text.splitlines() if line.strip()]
    return parse_overrides(
        (line for line in lines if not line.lstrip().startswith("#")),
        source=str(path),
    )


def parse_overrides(items: Iterable[str], source: str = "--set") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for item in items:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}: expected key=value, got '{item.strip()}'")
        values[key] = value.strip()
    return values


def load_config(
    command: str,
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    if command not in SCHEMAS:
        raise ConfigError(f"No configuration schema for {command}")

    raw: Dict[str, Any] = {}
    if path:
        conf = read_config_file(path)
        # keys named after a command only apply to that command
        sections = {name: conf.pop(name) for name in SCHEMAS if name in conf}
        raw.update(conf)
        section = sections.get(command) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: the {command} section must be an object")
        raw.update(section)
    if overrides:
        raw.update(overrides)

    return validate_config(SCHEMAS[command], raw)


def validate_config(schema: Type[Schema], raw: Mapping[str, Any]) -> Dict[str, Any]:
    try:
        conf = schema().load(dict(raw))
    except ValidationError as e:
        log.error("Invalid configuration: {}", e.messages)
        raise ConfigError(f"Invalid configuration: {_flatten(e.messages)}") from e

    if "mask_ratio_min" in conf and conf["mask_ratio_min"] > conf["mask_ratio_max"]:
        raise ConfigError("mask_ratio_min is larger than mask_ratio_max")
    if conf.get("lora_preset"):
        conf["lora_r"], conf["lora_alpha"] = LORA_PRESETS[conf["lora_preset"]]
    if "lora_r" in conf:
        if conf["lora_r"] <= 0:
            raise DomainError(f"LoRA rank must be positive, got {conf['lora_r']}")
        conf["lora_scaling"] = conf["lora_alpha"] / conf["lora_r"]
    return conf


def _flatten(messages: Any) -> str:
    if isinstance(messages, dict):
        return "; ".join(f"{k}: {_flatten(v)}" for k, v in messages.items())
    if isinstance(messages, list):
        return ", ".join(str(m) for m in messages)
    return str(messages)


def encoder_config(conf: Mapping[str, Any]) -> EncoderConfig:
    return EncoderConfig.preset(
        conf["preset"],
        depth=conf.get("depth"),
        embed_dim=conf.get("embed_dim"),
        heads=conf.get("heads"),
        patch_size=conf["patch_size"],
        drop_path_rate=conf["drop_path_rate"],
        layer_scale_init=conf["layer_scale"],
        layer_index_base=conf["layer_index_base"],
    )


def pretrain_schedule(conf: Mapping[str, Any], steps_per_epoch: int) -> TrainSchedule:
    return TrainSchedule.from_epochs(
        epochs=conf["epochs"],
        steps_per_epoch=steps_per_epoch,
        warmup_epochs=conf["warmup_epochs"],
        base_lr=conf["base_learning_rate"],
        min_lr=conf["min_learning_rate"],
        weight_decay_start=conf["weight_decay_start"],
        weight_decay_end=conf["weight_decay_end"],
        momentum_start=conf["teacher_momentum_start"],
        momentum_end=conf["teacher_momentum_end"],
        warmup_teacher_temp=conf["warmup_teacher_temperature"],
        teacher_temp=conf["teacher_temperature"],
        teacher_temp_warmup_fraction=conf["teacher_temperature_warmup_fraction"],
    )


def adaptation_schedule(conf: Mapping[str, Any], steps_per_epoch: int) -> TrainSchedule:
    """Linear warmup then cosine decay to 0, constant weight decay"""
    return TrainSchedule.from_epochs(
        epochs=conf["epochs"],
        steps_per_epoch=steps_per_epoch,
        warmup_epochs=conf.get("warmup_epochs", 0.0),
        base_lr=conf["learning_rate"],
        min_lr=0.0,
        weight_decay_start=conf["weight_decay"],
        weight_decay_end=conf["weight_decay"],
    )


def structural_keys(conf: Mapping[str, Any]) -> Dict[str, Any]:
    """Subset of an encoder configuration that fixes the checkpoint layout"""
    return encoder_config(conf).structural()


def dump_config(conf: Mapping[str, Any], path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        json.dump(dict(conf), f, indent=2, sort_keys=True, default=str)


def config_keys(command: str) -> List[str]:
    return sorted(SCHEMAS[command]().fields)
