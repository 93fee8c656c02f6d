from radvit.core.checkpoint import load_checkpoint, read_header, save_checkpoint
from radvit.core.schedules import TrainSchedule, cosine_schedule
from radvit.core.seeding import (
    config_digest,
    epoch_generator,
    get_rng_state,
    seed_everything,
    set_rng_state,
)
from radvit.core.store import ParameterStore
from radvit.core.types import ImageBatch, TokenSequence

__all__ = [
    "ImageBatch",
    "ParameterStore",
    "TokenSequence",
    "TrainSchedule",
    "config_digest",
    "cosine_schedule",
    "epoch_generator",
    "get_rng_state",
    "load_checkpoint",
    "read_header",
    "save_checkpoint",
    "seed_everything",
    "set_rng_state",
]
