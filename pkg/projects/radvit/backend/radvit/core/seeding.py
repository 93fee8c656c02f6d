import base64
import hashlib
import json
import random
from typing import Any, Mapping

import numpy as np
import torch
from loguru import logger as log


def seed_everything(seed: int) -> torch.Generator:
    """
    Seed python, numpy and torch.

    Model initialization, crops, masks and dropout all draw from the returned
    torch default generator; numpy is only used by the synthetic generators,
    which build their own Generator from the seed.
    """

    random.seed(seed)
    np.random.seed(seed % (2**32))
    generator = torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    log.debug("Seeded every generator with {}", seed)
    return generator


def get_rng_state() -> str:
    return base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")


def set_rng_state(state: str) -> None:
    raw = np.frombuffer(base64.b64decode(state), dtype=np.uint8).copy()
    torch.set_rng_state(torch.from_numpy(raw))


def epoch_generator(seed: int, epoch: int) -> torch.Generator:
    """Independent generator for the shuffling of one epoch"""
    g = torch.Generator()
    g.manual_seed(seed * 100_003 + epoch)
    return g


def config_digest(config: Mapping[str, Any]) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
