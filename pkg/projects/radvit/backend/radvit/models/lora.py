"""
Low-rank adaptation of linear layers.

A wrapped layer computes W x + b + (alpha / r) B A x with W and b frozen.
B starts at zero, so a freshly wrapped model computes exactly what the
base model did.
"""
import fnmatch
from typing import Dict, Sequence, Tuple

import torch
import torch.nn.functional as F
from loguru import logger as log
from radvit.core.store import ParameterStore
from radvit.exceptions import ConfigError, DomainError
from torch import nn

DEFAULT_TARGETS = ("*.attn.q", "*.attn.v")

# (rank, alpha) pairs of the ablation
LORA_PRESETS: Dict[str, Tuple[int, float]] = {
    "lora_r8": (8, 16.0),
    "lora_r16": (16, 32.0),
}


class LoraLinear(nn.Linear):
    def __init__(self, base: nn.Linear, r: int, alpha: float) -> None:
        # the base weight and bias are reused, not copied
        nn.Module.__init__(self)
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.weight = base.weight
        self.register_parameter("bias", base.bias)
        self.r = r
        self.alpha = alpha
        self.scaling = alpha / r
        self.merged = False

        device, dtype = base.weight.device, base.weight.dtype
        self.lora_A = nn.Parameter(
            torch.empty(r, self.in_features, device=device, dtype=dtype)
        )
        self.lora_B = nn.Parameter(
            torch.zeros(self.out_features, r, device=device, dtype=dtype)
        )
        nn.init.normal_(self.lora_A, std=0.02)

        self.weight.requires_grad_(False)
        if self.bias is not None:
            self.bias.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.linear(x, self.weight, self.bias)
        if self.merged:
            return out
        return out + F.linear(F.linear(x, self.lora_A), self.lora_B) * self.scaling

    @torch.no_grad()
    def merge(self) -> None:
        if self.merged:
            return
        self.weight += (self.lora_B @ self.lora_A) * self.scaling
        self.merged = True

    @torch.no_grad()
    def unmerge(self) -> None:
        if not self.merged:
            return
        self.weight -= (self.lora_B @ self.lora_A) * self.scaling
        self.merged = False

    def extra_repr(self) -> str:
        return f"{super().extra_repr()}, r={self.r}, alpha={self.alpha}"


def _matches(name: str, patterns: Sequence[str]) -> bool:
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


def lora_wrap(
    module: nn.Module,
    targets: Sequence[str] = DEFAULT_TARGETS,
    r: int = 8,
    alpha: float = 16.0,
    prefix: str = "",
    freeze_others: bool = True,
) -> ParameterStore:
    """
    Replace every nn.Linear whose module path matches one of the targets
    with a LoraLinear and return the resulting parameter store.

    With freeze_others every parameter but the low-rank factors is frozen.
    """

    if r <= 0:
        raise DomainError(f"LoRA rank must be positive, got {r}")
    if alpha <= 0:
        raise DomainError(f"LoRA alpha must be positive, got {alpha}")

    matched = [
        name
        for name, child in module.named_modules()
        if name
        and isinstance(child, nn.Linear)
        and not isinstance(child, LoraLinear)
        and _matches(name, targets)
    ]
    if not matched:
        raise ConfigError(f"No linear layer matches the LoRA targets {list(targets)}")

    if freeze_others:
        module.requires_grad_(False)

    for name in matched:
        parent_name, _, attr = name.rpartition(".")
        parent = module.get_submodule(parent_name) if parent_name else module
        setattr(parent, attr, LoraLinear(getattr(parent, attr), r, alpha))

    log.info("LoRA r={} alpha={} applied to {} layers", r, alpha, len(matched))
    return ParameterStore.from_module(module, prefix=prefix)


def lora_layers(module: nn.Module) -> Dict[str, LoraLinear]:
    return {n: m for n, m in module.named_modules() if isinstance(m, LoraLinear)}


def merge_lora(module: nn.Module) -> int:
    layers = lora_layers(module)
    for layer in layers.values():
        layer.merge()
    return len(layers)
