"""
Vision Transformer image encoder.

Patch size 14, one class token, learned positional embeddings that are
bilinearly resized when the token grid differs from the one used at
initialization, pre-norm blocks with layer scale and stochastic depth.
"""
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from loguru import logger as log
from radvit.core.types import ImageBatch, TokenSequence
from radvit.exceptions import ConfigError, RangeError, ShapeError
from timm.layers import drop_path, trunc_normal_
from torch import nn

ENCODER_PRESETS: Dict[str, Dict[str, Any]] = {
    # desk scale, used by the tests and the tiny run configuration
    "tiny": {"depth": 4, "embed_dim": 64, "heads": 4},
    "small": {"depth": 12, "embed_dim": 384, "heads": 6},
    "base": {"depth": 12, "embed_dim": 768, "heads": 12},
}


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    embed_dim: int = 384
    heads: int = 6
    patch_size: int = 14
    drop_path_rate: float = 0.0
    layer_scale_init: float = 1e-5
    mlp_ratio: float = 4.0
    img_size: int = 224
    qkv_bias: bool = True
    layer_index_base: int = 0

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise ConfigError(f"Invalid depth: {self.depth}")
        if self.heads <= 0 or self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads"
            )
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise RangeError(f"drop_path_rate must be in [0, 1): {self.drop_path_rate}")
        if self.layer_scale_init < 0:
            raise RangeError(f"layer_scale_init must be >= 0: {self.layer_scale_init}")
        if self.patch_size <= 0 or self.img_size % self.patch_size:
            raise ConfigError(
                f"img_size {self.img_size} is not a multiple of {self.patch_size}"
            )
        if self.layer_index_base not in (0, 1):
            raise ConfigError(
                f"layer_index_base must be 0 or 1: {self.layer_index_base}"
            )

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "EncoderConfig":
        if name not in ENCODER_PRESETS:
            raise ConfigError(
                f"Unknown encoder preset {name}, "
                f"expected one of {sorted(ENCODER_PRESETS)}"
            )
        values = dict(ENCODER_PRESETS[name])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def structural(self) -> Dict[str, Any]:
        """Keys that change parameter shapes, recorded in checkpoints"""
        return {
            "depth": self.depth,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "patch_size": self.patch_size,
            "mlp_ratio": self.mlp_ratio,
            "img_size": self.img_size,
            "qkv_bias": self.qkv_bias,
        }

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, qkv_bias: bool = True) -> None:
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        # separate projections, LoRA wraps q and v
        self.q = nn.Linear(dim, dim, bias=qkv_bias)
        self.k = nn.Linear(dim, dim, bias=qkv_bias)
        self.v = nn.Linear(dim, dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))

        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)

        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class LayerScale(nn.Module):
    def __init__(self, dim: int, init_value: float) -> None:
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), float(init_value)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gamma


class Block(nn.Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_ratio: float,
        qkv_bias: bool,
        layer_scale_init: float,
        drop_path_prob: float,
    ) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads, qkv_bias=qkv_bias)
        self.ls1 = LayerScale(dim, layer_scale_init)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ls2 = LayerScale(dim, layer_scale_init)
        self.drop_path_prob = drop_path_prob

    def forward(self, x: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
        x = x + drop_path(
            self.ls1(self.attn(self.norm1(x))), self.drop_path_prob, train_mode
        )
        x = x + drop_path(
            self.ls2(self.mlp(self.norm2(x))), self.drop_path_prob, train_mode
        )
        return x


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class VisionTransformer(nn.Module):
    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        self.config = config
        dim = config.embed_dim
        self.init_grid = (
            config.img_size // config.patch_size,
            config.img_size // config.patch_size,
        )

        self.patch_embed = nn.Conv2d(
            3, dim, kernel_size=config.patch_size, stride=config.patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(
            torch.zeros(1, 1 + self.init_grid[0] * self.init_grid[1], dim)
        )
        self.mask_token = nn.Parameter(torch.zeros(1, dim))

        # linear in depth, 0 for the first block
        last = max(config.depth - 1, 1)
        rates = [config.drop_path_rate * i / last for i in range(config.depth)]
        self.blocks = nn.ModuleList(
            Block(
                dim,
                config.heads,
                config.mlp_ratio,
                config.qkv_bias,
                config.layer_scale_init,
                rate,
            )
            for rate in rates
        )
        self.norm = nn.LayerNorm(dim, eps=1e-6)

        trunc_normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.cls_token, std=1e-6)
        self.apply(_init_weights)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    @property
    def depth(self) -> int:
        return self.config.depth

    def grid_size(self, height: int, width: int) -> Tuple[int, int]:
        p = self.config.patch_size
        if height % p or width % p:
            raise ShapeError(
                f"Image size {height}x{width} is not a multiple of the patch size {p}"
            )
        return height // p, width // p

    def interpolate_pos_embed(self, grid: Tuple[int, int]) -> torch.Tensor:
        """Positional embeddings [1, 1 + gh*gw, D] for the requested grid"""

        if tuple(grid) == self.init_grid:
            return self.pos_embed
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:]
        gh0, gw0 = self.init_grid
        patch_pos = patch_pos.reshape(1, gh0, gw0, -1).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(
            patch_pos, size=tuple(grid), mode="bilinear", align_corners=False
        )
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid[0] * grid[1], -1)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def patchify(
        self,
        images: Union[ImageBatch, torch.Tensor],
        masks: Optional[torch.Tensor] = None,
    ) -> TokenSequence:
        """
        Non-overlapping patch projection plus class token and positions.

        masks: optional boolean [B, N]; masked patch embeddings are replaced
        by the learned mask token before the positions are added.
        """

        x = images.data if isinstance(images, ImageBatch) else images
        if x.dim() != 4:
            raise ShapeError(f"Expected images [B, C, H, W], got {tuple(x.shape)}")
        grid = self.grid_size(x.shape[2], x.shape[3])

        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        if masks is not None:
            if tuple(masks.shape) != tuple(tokens.shape[:2]):
                raise ShapeError(
                    f"Mask shape {tuple(masks.shape)} does not match "
                    f"{tuple(tokens.shape[:2])} tokens"
                )
            tokens = torch.where(
                masks.unsqueeze(-1), self.mask_token.to(tokens.dtype), tokens
            )

        pos = self.interpolate_pos_embed(grid)
        tokens = tokens + pos[:, 1:]
        cls = (self.cls_token + pos[:, :1]).expand(tokens.shape[0], -1, -1)
        return TokenSequence(tokens, cls[:, 0], grid)

    def forward(self, tokens: TokenSequence, train_mode: bool = False) -> TokenSequence:
        if tokens.dim != self.embed_dim:
            raise ShapeError(
                f"Token dim {tokens.dim} does not match "
                f"the encoder dim {self.embed_dim}"
            )
        x = tokens.joined()
        for block in self.blocks:
            x = block(x, train_mode)
        x = self.norm(x)
        return TokenSequence.split(x, tokens.grid)

    def encode(
        self,
        images: Union[ImageBatch, torch.Tensor],
        masks: Optional[torch.Tensor] = None,
        train_mode: bool = False,
    ) -> TokenSequence:
        return self(self.patchify(images, masks), train_mode=train_mode)

    def forward_with_intermediates(
        self, images: Union[ImageBatch, torch.Tensor], layers: Sequence[int]
    ) -> List[TokenSequence]:
        """
        Token sequences after the requested blocks, before the terminal norm,
        in request order. Indices follow config.layer_index_base.
        """

        wanted = [int(layer) - self.config.layer_index_base for layer in layers]
        for requested, index in zip(layers, wanted):
            if index < 0 or index >= self.depth:
                raise RangeError(
                    f"Layer {requested} is out of range for depth {self.depth} "
                    f"(index base {self.config.layer_index_base})"
                )
        if not wanted:
            return []

        tokens = self.patchify(images)
        x = tokens.joined()
        taps: Dict[int, torch.Tensor] = {}
        last = max(wanted)
        for index, block in enumerate(self.blocks):
            x = block(x, False)
            if index in wanted:
                taps[index] = x
            if index == last:
                break

        return [TokenSequence.split(taps[i], tokens.grid) for i in wanted]


def build_encoder(config: EncoderConfig) -> VisionTransformer:
    encoder = VisionTransformer(config)
    log.debug(
        "Built encoder depth={} dim={} heads={}",
        config.depth,
        config.embed_dim,
        config.heads,
    )
    return encoder
