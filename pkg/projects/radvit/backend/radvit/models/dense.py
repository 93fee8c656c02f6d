"""
Dense adaptation of a frozen encoder.

A convolutional pyramid computed from the raw image provides priors at
strides 8, 16 and 32. Token maps tapped from three encoder layers are
projected to a common fusion width, resized onto the prior grids and
added to the projected priors. A two-stage decoder then merges the
scales coarse to fine and emits logits at 1/8 of the input resolution.
"""
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from radvit.core.types import ImageBatch, TokenSequence
from radvit.exceptions import ConfigError, ShapeError
from radvit.models.vit import VisionTransformer
from torch import nn

STRIDES = (8, 16, 32)

DENSE_PRESETS: Dict[str, Dict[str, Any]] = {
    "tiny": {"fusion_dim": 32, "decoder_dim": 32, "layers": (1, 2, 3)},
    # widths calibrated on the reported trainable parameter totals
    "small": {"fusion_dim": 256, "decoder_dim": 572, "layers": (3, 7, 11)},
    "base": {"fusion_dim": 512, "decoder_dim": 1304, "layers": (3, 7, 11)},
}


@dataclass(frozen=True)
class DenseConfig:
    embed_dim: int
    fusion_dim: int = 256
    decoder_dim: int = 572
    n_classes: int = 2
    layers: Tuple[int, ...] = field(default=(3, 7, 11))

    def __post_init__(self) -> None:
        if len(self.layers) != len(STRIDES):
            raise ConfigError(
                f"Exactly {len(STRIDES)} encoder layers are required, got {self.layers}"
            )
        if self.n_classes < 2:
            raise ConfigError(f"At least 2 classes are required, got {self.n_classes}")
        if self.fusion_dim % 4:
            raise ConfigError(f"fusion_dim must be a multiple of 4: {self.fusion_dim}")

    @classmethod
    def preset(cls, name: str, embed_dim: int, **overrides: Any) -> "DenseConfig":
        if name not in DENSE_PRESETS:
            raise ConfigError(
                f"Unknown dense preset {name}, expected one of {sorted(DENSE_PRESETS)}"
            )
        values = dict(DENSE_PRESETS[name])
        values.update({k: v for k, v in overrides.items() if v is not None})
        values["layers"] = tuple(values["layers"])
        return cls(embed_dim=embed_dim, **values)

    @property
    def pyramid_widths(self) -> Tuple[int, int, int, int]:
        """stem, stride 8, stride 16, stride 32"""
        f = self.fusion_dim
        return f // 4, f // 2, f, f

    def as_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["layers"] = list(self.layers)
        return values


def conv_bn_relu(
    in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1
) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(
            in_ch,
            out_ch,
            kernel_size=kernel_size,
            stride=stride,
            padding=kernel_size // 2,
            bias=False,
        ),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ConvPyramid(nn.Module):
    def __init__(self, widths: Tuple[int, int, int, int]) -> None:
        super().__init__()
        c0, d8, d16, d32 = widths
        self.stem = nn.Sequential(
            conv_bn_relu(3, c0, stride=2),
            conv_bn_relu(c0, c0, stride=2),
        )
        self.stage8 = conv_bn_relu(c0, d8, stride=2)
        self.stage16 = conv_bn_relu(d8, d16, stride=2)
        self.stage32 = conv_bn_relu(d16, d32, stride=2)

    def forward(
        self, images: Union[ImageBatch, torch.Tensor]
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x = images.data if isinstance(images, ImageBatch) else images
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"Image size {h}x{w} is not divisible by 32")
        c8 = self.stage8(self.stem(x))
        c16 = self.stage16(c8)
        c32 = self.stage32(c16)
        return c8, c16, c32


def tokens_to_map(
    tokens: Union[TokenSequence, torch.Tensor], grid: Optional[Tuple[int, int]] = None
) -> torch.Tensor:
    """Row-major [B, N, D] -> [B, D, gh, gw]; the class token is not part of the map"""

    if isinstance(tokens, TokenSequence):
        grid = tokens.grid
        tokens = tokens.patch_tokens
    if grid is None:
        raise ShapeError("A grid is required to reshape raw tokens")
    b, n, d = tokens.shape
    gh, gw = grid
    if gh * gw != n:
        raise ShapeError(f"Grid {gh}x{gw} does not hold {n} tokens")
    return tokens.transpose(1, 2).reshape(b, d, gh, gw)


def upsample(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class AlignFuse(nn.Module):
    def __init__(self, embed_dim: int, prior_dim: int, fusion_dim: int, stride: int):
        super().__init__()
        if stride not in STRIDES:
            raise ConfigError(f"Unknown stride {stride}, expected one of {STRIDES}")
        self.stride = stride
        self.token_proj = nn.Conv2d(embed_dim, fusion_dim, kernel_size=1)
        self.prior_proj = nn.Conv2d(prior_dim, fusion_dim, kernel_size=1, bias=False)

    def forward(self, token_map: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
        tokens = upsample(self.token_proj(token_map), prior.shape[-2:])
        return tokens + self.prior_proj(prior)


class Psi(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__(conv_bn_relu(in_ch, out_ch), conv_bn_relu(out_ch, out_ch))


class Decoder(nn.Module):
    def __init__(self, fusion_dim: int, decoder_dim: int, n_classes: int) -> None:
        super().__init__()
        self.fusion_dim = fusion_dim
        self.psi16 = Psi(2 * fusion_dim, decoder_dim)
        self.psi8 = Psi(decoder_dim + fusion_dim, decoder_dim)
        self.head = nn.Conv2d(decoder_dim, n_classes, kernel_size=1)

    def forward(
        self, f8: torch.Tensor, f16: torch.Tensor, f32: torch.Tensor
    ) -> torch.Tensor:
        for name, fmap in (("F8", f8), ("F16", f16), ("F32", f32)):
            if fmap.shape[1] != self.fusion_dim:
                raise ShapeError(
                    f"{name} has width {fmap.shape[1]}, expected {self.fusion_dim}"
                )
        u16 = self.psi16(torch.cat([upsample(f32, f16.shape[-2:]), f16], dim=1))
        u8 = self.psi8(torch.cat([upsample(u16, f8.shape[-2:]), f8], dim=1))
        return self.head(u8)


class DenseAdapter(nn.Module):
    def __init__(self, config: DenseConfig) -> None:
        super().__init__()
        self.config = config
        widths = config.pyramid_widths
        self.pyramid = ConvPyramid(widths)
        self.fuse = nn.ModuleList(
            AlignFuse(config.embed_dim, prior_dim, config.fusion_dim, stride)
            for prior_dim, stride in zip(widths[1:], STRIDES)
        )
        self.decoder = Decoder(config.fusion_dim, config.decoder_dim, config.n_classes)

    def fused_maps(
        self, images: torch.Tensor, taps: Sequence[TokenSequence]
    ) -> List[torch.Tensor]:
        """F8, F16, F32 from the image and the taps of the earlier to later layers"""

        priors = self.pyramid(images)
        return [
            fuse(tokens_to_map(tap), prior)
            for fuse, tap, prior in zip(self.fuse, taps, priors)
        ]

    def forward(
        self, images: torch.Tensor, taps: Sequence[TokenSequence]
    ) -> torch.Tensor:
        return self.decoder(*self.fused_maps(images, taps))


class Segmenter(nn.Module):
    """Frozen encoder plus trainable dense adapter"""

    def __init__(self, encoder: VisionTransformer, config: DenseConfig) -> None:
        super().__init__()
        if config.embed_dim != encoder.embed_dim:
            raise ConfigError(
                f"Adapter expects dim {config.embed_dim}, "
                f"encoder has {encoder.embed_dim}"
            )
        self.encoder = encoder
        self.encoder.requires_grad_(False)
        self.adapter = DenseAdapter(config)
        # earlier layers feed the finer scales
        self.layers = sorted(config.layers)

    def train(self, mode: bool = True) -> "Segmenter":
        super().train(mode)
        self.encoder.eval()
        return self

    def taps(self, images: torch.Tensor) -> List[TokenSequence]:
        with torch.no_grad():
            return self.encoder.forward_with_intermediates(images, self.layers)

    def forward(self, images: Union[ImageBatch, torch.Tensor]) -> torch.Tensor:
        x = images.data if isinstance(images, ImageBatch) else images
        return self.adapter(x, self.taps(x))

    @torch.no_grad()
    def predict(self, images: Union[ImageBatch, torch.Tensor]) -> torch.Tensor:
        """Label map [B, H, W] from logits upsampled to full resolution"""
        x = images.data if isinstance(images, ImageBatch) else images
        logits = self(x)
        return upsample(logits, x.shape[-2:]).argmax(dim=1)


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
