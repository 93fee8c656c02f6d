from dataclasses import dataclass, field
from typing import Tuple

import torch
from radvit.exceptions import DataError, ShapeError

IDENTITY_MEAN = (0.0, 0.0, 0.0)
IDENTITY_STD = (1.0, 1.0, 1.0)


@dataclass
class ImageBatch:
    """
    Normalized images [B, C, H, W]; grayscale inputs are replicated to 3 channels.

    The patch-size divisibility of H and W is checked by the encoder (the
    convolutional branch of the dense adapter accepts other sizes).
    """

    data: torch.Tensor
    mean: Tuple[float, ...] = field(default=IDENTITY_MEAN)
    std: Tuple[float, ...] = field(default=IDENTITY_STD)

    def __post_init__(self) -> None:
        if self.data.dim() != 4:
            raise ShapeError(
                f"Expected images shaped [B, C, H, W], got {tuple(self.data.shape)}"
            )
        if self.data.shape[1] == 1:
            self.data = self.data.expand(-1, 3, -1, -1).contiguous()
        elif self.data.shape[1] != 3:
            raise ShapeError(f"Expected 1 or 3 channels, got {self.data.shape[1]}")
        if not torch.isfinite(self.data).all():
            raise DataError("Image batch contains NaN or Inf values")

    @classmethod
    def normalize(
        cls,
        pixels: torch.Tensor,
        mean: Tuple[float, ...] = IDENTITY_MEAN,
        std: Tuple[float, ...] = IDENTITY_STD,
    ) -> "ImageBatch":
        if pixels.dim() == 3:
            pixels = pixels.unsqueeze(0)
        if pixels.shape[1] == 1:
            pixels = pixels.expand(-1, 3, -1, -1)
        m = torch.tensor(mean, dtype=pixels.dtype).view(1, -1, 1, 1)
        s = torch.tensor(std, dtype=pixels.dtype).view(1, -1, 1, 1)
        return cls((pixels - m) / s, tuple(mean), tuple(std))

    @property
    def batch_size(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[2])

    @property
    def width(self) -> int:
        return int(self.data.shape[3])

    def check_multiple_of(self, size: int) -> None:
        if self.height % size or self.width % size:
            raise ShapeError(
                f"Image size {self.height}x{self.width} is not a multiple of {size}"
            )

    def to(self, device: torch.device) -> "ImageBatch":
        return ImageBatch(self.data.to(device), self.mean, self.std)


@dataclass
class TokenSequence:
    """Patch tokens [B, N, D] plus the class token [B, D] on a (gh, gw) grid"""

    patch_tokens: torch.Tensor
    class_token: torch.Tensor
    grid: Tuple[int, int]

    def __post_init__(self) -> None:
        if self.patch_tokens.dim() != 3:
            raise ShapeError(
                f"Patch tokens must be [B, N, D], got {tuple(self.patch_tokens.shape)}"
            )
        b, n, d = self.patch_tokens.shape
        if tuple(self.class_token.shape) != (b, d):
            raise ShapeError(
                f"Class token must be [{b}, {d}], got {tuple(self.class_token.shape)}"
            )
        gh, gw = self.grid
        if gh * gw != n:
            raise ShapeError(f"Grid {gh}x{gw} does not hold {n} tokens")

    @property
    def batch_size(self) -> int:
        return int(self.patch_tokens.shape[0])

    @property
    def num_patches(self) -> int:
        return int(self.patch_tokens.shape[1])

    @property
    def dim(self) -> int:
        return int(self.patch_tokens.shape[2])

    def joined(self) -> torch.Tensor:
        """[B, 1 + N, D] with the class token first"""
        return torch.cat([self.class_token.unsqueeze(1), self.patch_tokens], dim=1)

    @classmethod
    def split(cls, tokens: torch.Tensor, grid: Tuple[int, int]) -> "TokenSequence":
        return cls(tokens[:, 1:], tokens[:, 0], grid)
