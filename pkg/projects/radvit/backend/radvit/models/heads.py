import torch
import torch.nn.functional as F
from timm.layers import trunc_normal_
from torch import nn


def build_mlp(layers: int, in_dim: int, hidden_dim: int, out_dim: int) -> nn.Module:
    if layers == 1:
        return nn.Linear(in_dim, out_dim)
    modules = [nn.Linear(in_dim, hidden_dim), nn.GELU()]
    for _ in range(layers - 2):
        modules += [nn.Linear(hidden_dim, hidden_dim), nn.GELU()]
    modules.append(nn.Linear(hidden_dim, out_dim))
    return nn.Sequential(*modules)


class PrototypeLayer(nn.Module):
    """Linear map onto P prototypes whose weight rows have unit norm"""

    def __init__(self, in_dim: int, prototypes: int) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.empty(prototypes, in_dim))
        trunc_normal_(self.weight, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, F.normalize(self.weight, dim=-1))


class ProjectionHead(nn.Module):
    """
    MLP to a bottleneck, L2 normalization, then the prototype layer.
    Used for both the class-token and the patch-token objectives.
    """

    def __init__(
        self,
        in_dim: int,
        prototypes: int,
        layers: int = 3,
        hidden_dim: int = 2048,
        bottleneck_dim: int = 256,
    ) -> None:
        super().__init__()
        self.mlp = build_mlp(max(layers, 1), in_dim, hidden_dim, bottleneck_dim)
        self.mlp.apply(self._init_weights)
        self.last_layer = PrototypeLayer(bottleneck_dim, prototypes)
        self.prototypes = prototypes

    @staticmethod
    def _init_weights(m: nn.Module) -> None:
        if isinstance(m, nn.Linear):
            trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.mlp(x), dim=-1, p=2, eps=1e-12)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.last_layer(self.bottleneck(x))
