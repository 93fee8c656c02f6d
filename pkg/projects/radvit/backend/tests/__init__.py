from typing import Any, Dict

import torch
from radvit.config import load_config
from radvit.core.types import ImageBatch
from radvit.models.vit import EncoderConfig, VisionTransformer, build_encoder

# layer scale 1 keeps the class token image dependent at init
TINY = {"preset": "tiny", "layer_scale": 1.0, "seed": 0, "device": "cpu"}


class RadvitTests:
    def get_config(self, command: str, **values: Any) -> Dict[str, Any]:
        overrides = dict(TINY)
        overrides.update(values)
        return load_config(command, overrides=overrides)

    def get_encoder(
        self,
        depth: int = 4,
        embed_dim: int = 64,
        heads: int = 4,
        layer_scale: float = 1.0,
        drop_path_rate: float = 0.0,
        seed: int = 0,
    ) -> VisionTransformer:
        torch.manual_seed(seed)
        config = EncoderConfig(
            depth=depth,
            embed_dim=embed_dim,
            heads=heads,
            layer_scale_init=layer_scale,
            drop_path_rate=drop_path_rate,
        )
        return build_encoder(config)

    def get_images(
        self, batch: int = 2, size: int = 56, seed: int = 0, channels: int = 3
    ) -> torch.Tensor:
        g = torch.Generator().manual_seed(seed)
        return torch.randn(batch, channels, size, size, generator=g)

    def get_batch(self, batch: int = 2, size: int = 56, seed: int = 0) -> ImageBatch:
        return ImageBatch(self.get_images(batch, size, seed))

    def encoder_state(self, module: torch.nn.Module) -> Dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in module.state_dict().items()}

    def assert_identical(
        self, before: Dict[str, torch.Tensor], after: Dict[str, torch.Tensor]
    ) -> None:
        assert before.keys() == after.keys()
        for key, value in before.items():
            assert torch.equal(value, after[key]), key
