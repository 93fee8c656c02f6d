"""
Vision-language bridge.

Patch tokens are projected into the decoder embedding space and layer
normalized (Z = LN(W_p T)), pooled into K latent tokens by learnable
queries (A = softmax(Q Z^T / sqrt(D_l)), P = A Z), and handed to a
sequence decoder as its visual prefix.
"""
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import (
    Any,
    Dict,
    Iterable,
    List,
    Optional,
    Protocol,
    Union,
    runtime_checkable,
)

import torch
import torch.nn.functional as F
from loguru import logger as log
from radvit.core.types import ImageBatch, TokenSequence
from radvit.exceptions import ConfigError, DataError, ShapeError
from radvit.models.vit import VisionTransformer
from timm.layers import trunc_normal_
from torch import nn

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass(frozen=True)
class CaptionConfig:
    embed_dim: int
    prefix_dim: int = 768
    queries: int = 64
    decoder_layers: int = 2
    decoder_heads: int = 4
    max_len: int = 130
    projected_merger: bool = False

    def __post_init__(self) -> None:
        if self.queries <= 0:
            raise ConfigError(f"Invalid number of queries: {self.queries}")
        if self.prefix_dim % self.decoder_heads:
            raise ConfigError(
                f"prefix_dim {self.prefix_dim} is not divisible by "
                f"{self.decoder_heads} heads"
            )

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


class VisualProjection(nn.Module):
    def __init__(self, embed_dim: int, prefix_dim: int) -> None:
        super().__init__()
        self.embed_dim = embed_dim
        self.proj = nn.Linear(embed_dim, prefix_dim, bias=False)
        self.norm = nn.LayerNorm(prefix_dim)
        trunc_normal_(self.proj.weight, std=0.02)

    def forward(self, tokens: Union[TokenSequence, torch.Tensor]) -> torch.Tensor:
        t = tokens.patch_tokens if isinstance(tokens, TokenSequence) else tokens
        if t.shape[-1] != self.embed_dim:
            raise ShapeError(
                f"Token dim {t.shape[-1]} does not match the projection input "
                f"{self.embed_dim}"
            )
        return self.norm(self.proj(t))


class PatchMerger(nn.Module):
    def __init__(self, prefix_dim: int, queries: int = 64, projected: bool = False):
        super().__init__()
        self.prefix_dim = prefix_dim
        self.queries = nn.Parameter(torch.empty(queries, prefix_dim))
        trunc_normal_(self.queries, std=0.02)
        self.projected = projected
        if projected:
            self.key = nn.Linear(prefix_dim, prefix_dim)
            self.value = nn.Linear(prefix_dim, prefix_dim)

    def attention(self, z: torch.Tensor) -> torch.Tensor:
        """[B, K, N], rows sum to 1 over the tokens"""
        if z.shape[-1] != self.prefix_dim:
            raise ShapeError(
                f"Projected token dim {z.shape[-1]} does not match {self.prefix_dim}"
            )
        keys = self.key(z) if self.projected else z
        logits = torch.einsum("kd,bnd->bkn", self.queries, keys)
        return (logits / math.sqrt(self.prefix_dim)).softmax(dim=-1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        weights = self.attention(z)
        values = self.value(z) if self.projected else z
        return weights @ values


@runtime_checkable
class SeqDecoder(Protocol):
    vocab_size: int

    def log_probs(self, prefix: torch.Tensor, input_ids: torch.Tensor) -> torch.Tensor:
        """[B, T, V]: position t scores the token following input_ids[:, : t + 1]"""

    def step_log_probs(
        self, prefix: torch.Tensor, input_ids: torch.Tensor
    ) -> torch.Tensor:
        """[B, V]: scores of the token following the whole of input_ids"""


class ToyDecoder(nn.Module):
    """Causal transformer decoder cross-attending to the visual prefix"""

    def __init__(
        self,
        vocab_size: int,
        dim: int,
        layers: int = 2,
        heads: int = 4,
        max_len: int = 130,
    ) -> None:
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.zeros(max_len, dim))
        layer = nn.TransformerDecoderLayer(
            dim,
            heads,
            dim_feedforward=4 * dim,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.layers = nn.TransformerDecoder(layer, layers)
        self.norm = nn.LayerNorm(dim)
        self.out = nn.Linear(dim, vocab_size)
        trunc_normal_(self.pos, std=0.02)

    def log_probs(self, prefix: torch.Tensor, input_ids: torch.Tensor) -> torch.Tensor:
        t = input_ids.shape[1]
        if t > self.max_len:
            raise ShapeError(f"Sequence length {t} exceeds the maximum {self.max_len}")
        x = self.embed(input_ids) + self.pos[:t].to(prefix.dtype)
        causal = nn.Transformer.generate_square_subsequent_mask(
            t, device=x.device, dtype=x.dtype
        )
        h = self.layers(x, prefix, tgt_mask=causal)
        return F.log_softmax(self.out(self.norm(h)), dim=-1)

    def step_log_probs(
        self, prefix: torch.Tensor, input_ids: torch.Tensor
    ) -> torch.Tensor:
        return self.log_probs(prefix, input_ids)[:, -1]

    def forward(self, prefix: torch.Tensor, input_ids: torch.Tensor) -> torch.Tensor:
        return self.log_probs(prefix, input_ids)


class Tokenizer:
    """Lowercase whitespace tokenizer with pad, bos, eos and unk specials"""

    def __init__(self, words: Iterable[str]) -> None:
        self.itos: List[str] = list(SPECIAL_TOKENS)
        for w in words:
            if w not in SPECIAL_TOKENS and w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @staticmethod
    def split(text: str) -> List[str]:
        return text.lower().split()

    @classmethod
    def fit(cls, captions: Iterable[str]) -> "Tokenizer":
        words = sorted({w for c in captions for w in cls.split(c)})
        return cls(words)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def encode(self, text: str, add_special: bool = True) -> List[int]:
        ids = [self.stoi.get(w, UNK_ID) for w in self.split(text)]
        if add_special:
            ids = [BOS_ID] + ids + [EOS_ID]
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            words.append(self.itos[i] if 0 <= i < len(self.itos) else "<unk>")
        return " ".join(words)

    def batch_encode(
        self, texts: Iterable[str], max_len: Optional[int] = None
    ) -> torch.Tensor:
        encoded = [self.encode(t) for t in texts]
        if not encoded:
            raise DataError("Nothing to encode")
        length = max(len(e) for e in encoded)
        if max_len is not None:
            length = min(length, max_len)
        batch = torch.full((len(encoded), length), PAD_ID, dtype=torch.long)
        for row, ids in enumerate(encoded):
            ids = ids[:length]
            batch[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        return batch

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w") as f:
            json.dump({"itos": self.itos}, f, indent=2)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Tokenizer":
        with open(path) as f:
            itos = json.load(f).get("itos", [])
        if tuple(itos[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigError(f"{path} is not a radvit tokenizer")
        return cls(itos[len(SPECIAL_TOKENS) :])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Tokenizer) and self.itos == other.itos


class CaptionModel(nn.Module):
    """Frozen encoder, trainable projection, merger and decoder"""

    def __init__(
        self,
        encoder: VisionTransformer,
        config: CaptionConfig,
        decoder: nn.Module,
    ) -> None:
        super().__init__()
        if config.embed_dim != encoder.embed_dim:
            raise ConfigError(
                f"Bridge expects dim {config.embed_dim}, "
                f"encoder has {encoder.embed_dim}"
            )
        self.config = config
        self.encoder = encoder
        self.encoder.requires_grad_(False)
        self.projection = VisualProjection(config.embed_dim, config.prefix_dim)
        self.merger = PatchMerger(
            config.prefix_dim, config.queries, projected=config.projected_merger
        )
        self.decoder = decoder

    def train(self, mode: bool = True) -> "CaptionModel":
        super().train(mode)
        self.encoder.eval()
        return self

    def visual_prefix(self, images: Union[ImageBatch, torch.Tensor]) -> torch.Tensor:
        with torch.no_grad():
            tokens = self.encoder.encode(images)
        return self.merger(self.projection(tokens))

    def forward(
        self, images: Union[ImageBatch, torch.Tensor], input_ids: torch.Tensor
    ) -> torch.Tensor:
        return self.decoder.log_probs(self.visual_prefix(images), input_ids)


def build_caption_model(
    encoder: VisionTransformer, config: CaptionConfig, vocab_size: int
) -> CaptionModel:
    decoder = ToyDecoder(
        vocab_size,
        config.prefix_dim,
        layers=config.decoder_layers,
        heads=config.decoder_heads,
        max_len=config.max_len,
    )
    model = CaptionModel(encoder, config, decoder)
    log.debug(
        "Caption bridge K={} D_l={} vocab={}",
        config.queries,
        config.prefix_dim,
        vocab_size,
    )
    return model
