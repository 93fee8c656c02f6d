from radvit.models.caption import (
    CaptionConfig,
    CaptionModel,
    PatchMerger,
    SeqDecoder,
    Tokenizer,
    ToyDecoder,
    VisualProjection,
    build_caption_model,
)
from radvit.models.dense import (
    DenseAdapter,
    DenseConfig,
    Segmenter,
    count_trainable,
    tokens_to_map,
)
from radvit.models.generation import Hypothesis, beam_search, generate, greedy
from radvit.models.heads import ProjectionHead
from radvit.models.lora import LoraLinear, lora_wrap, merge_lora
from radvit.models.vit import EncoderConfig, VisionTransformer, build_encoder

__all__ = [
    "CaptionConfig",
    "CaptionModel",
    "DenseAdapter",
    "DenseConfig",
    "EncoderConfig",
    "Hypothesis",
    "LoraLinear",
    "PatchMerger",
    "ProjectionHead",
    "Segmenter",
    "SeqDecoder",
    "Tokenizer",
    "ToyDecoder",
    "VisionTransformer",
    "VisualProjection",
    "beam_search",
    "build_caption_model",
    "build_encoder",
    "count_trainable",
    "generate",
    "greedy",
    "lora_wrap",
    "merge_lora",
    "tokens_to_map",
]
