"""
Caption bridge training and decoding.

The loss is the negative log-likelihood of every non-pad target token,
averaged over those tokens. Large batches are processed in micro-batches
whose summed losses are divided by the token count of the whole batch,
so the accumulated gradient is the gradient of the full-batch mean.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd
import torch
from loguru import logger as log
from radvit.config import structural_keys
from radvit.core.seeding import seed_everything
from radvit.data.manifest import DatasetSplits, make_loader
from radvit.exceptions import ConfigError, DataError
from radvit.metrics import caption_report
from radvit.models.caption import (
    PAD_ID,
    CaptionConfig,
    CaptionModel,
    SeqDecoder,
    Tokenizer,
    build_caption_model,
)
from radvit.models.generation import Hypothesis, generate
from radvit.models.vit import VisionTransformer
from radvit.tasks.common import (
    History,
    check_split,
    load_encoder,
    resolve_device,
    save_module,
    snapshot_state,
    trainable,
)
from torch.utils.data import Dataset

HISTORY_COLUMNS = ("epoch", "split", "loss", "bleu", "bleu_1", "bleu_4", "rouge_l")
SWEEP_COLUMNS = ("beams", "max_tokens", "bleu", "bleu_1", "bleu_4", "rouge_l")
CHECKPOINT_FILE = "captioner.radvit"
TOKENIZER_FILE = "tokenizer.json"


def _token_nll(
    prefix: torch.Tensor, target_ids: torch.Tensor, decoder: SeqDecoder
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Summed NLL of the non-pad targets and their count"""

    if target_ids.dim() != 2 or target_ids.shape[1] < 2:
        raise DataError(
            f"Targets need a start marker and one token: {tuple(target_ids.shape)}"
        )
    inputs, targets = target_ids[:, :-1], target_ids[:, 1:]
    keep = targets != PAD_ID
    count = keep.sum()
    if int(count) == 0:
        raise DataError("Empty caption targets")

    log_probs = decoder.log_probs(prefix, inputs)
    nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (nll * keep).sum(), count


def caption_loss(
    prefix: torch.Tensor,
    target_ids: torch.Tensor,
    decoder: SeqDecoder,
    reduction: str = "mean",
) -> torch.Tensor:
    total, count = _token_nll(prefix, target_ids, decoder)
    if reduction == "sum":
        return total
    return total / count


def accumulate_gradients(
    model: CaptionModel,
    images: torch.Tensor,
    target_ids: torch.Tensor,
    micro_batch: int,
) -> float:
    """
    Backward of the full-batch mean loss, micro-batch by micro-batch.
    Returns the full-batch mean loss.
    """

    total_tokens = (target_ids[:, 1:] != PAD_ID).sum()
    if int(total_tokens) == 0:
        raise DataError("Empty caption targets")

    loss_sum = 0.0
    for start in range(0, len(images), micro_batch):
        chunk = slice(start, start + micro_batch)
        ids = target_ids[chunk]
        if not (ids[:, 1:] != PAD_ID).any():
            continue
        prefix = model.visual_prefix(images[chunk])
        total, _ = _token_nll(prefix, ids, model.decoder)
        (total / total_tokens).backward()
        loss_sum += float(total)
    return loss_sum / int(total_tokens)


def captions_of(dataset: Dataset) -> List[str]:
    if hasattr(dataset, "samples"):
        return [s["caption"] for s in dataset.samples]
    return [str(c) for c in dataset.targets]


def caption_config(
    conf: Mapping[str, Any], encoder: VisionTransformer
) -> CaptionConfig:
    return CaptionConfig(
        embed_dim=encoder.embed_dim,
        prefix_dim=conf.get("prefix_dim") or encoder.embed_dim,
        queries=conf["queries"],
        decoder_layers=conf["decoder_layers"],
        decoder_heads=conf["decoder_heads"],
        max_len=conf["max_len"],
        projected_merger=conf["projected_merger"],
    )


def build_captioner(
    encoder: VisionTransformer,
    conf: Mapping[str, Any],
    tokenizer: Tokenizer,
    decoder: Optional[SeqDecoder] = None,
) -> CaptionModel:
    config = caption_config(conf, encoder)
    if decoder is None:
        return build_caption_model(encoder, config, tokenizer.vocab_size)
    if decoder.vocab_size != tokenizer.vocab_size:
        raise ConfigError(
            f"Decoder vocabulary ({decoder.vocab_size}) does not match "
            f"the tokenizer ({tokenizer.vocab_size})"
        )
    return CaptionModel(encoder, config, decoder)


@torch.no_grad()
def decode_captions(
    model: CaptionModel,
    tokenizer: Tokenizer,
    images: torch.Tensor,
    beams: int = 5,
    max_tokens: int = 64,
) -> List[Tuple[str, float]]:
    model.eval()
    # positions beyond the decoder context do not exist
    max_tokens = min(max_tokens, model.config.max_len)
    hypotheses: List[Hypothesis] = generate(
        model.visual_prefix(images), model.decoder, beams=beams, max_tokens=max_tokens
    )
    return [(tokenizer.decode(h.tokens), h.score) for h in hypotheses]


def caption_split(
    model: CaptionModel,
    tokenizer: Tokenizer,
    dataset: Dataset,
    beams: int,
    max_tokens: int,
    batch_size: int,
    device: torch.device,
) -> Tuple[List[str], List[str]]:
    """Generated and reference captions of a whole split"""

    hypotheses, references = [], []
    for images, captions in make_loader(dataset, batch_size, shuffle=False):
        images = images.to(device)
        decoded = decode_captions(model, tokenizer, images, beams, max_tokens)
        hypotheses.extend(text for text, _ in decoded)
        references.extend(captions)
    return hypotheses, references


def evaluate(
    model: CaptionModel,
    tokenizer: Tokenizer,
    dataset: Dataset,
    beams: int,
    max_tokens: int,
    batch_size: int,
    device: torch.device,
) -> Dict[str, float]:
    hypotheses, references = caption_split(
        model, tokenizer, dataset, beams, max_tokens, batch_size, device
    )
    return caption_report(
        [tokenizer.split(h) for h in hypotheses],
        [tokenizer.split(r) for r in references],
    )


def decode_sweep(
    model: CaptionModel,
    tokenizer: Tokenizer,
    dataset: Dataset,
    beams: Sequence[int] = (1, 5),
    max_tokens: Sequence[int] = (64, 128),
    batch_size: int = 8,
    device: Optional[torch.device] = None,
) -> pd.DataFrame:
    """Caption scores for every (beams, max_tokens) decoding configuration"""

    rows = []
    for b in beams:
        for m in max_tokens:
            scores = evaluate(
                model,
                tokenizer,
                dataset,
                b,
                m,
                batch_size,
                device or torch.device("cpu"),
            )
            rows.append({"beams": b, "max_tokens": m, **scores})
            log.info("beams={} max_tokens={}: {}", b, m, scores)
    return pd.DataFrame(rows, columns=list(SWEEP_COLUMNS))


@dataclass
class CaptionResult:
    model: CaptionModel
    tokenizer: Tokenizer
    history: History
    best_epoch: int
    train_loss: float


def train_captioner(
    data: DatasetSplits,
    conf: Mapping[str, Any],
    encoder: Optional[VisionTransformer] = None,
    tokenizer: Optional[Tokenizer] = None,
    decoder: Optional[SeqDecoder] = None,
    run_dir: Optional[Union[str, Path]] = None,
) -> CaptionResult:
    """
    Train projection, merger and decoder on top of a frozen encoder.

    Every optimizer step sees effective_batch captions processed in
    micro_batch chunks. Validation captions are decoded with beam search;
    the model of the epoch with the best validation BLEU is returned, the
    last one when there is no validation split.
    """

    seed_everything(conf["seed"])
    check_split(data, "train")
    device = resolve_device(conf.get("device"))

    if tokenizer is None:
        tokenizer = Tokenizer.fit(captions_of(data.train))
    encoder = encoder if encoder is not None else load_encoder(conf)
    model = build_captioner(encoder, conf, tokenizer, decoder).to(device)
    params = trainable(model)
    optimizer = torch.optim.AdamW(
        params, lr=conf["learning_rate"], weight_decay=conf["weight_decay"]
    )

    run_dir = Path(run_dir) if run_dir else None
    history = History(HISTORY_COLUMNS)
    best_bleu, best_epoch, best_state = -1.0, -1, None
    train_loss = float("nan")
    max_ids = model.config.max_len + 1
    log.info(
        "Training caption bridge: vocab {}, {} trainable parameters, {} epochs",
        tokenizer.vocab_size,
        sum(p.numel() for p in params),
        conf["epochs"],
    )

    for epoch in range(conf["epochs"]):
        model.train()
        losses, weights = [], []
        loader = make_loader(data.train, conf["effective_batch"], conf["seed"], epoch)
        for images, captions in loader:
            ids = tokenizer.batch_encode(captions, max_len=max_ids).to(device)
            optimizer.zero_grad(set_to_none=True)
            loss = accumulate_gradients(
                model, images.to(device), ids, conf["micro_batch"]
            )
            optimizer.step()
            losses.append(loss)
            weights.append(int((ids[:, 1:] != PAD_ID).sum()))

        train_loss = sum(v * w for v, w in zip(losses, weights)) / sum(weights)
        history.append(epoch=epoch, split="train", loss=train_loss)
        if len(data.val):
            scores = evaluate(
                model,
                tokenizer,
                data.val,
                conf["beams"],
                conf["max_tokens"],
                conf["micro_batch"],
                device,
            )
            history.append(epoch=epoch, split="val", **scores)
            log.info("Epoch {}: loss={:.4f} val {}", epoch, train_loss, scores)
            if scores["bleu"] > best_bleu:
                best_bleu, best_epoch = scores["bleu"], epoch
                best_state = snapshot_state(model)
        else:
            log.info("Epoch {}: loss={:.4f}", epoch, train_loss)
            best_epoch = epoch
        history.write(run_dir / "history.csv" if run_dir else None)

    if best_state is not None:
        model.load_state_dict(best_state)

    if run_dir:
        tokenizer.save(run_dir / TOKENIZER_FILE)
        save_module(
            model,
            run_dir / CHECKPOINT_FILE,
            config=structural_keys(conf),
            extra={"caption": model.config.as_dict(), "best_epoch": best_epoch},
        )
    return CaptionResult(model, tokenizer, history, best_epoch, train_loss)


def write_jsonl(
    records: Iterable[Mapping[str, Any]], path: Union[str, Path]
) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(dict(record)) + "\n")
    return path
