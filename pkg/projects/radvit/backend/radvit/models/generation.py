from dataclasses import dataclass, field
from typing import List, Tuple

import torch
from radvit.exceptions import DomainError, ShapeError
from radvit.models.caption import BOS_ID, EOS_ID, SeqDecoder


@dataclass
class Hypothesis:
    tokens: List[int] = field(default_factory=list)
    score: float = 0.0
    finished: bool = False


def _check_prefix(prefix: torch.Tensor) -> torch.Tensor:
    if prefix.dim() == 2:
        prefix = prefix.unsqueeze(0)
    if prefix.dim() != 3 or prefix.shape[0] != 1:
        raise ShapeError(
            f"Expected a single prefix [1, K, D], got {tuple(prefix.shape)}"
        )
    return prefix


@torch.no_grad()
def greedy(
    decoder: SeqDecoder,
    prefix: torch.Tensor,
    max_tokens: int,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
) -> Hypothesis:
    prefix = _check_prefix(prefix)
    tokens = [bos_id]
    score = 0.0
    for _ in range(max_tokens):
        ids = torch.tensor([tokens], dtype=torch.long, device=prefix.device)
        log_probs = decoder.step_log_probs(prefix, ids)[0]
        token = int(log_probs.argmax())
        score += float(log_probs[token])
        if token == eos_id:
            return Hypothesis(tokens[1:], score, True)
        tokens.append(token)
    return Hypothesis(tokens[1:], score, False)


@torch.no_grad()
def beam_search(
    decoder: SeqDecoder,
    prefix: torch.Tensor,
    beams: int,
    max_tokens: int,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
) -> Hypothesis:
    """
    Length-unnormalized beam search over a single visual prefix.

    Every step ranks the expansions of the alive hypotheses. An expansion
    ending with eos among the best `beams` leaves as a finished hypothesis,
    and the best `beams` expansions without eos stay alive, so the beam
    keeps its width while the vocabulary allows it. The search stops when
    no hypothesis is alive, when max_tokens tokens have been generated, or
    when no alive hypothesis can beat the best finished one (scores never
    increase). Returned tokens exclude bos and eos.
    """

    if beams < 1:
        raise DomainError(f"At least one beam is required, got {beams}")
    prefix = _check_prefix(prefix)

    alive: List[Tuple[List[int], float]] = [([bos_id], 0.0)]
    finished: List[Hypothesis] = []

    for _ in range(max_tokens):
        ids = torch.tensor(
            [seq for seq, _ in alive], dtype=torch.long, device=prefix.device
        )
        log_probs = decoder.step_log_probs(prefix.expand(len(alive), -1, -1), ids)
        # every row keeps at least beams expansions without eos
        k = min(2 * beams, log_probs.shape[-1])
        top_lp, top_ids = log_probs.topk(k, dim=-1)

        candidates = []
        for row, (seq, score) in enumerate(alive):
            for lp, token in zip(top_lp[row].tolist(), top_ids[row].tolist()):
                candidates.append((seq + [token], score + lp))
        # stable: ties keep the order of the parents and of topk
        candidates.sort(key=lambda c: c[1], reverse=True)

        alive = []
        for rank, (seq, score) in enumerate(candidates):
            if seq[-1] == eos_id:
                if rank < beams:
                    finished.append(Hypothesis(seq[1:-1], score, True))
            elif len(alive) < beams:
                alive.append((seq, score))
            if rank >= beams and len(alive) == beams:
                break

        if not alive:
            break
        if finished:
            best_finished = max(h.score for h in finished)
            if max(score for _, score in alive) <= best_finished:
                break

    pool = finished + [Hypothesis(seq[1:], score, False) for seq, score in alive]
    return max(pool, key=lambda h: h.score)


def generate(
    prefix: torch.Tensor,
    decoder: SeqDecoder,
    beams: int = 5,
    max_tokens: int = 64,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
) -> List[Hypothesis]:
    """Beam search for every prefix of a batch [B, K, D]"""

    if beams < 1:
        raise DomainError(f"At least one beam is required, got {beams}")
    if prefix.dim() == 2:
        prefix = prefix.unsqueeze(0)
    return [
        beam_search(decoder, prefix[i : i + 1], beams, max_tokens, bos_id, eos_id)
        for i in range(prefix.shape[0])
    ]
