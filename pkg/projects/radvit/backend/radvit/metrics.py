"""
Evaluation metrics.

Classification: accuracy, macro F1, one-vs-rest AUC.
Segmentation: mIoU, Dice and pixel F1.
Captioning: BLEU-1..4 (cumulative, unsmoothed) and ROUGE-L.
BLEU and ROUGE-L are reported in [0, 100], everything else in [0, 1].
"""
import math
from collections import Counter
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
from loguru import logger as log
from radvit.exceptions import DataError

Tokens = Union[str, Sequence[str]]

ROUGE_BETA = 1.2


def _labels(values: Any, name: str) -> np.ndarray:
    array = np.asarray(values)
    if array.size == 0:
        raise DataError(f"Empty {name}")
    return array.astype(np.int64).reshape(-1)


def confusion_matrix(y_true: Any, y_pred: Any, n_classes: int) -> np.ndarray:
    """[n_classes, n_classes] counts, rows are the truth and columns the prediction"""

    t = _labels(y_true, "truth")
    p = _labels(y_pred, "prediction")
    if t.shape != p.shape:
        raise DataError(f"Truth and prediction sizes differ: {t.size} vs {p.size}")
    for name, labels in (("truth", t), ("prediction", p)):
        if labels.min() < 0 or labels.max() >= n_classes:
            raise DataError(f"{name} labels out of range [0, {n_classes})")

    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def accuracy(y_true: Any, y_pred: Any) -> float:
    t = _labels(y_true, "truth")
    p = _labels(y_pred, "prediction")
    if t.shape != p.shape:
        raise DataError(f"Truth and prediction sizes differ: {t.size} vs {p.size}")
    return float((t == p).mean())


def _f1_from_counts(cm: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class F1 and the mask of classes present in truth or prediction"""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    present = denom > 0
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=present)
    return f1, present


def per_class_f1(y_true: Any, y_pred: Any, n_classes: int) -> np.ndarray:
    f1, _ = _f1_from_counts(confusion_matrix(y_true, y_pred, n_classes))
    return f1


def macro_f1(y_true: Any, y_pred: Any, n_classes: int) -> float:
    """Unweighted mean over all n_classes; absent classes count as 0"""

    f1, present = _f1_from_counts(confusion_matrix(y_true, y_pred, n_classes))
    absent = np.flatnonzero(~present)
    if absent.size:
        log.warning(
            "Classes {} are absent from truth and prediction, F1 = 0", absent.tolist()
        )
    return float(f1.mean())


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, tied values share the average of their positions"""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    return ((starts + ends) / 2.0)[inverse]


def binary_auc(labels: Any, scores: Any) -> float:
    """Mann-Whitney statistic; ties count 1/2"""

    y = np.asarray(labels).astype(bool).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = _average_ranks(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_ovr(y_true: Any, scores: Any) -> float:
    """Macro one-vs-rest AUC; a 1-D score array is read as the score of class 1"""

    t = _labels(y_true, "truth")
    s = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(s).all():
        raise DataError("Scores contain NaN or Inf values")
    if s.ndim == 1:
        s = np.stack([-s, s], axis=1)
    if s.shape[0] != t.size:
        raise DataError(f"{s.shape[0]} score rows for {t.size} labels")

    values = []
    for c in range(s.shape[1]):
        positives = t == c
        if positives.all() or not positives.any():
            log.warning("AUC: class {} has no positives or no negatives, skipped", c)
            continue
        values.append(binary_auc(positives, s[:, c]))

    if not values:
        return float("nan")
    return float(np.mean(values))


def classification_report(
    y_true: Any, scores: Any, n_classes: int
) -> Dict[str, float]:
    s = np.asarray(scores, dtype=np.float64)
    y_pred = s.argmax(axis=1)
    return {
        "acc": accuracy(y_true, y_pred),
        "f1": macro_f1(y_true, y_pred, n_classes),
        "auc": auc_ovr(y_true, s),
    }


def _overlap(cm: np.ndarray) -> Dict[str, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    union = tp + fp + fn
    present = union > 0
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=present)
    dice = np.divide(2 * tp, tp + union, out=np.zeros_like(tp), where=present)
    return {"iou": iou, "dice": dice, "present": present}


def seg_metrics(pred_mask: Any, true_mask: Any, n_classes: int) -> Dict[str, Any]:
    """
    mIoU, Dice and pixel F1 come from the confusion matrix of all pixels.
    image_dice is the mean over images of each image's macro Dice. Every
    class mean is taken over the classes present in truth or prediction.
    """

    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise DataError(f"Mask shapes differ: {pred.shape} vs {true.shape}")
    if pred.ndim == 2:
        pred, true = pred[None], true[None]

    cm = confusion_matrix(true, pred, n_classes)
    overall = _overlap(cm)
    present = overall["present"]

    image_dice = []
    for p, t in zip(pred, true):
        per_image = _overlap(confusion_matrix(t, p, n_classes))
        image_dice.append(float(per_image["dice"][per_image["present"]].mean()))

    # pixel F1 equals the global Dice per class
    f1, _ = _f1_from_counts(cm)
    return {
        "miou": float(overall["iou"][present].mean()),
        "dice": float(overall["dice"][present].mean()),
        "image_dice": float(np.mean(image_dice)),
        "f1": float(f1[present].mean()),
        "per_class_iou": overall["iou"].tolist(),
        "per_class_dice": overall["dice"].tolist(),
        "per_class_f1": f1.tolist(),
        "present": np.flatnonzero(present).tolist(),
    }


def _tokens(text: Tokens) -> List[str]:
    if isinstance(text, str):
        return text.split()
    return list(text)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(
    hypothesis: Sequence[str], references: Sequence[Sequence[str]], n: int
) -> Tuple[int, int]:
    """Clipped n-gram matches and the number of hypothesis n-grams"""

    counts = ngrams(hypothesis, n)
    if not counts:
        return 0, 0
    max_ref: Counter = Counter()
    for ref in references:
        for gram, c in ngrams(ref, n).items():
            max_ref[gram] = max(max_ref[gram], c)
    clipped = sum(min(c, max_ref[gram]) for gram, c in counts.items())
    return clipped, sum(counts.values())


def closest_ref_length(hyp_len: int, references: Sequence[Sequence[str]]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in references)[1]


def _cumulative_bleu(
    matches: Sequence[int],
    totals: Sequence[int],
    hyp_len: int,
    ref_len: int,
    max_n: int,
) -> Dict[str, float]:
    scores = {"bleu": 0.0}
    for n in range(1, max_n + 1):
        scores[f"bleu_{n}"] = 0.0
    if hyp_len == 0:
        return scores

    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    log_sum = 0.0
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if m == 0 or t == 0:
            # no smoothing: every higher order is 0 as well
            break
        log_sum += math.log(m / t)
        scores[f"bleu_{n}"] = 100.0 * bp * math.exp(log_sum / n)
    scores["bleu"] = scores[f"bleu_{max_n}"]
    return scores


def bleu(
    hypothesis: Tokens, references: Sequence[Tokens], max_n: int = 4
) -> Dict[str, float]:
    hyp = _tokens(hypothesis)
    refs = [_tokens(r) for r in references]
    if not refs:
        raise DataError("At least one reference is required")
    stats = [modified_precision(hyp, refs, n) for n in range(1, max_n + 1)]
    return _cumulative_bleu(
        [m for m, _ in stats],
        [t for _, t in stats],
        len(hyp),
        closest_ref_length(len(hyp), refs),
        max_n,
    )


def corpus_bleu(
    hypotheses: Sequence[Tokens],
    references: Sequence[Sequence[Tokens]],
    max_n: int = 4,
) -> Dict[str, float]:
    """Corpus-level counts summed before the geometric mean"""

    if len(hypotheses) != len(references):
        raise DataError(
            f"{len(hypotheses)} hypotheses for {len(references)} reference sets"
        )
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hypothesis, refs in zip(hypotheses, references):
        hyp = _tokens(hypothesis)
        ref_tokens = [_tokens(r) for r in refs]
        for n in range(1, max_n + 1):
            m, t = modified_precision(hyp, ref_tokens, n)
            matches[n - 1] += m
            totals[n - 1] += t
        hyp_len += len(hyp)
        ref_len += closest_ref_length(len(hyp), ref_tokens)
    return _cumulative_bleu(matches, totals, hyp_len, ref_len, max_n)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            if x == y:
                current.append(previous[j] + 1)
            else:
                current.append(max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(hypothesis: Tokens, reference: Tokens, beta: float = ROUGE_BETA) -> float:
    hyp = _tokens(hypothesis)
    ref = _tokens(reference)
    if not ref or not hyp:
        return 0.0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    b2 = beta**2
    return 100.0 * (1 + b2) * precision * recall / (recall + b2 * precision)


def caption_report(
    hypotheses: Sequence[Tokens], references: Sequence[Tokens]
) -> Dict[str, float]:
    """Corpus BLEU and mean ROUGE-L with a single reference per sample"""

    scores = corpus_bleu(hypotheses, [[r] for r in references])
    rouge = [rouge_l(h, r) for h, r in zip(hypotheses, references)]
    return {
        "bleu": scores["bleu"],
        "bleu_1": scores["bleu_1"],
        "bleu_4": scores["bleu_4"],
        "rouge_l": float(np.mean(rouge)) if rouge else 0.0,
    }
