import math
from functools import lru_cache
from typing import List, Sequence

import numpy as np
import pytest
from radvit.exceptions import DataError
from radvit.metrics import (
    accuracy,
    auc_ovr,
    binary_auc,
    bleu,
    caption_report,
    classification_report,
    confusion_matrix,
    corpus_bleu,
    lcs_length,
    macro_f1,
    rouge_l,
    seg_metrics,
)
from tests import RadvitTests

CASES = 200
WORDS = ["a", "circle", "square", "at", "the", "top", "bottom"]


def oracle_macro_f1(truth: List[int], pred: List[int], n_classes: int) -> float:
    scores = []
    for c in range(n_classes):
        tp = sum(t == c and p == c for t, p in zip(truth, pred))
        fp = sum(t != c and p == c for t, p in zip(truth, pred))
        fn = sum(t == c and p != c for t, p in zip(truth, pred))
        scores.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0)
    return sum(scores) / n_classes


def oracle_auc(labels: List[int], scores: List[float]) -> float:
    pos = [s for y, s in zip(labels, scores) if y]
    neg = [s for y, s in zip(labels, scores) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def oracle_iou(pred: np.ndarray, true: np.ndarray, c: int) -> float:
    p = set(zip(*np.nonzero(pred == c)))
    t = set(zip(*np.nonzero(true == c)))
    return len(p & t) / len(p | t)


def oracle_dice(pred: np.ndarray, true: np.ndarray, c: int) -> float:
    p = set(zip(*np.nonzero(pred == c)))
    t = set(zip(*np.nonzero(true == c)))
    return 2 * len(p & t) / (len(p) + len(t))


def present_classes(pred: np.ndarray, true: np.ndarray, n_classes: int) -> List[int]:
    return [c for c in range(n_classes) if (pred == c).any() or (true == c).any()]


def oracle_bleu(hyp: Sequence[str], ref: Sequence[str], n_max: int = 4) -> List[float]:
    """Cumulative BLEU-1..n_max against a single reference, in [0, 100]"""

    if not hyp:
        return [0.0] * n_max
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1 - len(ref) / len(hyp))
    scores, logs = [], []
    for n in range(1, n_max + 1):
        hyp_grams = [tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1)]
        ref_grams = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
        clipped = sum(
            min(hyp_grams.count(g), ref_grams.count(g)) for g in set(hyp_grams)
        )
        if not hyp_grams or clipped == 0 or len(logs) < n - 1:
            scores.append(0.0)
            continue
        logs.append(math.log(clipped / len(hyp_grams)))
        scores.append(100 * bp * math.exp(sum(logs) / n))
    return scores


def oracle_lcs(a: Sequence[str], b: Sequence[str]) -> int:
    @lru_cache(maxsize=None)
    def lcs(i: int, j: int) -> int:
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + lcs(i + 1, j + 1)
        return max(lcs(i + 1, j), lcs(i, j + 1))

    return lcs(0, 0)


def sentence(rng: np.random.Generator, low: int = 0, high: int = 9) -> List[str]:
    return [str(w) for w in rng.choice(WORDS, size=rng.integers(low, high))]


class TestApp(RadvitTests):
    def test_classification_metrics(self) -> None:

        rng = np.random.default_rng(0)
        for _ in range(CASES):
            n_classes = int(rng.integers(2, 6))
            size = int(rng.integers(1, 40))
            truth = rng.integers(0, n_classes, size=size).tolist()
            pred = rng.integers(0, n_classes, size=size).tolist()

            expected = oracle_macro_f1(truth, pred, n_classes)
            assert macro_f1(truth, pred, n_classes) == pytest.approx(expected)
            assert accuracy(truth, pred) == pytest.approx(
                sum(t == p for t, p in zip(truth, pred)) / size
            )
            cm = confusion_matrix(truth, pred, n_classes)
            assert cm.sum() == size
            assert np.trace(cm) == sum(t == p for t, p in zip(truth, pred))

        # an absent class counts as 0 in the average
        assert macro_f1([0, 0, 1], [0, 0, 1], 3) == pytest.approx(2 / 3)

        with pytest.raises(DataError):
            confusion_matrix([0, 3], [0, 1], 3)
        with pytest.raises(DataError):
            confusion_matrix([0, 1], [0], 2)
        with pytest.raises(DataError):
            accuracy([], [])

    def test_auc(self) -> None:

        rng = np.random.default_rng(1)
        for _ in range(CASES):
            size = int(rng.integers(2, 30))
            labels = rng.integers(0, 2, size=size)
            labels[0], labels[1] = 0, 1
            # rounding creates ties
            scores = np.round(rng.random(size), 1)
            expected = oracle_auc(labels.tolist(), scores.tolist())
            assert binary_auc(labels, scores) == pytest.approx(expected)
            assert auc_ovr(labels, scores) == pytest.approx(expected)

        assert math.isnan(binary_auc([1, 1], [0.2, 0.3]))
        assert binary_auc([0, 1], [0.1, 0.9]) == 1.0

        labels = np.array([0, 1, 2, 0, 1, 2])
        probs = np.eye(3)[labels] * 0.8 + 0.1
        assert auc_ovr(labels, probs) == pytest.approx(1.0)
        with pytest.raises(DataError):
            auc_ovr(labels, np.full((6, 3), np.nan))

        report = classification_report(labels, probs, 3)
        assert report == {"acc": 1.0, "f1": 1.0, "auc": 1.0}

    def test_seg_metrics(self) -> None:

        rng = np.random.default_rng(2)
        for _ in range(CASES):
            n_classes = int(rng.integers(2, 4))
            shape = tuple(int(v) for v in rng.integers((1, 2, 2), (4, 8, 8)))
            true = rng.integers(0, n_classes, size=shape)
            pred = rng.integers(0, n_classes, size=shape)
            scores = seg_metrics(pred, true, n_classes)

            present = present_classes(pred, true, n_classes)
            assert scores["present"] == present
            miou = np.mean([oracle_iou(pred, true, c) for c in present])
            assert scores["miou"] == pytest.approx(miou)

            dice = np.mean([oracle_dice(pred, true, c) for c in present])
            assert scores["dice"] == pytest.approx(dice)
            # pixel F1 is the Dice of the pooled pixels
            assert scores["f1"] == pytest.approx(dice)

            image_dice = []
            for p, t in zip(pred, true):
                classes = present_classes(p, t, n_classes)
                image_dice.append(np.mean([oracle_dice(p, t, c) for c in classes]))
            assert scores["image_dice"] == pytest.approx(np.mean(image_dice))

        mask = rng.integers(0, 2, size=(8, 8))
        perfect = seg_metrics(mask, mask, 2)
        assert perfect["miou"] == perfect["dice"] == perfect["f1"] == 1.0
        with pytest.raises(DataError):
            seg_metrics(mask, mask[:4], 2)

    def test_pooled_dice(self) -> None:

        true = np.zeros((2, 4, 4), dtype=np.int64)
        true[:, 1:3, 1:3] = 1
        pred = true.copy()
        # one missed foreground pixel in the second image
        pred[1, 1, 1] = 0
        scores = seg_metrics(pred, true, 2)

        background = 2 * 24 / (24 + 25)
        foreground = 2 * 7 / (7 + 8)
        assert scores["dice"] == pytest.approx((background + foreground) / 2)
        assert scores["dice"] == pytest.approx(scores["f1"])
        assert scores["per_class_dice"] == pytest.approx([background, foreground])

        second = (2 * 12 / (12 + 13) + 2 * 3 / (3 + 4)) / 2
        assert scores["image_dice"] == pytest.approx((1.0 + second) / 2)

    def test_metric_examples(self) -> None:

        assert macro_f1([0, 0, 1, 1], [0, 1, 1, 1], 2) == pytest.approx(
            0.7333, abs=1e-4
        )

        # prediction covers half of a 4-pixel square, no false positives
        true = np.zeros((4, 4), dtype=np.int64)
        true[1:3, 1:3] = 1
        pred = np.zeros((4, 4), dtype=np.int64)
        pred[1, 1:3] = 1
        scores = seg_metrics(pred, true, 2)
        assert scores["per_class_iou"][1] == pytest.approx(0.5)
        assert scores["per_class_dice"][1] == pytest.approx(0.6667, abs=1e-4)

        disjoint = seg_metrics(1 - true, true, 2)
        assert disjoint["miou"] == disjoint["dice"] == 0.0

        # repeated unigrams are clipped to the reference count
        assert bleu("a a a", ["a b"])["bleu_1"] == pytest.approx(100 / 3)

    def test_bleu(self) -> None:

        rng = np.random.default_rng(3)
        for _ in range(CASES):
            hyp, ref = sentence(rng), sentence(rng, low=1)
            scores = bleu(hyp, [ref])
            expected = oracle_bleu(hyp, ref)
            for n in range(1, 5):
                assert scores[f"bleu_{n}"] == pytest.approx(expected[n - 1], abs=1e-9)
            assert scores["bleu"] == scores["bleu_4"]
            assert corpus_bleu([hyp], [[ref]]) == scores

        text = "a circle at the top of the image"
        assert bleu(text, [text])["bleu"] == pytest.approx(100.0)
        # no 4-gram: no smoothing
        assert bleu("a circle", ["a circle"])["bleu"] == 0.0
        assert bleu("a circle", ["a circle"])["bleu_1"] == pytest.approx(100.0)
        with pytest.raises(DataError):
            bleu(text, [])
        with pytest.raises(DataError):
            corpus_bleu([text], [])

    def test_rouge_l(self) -> None:

        rng = np.random.default_rng(4)
        for _ in range(CASES):
            hyp, ref = sentence(rng), sentence(rng)
            lcs = oracle_lcs(tuple(hyp), tuple(ref))
            assert lcs_length(hyp, ref) == lcs

            if lcs == 0:
                expected = 0.0
            else:
                p, r = lcs / len(hyp), lcs / len(ref)
                expected = 100 * (1 + 1.2**2) * p * r / (r + 1.2**2 * p)
            assert rouge_l(hyp, ref) == pytest.approx(expected)

        text = "a circle at the top"
        assert rouge_l(text, text) == pytest.approx(100.0)
        assert rouge_l("", "a circle") == 0.0

    def test_caption_report(self) -> None:

        report = caption_report(
            ["a circle at the top", "a square"],
            ["a circle at the top", "a cross at the bottom"],
        )
        assert set(report) == {"bleu", "bleu_1", "bleu_4", "rouge_l"}
        assert 0.0 < report["bleu_1"] <= 100.0
        assert report["rouge_l"] == pytest.approx(
            (100.0 + rouge_l("a square", "a cross at the bottom")) / 2
        )
