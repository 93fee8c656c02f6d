import json
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd
import pytest
from PIL import Image
from radvit.cli import LOCK_FILE, evaluate_segmentation, main
from radvit.data.manifest import MANIFEST_NAME, load_dataset
from radvit.exceptions import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    NumericError,
)
from tests import RadvitTests

TINY_CLS = [
    "preset=tiny",
    "layer_scale=1.0",
    "synthetic=blobs",
    "synthetic_n=16",
    "epochs=1",
    "batch_size=4",
    "warmup_epochs=0",
]


def with_sets(command: str, output: Path, values: List[str]) -> List[str]:
    argv = [command, "--output", str(output)]
    for value in values:
        argv += ["--set", value]
    return argv


def save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


class TestApp(RadvitTests):
    def test_exit_codes(self, tmp_path: Path) -> None:

        assert main(["--version"]) == EXIT_OK
        assert main([]) == EXIT_USAGE
        assert main(["train-cls", "--regime", "partial"]) == EXIT_USAGE
        assert main(["eval", "--task", "cls"]) == EXIT_USAGE

        run = tmp_path / "run"
        assert main(with_sets("train-cls", run, ["bogus=1"])) == EXIT_CONFIG
        assert main(with_sets("train-cls", run, ["novalue"])) == EXIT_CONFIG
        assert main(["train-cls", "--output", str(run)]) == EXIT_CONFIG
        squares = with_sets("train-cls", run, ["synthetic=squares", "synthetic_n=4"])
        assert main(squares) == EXIT_CONFIG

        missing = with_sets("train-cls", run, [f"manifest={tmp_path / 'nowhere'}"])
        assert main(missing) == EXIT_DATA
        args = ["convert-medmnist", "--input", str(tmp_path / "none.npz")]
        assert main(args + ["--output", str(tmp_path)]) == EXIT_DATA

        assert NumericError("nan").exit_code == EXIT_NUMERIC
        assert not (run / LOCK_FILE).exists()

    def test_synth(self, tmp_path: Path) -> None:

        argv = ["synth", "--kind", "blobs", "--n", "10", "--seed", "3"]
        assert main(argv + ["--output", str(tmp_path)]) == EXIT_OK
        data = load_dataset(tmp_path / MANIFEST_NAME)
        assert (len(data.train), len(data.val), len(data.test)) == (6, 2, 2)

        argv = ["synth", "--kind", "squares", "--n", "4", "--size", "64"]
        assert main(argv + ["--output", str(tmp_path / "squares")]) == EXIT_OK
        assert load_dataset(tmp_path / "squares").task == "segmentation"

    def test_train_cls(self, tmp_path: Path) -> None:

        run = tmp_path / "run"
        assert main(with_sets("train-cls", run, TINY_CLS)) == EXIT_OK

        conf = json.loads((run / "config.json").read_text())
        assert conf["synthetic"] == "blobs" and conf["epochs"] == 1
        assert (run / "seed").read_text().strip() == "0"
        assert (run / "run.log").stat().st_size > 0
        assert not (run / LOCK_FILE).exists()

        history = pd.read_csv(run / "history.csv")
        assert history["split"].tolist() == ["train", "val"]
        # 16 images: 12 train, 4 val and no test split
        predictions = pd.read_csv(run / "predictions_val.csv")
        assert list(predictions.columns) == ["name", "label", "prob_0", "prob_1"]
        assert len(predictions) == 4
        assert np.allclose(predictions[["prob_0", "prob_1"]].sum(axis=1), 1.0)

        # the predictions are a valid input of eval
        report = tmp_path / "report.json"
        argv = ["eval", "--task", "cls", "--pred", str(run / "predictions_val.csv")]
        argv += ["--truth", str(run / "predictions_val.csv")]
        assert main(argv + ["--output", str(report)]) == EXIT_OK
        assert set(json.loads(report.read_text())) == {"acc", "f1", "auc"}

    def test_determinism(self, tmp_path: Path) -> None:

        first, second = tmp_path / "first", tmp_path / "second"
        assert main(with_sets("train-cls", first, TINY_CLS) + ["--seed", "4"]) == 0
        assert main(with_sets("train-cls", second, TINY_CLS) + ["--seed", "4"]) == 0
        for name in ("history.csv", "predictions_val.csv"):
            assert (first / name).read_text() == (second / name).read_text()

    def test_lock(self, tmp_path: Path) -> None:

        run = tmp_path / "run"
        run.mkdir()
        (run / LOCK_FILE).write_text("1")
        assert main(with_sets("train-cls", run, TINY_CLS)) == EXIT_CONFIG
        assert (run / LOCK_FILE).exists()
        assert not (run / "config.json").exists()

    def test_eval_classification(
        self, tmp_path: Path, capsys: pytest.CaptureFixture
    ) -> None:

        labels = [0, 1, 2, 0, 1, 2]
        pd.DataFrame({"label": labels}).to_csv(tmp_path / "truth.csv", index=False)
        probs = np.eye(3)[labels] * 0.8 + 0.1
        frame = pd.DataFrame(probs, columns=["prob_0", "prob_1", "prob_2"])
        frame.to_csv(tmp_path / "pred.csv", index=False)

        argv = ["eval", "--task", "cls", "--pred", str(tmp_path / "pred.csv")]
        assert main(argv + ["--truth", str(tmp_path / "truth.csv")]) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report == {"acc": 1.0, "auc": 1.0, "f1": 1.0}

        # hard labels only
        hard = pd.DataFrame({"label": [0, 1, 2, 0, 1, 1]})
        hard.to_csv(tmp_path / "hard.csv", index=False)
        argv = ["eval", "--task", "cls", "--pred", str(tmp_path / "hard.csv")]
        assert main(argv + ["--truth", str(tmp_path / "truth.csv")]) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["acc"] == pytest.approx(5 / 6)

        pd.DataFrame({"label": [0, 1]}).to_csv(tmp_path / "short.csv", index=False)
        argv = ["eval", "--task", "cls", "--pred", str(tmp_path / "short.csv")]
        assert main(argv + ["--truth", str(tmp_path / "truth.csv")]) == EXIT_DATA
        argv = ["eval", "--task", "cls", "--pred", str(tmp_path / "none.csv")]
        assert main(argv + ["--truth", str(tmp_path / "truth.csv")]) == EXIT_DATA

    def test_eval_segmentation(self, tmp_path: Path) -> None:

        pred_dir, truth_dir = tmp_path / "pred", tmp_path / "truth"
        pred_dir.mkdir()
        truth_dir.mkdir()
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:12, 4:12] = 1
        for name in ("a", "b"):
            save_mask(pred_dir / f"{name}.png", mask)
            save_mask(truth_dir / f"{name}_mask.png", mask)

        report = evaluate_segmentation(pred_dir, truth_dir)
        assert report["miou"] == report["dice"] == report["f1"] == 1.0
        assert report["present"] == [0, 1]

        # masks of different sizes are pooled
        save_mask(pred_dir / "c.png", np.ones((8, 8)))
        save_mask(truth_dir / "c_mask.png", np.ones((8, 8)))
        assert evaluate_segmentation(pred_dir, truth_dir)["miou"] == 1.0

        output = tmp_path / "seg.json"
        argv = ["eval", "--task", "seg", "--pred", str(pred_dir)]
        argv += ["--truth", str(truth_dir), "--output", str(output)]
        assert main(argv) == EXIT_OK
        assert json.loads(output.read_text())["miou"] == 1.0

        save_mask(truth_dir / "d_mask.png", mask)
        assert main(argv) == EXIT_DATA

    def test_eval_captioning(
        self, tmp_path: Path, capsys: pytest.CaptureFixture
    ) -> None:

        captions = {"a": "a circle at the top", "b": "a square at the bottom"}
        for name in ("pred", "truth"):
            with open(tmp_path / f"{name}.jsonl", "w") as f:
                for image, caption in captions.items():
                    f.write(json.dumps({"image": image, "caption": caption}) + "\n")

        argv = ["eval", "--task", "cap", "--pred", str(tmp_path / "pred.jsonl")]
        assert main(argv + ["--truth", str(tmp_path / "truth.jsonl")]) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["bleu"] == pytest.approx(100.0)
        assert report["rouge_l"] == pytest.approx(100.0)

        (tmp_path / "broken.jsonl").write_text("{not json\n")
        argv = ["eval", "--task", "cap", "--pred", str(tmp_path / "broken.jsonl")]
        assert main(argv + ["--truth", str(tmp_path / "truth.jsonl")]) == EXIT_DATA

    def test_embed(self, tmp_path: Path) -> None:

        output = tmp_path / "embeddings.csv"
        values = ["layer_scale=1.0", "synthetic=blobs", "synthetic_n=8", "split=val"]
        assert main(with_sets("embed", output, values)) == EXIT_OK
        frame = pd.read_csv(output)
        assert len(frame) == 2
        assert list(frame.columns[:2]) == ["name", "target"]
        assert len(frame.columns) == 2 + 64

    def test_captioning_run(self, tmp_path: Path) -> None:

        run = tmp_path / "run"
        values = [
            "layer_scale=1.0",
            "synthetic=shapes_captions",
            "synthetic_n=12",
            "epochs=1",
            "micro_batch=4",
            "effective_batch=4",
            "queries=4",
            "prefix_dim=16",
            "decoder_layers=1",
            "decoder_heads=2",
            "max_len=16",
            "max_tokens=8",
            "beams=2",
        ]
        assert main(with_sets("train-cap", run, values)) == EXIT_OK
        sweep = pd.read_csv(run / "decoding_val.csv")
        assert len(sweep) == 2

        assert main(["generate", "--run", str(run), "--split", "val"]) == EXIT_OK
        lines = (run / "captions_val.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in lines]
        assert len(records) == 3
        assert all(set(r) == {"image", "caption", "score"} for r in records)

        assert main(["generate", "--run", str(tmp_path)]) == EXIT_CONFIG

    def test_plot(self, tmp_path: Path) -> None:

        history = pd.DataFrame(
            {
                "epoch": [0, 0, 1, 1],
                "split": ["train", "val", "train", "val"],
                "acc": [0.5, 0.4, 0.8, 0.7],
            }
        )
        history.to_csv(tmp_path / "history.csv", index=False)
        output = tmp_path / "history.png"
        argv = ["plot", "--input", str(tmp_path / "history.csv")]
        assert main(argv + ["--output", str(output)]) == EXIT_OK
        assert output.exists()

        assert main(["plot", "--output", str(output)]) == EXIT_USAGE
