import json
from pathlib import Path

import pytest
from faker import Faker
from radvit import settings
from radvit.config import (
    config_keys,
    dump_config,
    encoder_config,
    load_config,
    parse_overrides,
    read_config_file,
    structural_keys,
)
from radvit.exceptions import ConfigError, DomainError
from tests import RadvitTests


class TestApp(RadvitTests):
    def test_defaults(self) -> None:

        conf = load_config("pretrain")
        assert conf["seed"] == 0
        assert conf["preset"] == "tiny"
        assert conf["teacher_momentum_start"] == 0.994
        assert conf["warmup_teacher_temperature"] == 0.04
        assert conf["teacher_temperature"] == 0.07
        assert conf["drop_path_rate"] == 0.3
        assert conf["n_global_crops"] == 2
        assert (conf["mask_ratio_min"], conf["mask_ratio_max"]) == (0.1, 0.5)
        assert conf["checkpoint_every"] == settings.CHECKPOINT_EVERY

        cls = load_config("train-cls")
        assert cls["regime"] == "full"
        assert (cls["lora_r"], cls["lora_alpha"], cls["lora_scaling"]) == (8, 16.0, 2.0)
        assert cls["lora_targets"] == ["*.attn.q", "*.attn.v"]
        assert cls["grad_clip"] == 1.0

        seg = load_config("train-seg")
        assert seg["image_size"] == 448
        assert seg["intermediate_layers"] is None
        assert seg["augment"] is False

        cap = load_config("train-cap")
        assert (cap["micro_batch"], cap["effective_batch"]) == (8, 64)
        assert cap["max_len"] == 130

        assert "split" in config_keys("embed")
        assert config_keys("embed") == sorted(config_keys("embed"))

    def test_sections(self, tmp_path: Path, faker: Faker) -> None:

        seed = faker.pyint(max_value=1000)
        path = tmp_path / "run.json"
        path.write_text(
            json.dumps(
                {
                    "seed": seed,
                    "synthetic": "blobs",
                    "pretrain": {"epochs": 2},
                    "train-cls": {"epochs": 5, "regime": "head_only"},
                    "train-seg": {"intermediate_layers": [1, 2, 3]},
                }
            )
        )

        pretrain = load_config("pretrain", path)
        assert (pretrain["seed"], pretrain["epochs"]) == (seed, 2)
        cls = load_config("train-cls", path)
        assert (cls["epochs"], cls["regime"]) == (5, "head_only")
        assert cls["synthetic"] == "blobs"
        assert load_config("train-seg", path)["intermediate_layers"] == [1, 2, 3]
        # no section: top-level keys only
        assert load_config("embed", path)["seed"] == seed

        overridden = load_config("train-cls", path, {"seed": "7", "epochs": "1"})
        assert (overridden["seed"], overridden["epochs"]) == (7, 1)

        path.write_text(json.dumps({"train-cls": [1, 2]}))
        with pytest.raises(ConfigError):
            load_config("train-cls", path)

    def test_flat_file(self, tmp_path: Path) -> None:

        path = tmp_path / "run.conf"
        path.write_text(
            "# segmentation\n"
            "seed = 5\n"
            "\n"
            "intermediate_layers=2,5,8\n"
            "augment=true\n"
            "learning_rate=1e-3\n"
        )
        conf = load_config("train-seg", path)
        assert conf["seed"] == 5
        assert conf["intermediate_layers"] == [2, 5, 8]
        assert conf["augment"] is True
        assert conf["learning_rate"] == 1e-3
        assert read_config_file(path)["seed"] == "5"

        path.write_text("seed\n")
        with pytest.raises(ConfigError):
            load_config("train-seg", path)

    def test_validation(self, tmp_path: Path) -> None:

        with pytest.raises(ConfigError, match="bogus"):
            load_config("pretrain", overrides={"bogus": 1})
        with pytest.raises(ConfigError):
            load_config("pretrain", overrides={"epochs": "many"})
        with pytest.raises(ConfigError):
            load_config("pretrain", overrides={"preset": "huge"})
        with pytest.raises(ConfigError):
            load_config("pretrain", overrides={"teacher_momentum_start": 1.5})
        with pytest.raises(ConfigError):
            load_config("pretrain", overrides={"mask_ratio_min": 0.6})
        with pytest.raises(ConfigError):
            load_config("train-cls", overrides={"regime": "partial"})
        with pytest.raises(ConfigError):
            load_config("generate")
        with pytest.raises(DomainError):
            load_config("train-cls", overrides={"lora_r": 0})

        with pytest.raises(ConfigError):
            load_config("pretrain", tmp_path / "missing.json")
        (tmp_path / "broken.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config("pretrain", tmp_path / "broken.json")
        (tmp_path / "list.json").write_text("[]")
        with pytest.raises(ConfigError):
            load_config("pretrain", tmp_path / "list.json")

    def test_lora_presets(self) -> None:

        conf = load_config("train-cls", overrides={"lora_preset": "lora_r16"})
        assert (conf["lora_r"], conf["lora_alpha"], conf["lora_scaling"]) == (
            16,
            32.0,
            2.0,
        )
        conf = load_config("train-cls", overrides={"lora_r": "4", "lora_alpha": "2"})
        assert conf["lora_scaling"] == 0.5
        conf = load_config("train-cls", overrides={"lora_targets": "*.attn.q"})
        assert conf["lora_targets"] == ["*.attn.q"]

    def test_parse_overrides(self) -> None:

        assert parse_overrides(["a=1", " b = x=y "]) == {"a": "1", "b": "x=y"}
        assert parse_overrides(["empty="]) == {"empty": ""}
        with pytest.raises(ConfigError, match="--set"):
            parse_overrides(["novalue"])
        with pytest.raises(ConfigError):
            parse_overrides(["=3"])

    def test_encoder_keys(self, tmp_path: Path) -> None:

        conf = self.get_config("train-cls")
        keys = structural_keys(conf)
        assert (keys["depth"], keys["embed_dim"], keys["heads"]) == (4, 64, 4)
        assert keys["patch_size"] == 14
        assert "drop_path_rate" not in keys

        small = encoder_config(self.get_config("pretrain", preset="small", depth=6))
        assert (small.depth, small.embed_dim, small.heads) == (6, 384, 6)
        assert small.drop_path_rate == 0.3

        dump_config(conf, tmp_path / "config.json")
        assert json.loads((tmp_path / "config.json").read_text()) == conf

    def test_settings(self, monkeypatch: pytest.MonkeyPatch) -> None:

        monkeypatch.delenv("RADVIT_DEVICE", raising=False)
        assert settings.get("RADVIT_DEVICE") == "cpu"
        monkeypatch.setenv("RADVIT_DEVICE", "cuda:1")
        assert settings.get("RADVIT_DEVICE") == "cuda:1"
        assert settings.get("RADVIT_UNDEFINED") is None
        assert settings.get("RADVIT_UNDEFINED", "x") == "x"

        monkeypatch.setenv("RADVIT_EXTRA_OPTION", "on")
        variables = settings.load_variables_group("radvit")
        assert variables["extra_option"] == "on"
        assert variables["device"] == "cuda:1"
        assert "output_root" in variables

        assert settings.to_bool("yes") and settings.to_bool(1)
        assert settings.to_bool(True)
        assert not settings.to_bool("off")
        assert settings.to_bool(None, default=True)
        assert settings.to_int("12") == 12
        assert settings.to_int("", 3) == 3
        assert settings.to_int("abc", 7) == 7
