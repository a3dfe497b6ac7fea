from pathlib import Path

from surt.desk import DeskPlan, DeskStudy, toy_config, variant_config
from surt.model import ModelConfig

TINY = dict(n_train=6, n_dev=3, n_test=3, single_updates=2, multi_updates=2, pair_updates=1, pair_seeds=(0,))


def test_toy_config_file_matches_code():
    path = Path(__file__).resolve().parents[1] / "configs" / "toy.conf"
    assert ModelConfig.load(path) == toy_config()
    assert ModelConfig.load(path.with_name("toy_mask.conf")) == variant_config(toy_config(), "mask")


def test_mask_variant_takes_over_sd_depth():
    base = toy_config()
    assert variant_config(base, "sd").enc_layers == base.enc_layers
    assert variant_config(base, "mask").enc_layers == base.enc_layers + 2 * base.sd_layers
    full_sd = ModelConfig.load(Path(__file__).resolve().parents[1] / "configs" / "full_sd.conf")
    full_mask = ModelConfig.load(Path(__file__).resolve().parents[1] / "configs" / "full_mask.conf")
    assert variant_config(full_sd, "mask").enc_layers == full_mask.enc_layers


def test_key_depends_on_plan():
    assert DeskPlan().key() == DeskPlan().key()
    assert DeskPlan().key() != DeskPlan(multi_updates=7).key()


def test_stages_run_once_and_are_cached(tmp_path):
    study = DeskStudy(tmp_path, DeskPlan(**TINY))
    first = study.run_all()
    assert first["mask"]["warm_started"] > 0 and first["single"]["warm_started"] == 0
    assert set(first["pairs"][0]) == {"heat", "pit"}
    stamps = {p: p.stat().st_mtime_ns for p in tmp_path.rglob("*.ckpt")}
    again = DeskStudy(tmp_path, DeskPlan(**TINY)).run_all()
    assert again["mask"] == first["mask"] and again["sd"] == first["sd"]
    assert {p: p.stat().st_mtime_ns for p in tmp_path.rglob("*.ckpt")} == stamps


def test_pair_runs_share_starting_point(tmp_path):
    pair = DeskStudy(tmp_path, DeskPlan(**TINY)).pair(0)
    h, p = pair["heat"]["curve"][0], pair["pit"]["curve"][0]
    assert h["val_loss_pit"] == p["val_loss"]
