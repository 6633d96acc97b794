import csv
import json

import pytest

from cdul.cli import main
from cdul.config import ConfigError, load_config, preset_names


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def base(tmp_path):
    return ["--config", "synthetic", f"cache_dir={tmp_path / 'cache'}", f"output_dir={tmp_path / 'runs'}"]


def test_presets_load():
    assert {"synthetic", "voc2012", "voc2012_f10"} <= set(preset_names())
    cfg = load_config("synthetic", ["train.pl_update_frequency=3", "pseudo.snippet_sizes=[4]"])
    assert cfg.train.pl_update_frequency == 3 and cfg.pseudo.snippet_sizes == [4]
    assert load_config("voc2012_f10").train.epochs == 100


def test_config_rejects_unknown_and_mistyped():
    with pytest.raises(ConfigError, match="trian"):
        load_config("synthetic", ["trian.epochs=3"])
    with pytest.raises(ConfigError):
        load_config("synthetic", ["train.epochs=many"])
    with pytest.raises(ConfigError):
        load_config("no_such_preset")


def test_top_level_seed_drives_training():
    assert load_config("synthetic", ["seed=7"]).train.seed == 7
    assert load_config("synthetic", ["seed=7", "train.seed=2"]).train.seed == 2


def test_build_cache_and_warm_rerun(tmp_path, base, capsys):
    assert main(["build-cache", "--run-dir", str(tmp_path / "b1"), *base]) == 0
    caches = sorted(p.name for p in (tmp_path / "cache").rglob("*.cdulvec"))
    assert caches == ["aggregate_k16.cdulvec", "aggregate_k8.cdulvec", "global.cdulvec"]
    timing = json.loads((tmp_path / "b1" / "timing.json").read_text())["caches"]
    per_k = {r["snippet_size"]: r["snippets_per_image"] for r in timing if r["kind"] == "aggregate"}
    assert per_k[8] / per_k[16] == pytest.approx((16 / 8) ** 2)
    assert (tmp_path / "b1" / "timing.csv").exists() and (tmp_path / "b1" / "config.json").exists()

    capsys.readouterr()
    assert main(["build-cache", "--run-dir", str(tmp_path / "b2"), *base]) == 0
    out = capsys.readouterr().out
    assert out.count("computed 0") == 3
    timing = json.loads((tmp_path / "b2" / "timing.json").read_text())["caches"]
    assert all(r["computed"] == 0 and r["resumed"] == 64 for r in timing)


def test_eval_pseudo_collapse_at_full_image(tmp_path, base):
    args = [*base, "backend.noise=0.0", "pseudo.snippet_sizes=[32,64]"]
    assert main(["build-cache", "--run-dir", str(tmp_path / "b"), *args]) == 0
    assert main(["eval-pseudo", "--run-dir", str(tmp_path / "e"), *args]) == 0
    rows = {r["source"]: r["map_percent"] for r in _rows(tmp_path / "e" / "pseudo_map.csv")}
    assert rows["32x32"] == rows["global"] and rows["64x64"] == rows["global"]
    report = json.loads((tmp_path / "e" / "pseudo_map.json").read_text())
    assert [r["source"] for r in report["rows"]] == ["global", "32x32", "64x64"]


def test_eval_pseudo_without_cache(tmp_path, base, capsys):
    assert main(["eval-pseudo", "--run-dir", str(tmp_path / "e"), *base]) == 3
    assert "build-cache" in capsys.readouterr().err


def test_eval_pseudo_zeta_mismatch(tmp_path, base):
    args = [*base, "pseudo.snippet_sizes=[16]"]
    assert main(["build-cache", "--run-dir", str(tmp_path / "b"), *args]) == 0
    assert main(["eval-pseudo", "--run-dir", str(tmp_path / "e"), *args, "pseudo.zeta=0.3"]) == 2


def test_train_two_epochs_and_report(tmp_path, base):
    run = tmp_path / "t"
    args = [*base, "train.epochs=2", "train.pl_update_frequency=1", "pseudo.init_source=final",
            "pseudo.init_snippet_size=8"]
    assert main(["train", "--build-missing", "--run-dir", str(run), *args]) == 0
    assert json.loads((run / "config.json").read_text())["train"]["epochs"] == 2
    assert len(_rows(run / "metrics.csv")) == 2
    assert (run / "checkpoints" / "final.pt").exists()
    assert (run / "pl_map.png").exists() and (run / "val_map.png").exists()
    assert json.loads((run / "run_info.json").read_text())["train_seed"] == 0
    assert main(["report", str(run), "--out", str(tmp_path / "rep")]) == 0
    assert len(_rows(tmp_path / "rep" / "training.csv")) == 1
    assert (tmp_path / "rep" / "figure_map_curves.png").exists()


def test_exit_codes(tmp_path, base):
    assert main(["train", "--run-dir", str(tmp_path / "x"), *base, "train.epochs=0"]) == 2
    assert main(["train", "--run-dir", str(tmp_path / "x"), *base, "train.epochs=1"]) == 3
    assert main(["build-cache", "--run-dir", str(tmp_path / "x"), *base, "backend.name=open_clip"]) == 4
    assert main(["report", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")]) == 3
