import json

import numpy as np
import pytest

from conftest import TINY_CONFIG
from vrsuie.checkpoint import CONFIG_FILE, MODEL_FILE, save_checkpoint
from vrsuie.cli import VARIANTS, enhance_array, load_model, main, normalize_map
from vrsuie.config import parse_text
from vrsuie.imageio import read_image, to_float, to_uint8, write_image
from vrsuie.metrics import metrics
from vrsuie.net import build_unet
from vrsuie.train import LOG_FILE, read_log

TINY = parse_text(TINY_CONFIG)


@pytest.fixture
def zero_ckpt(tmp_path):
    """Untrained checkpoint: the head is zero, so the network returns its input."""
    cfg = TINY
    model = build_unet(cfg.net_config(), cfg.seed, cfg.np_dtype)
    return save_checkpoint(tmp_path / "zero", cfg, 0, model.state_dict())


@pytest.fixture
def trained(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


def image(path, rng, h=13, w=10):
    img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    write_image(path, img)
    return img


class TestUsage:
    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "ablate" in capsys.readouterr().out

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert main(["train"]) == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("iterations = 2\nwarp_drive = 9\n")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "warp_drive" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "o")]) == 1


class TestTrain:
    def test_outputs_and_echo(self, trained, capsys):
        assert len(read_log(trained / LOG_FILE)) == 4
        assert (trained / MODEL_FILE).exists()

    def test_echo_seed_and_config(self, tmp_path, tiny_config, capsys):
        main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "o"), "--seed", "5"])
        out = capsys.readouterr().out
        assert "# seed = 5" in out and "#   base_channels = 4" in out

    def test_nan_abort_exit_code(self, tmp_path, tiny_config):
        cfg = tmp_path / "hot.cfg"
        cfg.write_text(TINY_CONFIG + "lr = 1e30\niterations = 6\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


class TestEnhance:
    def test_zero_head_returns_input_bytes(self, zero_ckpt, tmp_path, rng):
        img = image(tmp_path / "in.ppm", rng)
        assert main(["enhance", "--ckpt", str(zero_ckpt), "--in", str(tmp_path / "in.ppm"),
                     "--out", str(tmp_path / "out.ppm")]) == 0
        assert read_image(tmp_path / "out.ppm").tobytes() == img.tobytes()

    def test_shape_and_repeatability(self, trained, tmp_path, rng):
        image(tmp_path / "in.ppm", rng, 12, 20)
        for name in ("a.ppm", "b.ppm"):
            assert main(["enhance", "--ckpt", str(trained), "--in", str(tmp_path / "in.ppm"),
                         "--out", str(tmp_path / name)]) == 0
        assert read_image(tmp_path / "a.ppm").shape == (12, 20, 3)
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_hash_mismatch(self, zero_ckpt, tmp_path, rng):
        image(tmp_path / "in.ppm", rng)
        (zero_ckpt / CONFIG_FILE).write_text(TINY.with_(seed=3).to_text())
        assert main(["enhance", "--ckpt", str(zero_ckpt), "--in", str(tmp_path / "in.ppm"),
                     "--out", str(tmp_path / "o.ppm")]) == 1

    def test_bad_image(self, zero_ckpt, tmp_path):
        (tmp_path / "in.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(5))
        assert main(["enhance", "--ckpt", str(zero_ckpt), "--in", str(tmp_path / "in.ppm"),
                     "--out", str(tmp_path / "o.ppm")]) == 1


def metric_lines(text):
    return [json.loads(line[len("METRIC "):]) for line in text.splitlines() if line.startswith("METRIC ")]


class TestEval:
    def test_identity_set(self, zero_ckpt, tmp_path, rng, capsys):
        d = tmp_path / "pairs"
        d.mkdir()
        for name in ("b", "a"):
            img = image(d / f"{name}.in.ppm", rng, 8, 8)
            write_image(d / f"{name}.ref.ppm", img)
        assert main(["eval", "--ckpt", str(zero_ckpt), "--pairs", str(d)]) == 0
        rows = metric_lines(capsys.readouterr().out)
        assert [r["name"] for r in rows] == ["a", "b", "mean"]
        assert rows[-1]["mse"] == 0.0 and rows[-1]["psnr"] == 99.0

    def test_matches_metrics_oracle(self, trained, tmp_path, rng, capsys):
        d = tmp_path / "pairs"
        d.mkdir()
        image(d / "x.in.ppm", rng, 16, 16)
        image(d / "x.ref.ppm", rng, 16, 16)
        assert main(["eval", "--ckpt", str(trained), "--pairs", str(d)]) == 0
        row = metric_lines(capsys.readouterr().out)[0]
        model, cfg = load_model(trained)
        out = to_float(to_uint8(enhance_array(model, to_float(read_image(d / "x.in.ppm")), cfg.np_dtype)))
        expected = metrics(out, to_float(read_image(d / "x.ref.ppm")))
        assert {k: row[k] for k in expected} == expected

    def test_orphans_warned(self, zero_ckpt, tmp_path, rng, capsys):
        d = tmp_path / "pairs"
        d.mkdir()
        img = image(d / "a.in.ppm", rng, 8, 8)
        write_image(d / "a.ref.ppm", img)
        image(d / "lonely.in.ppm", rng, 8, 8)
        assert main(["eval", "--ckpt", str(zero_ckpt), "--pairs", str(d)]) == 0
        captured = capsys.readouterr()
        assert "warnings = 1" in captured.out and "lonely" in captured.err

    def test_empty_directory(self, zero_ckpt, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["eval", "--ckpt", str(zero_ckpt), "--pairs", str(tmp_path / "empty")]) == 1


class TestValueMap:
    def test_export(self, trained, tmp_path, rng):
        image(tmp_path / "in.ppm", rng, 16, 16)
        out = tmp_path / "v.pgm"
        assert main(["valuemap", "--ckpt", str(trained), "--in", str(tmp_path / "in.ppm"), "--stage", "1",
                     "--out", str(out)]) == 0
        pgm = read_image(out)
        assert pgm.shape == (8, 8)
        model, cfg = load_model(trained)
        enhance_array(model, to_float(read_image(tmp_path / "in.ppm")), cfg.np_dtype)
        value = model.value_maps()[1][0]
        assert np.argmax(pgm) == np.argmax(value)
        lines = [ln for ln in (tmp_path / "v.pgm.idx.txt").read_text().splitlines() if not ln.startswith("#")]
        assert int(lines[0]) == int(np.argmax(value)) and len(lines) == 1

    def test_constant_map_is_mid_gray(self):
        assert (normalize_map(np.full((4, 4), 0.3)) == 128).all()

    def test_stage_out_of_range(self, zero_ckpt, tmp_path, rng):
        image(tmp_path / "in.ppm", rng, 8, 8)
        assert main(["valuemap", "--ckpt", str(zero_ckpt), "--in", str(tmp_path / "in.ppm"), "--stage", "7",
                     "--out", str(tmp_path / "v.pgm")]) == 1


class TestAblate:
    def test_unknown_variant_lists_names(self, tmp_path, capsys):
        assert main(["ablate", "--variant", "turbo", "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert all(name in err for name in VARIANTS)

    def test_full_equals_train(self, tmp_path, tiny_config, monkeypatch):
        monkeypatch.setenv("VRS_DETERMINISTIC", "1")
        assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "t")]) == 0
        assert main(["ablate", "--variant", "full", "--config", str(tiny_config), "--out", str(tmp_path / "a")]) == 0
        for name in (LOG_FILE, MODEL_FILE):
            assert (tmp_path / "t" / name).read_bytes() == (tmp_path / "a" / "full" / name).read_bytes()
        rows = (tmp_path / "a" / "comparison.txt").read_text().splitlines()
        assert rows[0].startswith("variant") and rows[1].startswith("full ")

    def test_k2_and_four_way(self, tmp_path, tiny_config):
        for variant in ("k2", "four-way"):
            assert main(["ablate", "--variant", variant, "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
        assert "k = 2" in (tmp_path / "k2" / CONFIG_FILE).read_text().splitlines()
        assert load_model(tmp_path / "k2")[0].block[0].scan.mvgl.head.pw.weight.shape[0] == 8
        log = read_log(tmp_path / "four-way" / LOG_FILE)
        assert all(r["Lmvgl"] is None and r["T"] is None for r in log)
        assert len((tmp_path / "comparison.txt").read_text().splitlines()) == 3
