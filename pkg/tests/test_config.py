import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vrsuie.config import Config, ConfigError, load_config, override, parse_text, parse_value, prior_sources


class TestParse:
    def test_unknown_key_named(self):
        with pytest.raises(ConfigError) as err:
            parse_text("bogus_key = 3\n")
        assert err.value.key == "bogus_key" and "bogus_key" in str(err.value)

    def test_bad_value_named(self):
        with pytest.raises(ConfigError) as err:
            parse_text("iterations = many")
        assert err.value.key == "iterations"

    def test_comments_and_blanks(self):
        cfg = parse_text("# header\n\niterations = 7  # trailing\nmixer = scan\n")
        assert cfg.iterations == 7 and cfg.mixer == "scan"

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_text("iterations 7")

    def test_types(self):
        assert parse_value("cfb", "false") is False
        assert parse_value("ratios", "0.5, 1.0") == (0.5, 1.0)
        assert parse_value("enc_depths", "1,2,3") == (1, 2, 3)
        assert parse_value("lr", "3e-4") == 3e-4

    def test_validation(self):
        with pytest.raises(ConfigError):
            Config(image_size=30)
        with pytest.raises(ConfigError):
            Config(mixer="attention")
        with pytest.raises(ConfigError):
            Config(lambda_l1=-1.0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.cfg")

    def test_override_rejects_unknown(self):
        with pytest.raises(ConfigError):
            override(Config(), {"nope": 1})


class TestCanonicalText:
    def test_round_trip(self):
        cfg = Config(iterations=17, ratios=(0.5, 1.0), cfb=False, lr=3.5e-4, prior="auto")
        assert parse_text(cfg.to_text()) == cfg

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 10**6), st.floats(1e-9, 1.0), st.booleans(), st.sampled_from(["both", "scan", "conv"]))
    def test_round_trip_property(self, iters, lr, cfb, mixer):
        cfg = Config(iterations=iters, lr=lr, cfb=cfb, mixer=mixer)
        assert parse_text(cfg.to_text()) == cfg

    def test_hash_stable_and_sensitive(self):
        assert Config().hash() == Config().hash()
        assert Config().hash() != Config(seed=1).hash()

    def test_resolved_half_point(self):
        assert Config(iterations=200).resolved().t_half == 100
        assert Config(iterations=200).hash() == Config(iterations=200, t_half=100).hash()


class TestDefaults:
    def test_loss_weights(self):
        assert Config().resolved().weights().as_tuple() == (8.0, 1.0, 4.0, 2e-3)
        assert Config().kl_eps == 1e-8

    def test_optimizer_defaults(self):
        cfg = Config()
        assert (cfg.lr, cfg.lr_min, cfg.betas, cfg.batch_size) == (1e-4, 1e-6, (0.9, 0.999), 2)

    def test_prior_sources(self):
        assert prior_sources(Config()) == ["auto"] * 7
        assert prior_sources(Config(prior="a.vrst,none,auto,auto,auto,none,b.vrst"))[0] == "a.vrst"
        with pytest.raises(ConfigError):
            prior_sources(Config(prior="a,b"))
