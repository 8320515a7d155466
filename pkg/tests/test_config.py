import pytest

from sepitch.config import ConfigValidationError, RunConfig, load_config, parse_overrides


class TestRunConfig:
    def test_defaults_valid(self):
        cfg = RunConfig().validate()
        assert cfg.n_frames() == 129
        assert cfg.model_config().n_freq == 1025
        assert cfg.model_config().dwm_channels == (8, 16)

    @pytest.mark.parametrize("kw", [{"th": 0.4}, {"th": 1.1}, {"upper_bound": 11.0},
                                    {"omega_noise": 1.0}, {"w_max": 1.0}, {"lr": 0.0},
                                    {"weighting": "uncertainty"}, {"f0_min": 700.0},
                                    {"accompaniment": "violin"}, {"hop": 4096},
                                    {"pe_freq_bins": 5000}, {"f0_min": 20.0},
                                    {"snr_db_min": float("nan")}])
    def test_out_of_range(self, kw):
        with pytest.raises(ConfigValidationError):
            RunConfig(**kw).validate()

    def test_hash_tracks_values(self):
        a, b = RunConfig(), RunConfig(seed=1)
        assert a.hash() == RunConfig().hash() != b.hash()

    def test_accompaniment_list(self):
        cfg = RunConfig(accompaniment="chord-pad,drum-clicks").validate()
        assert cfg.synth_spec().accompaniment == ("chord-pad", "drum-clicks")
        assert RunConfig(accompaniment="none").accompaniment_kinds == ()


class TestParsing:
    def test_overrides(self):
        cfg = parse_overrides(["seed=3", "th=0.8", "detach_cascade=yes", "weighting=naive"])
        assert (cfg.seed, cfg.th, cfg.detach_cascade, cfg.weighting) == (3, 0.8, True, "naive")

    @pytest.mark.parametrize("pair", ["nokey", "bogus=1", "seed=abc", "detach_cascade=maybe"])
    def test_bad_overrides(self, pair):
        with pytest.raises(ConfigValidationError):
            parse_overrides([pair])

    def test_manifest_round_trip(self, tmp_path):
        cfg = RunConfig(seed=7, th=0.9, lr=3e-4, accompaniment="filtered-noise")
        path = tmp_path / "c.txt"
        path.write_text(cfg.manifest_text())
        back = load_config(path)
        assert back == cfg and back.hash() == cfg.hash()
        text = cfg.manifest_text()
        for key in ("adam_beta1=0.9", "adam_eps=1e-08", "code_version=", "w_max=2.0",
                    "tau_c=0.5", "dwm_c1=8"):
            assert key in text

    def test_file_with_comments_and_overrides(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# comment\nseed = 4  # trailing\n\nth=0.6\n")
        cfg = load_config(path, ["th=0.75"])
        assert (cfg.seed, cfg.th) == (4, 0.75)
        path.write_text("seed 4\n")
        with pytest.raises(ConfigValidationError, match=":1:"):
            load_config(path)
