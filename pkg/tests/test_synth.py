import math

import numpy as np
import pytest

from sepitch.metrics import rpa_rca, sdr
from sepitch.pitch import PitchGrid, read_track
from sepitch.synth import (Manifest, SynthSpec, corpus_plan, item_rng, load_entry, make_corpus,
                           synth_item)

SMALL = dict(n_fully=10, n_mss_only=3, n_pe_only=2, n_val=1, segment_seconds=0.5)


def measured_snr(mix, target):
    acc = mix.samples - target.samples
    return 10 * math.log10(np.dot(target.samples, target.samples) / np.dot(acc, acc))


class TestSynthItem:
    @pytest.mark.parametrize("snr", [-5.0, 0.0, 3.0, 12.0])
    @pytest.mark.parametrize("acc", [("chord-pad",), ("filtered-noise",), ("drum-clicks",),
                                     ("chord-pad", "drum-clicks")])
    def test_snr_within_tenth_db(self, snr, acc):
        spec = SynthSpec(snr_db=(snr, snr), accompaniment=acc, segment_seconds=1.0)
        for i in range(3):
            mix, target, _ = synth_item(spec, item_rng(0, "fully", i))
            assert abs(measured_snr(mix, target) - snr) <= 0.1
            assert np.max(np.abs(mix.samples)) <= 0.99 + 1e-12

    def test_no_accompaniment_is_bit_exact(self):
        spec = SynthSpec(snr_db=(math.inf, math.inf))
        mix, target, _ = synth_item(spec, item_rng(0, "fully", 0))
        np.testing.assert_array_equal(mix.samples, target.samples)
        mix, target, _ = synth_item(SynthSpec(accompaniment=()), item_rng(0, "fully", 0))
        np.testing.assert_array_equal(mix.samples, target.samples)

    def test_zero_vibrato_piecewise_constant(self):
        spec = SynthSpec(vibrato_depth=0.0)
        _, _, track = synth_item(spec, item_rng(0, "fully", 1))
        f0 = track.f0
        both = (f0[1:] > 0) & (f0[:-1] > 0)
        same = f0[1:][both] == f0[:-1][both]
        # notes last 150-600 ms, so adjacent frames mostly share one exact value
        assert same.mean() > 0.8
        _, _, wobbly = synth_item(SynthSpec(), item_rng(0, "fully", 1))
        both = (wobbly.f0[1:] > 0) & (wobbly.f0[:-1] > 0)
        assert np.mean(wobbly.f0[1:][both] == wobbly.f0[:-1][both]) < 0.2

    def test_track_matches_grid_and_length(self):
        spec = SynthSpec()
        _, target, track = synth_item(spec, item_rng(3, "fully", 2))
        assert len(target) == 40960
        assert len(track) == 129
        assert np.all(PitchGrid().contains(track.f0[track.voiced]))
        assert 0 < track.voiced.mean() < 1

    def test_voiced_fraction_near_design(self):
        spec = SynthSpec()
        frac = np.mean([synth_item(spec, item_rng(0, "fully", i))[2].voiced.mean()
                        for i in range(40)])
        assert 0.7 <= frac <= 0.9

    def test_deterministic(self):
        a = synth_item(SynthSpec(), item_rng(4, "pe-only", 7))
        b = synth_item(SynthSpec(), item_rng(4, "pe-only", 7))
        np.testing.assert_array_equal(a[0].samples, b[0].samples)
        np.testing.assert_array_equal(a[2].f0, b[2].f0)

    def test_self_consistency(self):
        _, target, track = synth_item(SynthSpec(), item_rng(0, "fully", 0))
        assert sdr(target, target) == math.inf
        s = rpa_rca(track, track)
        assert (s.rpa, s.rca) == (1.0, 1.0)

    def test_out_of_grid_range_rejected(self):
        with pytest.raises(ValueError, match="grid"):
            SynthSpec(f0_min=20.0).check_grid(PitchGrid())
        with pytest.raises(ValueError):
            synth_item(SynthSpec(f0_min=20.0, f0_max=25.0), item_rng(0, "fully", 0),
                       max_retries=3)

    @pytest.mark.parametrize("kw", [{"accompaniment": ("violin",)}, {"f0_min": 700.0},
                                    {"snr_db": (3.0, -3.0)}, {"n_fully": -1}])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(**kw)


class TestCorpus:
    def test_plan_split_counts(self):
        for n in (5, 10, 200):
            plan = corpus_plan(SynthSpec(n_fully=n))
            fully = [p for p in plan if p[0] == "fully"]
            assert sum(p[2] == "test" for p in fully) == n // 5
            assert sum(p[2] == "train" for p in fully) == 4 * n // 5
        ids = [p[3] for p in corpus_plan(SynthSpec())]
        assert len(ids) == len(set(ids))

    def test_layout_and_withheld_labels(self, tmp_path):
        m = make_corpus(SynthSpec(**SMALL), tmp_path)
        assert (tmp_path / "manifest.txt").exists()
        for e in m.select(label_kind="mss-only"):
            assert e.f0 is None
            assert not (tmp_path / e.split / f"{e.id}.f0.txt").exists()
            assert (tmp_path / e.vocal).exists()
        for e in m.select(label_kind="pe-only"):
            assert e.vocal is None
            assert not (tmp_path / e.split / f"{e.id}.vocal.wav").exists()
        assert len(m.select(split="test")) == 2
        assert len(m.select(split="val")) == 1
        back = Manifest.load(tmp_path)
        assert back.entries == m.entries

    def test_files_match_generator(self, tmp_path):
        spec = SynthSpec(**SMALL)
        m = make_corpus(spec, tmp_path)
        e = m.select(label_kind="fully")[0]
        mix, target, track = load_entry(m, e)
        ref_mix, _, ref_track = synth_item(spec, item_rng(spec.seed, "fully", int(e.id[4:])))
        np.testing.assert_allclose(mix.samples, ref_mix.samples, atol=1e-7)
        np.testing.assert_array_equal(read_track(tmp_path / e.f0).f0, ref_track.f0)
        np.testing.assert_array_equal(track.f0, ref_track.f0)

    def test_byte_identical(self, tmp_path):
        make_corpus(SynthSpec(**SMALL), tmp_path / "a")
        make_corpus(SynthSpec(**SMALL), tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                       if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_manifest_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Manifest.load(tmp_path)
        m = make_corpus(SynthSpec(n_fully=1, n_mss_only=0, n_pe_only=0, n_val=0,
                                  segment_seconds=0.2), tmp_path)
        (tmp_path / m.entries[0].mix).unlink()
        with pytest.raises(FileNotFoundError, match="missing"):
            Manifest.load(tmp_path)
        (tmp_path / "manifest.txt").write_text("a\tb\n")
        with pytest.raises(ValueError, match=":1:"):
            Manifest.load(tmp_path)
