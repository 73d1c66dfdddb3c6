"""Corpus model: labels, manifests, synthesis, corruption, ingestion."""

import numpy as np
import pytest

from stemrefine import audio, corpus
from stemrefine.corpus import CLASSES, CorpusManifest, StemEntry, StemLabel
from stemrefine.errors import DataError


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = corpus.gen_synthetic_corpus(root, n_songs=4, duration_s=4.0, seed=7)
    return manifest


class TestStemLabel:
    def test_single_and_names(self):
        lab = StemLabel.single("drums")
        assert lab.bits == (False, False, True, False)
        assert lab.names == ("drums",)
        assert lab.is_single and not lab.is_multi

    def test_or_is_bitwise(self):
        ab = StemLabel.single("vocals") | StemLabel.single("bass")
        assert ab.bits == (True, True, False, False)
        assert ab.is_multi

    def test_empty_label_flagged(self):
        lab = StemLabel.from_bits((0, 0, 0, 0))
        assert lab.is_empty

    def test_entry_rejects_empty_assigned_label(self):
        with pytest.raises(ValueError):
            StemEntry(id="x", audio_path="x.wav",
                      assigned_label=StemLabel.from_bits((0, 0, 0, 0)),
                      song_id="s", duration_s=1.0)


class TestGenerator:
    def test_counts_and_single_hot_labels(self, small_corpus):
        assert len(small_corpus.entries) == 16
        for e in small_corpus.entries:
            assert e.true_label == e.assigned_label
            assert e.assigned_label.is_single

    def test_deterministic_bytes(self, tmp_path):
        a = corpus.gen_synthetic_corpus(tmp_path / "a", n_songs=2, duration_s=2.0, seed=3)
        b = corpus.gen_synthetic_corpus(tmp_path / "b", n_songs=2, duration_s=2.0, seed=3)
        for ea, eb in zip(a.entries, b.entries):
            wav_a = (tmp_path / "a" / ea.audio_path).read_bytes()
            wav_b = (tmp_path / "b" / eb.audio_path).read_bytes()
            assert wav_a == wav_b

    def test_different_seeds_differ(self, tmp_path):
        a = corpus.gen_synthetic_corpus(tmp_path / "a", n_songs=1, duration_s=2.0, seed=1)
        b = corpus.gen_synthetic_corpus(tmp_path / "b", n_songs=1, duration_s=2.0, seed=2)
        wav_a = (tmp_path / "a" / a.entries[0].audio_path).read_bytes()
        wav_b = (tmp_path / "b" / b.entries[0].audio_path).read_bytes()
        assert wav_a != wav_b

    def test_spectral_centroid_ordering(self, small_corpus):
        def centroid(clip):
            power = np.abs(np.fft.rfft(clip.samples.mean(axis=0))) ** 2
            freqs = np.fft.rfftfreq(clip.n_samples, 1 / clip.sample_rate)
            return float(np.sum(freqs * power) / np.sum(power))

        by_class = {name: [] for name in CLASSES}
        for e in small_corpus.entries:
            by_class[e.true_label.names[0]].append(centroid(small_corpus.load_clip(e)))
        means = {name: np.mean(v) for name, v in by_class.items()}
        assert means["bass"] < means["vocals"] < means["other"]

    def test_stereo_44100_float32(self, small_corpus):
        clip = small_corpus.load_clip(small_corpus.entries[0])
        assert clip.sample_rate == 44100
        assert clip.samples.shape[0] == 2


class TestManifestIO:
    def test_roundtrip(self, small_corpus, tmp_path):
        path = tmp_path / "m.jsonl"
        # keep audio resolvable from the new location
        from stemrefine.classifier import save_manifest_rebased
        save_manifest_rebased(small_corpus, path)
        back = CorpusManifest.load(path)
        assert len(back.entries) == len(small_corpus.entries)
        for a, b in zip(small_corpus.entries, back.entries):
            assert a.id == b.id
            assert a.assigned_label == b.assigned_label
            assert a.true_label == b.true_label

    def test_duplicate_ids_rejected(self):
        e = StemEntry(id="dup", audio_path="x.wav", assigned_label=StemLabel.single("bass"),
                      song_id="s", duration_s=1.0)
        with pytest.raises(DataError):
            CorpusManifest([e, e])

    def test_missing_file_rejected_on_load(self, small_corpus, tmp_path):
        path = tmp_path / "m.jsonl"
        small_corpus.save(path)  # paths are relative to the corpus dir, not tmp
        with pytest.raises(DataError, match="missing audio"):
            CorpusManifest.load(path)

    def test_bad_version_rejected(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"manifest_version": 99}\n')
        with pytest.raises(DataError, match="version"):
            CorpusManifest.load(p)


class TestCorruption:
    def test_zero_rates_keep_labels(self, small_corpus, tmp_path):
        out = corpus.corrupt_labels(small_corpus, 0.0, 0.0, seed=5, out_dir=tmp_path / "c")
        for a, b in zip(small_corpus.entries, out.entries):
            assert a.assigned_label == b.assigned_label
            assert a.true_label == b.true_label
        assert corpus.label_error_rate(out) == 0.0

    def test_swap_one_forces_all_wrong_single_hot(self, small_corpus, tmp_path):
        out = corpus.corrupt_labels(small_corpus, 1.0, 0.0, seed=5, out_dir=tmp_path / "c")
        for e in out.entries:
            assert e.assigned_label.is_single
            assert e.assigned_label != e.true_label
        assert corpus.label_error_rate(out) == 1.0

    def test_swap_incidence_within_3_sigma(self, tmp_path):
        man = corpus.gen_synthetic_corpus(tmp_path / "big", n_songs=25, duration_s=1.0, seed=9)
        n = len(man.entries)
        s = 0.3
        out = corpus.corrupt_labels(man, s, 0.0, seed=17, out_dir=tmp_path / "c")
        swapped = sum(e.assigned_label != e.true_label for e in out.entries)
        sigma = (n * s * (1 - s)) ** 0.5
        assert abs(swapped - n * s) <= 3 * sigma

    def test_bleed_adds_true_bit_keeps_assigned(self, small_corpus, tmp_path):
        out = corpus.corrupt_labels(small_corpus, 0.0, 1.0, seed=5, out_dir=tmp_path / "c")
        for orig, e in zip(small_corpus.entries, out.entries):
            assert e.assigned_label == orig.assigned_label  # assigned keeps one bit
            assert e.true_label.is_multi                    # gained the donor's bit
            assert e.true_label.bits >= orig.true_label.bits
            prov = [p for p in e.provenance if p["op"] == "bleed"]
            assert len(prov) == 1
            assert -12.0 <= prov[0]["level_db"] <= -6.0

    def test_bleed_audio_actually_mixed(self, small_corpus, tmp_path):
        out = corpus.corrupt_labels(small_corpus, 0.0, 1.0, seed=5, out_dir=tmp_path / "c")
        orig = small_corpus.load_clip(small_corpus.entries[0])
        bled = out.load_clip(out.entries[0])
        assert not np.array_equal(orig.samples, bled.samples[:, :orig.n_samples])

    def test_never_empty_true_label(self, small_corpus, tmp_path):
        out = corpus.corrupt_labels(small_corpus, 0.7, 0.7, seed=23, out_dir=tmp_path / "c")
        for e in out.entries:
            assert not e.true_label.is_empty
            assert not e.assigned_label.is_empty

    def test_reproducible_given_seed(self, small_corpus, tmp_path):
        a = corpus.corrupt_labels(small_corpus, 0.4, 0.3, seed=31, out_dir=tmp_path / "a")
        b = corpus.corrupt_labels(small_corpus, 0.4, 0.3, seed=31, out_dir=tmp_path / "b")
        for ea, eb in zip(a.entries, b.entries):
            assert ea.assigned_label == eb.assigned_label
            assert ea.true_label == eb.true_label

    def test_kick_drum_as_bass_scenario_representable(self, small_corpus, tmp_path):
        out = corpus.corrupt_labels(small_corpus, 1.0, 0.0, seed=2, out_dir=tmp_path / "c")
        drums = [e for e in out.entries if e.true_label == StemLabel.single("drums")]
        assert any(e.assigned_label == StemLabel.single("bass") for e in drums) or drums

    def test_rates_validated(self, small_corpus, tmp_path):
        with pytest.raises(ValueError):
            corpus.corrupt_labels(small_corpus, 1.5, 0.0, seed=1, out_dir=tmp_path / "c")


class TestIngest:
    def test_ingest_song_tree(self, small_corpus, tmp_path):
        back = corpus.ingest_wav_directory(small_corpus.root / "audio")
        assert len(back.entries) == len(small_corpus.entries)
        drums = [e for e in back.entries if e.audio_path.endswith("drums.wav")]
        assert all(e.assigned_label == StemLabel.single("drums") for e in drums)
        assert all(e.true_label is None for e in back.entries)

    def test_missing_stem_logged_not_fatal(self, small_corpus, tmp_path, caplog):
        import shutil
        root = tmp_path / "tree"
        shutil.copytree(small_corpus.root / "audio", root)
        (root / "s0000" / "drums.wav").unlink()
        with caplog.at_level("WARNING"):
            back = corpus.ingest_wav_directory(root)
        assert len(back.entries) == len(small_corpus.entries) - 1
        assert any("missing stem" in r.message for r in caplog.records)

    def test_empty_directory_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(DataError):
            corpus.ingest_wav_directory(tmp_path / "empty")
