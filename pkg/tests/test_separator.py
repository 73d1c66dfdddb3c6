"""Separator: masks, summed-stem loss, example synthesis, training."""

import numpy as np
import pytest

from stemrefine import audio, corpus, evaluate, nnet, separator
from stemrefine.audio import AudioClip
from stemrefine.corpus import StemLabel
from stemrefine.separator import (SeparatorConfig, SeparatorPools, draw_example_plan,
                                  istft_adjoint, training_loss, training_loss_with_grad)

SR = 44100

TINY = SeparatorConfig(steps=6, batch=2, segment_s=0.5, fft_size=512, hop=128,
                       freq_pool=8, time_pool=4, channels=(4, 6))


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("sep_corpus")
    return corpus.gen_synthetic_corpus(root, n_songs=3, duration_s=3.0, seed=17)


@pytest.fixture(scope="module")
def refined_manifest(small_manifest):
    # hand-build a refined-style manifest: one entry per song made multi-labeled
    entries = []
    for e in small_manifest.entries:
        if e.id.endswith("_bass") and e.song_id == "s0000":
            e = corpus.StemEntry(
                id=e.id, audio_path=e.audio_path,
                assigned_label=StemLabel.from_bits((0, 1, 1, 0)),
                song_id=e.song_id, duration_s=e.duration_s, true_label=e.true_label)
        entries.append(e)
    return corpus.CorpusManifest(entries, root=small_manifest.root)


class TestMaskGeometry:
    def test_upsample_preserves_values_and_shape(self):
        grid = np.random.default_rng(0).uniform(0, 1, (1, 4, 2, 8, 16))
        up = separator.upsample_masks(grid, 16, 4, 129, 67)
        assert up.shape == (1, 4, 2, 129, 67)
        assert up.min() >= 0 and up.max() <= 1
        assert up[0, 0, 0, 0, 0] == grid[0, 0, 0, 0, 0]
        assert up[0, 0, 0, 128, 66] == grid[0, 0, 0, 7, 15]  # edge replication

    def test_adjoint_matches_dot_product(self):
        rng = np.random.default_rng(1)
        grid = rng.normal(0, 1, (2, 4, 2, 5, 7))
        up = separator.upsample_masks(grid, 3, 5, 17, 38)
        g = rng.normal(0, 1, up.shape)
        back = separator.upsample_masks_adjoint(g, 3, 5, 5, 7)
        assert np.isclose(np.sum(up * g), np.sum(grid * back), rtol=1e-12)


class TestIstftAdjoint:
    @pytest.mark.parametrize("fft,hop,n", [(256, 64, 1000), (512, 128, 3000), (2048, 512, 44100)])
    def test_dot_product_identity(self, fft, hop, n):
        rng = np.random.default_rng(2)
        clip = AudioClip(rng.normal(0, 1, (2, n)))
        spec = audio.stft(clip, fft, hop)
        sc = spec.complex_spec()
        y = audio.istft_complex(sc, fft, hop, n).samples
        g = rng.normal(0, 1, (2, n))
        gs = istft_adjoint(g, fft, hop, spec.n_frames, n)
        lhs = np.sum(y * g)
        rhs = np.sum(sc.real * gs.real + sc.imag * gs.imag)
        assert np.isclose(lhs, rhs, rtol=1e-10)


class TestApplyMasks:
    def test_identity_masks_reconstruct_mixture(self):
        rng = np.random.default_rng(3)
        clip = AudioClip(rng.normal(0, 0.3, (2, SR)))
        spec = audio.stft(clip)
        est = separator.apply_masks(spec, np.ones((4, 2) + spec.mags.shape[1:]))
        for stem_clip in est.by_class().values():
            rel = (np.linalg.norm(stem_clip.samples - clip.samples)
                   / np.linalg.norm(clip.samples))
            assert rel < 1e-10

    def test_zero_masks_give_silence(self):
        rng = np.random.default_rng(4)
        clip = AudioClip(rng.normal(0, 0.3, (2, SR)))
        spec = audio.stft(clip)
        est = separator.apply_masks(spec, np.zeros((4, 2) + spec.mags.shape[1:]))
        for stem_clip in est.by_class().values():
            assert np.max(np.abs(stem_clip.samples)) == 0.0

    def test_oracle_soft_mask_beats_8db_on_two_stem_mixture(self, small_manifest):
        stems = {}
        for e in small_manifest.entries:
            if e.song_id == "s0000" and e.true_label.names[0] in ("bass", "drums"):
                stems[e.true_label.names[0]] = small_manifest.load_clip(e)
        bass, drums = stems["bass"], stems["drums"]
        mix = AudioClip(bass.samples + drums.samples)
        spec_mix = audio.stft(mix)
        specs = {k: audio.stft(v) for k, v in stems.items()}
        denom = sum(s.mags for s in specs.values()) + 1e-12
        for name, ref in stems.items():
            mask = specs[name].mags / denom
            est = audio.istft_complex(mask * spec_mix.complex_spec(),
                                      spec_mix.fft_size, spec_mix.hop, mix.n_samples)
            sdr = evaluate.compute_sdr(ref, est, frame_s=1.0)
            assert sdr.median > 8.0, f"{name}: {sdr.median}"


class TestTrainingLoss:
    def _identity_grouping(self):
        return [frozenset([c]) for c in range(4)]

    def test_exact_match_zero(self):
        est = np.random.default_rng(0).normal(0, 1, (4, 2, 100))
        targets = [est[c].copy() for c in range(4)]
        assert training_loss(est, targets, self._identity_grouping(), "time_l1") == 0.0

    def test_summed_group_invariant_to_split(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(0, 1, (2, 50)), rng.normal(0, 1, (2, 50))
        est = np.zeros((4, 2, 50))
        est[1], est[2] = x, y  # bass/drums split arbitrarily
        grouping = [frozenset([0]), frozenset([1, 2]), frozenset([3])]
        targets = [np.zeros((2, 50)), x + y, np.zeros((2, 50))]
        loss = training_loss(est, targets, grouping, "time_l1")
        assert loss == pytest.approx(0.0, abs=1e-12)
        est2 = np.zeros((4, 2, 50))
        est2[1], est2[2] = x + y, np.zeros_like(y)  # different split, same sum
        assert training_loss(est2, targets, grouping, "time_l1") == pytest.approx(0.0, abs=1e-12)

    def test_time_l1_offset_value(self):
        est = np.zeros((4, 2, 10))
        est[0] += 0.1
        targets = [np.zeros((2, 10))]
        loss = training_loss(est, targets, [frozenset([0, 1, 2, 3])], "time_l1")
        assert loss == pytest.approx(0.1)

    def test_identity_grouping_equals_per_stem_sum(self):
        rng = np.random.default_rng(2)
        est = rng.normal(0, 1, (4, 2, 64))
        targets = [rng.normal(0, 1, (2, 64)) for _ in range(4)]
        combined = training_loss(est, targets, self._identity_grouping(), "tf_mse")
        sep_sum = sum(float(np.mean((est[c] - targets[c]) ** 2)) for c in range(4))
        assert combined == pytest.approx(sep_sum)

    def test_grouping_must_partition(self):
        est = np.zeros((4, 2, 10))
        with pytest.raises(ValueError, match="partition"):
            training_loss(est, [np.zeros((2, 10))], [frozenset([0, 1])], "time_l1")
        with pytest.raises(ValueError, match="partition"):
            training_loss(est, [np.zeros((2, 10))] * 2,
                          [frozenset([0, 1]), frozenset([1, 2, 3])], "time_l1")

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        est = rng.normal(0, 1, (4, 2, 20))
        targets = [rng.normal(0, 1, (2, 20)), rng.normal(0, 1, (2, 20)),
                   rng.normal(0, 1, (2, 20))]
        grouping = [frozenset([0]), frozenset([1, 3]), frozenset([2])]
        for domain in ("tf_mse", "time_l1"):
            loss, grad = training_loss_with_grad(est, targets, grouping, domain)
            h = 1e-6
            for _ in range(10):
                idx = tuple(int(rng.integers(0, s)) for s in est.shape)
                old = est[idx]
                est[idx] = old + h
                lp = training_loss(est, targets, grouping, domain)
                est[idx] = old - h
                lm = training_loss(est, targets, grouping, domain)
                est[idx] = old
                fd = (lp - lm) / (2 * h)
                assert abs(grad[idx] - fd) < 1e-6 + 1e-4 * abs(fd), domain


class TestExamplePlans:
    def test_p_zero_always_conventional(self, refined_manifest):
        pools = SeparatorPools(refined_manifest)
        rng = np.random.default_rng(4)
        for _ in range(100):
            plan = draw_example_plan(pools, 0.0, rng)
            assert not plan.used_multi
            assert sorted(tuple(g) for g in plan.grouping) == [(0,), (1,), (2,), (3,)]

    def test_multi_plan_complements_uncovered_classes(self, refined_manifest):
        pools = SeparatorPools(refined_manifest)
        rng = np.random.default_rng(5)
        seen_multi = False
        for _ in range(200):
            plan = draw_example_plan(pools, 1.0, rng)
            assert plan.used_multi
            seen_multi = True
            groups = plan.grouping
            multi_groups = [g for g in groups if len(g) > 1]
            assert multi_groups == [frozenset([1, 2])]  # the bass+drums source
            singles = sorted(tuple(g)[0] for g in groups if len(g) == 1)
            assert singles == [0, 3]  # vocals and other complements
        assert seen_multi

    def test_grouping_is_partition_always(self, refined_manifest):
        pools = SeparatorPools(refined_manifest)
        rng = np.random.default_rng(6)
        for _ in range(500):
            plan = draw_example_plan(pools, 0.4, rng)
            flat = sorted(c for g in plan.grouping for c in g)
            assert flat == [0, 1, 2, 3]

    def test_multi_inclusion_rate_matches_p(self, refined_manifest):
        pools = SeparatorPools(refined_manifest)
        rng = np.random.default_rng(7)
        n = 10000
        used = sum(draw_example_plan(pools, 0.4, rng).used_multi for _ in range(n))
        assert 0.37 <= used / n <= 0.43

    def test_render_mixture_is_sum_of_targets(self, refined_manifest):
        pools = SeparatorPools(refined_manifest)
        rng = np.random.default_rng(8)
        mixture, targets, grouping = separator.make_training_example(pools, TINY, rng)
        assert mixture.n_samples == TINY.segment_len
        np.testing.assert_allclose(mixture.samples, np.sum(targets, axis=0), atol=1e-12)
        assert len(targets) == len(grouping)

    def test_no_multi_entries_degrades_gracefully(self, small_manifest, caplog):
        pools = SeparatorPools(small_manifest)  # all single-labeled
        rng = np.random.default_rng(9)
        plan = draw_example_plan(pools, 0.9, rng)
        assert not plan.used_multi


class TestEndToEndGradient:
    def test_net_parameter_gradient_through_mask_loss(self, refined_manifest):
        """Finite differences through predict_masks + tf_mse training loss."""
        cfg = TINY
        pools = SeparatorPools(refined_manifest)
        rng = np.random.default_rng(10)
        mixture, targets, grouping = separator.make_training_example(pools, cfg, rng)
        mags = audio.stft_magnitudes(mixture, cfg.fft_size, cfg.hop, dtype=np.float64)
        targets_tf = [audio.stft_magnitudes(AudioClip(t), cfg.fft_size, cfg.hop,
                                            dtype=np.float64) for t in targets]
        net = separator.build_separator_net(cfg, seed=2)

        def loss_fn():
            masks = separator.predict_masks(net, mags[None], cfg)[0]
            est = masks * mags[None]
            return training_loss(est, targets_tf, grouping, "tf_mse")

        masks = separator.predict_masks(net, mags[None], cfg)
        est = masks[0] * mags[None]
        loss, dest = training_loss_with_grad(est, targets_tf, grouping, "tf_mse")
        dmasks = (dest * mags[None])[None]
        separator.masks_backward(net, dmasks, cfg)
        grads = dict(net.gradients())
        rng2 = np.random.default_rng(11)
        h = 1e-5
        for key, arr in net.parameters():
            for _ in range(4):
                idx = tuple(int(rng2.integers(0, s)) for s in arr.shape)
                old = arr[idx]
                arr[idx] = old + h
                lp = loss_fn()
                arr[idx] = old - h
                lm = loss_fn()
                arr[idx] = old
                fd = (lp - lm) / (2 * h)
                # floor keeps genuinely-zero gradients from failing on fp dust
                assert abs(grads[key][idx] - fd) / max(abs(fd), 1e-6) < 1e-4, key


class TestTrainSeparator:
    def test_single_only_smoke_and_history(self, small_manifest):
        result = separator.train_separator(small_manifest, TINY, seed=1, mode="single-only")
        assert len(result.loss_history) == TINY.steps
        assert all(np.isfinite(result.loss_history))

    def test_time_l1_mode_smoke(self, small_manifest):
        cfg = SeparatorConfig(steps=3, batch=1, segment_s=0.5, fft_size=512, hop=128,
                              freq_pool=8, time_pool=4, channels=(4, 6),
                              loss_domain="time_l1")
        result = separator.train_separator(small_manifest, cfg, seed=2, mode="standard")
        assert all(np.isfinite(result.loss_history))

    def test_finetune_mode_runs_both_phases(self, refined_manifest):
        cfg = SeparatorConfig(steps=6, batch=1, segment_s=0.5, fft_size=512, hop=128,
                              freq_pool=8, time_pool=4, channels=(4, 6),
                              finetune_phase1_frac=0.5)
        result = separator.train_separator(refined_manifest, cfg, seed=3, mode="finetune-multi")
        assert result.mode == "finetune-multi"
        assert len(result.loss_history) == 6

    def test_deterministic_given_seed(self, small_manifest):
        a = separator.train_separator(small_manifest, TINY, seed=5, mode="single-only")
        b = separator.train_separator(small_manifest, TINY, seed=5, mode="single-only")
        for (_, pa), (_, pb) in zip(a.state.net.parameters(), b.state.net.parameters()):
            assert np.array_equal(pa, pb)

    def test_unknown_mode_rejected(self, small_manifest):
        with pytest.raises(ValueError, match="mode"):
            separator.train_separator(small_manifest, TINY, seed=1, mode="bogus")

    def test_separate_shapes_and_finiteness(self, small_manifest):
        result = separator.train_separator(small_manifest, TINY, seed=1, mode="single-only")
        rng = np.random.default_rng(12)
        mix = AudioClip(rng.normal(0, 0.1, (2, SR)))
        mix = audio.normalize_loudness(mix, TINY.target_lufs)
        est = separator.separate(result.state, mix, TINY)
        for clip in est.by_class().values():
            assert clip.n_samples == mix.n_samples
            assert np.all(np.isfinite(clip.samples))
