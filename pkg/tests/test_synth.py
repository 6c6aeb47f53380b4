import numpy as np
import pytest

from mvse.config import Dims
from mvse.synth import (
    SynthConfig,
    probe_recall_at_1,
    slice_collision_ceiling,
    synth_generate,
)

DIMS = Dims.small()


def _cfg(**kw) -> SynthConfig:
    base = dict(
        dims=DIMS, n_videos=20, sentences_per_video=2,
        rho=(1.0, 0.0, 0.0), noise_sigma=0.0, seed=11, latent_total=8,
    )
    base.update(kw)
    return SynthConfig(**base)


class TestConfigValidation:
    def test_negative_split_weight(self):
        with pytest.raises(ValueError, match="invalid signal split"):
            _cfg(rho=(1.2, -0.2, 0.0))

    def test_split_not_summing_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            _cfg(rho=(0.5, 0.4, 0.0))

    def test_too_few_videos(self):
        with pytest.raises(ValueError, match="at least 2"):
            _cfg(n_videos=1)

    def test_split_mode_needs_both_slices(self):
        with pytest.raises(ValueError, match="split sentence mode"):
            _cfg(rho=(1.0, 0.0, 0.0), sentence_mode="split")

    def test_slice_sizes_follow_rho(self):
        assert _cfg(rho=(1.0, 0.0, 0.0)).slice_sizes() == (8, 0, 0)
        assert _cfg(rho=(0.5, 0.5, 0.0)).slice_sizes() == (4, 4, 0)
        assert _cfg(rho=(0.5, 0.25, 0.25)).slice_sizes() == (4, 2, 2)


class TestPlantedSignal:
    def test_noiseless_global_signal_probe_is_perfect(self):
        # full signal in the global slice, no noise: codebook decode +
        # nearest neighbor on raw mean frame features must retrieve exactly
        res = synth_generate(_cfg(rho=(1.0, 0.0, 0.0), noise_sigma=0.0))
        assert probe_recall_at_1(res, "test", space="global") == 1.0
        assert probe_recall_at_1(res, "train", space="global") == 1.0

    def test_noiseless_action_signal_probe_is_perfect(self):
        res = synth_generate(_cfg(rho=(0.0, 0.0, 1.0), noise_sigma=0.0))
        assert probe_recall_at_1(res, "test", space="action") == 1.0

    def test_partial_information_respects_ceiling(self):
        # only half the code lives in the global slice; a global-only probe
        # cannot beat the collision ceiling computed from the true codes
        cfg = _cfg(
            rho=(0.5, 0.5, 0.0), noise_sigma=0.0, n_videos=60,
            latent_total=4, quant_levels=2, seed=3,
        )
        res = synth_generate(cfg)
        ceiling = slice_collision_ceiling(res, "test", space="global")
        probe = probe_recall_at_1(res, "test", space="global")
        assert ceiling < 1.0  # 2 dims with 2 levels collide heavily over 15 videos
        assert probe <= ceiling + 1e-12

    def test_sequence_slice_is_order_keyed(self):
        # the same code produces different grid payloads at different frame
        # positions (cyclic shift), so reading order is informative
        cfg = _cfg(rho=(0.0, 1.0, 0.0), noise_sigma=0.0, latent_total=4)
        res = synth_generate(cfg)
        grid = res.dataset.grid_frames
        assert grid.shape[1] >= 2
        diff = np.abs(grid[:, 0] - grid[:, 1]).max()
        assert diff > 1e-6

    def test_mean_pooling_grid_frames_collapses_order_signal(self):
        # averaging over frames mixes all cyclic shifts, so two codes that
        # are shifts of each other pool identically even though their
        # per-frame payloads differ: order carries the information
        cfg = _cfg(rho=(0.0, 1.0, 0.0), noise_sigma=0.0, latent_total=4, n_frames=4)
        res = synth_generate(cfg)
        mix = res.truth.mix_grid
        z = res.truth.levels[np.array([0, -1, 0, -1])]
        z_shift = np.roll(z, -1)

        def pooled(code):
            return np.mean([mix @ np.roll(code, -(f % 4)) for f in range(4)], axis=0)

        np.testing.assert_allclose(pooled(z), pooled(z_shift), atol=1e-12)
        assert np.abs(mix @ z - mix @ z_shift).max() > 1e-6


class TestSentences:
    def test_sentences_decode_to_their_codes(self):
        res = synth_generate(_cfg(rho=(0.5, 0.25, 0.25), latent_total=8, quant_levels=4))
        ds, truth = res.dataset, res.truth
        s_per = truth.config.sentences_per_video
        for video in range(truth.config.n_videos):
            for s in range(s_per):
                z, mask = truth.decode_sentence(ds.sentences[video * s_per + s])
                assert mask.all()
                np.testing.assert_array_equal(z, truth.codes[video])

    def test_split_mode_populations_cover_different_slices(self):
        cfg = _cfg(rho=(0.5, 0.5, 0.0), sentence_mode="split", latent_total=8)
        res = synth_generate(cfg)
        truth = res.truth
        g_sl, s_sl, _ = truth.slices()
        pop_a = res.dataset.sentences[0]  # video 0, sentence 0
        pop_b = res.dataset.sentences[1]  # video 0, sentence 1
        _, mask_a = truth.decode_sentence(pop_a)
        _, mask_b = truth.decode_sentence(pop_b)
        assert mask_a[g_sl].all() and not mask_a[s_sl].any()
        assert mask_b[s_sl].all() and not mask_b[g_sl].any()
        assert pop_a[0] != pop_b[0]  # distinct population markers

    def test_split_manifests_partition_queries(self):
        cfg = _cfg(rho=(0.5, 0.5, 0.0), sentence_mode="split")
        res = synth_generate(cfg)
        test = {q[2] for q in res.manifests["test"].queries()}
        pop_a = {q[2] for q in res.manifests["test_popA"].queries()}
        pop_b = {q[2] for q in res.manifests["test_popB"].queries()}
        assert pop_a | pop_b == test
        assert not (pop_a & pop_b)


class TestManifestsAndDeterminism:
    def test_train_test_partition(self):
        res = synth_generate(_cfg(n_videos=20, train_fraction=0.75))
        train_ids = {e[1] for e in res.manifests["train"].entries}
        test_ids = {e[1] for e in res.manifests["test"].entries}
        assert len(train_ids) == 15 and len(test_ids) == 5
        assert not (train_ids & test_ids)
        for m in res.manifests.values():
            m.validate_against(res.dataset)

    def test_manifest_determinism(self):
        a = synth_generate(_cfg())
        b = synth_generate(_cfg())
        for name in a.manifests:
            assert a.manifests[name].to_text() == b.manifests[name].to_text()
