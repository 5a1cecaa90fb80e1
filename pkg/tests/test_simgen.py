import numpy as np
import pytest

from diarkit import simgen
from diarkit.metrics import compute_der
from diarkit.simgen import ScenarioConfig, generate_scenario, make_confusable_pair


class TestGenerateScenario:
    def test_same_seed_is_bit_identical(self):
        cfg = ScenarioConfig(seed=7)
        a = generate_scenario(cfg)
        b = generate_scenario(cfg)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.activity, b.activity)
        assert np.array_equal(a.signatures, b.signatures)
        assert a.reference.segments == b.reference.segments
        assert a.config.mic_positions == b.config.mic_positions

    def test_gain_formula(self):
        mics = np.array([[1.0, 1.0], [2.0, 1.0]])
        spks = np.array([[1.0, 1.0]])
        gains = simgen.gain_matrix(mics, spks)
        assert gains[0, 0] == 1.0  # mic at speaker position
        assert gains[1, 0] == 0.5  # one meter away

    def test_noiseless_features_match_closed_form(self):
        cfg = ScenarioConfig(num_speakers=3, noise_std=0.0, seed=3)
        scn = generate_scenario(cfg)
        expected = np.zeros_like(scn.features)
        for s in range(cfg.num_speakers):
            amp = np.multiply.outer(scn.gains[:, s], scn.activity[:, s])
            expected += amp[:, :, None] * scn.signatures[s]
        assert np.array_equal(scn.features, expected)

    def test_single_active_speaker_frame_is_exact(self):
        cfg = ScenarioConfig(num_speakers=2, noise_std=0.0, seed=4)
        scn = generate_scenario(cfg)
        solo = np.where((scn.activity.sum(axis=1) == 1) & (scn.activity[:, 0] == 1))[0]
        assert solo.size > 0
        for c in range(cfg.num_channels):
            for t in solo[:5]:
                assert np.array_equal(scn.features[c, t], scn.gains[c, 0] * scn.signatures[0])

    def test_reference_matches_activity_runs(self):
        cfg = ScenarioConfig(seed=5)
        scn = generate_scenario(cfg)
        rebuilt = simgen.activity_from_reference(
            scn.reference, cfg.duration_frames, cfg.frame_sec, cfg.num_speakers
        )
        assert np.array_equal(rebuilt, scn.activity)

    def test_overlap_target_hit(self):
        cfg = ScenarioConfig(num_speakers=3, overlap_ratio=0.3, duration_frames=600, seed=6)
        scn = generate_scenario(cfg)
        ratio = simgen.overlap_fraction(scn.activity)
        assert abs(ratio - 0.3) <= cfg.overlap_tolerance

    def test_infeasible_overlap_errors(self):
        cfg = ScenarioConfig(num_speakers=1, overlap_ratio=0.5, seed=7)
        with pytest.raises(simgen.GenerationError):
            generate_scenario(cfg)

    def test_position_validation(self):
        with pytest.raises(ValueError):
            ScenarioConfig(num_channels=1, mic_positions=[(99.0, 0.0)])


class TestConfusablePair:
    def test_signatures_shared_bitwise(self):
        scn = make_confusable_pair(ScenarioConfig(seed=11))
        assert np.array_equal(scn.signatures[0], scn.signatures[1])
        assert not np.array_equal(scn.signatures[0], scn.signatures[2])

    def test_gain_columns_decorrelated(self):
        for seed in range(12, 20):
            scn = make_confusable_pair(ScenarioConfig(seed=seed))
            g0, g1 = scn.gains[:, 0], scn.gains[:, 1]
            cos = g0 @ g1 / (np.linalg.norm(g0) * np.linalg.norm(g1))
            assert cos < simgen.MAX_GAIN_COSINE
            assert simgen.confusable_pair_ok(scn.gains, scn.config.noise_std, scn.config.signature_dim)

    def test_channel_zero_is_blind(self):
        scn = make_confusable_pair(ScenarioConfig(seed=21))
        # equal distance to mic 0 by construction: channel-0 gains match closely
        assert abs(scn.gains[0, 0] - scn.gains[0, 1]) < 1e-9

    def test_single_channel_observation_identical_up_to_scale(self):
        cfg = ScenarioConfig(seed=22, noise_std=0.0)
        scn = make_confusable_pair(cfg)
        solo0 = np.where((scn.activity.sum(axis=1) == 1) & (scn.activity[:, 0] == 1))[0]
        solo1 = np.where((scn.activity.sum(axis=1) == 1) & (scn.activity[:, 1] == 1))[0]
        assert solo0.size and solo1.size
        for c in range(cfg.num_channels):
            f0 = scn.features[c, solo0[0]]
            f1 = scn.features[c, solo1[0]]
            ratio = scn.gains[c, 0] / scn.gains[c, 1]
            assert np.allclose(f0, ratio * f1, atol=1e-12)

    def test_needs_two_speakers(self):
        with pytest.raises(simgen.GenerationError):
            make_confusable_pair(ScenarioConfig(num_speakers=1, seed=23))

    def test_deterministic(self):
        a = make_confusable_pair(ScenarioConfig(seed=24))
        b = make_confusable_pair(ScenarioConfig(seed=24))
        assert np.array_equal(a.features, b.features)


class TestPersistence:
    def test_feature_file_roundtrip(self, tmp_path):
        scn = generate_scenario(ScenarioConfig(seed=30))
        path = tmp_path / "features.bin"
        path.write_bytes(simgen.features_to_bytes(scn.features))
        assert np.array_equal(simgen.read_features(str(path)), scn.features)

    def test_feature_header(self):
        blob = simgen.features_to_bytes(np.zeros((2, 3, 4)))
        assert blob[:5] == b"MCDZ1"
        with pytest.raises(ValueError):
            simgen.features_from_bytes(b"XXXXX" + blob[5:])

    def test_scenario_save_load(self, tmp_path):
        scn = generate_scenario(ScenarioConfig(seed=31))
        simgen.save_scenario(str(tmp_path / "scn"), scn)
        loaded = simgen.load_scenario(str(tmp_path / "scn"))
        assert np.array_equal(loaded.features, scn.features)
        assert np.array_equal(loaded.activity, scn.activity)
        assert loaded.reference.segments == sorted(scn.reference.segments, key=lambda s: (s.onset, s.speaker))
        assert np.allclose(loaded.gains, scn.gains)
        assert compute_der(scn.reference, loaded.reference).der == 0.0

    def test_split_generation_and_manifest(self, tmp_path):
        template = ScenarioConfig(duration_frames=120, seed=0)
        names = simgen.generate_split(str(tmp_path), "dev", 3, template, base_seed=500)
        assert len(names) == 3
        scenarios = simgen.load_split(str(tmp_path), "dev")
        assert [s.recording for s in scenarios] == names
        rerun = simgen.generate_split(str(tmp_path), "dev", 3, template, base_seed=500)
        assert rerun == names
        again = simgen.load_split(str(tmp_path), "dev")
        for a, b in zip(scenarios, again):
            assert np.array_equal(a.features, b.features)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            simgen.load_split(str(tmp_path), "train")
