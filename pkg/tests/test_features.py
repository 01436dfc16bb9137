import numpy as np
import pytest

from bandnet import dsp, features
from bandnet.errors import ConfigError, DataError

from oracles import sine


def make_wave(samples, rate=16000):
    return dsp.Waveform(np.asarray(samples, dtype=float), rate)


class TestFrameSignal:
    def test_one_second_16k(self):
        frames = features.frame_signal(make_wave(np.random.default_rng(0).standard_normal(16000)))
        assert frames.shape == (98, 400)

    def test_exactly_one_frame(self):
        frames = features.frame_signal(make_wave(np.ones(400)))
        assert frames.shape == (1, 400)

    def test_too_short_raises(self):
        with pytest.raises(DataError):
            features.frame_signal(make_wave(np.ones(399)))

    def test_preemphasis_on_constant_signal(self):
        w = make_wave(np.ones(16000))
        frames = features.frame_signal(w)
        window = np.hamming(400)
        expected_first = 1.0 * window[0]
        expected_rest = (1.0 - 0.97) * window[1:]
        np.testing.assert_allclose(frames[:, 0], expected_first)
        np.testing.assert_allclose(frames[:, 1:], np.tile(expected_rest, (98, 1)))


class TestMelFilterbank:
    def test_mel_formula(self):
        assert features.hz_to_mel(0) == 0
        assert abs(features.hz_to_mel(700) - 2595 * np.log10(2)) < 1e-9
        assert abs(features.hz_to_mel(700) - 781.17) < 0.01

    def test_bank_geometry(self):
        bank = features.mel_filterbank(512, 16000, 40, 0.0, 8000.0)
        assert bank.weights.shape == (40, 257)
        assert np.all(bank.weights >= 0)
        assert np.all(np.diff(bank.center_hz) > 0)
        assert bank.center_hz[0] > 0
        assert bank.center_hz[-1] < 8000

    def test_each_row_single_triangular_support(self):
        for n_fft, rate in ((512, 16000), (256, 8000)):
            bank = features.mel_filterbank(n_fft, rate, 40, 0.0, rate / 2)
            for row in bank.weights:
                support = np.flatnonzero(row > 0)
                assert support.size >= 1
                assert np.all(np.diff(support) == 1)  # contiguous
                peak = row.argmax()
                assert np.all(np.diff(row[support[0] : peak + 1]) >= 0)
                assert np.all(np.diff(row[peak : support[-1] + 1]) <= 0)

    def test_fmax_above_nyquist_rejected(self):
        with pytest.raises(ConfigError):
            features.mel_filterbank(512, 16000, 40, 0.0, 9000.0)


class TestLogMel:
    def test_cmvn_white_noise(self, rng):
        w = make_wave(rng.standard_normal(16000) * 0.3)
        t = features.log_mel(w, features.bank_for_rate(16000))
        assert np.all(np.isfinite(t.frames))
        assert np.abs(t.frames.mean(axis=0)).max() <= 1e-6
        assert np.abs(t.frames.var(axis=0) - 1.0).max() <= 1e-6

    def test_tone_lands_in_covering_filter(self):
        bank = features.bank_for_rate(16000)
        w = make_wave(sine(1000, 16000))
        t = features.log_mel(w, bank, normalize=False)
        profile = t.frames.mean(axis=0)
        bin_hz = np.arange(bank.weights.shape[1]) * 16000 / bank.n_fft
        covering = [
            i for i, row in enumerate(bank.weights)
            if row[(bin_hz >= 970) & (bin_hz <= 1030)].sum() > 0
        ]
        assert int(profile.argmax()) in covering

    def test_silence_hits_log_floor(self):
        w = make_wave(np.zeros(16000))
        t = features.log_mel(w, features.bank_for_rate(16000), normalize=False)
        assert np.all(t.frames == np.log(1e-10))

    def test_rate_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            features.log_mel(make_wave(np.ones(8000), rate=8000), features.bank_for_rate(16000))


class TestStackContext:
    def test_single_frame_replicates(self):
        t = features.FeatureTensor(np.arange(40, dtype=float)[None, :], 0, "u")
        windows = features.stack_context(t, k=10)
        assert windows.shape == (1, 21, 40)
        assert np.all(windows[0] == windows[0][0])

    def test_window_indexing(self, rng):
        frames = rng.standard_normal((100, 40))
        windows = features.stack_context(frames, k=10)
        assert windows.shape == (100, 21, 40)
        np.testing.assert_array_equal(windows[50], frames[40:61])

    def test_consecutive_windows_share_rows(self, rng):
        frames = rng.standard_normal((60, 40))
        windows = features.stack_context(frames, k=10)
        np.testing.assert_array_equal(windows[30][1:], windows[31][:-1])

    @pytest.mark.parametrize("t_len", [1, 2, 5, 21, 100])
    def test_emits_exactly_t_windows(self, t_len, rng):
        frames = rng.standard_normal((t_len, 12))
        assert features.stack_context(frames, k=10).shape[0] == t_len


class TestFeaturizeUtterance:
    def test_narrowband_native(self, rng):
        w = dsp.Waveform(rng.standard_normal(8000) * 0.2, 8000)
        t = features.featurize_utterance(w, features.SCENARIO_NATIVE, "u1")
        assert t.dim == 40
        assert t.bandwidth == 1

    def test_narrowband_upsample(self, rng):
        w = dsp.Waveform(rng.standard_normal(8000) * 0.2, 8000)
        t = features.featurize_utterance(w, features.SCENARIO_UPSAMPLE, "u1")
        assert t.dim == 40
        assert t.bandwidth == 1
        # upsampling doubles the sample count: same frame count as 16 kHz audio
        assert t.n_frames == 98

    def test_wideband_identical_under_both_scenarios(self, rng):
        w = dsp.Waveform(rng.standard_normal(16000) * 0.2, 16000)
        t1 = features.featurize_utterance(w, features.SCENARIO_NATIVE, "u")
        t2 = features.featurize_utterance(w, features.SCENARIO_UPSAMPLE, "u")
        assert np.array_equal(t1.frames, t2.frames)
        assert t1.bandwidth == t2.bandwidth == 0

    def test_manifest_flag_mismatch_rejected(self, rng):
        w = dsp.Waveform(rng.standard_normal(8000) * 0.2, 8000)
        with pytest.raises(DataError):
            features.featurize_utterance(w, features.SCENARIO_NATIVE, "u", bandwidth=0)

    def test_determinism(self, rng):
        x = rng.standard_normal(12000) * 0.2
        t1 = features.featurize_utterance(dsp.Waveform(x, 8000), features.SCENARIO_NATIVE)
        t2 = features.featurize_utterance(dsp.Waveform(x.copy(), 8000), features.SCENARIO_NATIVE)
        assert np.array_equal(t1.frames, t2.frames)


class TestFeatureFile:
    def test_round_trip(self, tmp_path, rng):
        tensors = [
            features.FeatureTensor(
                rng.standard_normal((7, 40)).astype(np.float32).astype(np.float64),
                bandwidth=i % 2,
                utterance_id=f"utt{i}",
                labels=rng.integers(0, 8, 7),
            )
            for i in range(3)
        ]
        features.write_features(tmp_path / "f.bnft", tensors, scenario="native")
        out, scenario = features.read_features(tmp_path / "f.bnft")
        assert scenario == "native"
        assert [t.utterance_id for t in out] == ["utt0", "utt1", "utt2"]
        for a, b in zip(tensors, out):
            assert np.array_equal(a.frames, b.frames)
            assert np.array_equal(a.labels, b.labels)
            assert a.bandwidth == b.bandwidth

    def test_truncated_file_rejected(self, tmp_path, rng):
        t = features.FeatureTensor(rng.standard_normal((5, 4)), 0, "u", np.zeros(5, int))
        features.write_features(tmp_path / "f.bnft", [t])
        raw = (tmp_path / "f.bnft").read_bytes()
        (tmp_path / "g.bnft").write_bytes(raw[: len(raw) - 10])
        with pytest.raises(DataError):
            features.read_features(tmp_path / "g.bnft")

    def test_rerun_byte_identical(self, tmp_path, rng):
        t = [features.FeatureTensor(rng.standard_normal((5, 4)), 0, "u", np.zeros(5, int))]
        features.write_features(tmp_path / "a.bnft", t, scenario="native")
        features.write_features(tmp_path / "b.bnft", t, scenario="native")
        assert (tmp_path / "a.bnft").read_bytes() == (tmp_path / "b.bnft").read_bytes()


class TestManifest:
    def test_round_trip(self, tmp_path):
        features.write_manifest(tmp_path / "m.tsv", [("wav/a.wav", 0, "labels/a.txt")])
        entries = features.read_manifest(tmp_path / "m.tsv")
        assert len(entries) == 1
        assert entries[0].bandwidth == 0
        assert entries[0].wav_path == tmp_path / "wav/a.wav"

    def test_bad_flag_rejected(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a.wav\t2\tl.txt\n")
        with pytest.raises(DataError):
            features.read_manifest(tmp_path / "m.tsv")


class TestFeaturizeManifest:
    def test_parallel_matches_serial(self, small_corpus):
        serial = features.featurize_manifest(small_corpus["test"], features.SCENARIO_NATIVE, jobs=1)
        parallel = features.featurize_manifest(small_corpus["test"], features.SCENARIO_NATIVE, jobs=2)
        assert [t.utterance_id for t in serial] == [t.utterance_id for t in parallel]
        for a, b in zip(serial, parallel):
            assert np.array_equal(a.frames, b.frames)
            assert np.array_equal(a.labels, b.labels)

    def test_missing_wav_names_utterance(self, tmp_path):
        (tmp_path / "m.tsv").write_text("ghost.wav\t0\tghost.txt\n")
        with pytest.raises(DataError, match="ghost"):
            features.featurize_manifest(tmp_path / "m.tsv", features.SCENARIO_NATIVE)
