import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcodec.errors import (
    DegenerateInputError,
    LengthError,
    ParameterError,
    SampleRateError,
    ShapeError,
)
from semcodec.features import (
    HOP_LENGTH,
    LOG_FLOOR,
    N_MELS,
    SAMPLE_RATE,
    WIN_LENGTH,
    MelSpec,
    Waveform,
    length_regulate,
    load_utterance,
    make_synthetic_corpus,
    mel_filterbank,
    mel_spectrogram,
    pad_to_multiple,
    read_manifest,
    read_wav,
    render_utterance,
    write_manifest,
    write_wav,
)


def tone(freq: float, seconds: float, rate: int = SAMPLE_RATE) -> Waveform:
    t = np.arange(int(seconds * rate)) / rate
    return Waveform(0.5 * np.sin(2 * np.pi * freq * t), rate=rate)


class TestMelSpectrogram:
    def test_one_second_gives_100_frames(self):
        assert mel_spectrogram(tone(440.0, 1.0)).n_frames == 100

    def test_frame_count_is_length_over_hop(self):
        for n in (960, 1199, 24000, 36000, 230400):
            wav = Waveform(np.random.default_rng(0).normal(0, 0.1, n))
            assert mel_spectrogram(wav).n_frames == n // HOP_LENGTH

    def test_silence_hits_log_floor_everywhere(self):
        mel = mel_spectrogram(Waveform(np.zeros(4800)))
        np.testing.assert_allclose(mel.frames, np.log(LOG_FLOOR))

    def test_band_count_and_finiteness(self):
        mel = mel_spectrogram(tone(1000.0, 0.5))
        assert mel.frames.shape == (50, N_MELS)
        assert np.isfinite(mel.frames).all()

    def test_wrong_rate_rejected(self):
        with pytest.raises(SampleRateError):
            mel_spectrogram(tone(440.0, 1.0, rate=16000))

    def test_too_short_rejected(self):
        with pytest.raises(LengthError):
            mel_spectrogram(Waveform(np.zeros(WIN_LENGTH - 1)))

    def test_deterministic(self):
        wav = Waveform(np.random.default_rng(3).normal(0, 0.1, 12000))
        a = mel_spectrogram(wav).frames
        b = mel_spectrogram(Waveform(wav.samples.copy())).frames
        assert np.array_equal(a, b)

    def test_pure_tone_peaks_in_matching_band(self):
        # oracle: the band whose triangular filter covers the tone's
        # frequency must carry the most energy
        fb = mel_filterbank()
        bin_hz = np.arange(fb.shape[1]) * SAMPLE_RATE / WIN_LENGTH
        for freq in (500.0, 1500.0, 4000.0):
            mel = mel_spectrogram(tone(freq, 0.5))
            got = int(np.argmax(mel.frames[25]))
            expected = int(np.argmax(fb[:, int(round(freq * WIN_LENGTH / SAMPLE_RATE))]))
            assert abs(got - expected) <= 1, (freq, got, expected)
        del bin_hz

    def test_filterbank_shape_and_coverage(self):
        fb = mel_filterbank()
        assert fb.shape == (N_MELS, WIN_LENGTH // 2 + 1)
        assert (fb >= 0).all()
        assert (fb.sum(axis=1) > 0).all()


class TestLengthRegulate:
    def test_basic_expansion(self):
        out = length_regulate(np.array([4, 7]), np.array([2, 3]))
        assert out.tolist() == [4, 4, 7, 7, 7]

    def test_zero_duration_phoneme_vanishes(self):
        out = length_regulate(np.array([4, 7, 9]), np.array([2, 0, 1]))
        assert out.tolist() == [4, 4, 9]

    def test_all_zero_durations_rejected(self):
        with pytest.raises(DegenerateInputError):
            length_regulate(np.array([4, 7]), np.array([0, 0]))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            length_regulate(np.array([4, 7]), np.array([2]))

    def test_negative_duration_rejected(self):
        with pytest.raises(ParameterError):
            length_regulate(np.array([4]), np.array([-1]))

    @given(
        st.lists(
            st.tuples(st.integers(0, 17), st.integers(0, 9)), min_size=1, max_size=12
        ).filter(lambda pairs: sum(d for _, d in pairs) > 0)
    )
    @settings(max_examples=50, deadline=None)
    def test_output_length_and_counts(self, pairs):
        phon = np.array([p for p, _ in pairs])
        dur = np.array([d for _, d in pairs])
        out = length_regulate(phon, dur)
        assert out.shape[0] == dur.sum()
        for p in set(phon.tolist()):
            assert (out == p).sum() == dur[phon == p].sum()


class TestPadToMultiple:
    def test_pads_up(self):
        padded, mask = pad_to_multiple(np.arange(10), 4, pad_value=0)
        assert padded.shape[0] == 12
        assert mask.tolist() == [1] * 10 + [0, 0]
        assert padded[10:].tolist() == [0, 0]

    def test_exact_multiple_untouched(self):
        x = np.random.default_rng(0).normal(size=(8, 3))
        padded, mask = pad_to_multiple(x, 4)
        assert np.array_equal(padded, x)
        assert mask.all()

    def test_2d_pad_value(self):
        padded, mask = pad_to_multiple(np.ones((5, 2)), 4, pad_value=-1.0)
        assert padded.shape == (8, 2)
        assert (padded[5:] == -1.0).all()

    def test_empty_rejected(self):
        with pytest.raises(LengthError):
            pad_to_multiple(np.zeros(0), 4)

    def test_bad_multiple_rejected(self):
        with pytest.raises(ParameterError):
            pad_to_multiple(np.zeros(3), 0)

    @given(st.integers(1, 50), st.integers(1, 8))
    @settings(max_examples=60, deadline=None)
    def test_result_length_divides(self, n, m):
        x = np.arange(n, dtype=np.float64)
        padded, mask = pad_to_multiple(x, m)
        assert padded.shape[0] % m == 0
        assert padded.shape[0] - n < m
        assert np.array_equal(padded[:n], x)
        assert mask[:n].all() and not mask[n:].any()


class TestSyntheticCorpus:
    def test_regeneration_is_bit_identical(self):
        a = make_synthetic_corpus(11, 6, 2)
        b = make_synthetic_corpus(11, 6, 2)
        for ua, ub in zip(a.utterances, b.utterances):
            assert np.array_equal(ua.waveform.samples, ub.waveform.samples)
            assert np.array_equal(ua.phonemes, ub.phonemes)
            assert np.array_equal(ua.durations, ub.durations)
            assert ua.speaker == ub.speaker

    def test_different_seeds_differ(self):
        a = make_synthetic_corpus(1, 4, 2)
        b = make_synthetic_corpus(2, 4, 2)
        assert not np.array_equal(a.utterances[0].waveform.samples, b.utterances[0].waveform.samples)

    def test_durations_match_recomputed_mel_frames(self):
        # oracle: run the actual mel front end over each waveform and
        # confirm the annotated durations tile it exactly
        corpus = make_synthetic_corpus(7, 8, 2)
        for u in corpus.utterances:
            assert mel_spectrogram(u.waveform).n_frames == int(u.durations.sum())

    def test_lengths_between_one_and_three_seconds(self):
        corpus = make_synthetic_corpus(7, 8, 2)
        for u in corpus.utterances:
            frames = int(u.durations.sum())
            assert 100 <= frames <= 300
            assert len(u.waveform.samples) == frames * HOP_LENGTH

    def test_both_speakers_present_and_voices_differ(self):
        corpus = make_synthetic_corpus(7, 8, 2)
        assert sorted({u.speaker for u in corpus.utterances}) == [0, 1]
        # same phoneme sequence rendered by two speakers must differ
        phon = np.array([1, 5, 9, 1])
        dur = np.array([4, 20, 20, 4])
        w0 = render_utterance(phon, dur, 0).samples
        w1 = render_utterance(phon, dur, 1).samples
        assert np.abs(w0 - w1).max() > 0.05

    def test_silence_framing_and_no_adjacent_repeats(self):
        corpus = make_synthetic_corpus(13, 8, 2)
        for u in corpus.utterances:
            assert u.phonemes[0] == 1 and u.phonemes[-1] == 1
            content = u.phonemes[1:-1]
            assert (content >= 2).all()
            assert (content[1:] != content[:-1]).all()

    def test_amplitudes_bounded(self):
        corpus = make_synthetic_corpus(21, 4, 2)
        for u in corpus.utterances:
            assert np.abs(u.waveform.samples).max() <= 1.0

    def test_too_few_speakers_rejected(self):
        with pytest.raises(ParameterError):
            make_synthetic_corpus(0, 4, 1)


class TestManifestAndWav:
    def test_roundtrip(self, tmp_path):
        corpus = make_synthetic_corpus(5, 4, 2)
        manifest = write_manifest(corpus, tmp_path)
        entries = read_manifest(manifest)
        assert len(entries) == 4
        for entry, orig in zip(entries, corpus.utterances):
            utt = load_utterance(entry)
            assert utt.utt_id == orig.utt_id
            assert np.array_equal(utt.phonemes, orig.phonemes)
            assert np.array_equal(utt.durations, orig.durations)
            assert utt.speaker == orig.speaker
            # WAVs are stored float32; content survives to that precision
            np.testing.assert_allclose(
                utt.waveform.samples, orig.waveform.samples, atol=1e-6
            )

    def test_wav_roundtrip_preserves_rate(self, tmp_path):
        wav = tone(440.0, 0.25)
        write_wav(tmp_path / "t.wav", wav)
        back = read_wav(tmp_path / "t.wav")
        assert back.rate == SAMPLE_RATE
        np.testing.assert_allclose(back.samples, wav.samples, atol=1e-6)

    def test_reads_16bit_pcm(self, tmp_path):
        from scipy.io import wavfile

        samples = (0.25 * np.sin(2 * np.pi * 440 * np.arange(4800) / SAMPLE_RATE))
        wavfile.write(tmp_path / "pcm.wav", SAMPLE_RATE, (samples * 32767).astype(np.int16))
        back = read_wav(tmp_path / "pcm.wav")
        np.testing.assert_allclose(back.samples, samples, atol=1e-3)

    def test_stereo_rejected(self, tmp_path):
        from scipy.io import wavfile

        wavfile.write(
            tmp_path / "st.wav", SAMPLE_RATE, np.zeros((1000, 2), dtype=np.float32)
        )
        with pytest.raises(ShapeError):
            read_wav(tmp_path / "st.wav")

    def test_malformed_manifest_line_rejected(self, tmp_path):
        bad = tmp_path / "manifest.tsv"
        bad.write_text("utt0\tonly_two_fields\n")
        with pytest.raises(ParameterError):
            read_manifest(bad)

    def test_melspec_type_guards(self):
        with pytest.raises(ShapeError):
            MelSpec(np.zeros((10, N_MELS + 1)))
        with pytest.raises(ShapeError):
            Waveform(np.zeros((10, 2)))
