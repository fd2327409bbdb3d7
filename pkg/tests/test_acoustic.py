import numpy as np
import pytest

from pavsod.acoustic import (
    AmbisonicClip,
    SeldConfig,
    SeldEncoder,
    add_noise,
    doa_oracle,
    encode_bformat,
    extract_embeddings,
    random_directions,
    sed_decision,
    spatial_energy,
    stft_features,
)
from pavsod.acoustic.audio_io import AudioFormatError, read_audio, read_raw, read_wav, write_raw, write_wav
from pavsod.acoustic.features import hamming_energy_factor, n_frames, spectral_energy, windowed_energy
from pavsod.acoustic.seld import augment_example, frame_activity, make_seld_example, seld_loss
from pavsod.geometry import angular_distance
from pavsod.tensor import grad_check, precision


def test_stft_sine_peaks_at_shifted_bin():
    m, fs, k = 256, 8000, 10
    t = np.arange(2048) / fs
    s = np.zeros((4, t.size))
    s[0] = np.sin(2 * np.pi * k * fs / m * t)
    f = stft_features(AmbisonicClip(s, fs), m)
    assert f.shape == (n_frames(2048, m), m // 2, 8)
    assert np.all(np.argmax(f[:, :, 0], axis=1) == k - 1)


def test_stft_silence_and_frame_count():
    f = stft_features(AmbisonicClip(np.zeros((4, 1000)), 8000), 256)
    assert f.shape[0] == (1000 - 256) // 128 + 1
    assert np.all(f == 0.0)


def test_stft_ranges_and_errors(rng):
    f = stft_features(AmbisonicClip(rng.normal(size=(4, 900)), 8000), 128)
    assert np.all(f[..., :4] >= 0)
    assert np.all((f[..., 4:] > -np.pi) & (f[..., 4:] <= np.pi))
    with pytest.raises(ValueError, match="power of two"):
        stft_features(AmbisonicClip(np.zeros((4, 900)), 8000), 100)
    with pytest.raises(ValueError, match="shorter"):
        stft_features(AmbisonicClip(np.zeros((4, 100)), 8000), 256)


def test_stft_parseval(rng):
    # white noise carries almost nothing in the dropped zeroth bin
    m = 256
    clip = AmbisonicClip(rng.normal(size=(4, 8000)), 8000)
    spec = spectral_energy(stft_features(clip, m), m)
    assert abs(spec / windowed_energy(clip, m) - 1.0) < 0.05
    raw = sum(np.square(clip.channels[:, i * 128:i * 128 + m]).sum() for i in range(n_frames(8000, m)))
    assert abs(spec / (raw * hamming_energy_factor(m)) - 1.0) < 0.05


def test_bformat_gains(rng):
    s = rng.normal(size=500)
    c = encode_bformat((1.0, 0.0, 0.0), s).channels
    assert np.all(c[2] == 0) and np.all(c[3] == 0)
    c = encode_bformat((0.0, 0.0, 1.0), s).channels
    assert np.all(c[1] == 0) and np.all(c[2] == 0)
    np.testing.assert_array_equal(c[3], s)
    np.testing.assert_allclose(c[0], s / np.sqrt(2))
    with pytest.raises(ValueError, match="unit-norm"):
        encode_bformat((1.0, 1.0, 0.0), s)
    with pytest.raises(ValueError, match="4 channels"):
        AmbisonicClip(np.zeros((3, 10)), 8000)


def test_doa_oracle_examples(rng):
    s = rng.normal(size=4000)
    est = doa_oracle(encode_bformat((0.0, 1.0, 0.0), s))
    assert np.degrees(angular_distance(est, [0, 1, 0])) < 1.0
    d = random_directions(rng, 1)[0]
    np.testing.assert_allclose(doa_oracle(encode_bformat(-d, s)), -doa_oracle(encode_bformat(d, s)))
    assert doa_oracle(AmbisonicClip(np.zeros((4, 100)), 8000)) is None


def test_doa_oracle_is_spatial_energy_argmax(rng):
    d = random_directions(rng, 1)[0]
    clip = encode_bformat(d, rng.normal(size=2000))
    cand = random_directions(rng, 2000)
    best = cand[np.argmax(spatial_energy(clip.channels, cand))]
    assert np.degrees(angular_distance(best, doa_oracle(clip))) < 10.0


def test_doa_oracle_noise_tolerance(rng):
    s = rng.normal(size=8000)
    d = random_directions(rng, 50)
    err = [np.degrees(angular_distance(doa_oracle(add_noise(encode_bformat(v, s), 10.0, rng)), v)) for v in d]
    assert max(err) < 10.0


def test_sed_decision_threshold():
    out = sed_decision(np.array([[0.51, 0.5], [0.0, 0.0]]))
    np.testing.assert_array_equal(out, [[True, False], [False, False]])


def test_encoder_shapes_and_ranges(rng):
    cfg = SeldConfig()
    enc = SeldEncoder(cfg, seed=3)
    for length in (896, 2000):
        feats = stft_features(AmbisonicClip(rng.normal(size=(4, length)), 8000), 256)
        out = enc(feats)
        t_a = feats.shape[0]
        assert out.sed.shape == (t_a, 2) and out.doa.shape == (t_a, 6)
        assert out.hidden.shape == (t_a, 2 * cfg.gru_width)
        assert np.all((out.sed.data >= 0) & (out.sed.data <= 1))
        assert np.all(np.abs(out.doa.data) <= 1)
        emb = enc.embeddings(feats)
        assert emb.g_sem.shape == emb.g_loc.shape == (cfg.fc_width, t_a)
    np.testing.assert_array_equal(enc(feats).sed.data, enc(feats).sed.data)


def test_pool_schedule_is_validated():
    with pytest.raises(ValueError, match="reduce"):
        SeldConfig(pools=(4, 4, 2))


def test_zero_input_embeddings_are_constant():
    enc = SeldEncoder(SeldConfig(), seed=5)
    feats = np.zeros((6, 128, 8))
    a = enc.embeddings(feats).g_sem.data
    b = enc.embeddings(feats).g_sem.data
    np.testing.assert_array_equal(a, b)


def test_encoder_gradients_tiny_config(rng):
    # P=4, Q=8, N=2, T_a=6
    with precision("f64"):
        cfg = SeldConfig(filters=4, gru_width=8, fc_width=8, n_classes=2)
        enc = SeldEncoder(cfg, seed=2)
        ex = make_seld_example(rng, 0, cfg, length=5 * 128 + 256)
        assert ex.features.shape[0] == 6
        x = enc.prepare(ex.features)
        params = enc.parameters()
        report = grad_check(lambda *_: seld_loss(enc(x), ex), params, max_coords=6, name="seld")
        assert report.passed, str(report)


def test_frame_activity_half_window_rule():
    active = np.zeros(512, dtype=bool)
    active[:192] = True
    # frames start at 0, 128, 256 with window 256
    np.testing.assert_array_equal(frame_activity(active, 256), [True, False, False])


def test_augmentation_matches_resynthesis(rng):
    cfg = SeldConfig()
    ex = make_seld_example(rng, 1, cfg, noise_floor=0.0)
    aug = augment_example(ex, np.random.default_rng(7))
    assert abs(np.linalg.norm(aug.direction) - 1) < 1e-12
    act = aug.sed_target[:, 1] > 0
    np.testing.assert_allclose(aug.doa_target[act, 3:], np.tile(aug.direction, (act.sum(), 1)))
    np.testing.assert_array_equal(aug.features[..., 0], ex.features[..., 0])


def test_wav_round_trip(tmp_path, rng):
    clip = AmbisonicClip(rng.uniform(-0.5, 0.5, size=(4, 300)).astype(np.float32), 8000)
    write_wav(tmp_path / "a.wav", clip)
    back = read_audio(tmp_path / "a.wav")
    np.testing.assert_array_equal(back.channels, clip.channels)
    write_wav(tmp_path / "p.wav", clip, pcm16=True)
    np.testing.assert_allclose(read_wav(tmp_path / "p.wav").channels, clip.channels, atol=1 / 16000)
    write_raw(tmp_path / "a.f32", clip)
    back = read_audio(tmp_path / "a.f32")
    np.testing.assert_array_equal(back.channels, clip.channels)
    assert back.sample_rate == 8000


def test_wrong_channel_count_is_typed_error(tmp_path):
    from scipy.io import wavfile

    wavfile.write(str(tmp_path / "st.wav"), 8000, np.zeros((100, 2), dtype=np.float32))
    with pytest.raises(AudioFormatError, match="expected 4 channels, found 2"):
        read_wav(tmp_path / "st.wav")
    (tmp_path / "r.f32").write_bytes(b"\0" * 16)
    (tmp_path / "r.f32.hdr").write_text("rate = 8000\nchannels = 2\nlength = 2\n")
    with pytest.raises(AudioFormatError, match="4 channels"):
        read_raw(tmp_path / "r.f32")


def test_pretrained_location_embedding_separates_opposite_sources(seld_run, rng):
    enc = seld_run["encoder"]
    s = rng.normal(size=6000)
    pos = extract_embeddings(encode_bformat((1.0, 0.0, 0.0), s), enc).g_loc.data
    neg = extract_embeddings(encode_bformat((-1.0, 0.0, 0.0), s), enc).g_loc.data
    assert np.linalg.norm(pos - neg) > 0.1 * np.linalg.norm(pos)


def test_pretraining_loss_decreases(seld_run):
    h = np.asarray(seld_run["history"][:10])
    smooth = np.convolve(h, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smooth) < 0)
