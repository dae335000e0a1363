import filecmp
import shutil

import numpy as np
import pytest
from PIL import Image

from avprompt.core import SAMPLE_RATE, default_config, validate_clip
from avprompt.datasets import (
    CIRCLE_HZ,
    SQUARE_HZ,
    AugmentConfig,
    CorruptAudioError,
    CountMismatchError,
    MissingFileError,
    augment,
    build_manifest,
    load_dataset,
    read_wav,
    synth_generate,
    write_wav,
)
from avprompt.encoders import tokenize

from .conftest import make_clip


@pytest.fixture
def synth(tmp_path):
    synth_generate(tmp_path, 2, B=2, seed=0, expression="the sounding shape")
    return tmp_path


def test_round_trip(synth, cfg):
    clips = list(load_dataset(synth, "train", cfg, tokenizer=lambda s: tokenize(s, cfg.text_vocab)))
    assert len(clips) == 2
    for c in clips:
        assert validate_clip(c, cfg).ok
        assert c.frames.shape == (2, 64, 64, 3) and c.masks.shape == (2, 64, 64)
        assert c.waveform.shape == (2 * SAMPLE_RATE, 2)
        assert c.text_tokens and all(0 <= t < cfg.text_vocab for t in c.text_tokens)
        assert set(np.unique(c.masks)) <= {0, 1}


def test_missing_mask_names_clip_and_path(synth, cfg):
    victim = synth / "train" / "clip_00001" / "masks" / "00001.png"
    victim.unlink()
    with pytest.raises(MissingFileError) as info:
        list(load_dataset(synth, "train", cfg))
    assert "clip_00001" in str(info.value) and str(victim) in str(info.value)


def test_extra_mask_is_count_mismatch(synth):
    masks = synth / "train" / "clip_00000" / "masks"
    shutil.copy(masks / "00000.png", masks / "00007.png")
    with pytest.raises(CountMismatchError):
        build_manifest(synth, "train")


def test_corrupt_audio(synth, cfg):
    (synth / "train" / "clip_00000" / "audio.wav").write_bytes(b"not a wav file")
    with pytest.raises(CorruptAudioError) as info:
        list(load_dataset(synth, "train", cfg))
    assert "clip_00000" in str(info.value)


def test_short_audio_is_corrupt(synth, cfg):
    write_wav(synth / "train" / "clip_00000" / "audio.wav", np.zeros((SAMPLE_RATE // 2, 2)))
    with pytest.raises(CorruptAudioError):
        list(load_dataset(synth, "train", cfg))


def test_resize_and_binarize(tmp_path, cfg):
    synth_generate(tmp_path, 1, B=1, resolution=128, seed=3)
    clip = next(load_dataset(tmp_path, "train", cfg))
    assert clip.frames.shape == (1, 64, 64, 3)
    assert set(np.unique(clip.masks)) <= {0, 1}


def test_wav_resampled_to_16k(tmp_path):
    from scipy.io import wavfile

    t = np.arange(8000) / 8000
    wavfile.write(tmp_path / "a.wav", 8000, (0.5 * np.sin(2 * np.pi * 440 * t) * 32767).astype(np.int16))
    wave = read_wav(tmp_path / "a.wav")
    assert wave.shape == (16000, 2)


def test_same_seed_is_bit_identical(tmp_path):
    a = synth_generate(tmp_path / "a", 3, seed=7)
    b = synth_generate(tmp_path / "b", 3, seed=7)
    for clip_dir in sorted(a.iterdir()):
        other = b / clip_dir.name
        for f in sorted(clip_dir.rglob("*")):
            if f.is_file():
                assert filecmp.cmp(f, other / f.relative_to(clip_dir), shallow=False)


def test_generator_contract(tmp_path, cfg):
    synth_generate(tmp_path, 4, B=3, seed=1)
    for c in load_dataset(tmp_path, "train", cfg):
        assert c.num_frames == 3 and c.masks.shape[0] == 3
        assert c.masks.reshape(3, -1).any(1).all()


def test_rejects_bad_resolution(tmp_path):
    with pytest.raises(ValueError):
        synth_generate(tmp_path, 1, resolution=60)


def _peak_hz(wave):
    mono = wave.mean(axis=1)
    spec = np.abs(np.fft.rfft(mono))
    return np.fft.rfftfreq(len(mono), 1 / SAMPLE_RATE)[spec.argmax()]


def _shape_of(mask):
    # a disc fills about pi/4 of its bounding box, an axis-aligned square all of it
    ys, xs = np.nonzero(mask)
    box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    return "square" if mask.sum() / box > 0.9 else "circle"


def test_tone_identifies_gt_shape(tmp_path, cfg):
    synth_generate(tmp_path, 20, B=2, seed=2)
    for c in load_dataset(tmp_path, "train", cfg):
        hz = _peak_hz(c.waveform)
        expected = "circle" if abs(hz - CIRCLE_HZ) < abs(hz - SQUARE_HZ) else "square"
        assert abs(hz - CIRCLE_HZ) < 2 or abs(hz - SQUARE_HZ) < 2
        for m in c.masks:
            assert _shape_of(m) == expected


def test_pairing_not_fixed(tmp_path, cfg):
    synth_generate(tmp_path, 20, B=1, seed=4)
    shapes = {_shape_of(c.masks[0]) for c in load_dataset(tmp_path, "train", cfg)}
    assert shapes == {"circle", "square"}


def test_augment_identity_when_disabled():
    clip = make_clip(1)
    out = augment(clip, 3, AugmentConfig.off())
    assert np.array_equal(out.frames, clip.frames) and np.array_equal(out.masks, clip.masks)


def test_augment_deterministic():
    clip = make_clip(1)
    a, b = augment(clip, 11), augment(clip, 11)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.masks, b.masks)


def test_flip_mirrors_masks_and_frames():
    clip = make_clip(1)
    out = augment(clip, 0, AugmentConfig(0.0, 0.0, 1.0, 0.0))
    W = clip.masks.shape[-1]
    for b in range(clip.num_frames):
        ys, xs = np.nonzero(clip.masks[b])
        assert np.array_equal(out.masks[b][ys, W - 1 - xs], np.ones(len(ys), dtype=out.masks.dtype))
        assert out.masks[b].sum() == clip.masks[b].sum()
        assert np.allclose(out.frames[b], clip.frames[b][:, ::-1])
    assert np.array_equal(out.waveform, clip.waveform)


def test_grayscale_and_range():
    clip = make_clip(1)
    out = augment(clip, 0, AugmentConfig(1.0, 1.0, 0.0, 1.0))
    assert np.allclose(out.frames[..., 0], out.frames[..., 1])
    assert out.frames.min() >= 0 and out.frames.max() <= 1
    assert np.array_equal(out.masks, clip.masks)
