import numpy as np
import pytest
from scipy.io import wavfile

from bsast.audio_io import read_foa, read_wav, write_wav
from bsast.errors import CorpusError, FormatError


def test_float_round_trip(tmp_path, rng):
    x = rng.uniform(-0.9, 0.9, (4, 200))
    write_wav(tmp_path / "a.wav", x, 8000)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 8000 and y.shape == (4, 200)
    assert np.max(np.abs(y - x)) < 1e-7


def test_pcm16_scaling(tmp_path):
    wavfile.write(tmp_path / "p.wav", 16000, np.array([0, 16384, -32768], dtype=np.int16))
    y, sr = read_wav(tmp_path / "p.wav")
    assert sr == 16000
    assert np.allclose(y[0], [0, 0.5, -1.0])


def test_read_foa_mono(tmp_path):
    write_wav(tmp_path / "m.wav", np.zeros(10), 8000)
    w = read_foa(tmp_path / "m.wav")
    assert w.channels == 1 and w.sample_rate == 8000


def test_missing_file_names_path(tmp_path):
    with pytest.raises(OSError, match="nope.wav"):
        read_wav(tmp_path / "nope.wav")


def test_garbage_file(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"not a wav file")
    with pytest.raises((FormatError, CorpusError)):
        read_wav(tmp_path / "bad.wav")
