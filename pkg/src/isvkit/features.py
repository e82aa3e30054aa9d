"""Log-Mel filterbank front-end and WAV input."""

import wave
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, TooShortError

N_BANDS = 64
LOG_FLOOR = 1e-10


@dataclass
class FeatureMatrix:
    """``frames x bands`` log-Mel energies with framing metadata (in samples)."""

    data: np.ndarray
    window: int = 400
    hop: int = 160
    sample_rate: int = 16000

    @property
    def n_frames(self):
        return self.data.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def band_centers(n_bands=N_BANDS, sample_rate=16000):
    """Center frequency (Hz) of each triangular filter."""
    mels = np.linspace(0.0, hz_to_mel(sample_rate / 2), n_bands + 2)
    return mel_to_hz(mels[1:-1])


def mel_filterbank(n_bands, n_fft, sample_rate):
    """Triangular filters on the HTK Mel scale spanning 0 Hz to Nyquist, peak weight 1."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_bands + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs - lo) / (mid - lo)
    fall = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rise, fall))


def extract_melfbank(samples, sample_rate=16000, window=None, hop=None, n_bands=N_BANDS,
                     normalize=False):
    """Frame, window (Hamming) and Mel-integrate a waveform.

    ``window``/``hop`` are in samples and default to 25 ms / 10 ms. Energies
    are floored at 1e-10 before the log. With ``normalize`` the per-band
    utterance mean is removed.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    window = int(round(0.025 * sample_rate)) if window is None else int(window)
    hop = int(round(0.010 * sample_rate)) if hop is None else int(hop)
    if hop <= 0 or window < hop:
        raise DataError(f"need window >= hop > 0, got window={window} hop={hop}")
    if len(x) < window:
        raise TooShortError(f"waveform of {len(x)} samples is shorter than one window ({window})")
    n_fft = 1 << (window - 1).bit_length()
    n_frames = 1 + (len(x) - window) // hop
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(window)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_bands, n_fft, sample_rate).T
    feats = np.log(np.maximum(energies, LOG_FLOOR))
    fm = FeatureMatrix(feats, window=window, hop=hop, sample_rate=sample_rate)
    return mean_normalize(fm) if normalize else fm


def mean_normalize(features):
    """Subtract the per-band mean over frames. Accepts a FeatureMatrix or an array."""
    if isinstance(features, FeatureMatrix):
        return FeatureMatrix(mean_normalize(features.data), features.window, features.hop,
                             features.sample_rate)
    x = np.asarray(features)
    if x.shape[0] < 1:
        raise DataError("mean normalization needs at least one frame")
    return x - x.mean(axis=0, keepdims=True)


def read_wav(path):
    """Read 16-bit PCM mono WAV; returns ``(samples in [-1, 1), sample_rate)``."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit mono PCM")
        sr = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr


def write_wav(path, samples, sample_rate=16000):
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
