"""Acoustic frontend: MFCC extraction, energy VAD and sliding-window CMN.

Converts raw audio into voiced, mean-normalized cepstral feature matrices.
The defaults target telephone-band speech (any sample rate works): 25 ms
frames at a 10 ms shift, 23 triangular mel filters between 20 Hz and
Nyquist, 23 cepstra with the zeroth coefficient kept as an energy proxy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
from scipy.io import wavfile

LOG_FLOOR = 1e-10
MEL_LOW_HZ = 20.0


@dataclass
class Waveform:
    """Mono audio signal with amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("invalid signal: sample rate must be positive")


@dataclass
class FrontendConfig:
    """Frame, filterbank, normalization and VAD settings.

    ``vad_energy_offset`` shifts the speech threshold relative to the mean
    log energy of the utterance; 0 keeps frames above the mean.
    """

    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    preemphasis: float = 0.97
    n_mel_filters: int = 23
    n_cepstra: int = 23
    cmn_window_s: float = 3.0
    vad_energy_offset: float = 0.0

    def __post_init__(self):
        if not (self.frame_length_ms > self.frame_shift_ms > 0):
            raise ValueError("frame_length_ms must exceed frame_shift_ms, both positive")
        if self.n_cepstra > self.n_mel_filters:
            raise ValueError("n_cepstra must not exceed n_mel_filters")
        if self.cmn_window_s <= 0:
            raise ValueError("cmn_window_s must be positive")


@dataclass
class FeatureMatrix:
    """Frames-by-dimension feature sequence plus its frame shift."""

    values: np.ndarray
    frame_shift_ms: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file, scaling samples to [-1, 1]."""
    rate, data = wavfile.read(path)
    if data.dtype != np.int16:
        raise ValueError(f"invalid signal: expected 16-bit PCM, got {data.dtype}")
    if data.ndim != 1:
        raise ValueError("invalid signal: expected mono audio")
    return Waveform(data.astype(np.float64) / 32768.0, int(rate))


def write_wav(path, waveform: Waveform):
    """Write a waveform as 16-bit PCM mono."""
    clipped = np.clip(waveform.samples, -1.0, 1.0)
    wavfile.write(path, waveform.sample_rate, (clipped * 32767.0).astype(np.int16))


def frame_count(n_samples: int, frame_len: int, frame_shift: int) -> int:
    """Number of full analysis frames: floor((N - len) / shift) + 1."""
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // frame_shift + 1


def mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def inverse_mel_scale(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, n_fft: int, sample_rate: int,
                   low_hz: float = MEL_LOW_HZ, high_hz: float | None = None) -> np.ndarray:
    """Triangular mel filterbank weights of shape (n_filters, n_fft//2 + 1).

    Filter edges are spaced uniformly on the mel scale between ``low_hz``
    and ``high_hz`` (Nyquist when omitted); weights are evaluated at the
    continuous bin frequencies, so no filter collapses to zero width.
    """
    if high_hz is None:
        high_hz = sample_rate / 2.0
    mel_points = np.linspace(mel_scale(low_hz), mel_scale(high_hz), n_filters + 2)
    hz_points = inverse_mel_scale(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    weights = np.zeros((n_filters, n_fft // 2 + 1))
    for m in range(n_filters):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
    return weights


def filterbank_ranges(n_filters: int, sample_rate: int,
                      low_hz: float = MEL_LOW_HZ, high_hz: float | None = None) -> list[tuple[float, float]]:
    """(left, right) edge frequencies in Hz of each triangular filter."""
    if high_hz is None:
        high_hz = sample_rate / 2.0
    mel_points = np.linspace(mel_scale(low_hz), mel_scale(high_hz), n_filters + 2)
    hz_points = inverse_mel_scale(mel_points)
    return [(hz_points[m], hz_points[m + 2]) for m in range(n_filters)]


def _fft_size(frame_len: int) -> int:
    n = 1
    while n < frame_len:
        n *= 2
    return n


def compute_mfcc(waveform: Waveform, cfg: FrontendConfig | None = None) -> FeatureMatrix:
    """Mel-frequency cepstra of a waveform.

    Pipeline: pre-emphasis -> Hamming window -> magnitude spectrum ->
    mel filterbank -> log (floored) -> orthonormal DCT-II.  The zeroth
    cepstrum is retained as a log-energy proxy in column 0.

    Raises ValueError for non-finite samples ("invalid signal") or a
    waveform shorter than one frame ("input too short").
    """
    if cfg is None:
        cfg = FrontendConfig()
    samples = waveform.samples
    if samples.ndim != 1:
        raise ValueError("invalid signal: expected a 1-D sample sequence")
    if not np.all(np.isfinite(samples)):
        raise ValueError("invalid signal: non-finite samples")
    rate = waveform.sample_rate
    frame_len = int(round(cfg.frame_length_ms * rate / 1000.0))
    frame_shift = int(round(cfg.frame_shift_ms * rate / 1000.0))
    n_frames = frame_count(samples.size, frame_len, frame_shift)
    if n_frames < 1:
        raise ValueError(f"input too short: {samples.size} samples < one {frame_len}-sample frame")

    if cfg.preemphasis > 0:
        emphasized = np.concatenate([samples[:1], samples[1:] - cfg.preemphasis * samples[:-1]])
    else:
        emphasized = samples
    starts = np.arange(n_frames) * frame_shift
    frames = np.stack([emphasized[s : s + frame_len] for s in starts])
    frames = frames * np.hamming(frame_len)

    n_fft = _fft_size(frame_len)
    magnitude = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    fbank = mel_filterbank(cfg.n_mel_filters, n_fft, rate)
    energies = magnitude @ fbank.T
    log_energies = np.log(np.maximum(energies, LOG_FLOOR))
    cepstra = scipy.fft.dct(log_energies, type=2, norm="ortho", axis=1)[:, : cfg.n_cepstra]
    return FeatureMatrix(cepstra, cfg.frame_shift_ms)


def energy_vad(features: FeatureMatrix, cfg: FrontendConfig | None = None) -> np.ndarray:
    """Boolean speech mask from the log-energy column.

    A frame counts as speech when column 0 exceeds the utterance mean plus
    ``vad_energy_offset``.  The loudest frame is always retained so that
    degenerate utterances keep at least one frame.
    """
    if cfg is None:
        cfg = FrontendConfig()
    energy = features.values[:, 0]
    threshold = energy.mean() + cfg.vad_energy_offset
    mask = energy > threshold
    mask[int(np.argmax(energy))] = True
    return mask


def sliding_cmn(features: FeatureMatrix, cfg: FrontendConfig | None = None) -> FeatureMatrix:
    """Subtract a sliding per-dimension mean from every frame.

    The window holds ``cmn_window_s`` worth of frames, centered on the
    current frame and pinned inside the utterance at the edges; utterances
    shorter than the window get plain global mean subtraction (which makes
    the op idempotent there).
    """
    if cfg is None:
        cfg = FrontendConfig()
    values = features.values
    t = values.shape[0]
    window = int(round(cfg.cmn_window_s * 1000.0 / features.frame_shift_ms))
    window = max(1, min(window, t))
    half = window // 2
    cumsum = np.vstack([np.zeros((1, values.shape[1])), np.cumsum(values, axis=0)])
    out = np.empty_like(values)
    for i in range(t):
        start = min(max(i - half, 0), t - window)
        mean = (cumsum[start + window] - cumsum[start]) / window
        out[i] = values[i] - mean
    return FeatureMatrix(out, features.frame_shift_ms)


def voiced_features(waveform: Waveform, cfg: FrontendConfig | None = None,
                    apply_vad: bool = True, apply_cmn: bool = True) -> FeatureMatrix:
    """Full frontend: MFCC, then VAD frame selection, then sliding CMN.

    Selecting voiced frames before normalization keeps the surviving
    frames' values independent of any discarded silence.
    """
    if cfg is None:
        cfg = FrontendConfig()
    feats = compute_mfcc(waveform, cfg)
    if apply_vad:
        mask = energy_vad(feats, cfg)
        feats = FeatureMatrix(feats.values[mask], feats.frame_shift_ms)
    if apply_cmn:
        feats = sliding_cmn(feats, cfg)
    return feats
