"""Synthetic labeled corpora and training-segment sampling.

Corpora are emitted directly as feature matrices: every speaker is a small
mixture of Gaussians around a speaker-specific mean, each utterance gets a
random channel offset, and frames add white noise.  Separation between
speaker means controls task difficulty; a separation of zero makes all
speakers identically distributed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SyntheticCorpusSpec:
    n_speakers: int = 8
    utts_per_speaker: int = 10
    utterance_s: float = 6.0
    feature_dim: int = 23
    frame_shift_ms: float = 10.0
    separation: float = 1.0
    mixture_components: int = 4
    mixture_spread: float = 0.5
    channel_scale: float = 0.2
    noise_scale: float = 1.0
    seed: int = 0
    speaker_prefix: str = "spk"

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if self.utts_per_speaker < 1 or self.mixture_components < 1:
            raise ValueError("need at least one utterance and mixture component")


def generate_synthetic_corpus(spec: SyntheticCorpusSpec):
    """Deterministic labeled corpus: (features by utterance id, utt2spk)."""
    rng = np.random.default_rng(spec.seed)
    n_frames = int(round(spec.utterance_s * 1000.0 / spec.frame_shift_ms))
    d = spec.feature_dim
    # One mixture shape shared by all speakers; only the mean shifts per
    # speaker, so separation 0 leaves every speaker identically distributed.
    shared_offsets = spec.mixture_spread * rng.standard_normal(
        (spec.mixture_components, d))
    features: dict[str, np.ndarray] = {}
    utt2spk: dict[str, str] = {}
    for s in range(spec.n_speakers):
        spk = f"{spec.speaker_prefix}{s:03d}"
        speaker_mean = spec.separation * rng.standard_normal(d)
        comp_means = speaker_mean + shared_offsets
        for u in range(spec.utts_per_speaker):
            utt = f"{spk}-utt{u:03d}"
            channel = spec.channel_scale * rng.standard_normal(d)
            comps = rng.integers(spec.mixture_components, size=n_frames)
            frames = (comp_means[comps] + channel
                      + spec.noise_scale * rng.standard_normal((n_frames, d)))
            features[utt] = frames.astype(np.float32).astype(np.float64)
            utt2spk[utt] = spk
    return features, utt2spk


def sample_segment(features: np.ndarray, range_s: tuple[float, float],
                   rng: np.random.Generator, frame_shift_ms: float = 10.0) -> np.ndarray:
    """Uniformly placed contiguous slice of uniformly drawn duration.

    Durations are drawn as whole frame counts within ``range_s`` and capped
    at the utterance length.
    """
    values = features.values if hasattr(features, "values") else np.asarray(features)
    t = values.shape[0]
    min_frames = max(1, int(round(range_s[0] * 1000.0 / frame_shift_ms)))
    max_frames = max(min_frames, int(round(range_s[1] * 1000.0 / frame_shift_ms)))
    if t < min_frames:
        raise ValueError(
            f"utterance shorter than minimum segment: {t} < {min_frames} frames")
    length = int(rng.integers(min_frames, min(max_frames, t) + 1))
    start = int(rng.integers(0, t - length + 1))
    return values[start : start + length]


def segment_frame_bounds(range_s: tuple[float, float], frame_shift_ms: float) -> tuple[int, int]:
    min_frames = max(1, int(round(range_s[0] * 1000.0 / frame_shift_ms)))
    max_frames = max(min_frames, int(round(range_s[1] * 1000.0 / frame_shift_ms)))
    return min_frames, max_frames
