"""Adversarial speaker protection: perturb speech so embedding encoders misjudge it."""

from .attack import AttackConfig, AttackResult, ProtectionReport, fgsm, ifgsm, protect_utterance
from .audio_io import Waveform, add_gaussian_noise, read_wav, resample_linear, write_wav
from .encoder import (
    EncoderConfig,
    WeightStore,
    cosine_loss,
    forward,
    init_random,
    load_weights,
    save_weights,
)
from .metrics import compute_eer, delta_cosd, parse_trials, score_trials, similarity_matrix, snr_db
from .spectral import MelFeatures, Spectrogram, StftConfig, istft, log_mel, mel_matrix, stft

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackResult",
    "EncoderConfig",
    "MelFeatures",
    "ProtectionReport",
    "Spectrogram",
    "StftConfig",
    "Waveform",
    "WeightStore",
    "add_gaussian_noise",
    "compute_eer",
    "cosine_loss",
    "delta_cosd",
    "fgsm",
    "forward",
    "ifgsm",
    "init_random",
    "istft",
    "load_weights",
    "log_mel",
    "mel_matrix",
    "parse_trials",
    "protect_utterance",
    "read_wav",
    "resample_linear",
    "save_weights",
    "score_trials",
    "similarity_matrix",
    "snr_db",
    "stft",
    "write_wav",
]
