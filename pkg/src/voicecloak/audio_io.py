"""Mono waveform I/O: RIFF/WAVE reading and writing, resampling, noise injection.

Canonical internal rate is 16 kHz; files at other rates are accepted and can
be brought to the canonical rate with :func:`resample_linear`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INT16_FULL_SCALE = 32768
CANONICAL_RATE = 16000


class WavFormatError(ValueError):
    """Raised when a WAV file cannot be parsed or uses an unsupported layout."""


@dataclass
class Waveform:
    """Mono time-domain signal.

    samples are float64 amplitudes, nominally in [-1, 1]; the write path
    clamps, intermediate processing may exceed the range transiently.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _read_chunks(data: bytes, path: str) -> dict[str, bytes]:
    """Collect RIFF sub-chunks, keyed by chunk id."""
    if len(data) < 12:
        raise WavFormatError(f"{path}: truncated file, only {len(data)} bytes")
    if data[0:4] != b"RIFF":
        raise WavFormatError(f"{path}: bad container id {data[0:4]!r}, expected b'RIFF'")
    if data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: bad format id {data[8:12]!r}, expected b'WAVE'")
    chunks: dict[str, bytes] = {}
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4].decode("latin-1")
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(
                f"{path}: chunk {cid!r} declares {size} bytes but only "
                f"{len(body)} are present (truncated file)"
            )
        if cid not in chunks:
            chunks[cid] = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    return chunks


def read_wav(path) -> Waveform:
    """Read a mono RIFF/WAVE file (PCM 16-bit or IEEE float 32-bit).

    16-bit samples are scaled to [-1, 1) by dividing by 32768. Anything else
    (other encodings, multichannel audio) raises WavFormatError naming the
    offending header field.
    """
    raw = Path(path).read_bytes()
    chunks = _read_chunks(raw, str(path))
    if "fmt " not in chunks:
        raise WavFormatError(f"{path}: missing 'fmt ' chunk")
    if "data" not in chunks:
        raise WavFormatError(f"{path}: missing 'data' chunk")
    fmt = chunks["fmt "]
    if len(fmt) < 16:
        raise WavFormatError(f"{path}: 'fmt ' chunk too short ({len(fmt)} bytes)")
    format_code, channels, rate, _byte_rate, _block_align, bits = struct.unpack_from(
        "<HHIIHH", fmt, 0
    )
    if channels != 1:
        raise WavFormatError(
            f"{path}: channel count {channels} not supported, mono required"
        )
    if (format_code, bits) == (1, 16):
        dtype, scale = np.dtype("<i2"), 1.0 / INT16_FULL_SCALE
    elif (format_code, bits) == (3, 32):
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise WavFormatError(
            f"{path}: unsupported encoding (format code {format_code}, "
            f"{bits} bits per sample); need PCM16 or float32"
        )
    body = chunks["data"]
    if len(body) % dtype.itemsize:
        raise WavFormatError(
            f"{path}: data chunk size {len(body)} is not a multiple of the "
            f"{dtype.itemsize}-byte sample size (truncated file)"
        )
    samples = np.frombuffer(body, dtype=dtype).astype(np.float64) * scale
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    """Write PCM 16-bit mono.

    Samples are clamped to [-1, 1 - 1/32768] before quantization, so the
    read-back error is at most 1/32768 per sample.
    """
    clipped = np.clip(w.samples, -1.0, (INT16_FULL_SCALE - 1) / INT16_FULL_SCALE)
    quantized = np.rint(clipped * INT16_FULL_SCALE).astype("<i2")
    body = quantized.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(body),
        b"WAVE",
        b"fmt ",
        16,
        1,  # PCM
        1,  # mono
        w.sample_rate,
        w.sample_rate * 2,
        2,
        16,
        b"data",
        len(body),
    )
    Path(path).write_bytes(header + body)


def resample_linear(w: Waveform, target_rate: int) -> Waveform:
    """Resample by linear interpolation between neighboring input samples.

    Equal source and target rates return the input unchanged. Adequate for
    speech at this scale; no anti-aliasing filter is applied, which limits
    quality when downsampling wideband material.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(round(len(w.samples) * target_rate / w.sample_rate))
    if n_out == 0 or len(w.samples) == 0:
        return Waveform(np.zeros(0), target_rate)
    positions = np.arange(n_out) * (w.sample_rate / target_rate)
    resampled = np.interp(positions, np.arange(len(w.samples)), w.samples)
    return Waveform(resampled, target_rate)


def add_gaussian_noise(w: Waveform, target_snr_db: float = 32.0, seed: int = 0) -> Waveform:
    """Add zero-mean white Gaussian noise at an exact signal-to-noise ratio.

    The noise is scaled from its realized energy, so
    10*log10(sum(w^2) / sum(n^2)) equals target_snr_db by construction.
    Deterministic for a given seed.
    """
    if not math.isfinite(target_snr_db):
        raise ValueError(f"target_snr_db must be finite, got {target_snr_db}")
    signal_energy = float(np.sum(w.samples**2))
    if signal_energy == 0.0:
        raise ValueError("cannot set an SNR against a zero-energy signal")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(len(w.samples))
    noise_energy = float(np.sum(noise**2))
    scale = math.sqrt(signal_energy / (noise_energy * 10.0 ** (target_snr_db / 10.0)))
    return Waveform(w.samples + scale * noise, w.sample_rate)
