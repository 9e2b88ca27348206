"""Evaluation machinery: SNR, embedding distance, trial scoring, EER.

Scoring convention: a trial score is the plain cosine similarity between
the enrollment and test embeddings, so higher means "same speaker". An
EER above 0.5 therefore signals inverted score polarity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import Waveform
from .encoder import cosine_loss

SNR_DENOM_FLOOR = 1e-300
VALID_LABELS = ("target", "nontarget")


class TrialFormatError(ValueError):
    """Raised for malformed trial files."""


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str


def snr_db(ref: Waveform, test: Waveform) -> float:
    """10*log10(ref energy / error energy), trimmed to the common length.

    Returns float('inf') when the error energy underflows (identical
    signals). Raises on a zero-energy reference or mismatched rates.
    """
    if ref.sample_rate != test.sample_rate:
        raise ValueError(f"sample rates differ: {ref.sample_rate} vs {test.sample_rate}")
    n = min(len(ref.samples), len(test.samples))
    if n == 0:
        raise ValueError("empty signal")
    r = ref.samples[:n]
    signal_energy = float(np.sum(r**2))
    if signal_energy == 0.0:
        raise ValueError("zero-energy reference signal")
    error_energy = float(np.sum((r - test.samples[:n]) ** 2))
    if error_energy < SNR_DENOM_FLOOR:
        return float("inf")
    return 10.0 * np.log10(signal_energy / error_energy)


def delta_cosd(e: np.ndarray, e_tilde: np.ndarray) -> float:
    """Embedding distance in [-1, 1]: -1 identical, higher = less similar."""
    return cosine_loss(e, e_tilde)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    return -cosine_loss(a, b)


def parse_trials(path) -> list[Trial]:
    """Parse a trial file: one `enroll test label` triple per line.

    Labels are case-insensitive target/nontarget; fields are whitespace
    separated; blank lines are skipped. Malformed lines are rejected with
    their line number.
    """
    trials: list[Trial] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            fields = stripped.split()
            if len(fields) != 3:
                raise TrialFormatError(
                    f"{path}:{lineno}: expected 3 fields (enroll test label),"
                    f" got {len(fields)}: {stripped!r}"
                )
            enroll, test, label = fields
            if label.lower() not in VALID_LABELS:
                raise TrialFormatError(
                    f"{path}:{lineno}: label must be target or nontarget, got {label!r}"
                )
            trials.append(Trial(enroll, test, label.lower()))
    if not trials:
        raise TrialFormatError(f"{path}: no trials found")
    return trials


def format_trials(trials: list[Trial]) -> str:
    return "".join(f"{t.enroll_id} {t.test_id} {t.label}\n" for t in trials)


def score_trials(
    trials: list[Trial],
    enroll_embeddings: dict[str, np.ndarray],
    test_embeddings: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Cosine similarity per trial, aligned with the trial list order.

    With a single embedding map, both sides look up the same map. Missing
    keys are reported by name.
    """
    if test_embeddings is None:
        test_embeddings = enroll_embeddings
    scores = np.zeros(len(trials))
    for i, t in enumerate(trials):
        if t.enroll_id not in enroll_embeddings:
            raise KeyError(f"enrollment key {t.enroll_id!r} missing from embeddings")
        if t.test_id not in test_embeddings:
            raise KeyError(f"test key {t.test_id!r} missing from embeddings")
        scores[i] = cosine_similarity(enroll_embeddings[t.enroll_id], test_embeddings[t.test_id])
    return scores


def _operating_points(target_scores: np.ndarray, nontarget_scores: np.ndarray):
    """FAR/FRR at each candidate threshold: all scores plus one beyond max.

    FAR(t) counts nontargets >= t, FRR(t) counts targets < t; both are
    step functions that only change at score values, so this sweep visits
    every achievable operating point.
    """
    thresholds = np.unique(np.concatenate([target_scores, nontarget_scores]))
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    far = np.array([np.mean(nontarget_scores >= t) for t in thresholds])
    frr = np.array([np.mean(target_scores < t) for t in thresholds])
    return thresholds, far, frr


def compute_eer(target_scores, nontarget_scores) -> tuple[float, float]:
    """Equal error rate and its threshold from raw trial scores.

    Sweeps every distinct operating point and linearly interpolates
    between the two adjacent points where FAR - FRR changes sign. The
    result is a fraction; values above 0.5 indicate inverted polarity.
    """
    target_scores = np.asarray(target_scores, dtype=np.float64)
    nontarget_scores = np.asarray(nontarget_scores, dtype=np.float64)
    if target_scores.size == 0 or nontarget_scores.size == 0:
        raise ValueError("need at least one target and one nontarget score")
    thresholds, far, frr = _operating_points(target_scores, nontarget_scores)
    diff = far - frr  # monotone nonincreasing in the threshold
    k = int(np.argmax(diff <= 0.0))
    if k == 0:
        return float(far[0]), float(thresholds[0])
    t = diff[k - 1] / (diff[k - 1] - diff[k])
    eer = far[k - 1] + t * (far[k] - far[k - 1])
    threshold = thresholds[k - 1] + t * (thresholds[k] - thresholds[k - 1])
    return float(eer), float(threshold)


def _speaker_key(key: str, separator: str = "-") -> str:
    return key.split(separator, 1)[0]


def average_by_speaker(
    embeddings: dict[str, np.ndarray], separator: str = "-"
) -> dict[str, np.ndarray]:
    """Average utterance embeddings per speaker prefix (text before the
    first separator; keys without one form their own group)."""
    groups: dict[str, list[np.ndarray]] = {}
    for key in sorted(embeddings):
        groups.setdefault(_speaker_key(key, separator), []).append(embeddings[key])
    return {spk: np.mean(vecs, axis=0) for spk, vecs in groups.items()}


def similarity_matrix(
    rows: dict[str, np.ndarray],
    cols: dict[str, np.ndarray],
    speaker_level: bool = False,
) -> tuple[np.ndarray, list[str], list[str]]:
    """Cosine similarity between two embedding collections.

    Returns (matrix, row_keys, col_keys) with keys sorted. speaker_level
    first averages each side's embeddings by speaker prefix.
    """
    if not rows or not cols:
        raise ValueError("embedding maps must be nonempty")
    if speaker_level:
        rows = average_by_speaker(rows)
        cols = average_by_speaker(cols)
    row_keys = sorted(rows)
    col_keys = sorted(cols)
    matrix = np.zeros((len(row_keys), len(col_keys)))
    for i, rk in enumerate(row_keys):
        for j, ck in enumerate(col_keys):
            matrix[i, j] = cosine_similarity(rows[rk], cols[ck])
    return matrix, row_keys, col_keys


def write_similarity_csv(path, matrix: np.ndarray, row_keys: list[str], col_keys: list[str]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + col_keys)
        for key, row in zip(row_keys, matrix):
            writer.writerow([key] + [f"{v:.12g}" for v in row])


def read_similarity_csv(path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        col_keys = header[1:]
        row_keys = []
        values = []
        for record in reader:
            row_keys.append(record[0])
            values.append([float(v) for v in record[1:]])
    return np.array(values), row_keys, col_keys
