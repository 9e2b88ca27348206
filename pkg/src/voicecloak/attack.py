"""FGSM and I-FGSM perturbation of STFT magnitudes under an L-infinity budget.

The single-step attack moves every magnitude entry by epsilon times the
sign of the loss gradient; the iterative variant takes alpha-sized sign
steps and projects back into the epsilon-band around the original
magnitude after each step (and onto the nonnegative orthant, since a
magnitude below zero has no meaning for magnitude/phase resynthesis).
The loss being ascended is the negative cosine similarity between the
reference embedding (extracted once from the clean signal and then held
fixed) and the embedding of the current iterate.

`protect_utterance` wires the whole pipeline: analyze, perturb the
magnitude, resynthesize with the original phase, and report the realized
SNR and the embedding distance recomputed from the re-analyzed protected
audio. That re-analysis matters: perturbed magnitude with reused phase is
not a consistent STFT, so the distance that counts downstream is the one
measured on the actual output waveform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio_io import Waveform, add_gaussian_noise
from .encoder import WeightStore, cosine_loss, cosine_loss_grad, forward, backward
from .metrics import snr_db
from .spectral import StftConfig, istft, log_mel, log_mel_backward, mel_matrix, stft

CANONICAL_RATE = 16000
BUDGET_SLACK = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """Perturbation budget and schedule.

    epsilon bounds |adv - original| per magnitude entry; alpha is the
    per-iteration step. The defaults run 50 iterations of 0.0004, so the
    total per-entry movement is capped at exactly epsilon.
    """

    epsilon: float = 0.02
    alpha: float = 0.0004
    iterations: int = 50
    clamp_nonnegative: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.iterations > 1 and not 0 < self.alpha <= self.epsilon:
            raise ValueError(
                f"iterative schedule needs 0 < alpha <= epsilon,"
                f" got alpha={self.alpha}, epsilon={self.epsilon}"
            )


@dataclass
class AttackResult:
    """Outcome of a magnitude-domain attack.

    loss_trajectory holds the loss at every iterate x0..xI (I+1 values,
    the last one evaluated after the final update). delta_cosd_final is
    the trajectory endpoint, i.e. the embedding distance measured at the
    magnitude level; the waveform-level pipeline overwrites it with the
    value recomputed from re-analyzed audio.
    """

    adv_magnitude: np.ndarray
    loss_trajectory: list[float]
    delta_cosd_final: float


@dataclass
class ProtectionReport:
    """Per-utterance summary emitted by `protect_utterance`."""

    method: str
    snr_db: float
    delta_cosd: float
    loss_trajectory: list[float] = field(default_factory=list)


def sign_matrix(g: np.ndarray) -> np.ndarray:
    """Entrywise sign with sign(0) = 0."""
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite entries")
    return np.sign(g)


def clip_linf(
    x_tilde: np.ndarray, x: np.ndarray, epsilon: float, clamp_nonnegative: bool = True
) -> np.ndarray:
    """Project onto the epsilon-band around x, then onto [0, inf)."""
    if x_tilde.shape != x.shape:
        raise ValueError(f"shape mismatch: {x_tilde.shape} vs {x.shape}")
    out = np.clip(x_tilde, x - epsilon, x + epsilon)
    if clamp_nonnegative:
        out = np.maximum(out, 0.0)
    return out


def _features(x_tilde: np.ndarray, mel: np.ndarray, ws: WeightStore):
    return log_mel(x_tilde, mel)


def compute_loss(
    x_tilde: np.ndarray, mel: np.ndarray, ws: WeightStore, e_ref: np.ndarray
) -> float:
    """Loss only (no gradient): negative cosine between e_ref and f(x_tilde)."""
    embedding, _ = forward(_features(x_tilde, mel, ws), ws)
    return cosine_loss(e_ref, embedding)


def loss_and_grad(
    x_tilde: np.ndarray, mel: np.ndarray, ws: WeightStore, e_ref: np.ndarray
) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient with respect to the magnitude matrix.

    Composes log-mel -> encoder -> cosine loss forward, then reverses the
    chain. e_ref must be precomputed from the original magnitude and held
    fixed across iterations.
    """
    feat = _features(x_tilde, mel, ws)
    embedding, cache = forward(feat, ws)
    loss = cosine_loss(e_ref, embedding)
    grad_feat = backward(cache, cosine_loss_grad(e_ref, embedding))
    return loss, log_mel_backward(grad_feat, x_tilde, mel)


def _mel_for(x: np.ndarray, ws: WeightStore, sample_rate: int = CANONICAL_RATE) -> np.ndarray:
    fft_size = (x.shape[1] - 1) * 2
    return mel_matrix(fft_size, ws.config.n_mels, sample_rate)


def ifgsm(
    x: np.ndarray, ws: WeightStore, e_ref: np.ndarray, cfg: AttackConfig = AttackConfig()
) -> AttackResult:
    """Iterative sign-gradient ascent, projected into the epsilon-band.

    When e_ref equals the embedding of x itself, the cosine loss is
    stationary at the start and the computed gradient can round to an
    exactly zero matrix; a sign step of all ones is substituted in that
    case so the iteration can leave the plateau deterministically.
    """
    mel = _mel_for(x, ws)
    x_tilde = x.copy()
    trajectory: list[float] = []
    for _ in range(cfg.iterations):
        loss, grad = loss_and_grad(x_tilde, mel, ws, e_ref)
        trajectory.append(loss)
        step_sign = sign_matrix(grad)
        if not step_sign.any():
            step_sign = np.ones_like(x_tilde)
        x_tilde = clip_linf(x_tilde + cfg.alpha * step_sign, x, cfg.epsilon, cfg.clamp_nonnegative)
    trajectory.append(compute_loss(x_tilde, mel, ws, e_ref))
    return AttackResult(
        adv_magnitude=x_tilde,
        loss_trajectory=trajectory,
        delta_cosd_final=trajectory[-1],
    )


def fgsm(
    x: np.ndarray,
    ws: WeightStore,
    e_ref: np.ndarray,
    epsilon: float = 0.02,
    clamp_nonnegative: bool = True,
) -> AttackResult:
    """Single-step attack: one full-budget sign step.

    Implemented as the one-iteration schedule with alpha = epsilon, which
    it equals bit for bit.
    """
    cfg = AttackConfig(
        epsilon=epsilon, alpha=epsilon, iterations=1, clamp_nonnegative=clamp_nonnegative
    )
    return ifgsm(x, ws, e_ref, cfg)


def protect_utterance(
    w: Waveform,
    ws: WeightStore,
    cfg: AttackConfig = AttackConfig(),
    method: str = "ifgsm",
    stft_config: StftConfig = StftConfig(),
    target_snr_db: float = 32.0,
    seed: int = 0,
) -> tuple[Waveform, ProtectionReport]:
    """Protect one utterance end to end.

    fgsm/ifgsm: analyze, attack the magnitude, resynthesize with the
    original phase. gaussian: bypass the gradient path entirely and add
    white noise at target_snr_db in the time domain (the baseline).
    The report's delta_cosd is always recomputed from the re-analyzed
    protected waveform, and the output length always equals the input's.
    """
    if w.sample_rate != CANONICAL_RATE:
        raise ValueError(
            f"expected {CANONICAL_RATE} Hz input, got {w.sample_rate} Hz; resample first"
        )
    if method not in ("fgsm", "ifgsm", "gaussian"):
        raise ValueError(f"unknown method {method!r}")

    spec = stft(w, stft_config)
    mel = mel_matrix(stft_config.fft_size, ws.config.n_mels, CANONICAL_RATE)
    e_ref, _ = forward(log_mel(spec.magnitude, mel), ws)

    trajectory: list[float] = []
    if method == "gaussian":
        protected = add_gaussian_noise(w, target_snr_db, seed)
    else:
        if method == "fgsm":
            result = fgsm(spec.magnitude, ws, e_ref, cfg.epsilon, cfg.clamp_nonnegative)
        else:
            result = ifgsm(spec.magnitude, ws, e_ref, cfg)
        trajectory = result.loss_trajectory
        protected = istft(result.adv_magnitude, spec.phase, stft_config, len(w))

    re_spec = stft(protected, stft_config)
    e_protected, _ = forward(log_mel(re_spec.magnitude, mel), ws)
    delta = cosine_loss(e_ref, e_protected)
    report = ProtectionReport(
        method=method,
        snr_db=snr_db(w, protected),
        delta_cosd=delta,
        loss_trajectory=trajectory,
    )
    if method != "gaussian":
        result.delta_cosd_final = delta
    return protected, report
