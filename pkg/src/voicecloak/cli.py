"""Batch command line: protect audio, extract embeddings, score trials.

Every command writes a run manifest next to its outputs; `voicecloak rerun
<manifest>` re-executes the recorded command with the recorded parameters
and reproduces the outputs bit for bit. Verbosity is controlled by the
VOICECLOAK_LOG environment variable (DEBUG/INFO/WARNING/ERROR).

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import __version__, tensorfile
from .attack import AttackConfig, protect_utterance
from .audio_io import CANONICAL_RATE, Waveform, read_wav, resample_linear, write_wav
from .encoder import EncoderConfig, forward, init_random, load_weights, save_weights
from .metrics import (
    compute_eer,
    parse_trials,
    score_trials,
    similarity_matrix,
    write_similarity_csv,
)
from .spectral import StftConfig, log_mel, mel_matrix, stft, write_magnitude_csv

logger = logging.getLogger("voicecloak")


def _setup_logging():
    level_name = os.environ.get("VOICECLOAK_LOG", "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _write_manifest(path, command: str, params: dict) -> None:
    manifest = {
        "tool": "voicecloak",
        "version": __version__,
        "command": command,
        "params": params,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_waveform_16k(path) -> Waveform:
    w = read_wav(path)
    if w.sample_rate != CANONICAL_RATE:
        logger.info("resampling %s from %d Hz to %d Hz", path, w.sample_rate, CANONICAL_RATE)
        w = resample_linear(w, CANONICAL_RATE)
    return w


def _collect_wavs(path_str: str) -> list[Path]:
    path = Path(path_str)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".wav")
        if not files:
            raise ValueError(f"no .wav files in {path}")
        return files
    if path.is_file():
        return [path]
    raise ValueError(f"input {path} does not exist")


def _file_seed(base_seed: int, stem: str) -> int:
    # stable per-file seed, independent of batch order and of Python's hash salt
    return (base_seed + zlib.crc32(stem.encode("utf-8"))) & 0xFFFFFFFF


def run_init_encoder(config: str, seed: int, out: str) -> None:
    overrides = json.loads(Path(config).read_text(encoding="utf-8"))
    merged = EncoderConfig().to_dict()
    merged.update(overrides)
    ws = init_random(EncoderConfig.from_dict(merged), seed)
    save_weights(ws, out)
    _write_manifest(str(out) + ".manifest.json", "init-encoder", {
        "config": config, "seed": seed, "out": out,
    })


def run_protect(
    inputs: str,
    weights: str,
    out_dir: str,
    method: str = "ifgsm",
    epsilon: float = 0.02,
    alpha: float = 0.0004,
    iterations: int = 50,
    target_snr: float = 32.0,
    seed: int = 0,
    jobs: int | None = None,
    dump_spectrograms: bool = False,
) -> int:
    """Protect every input file; returns the number of failures."""
    files = _collect_wavs(inputs)
    ws = load_weights(weights)
    cfg = AttackConfig(epsilon=epsilon, alpha=alpha, iterations=iterations)
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)

    def protect_one(path: Path) -> None:
        w = _load_waveform_16k(path)
        file_seed = _file_seed(seed, path.stem)
        protected, report = protect_utterance(
            w, ws, cfg, method=method, target_snr_db=target_snr, seed=file_seed
        )
        write_wav(out_path / f"{path.stem}.wav", protected)
        payload = {
            "key": path.stem,
            "input": str(path),
            "output": str(out_path / f"{path.stem}.wav"),
            "method": method,
            "epsilon": epsilon,
            "alpha": alpha,
            "iterations": iterations,
            "target_snr_db": target_snr,
            "seed": file_seed,
            "snr_db": report.snr_db,
            "delta_cosd": report.delta_cosd,
            "loss_trajectory": report.loss_trajectory,
        }
        (out_path / f"{path.stem}.json").write_text(
            json.dumps(payload, indent=2) + "\n", encoding="utf-8"
        )
        if dump_spectrograms:
            write_magnitude_csv(stft(protected), out_path / f"{path.stem}.magnitude.csv")
        logger.info("protected %s: SNR %.2f dB, distance %.3f", path.name, report.snr_db, report.delta_cosd)

    failures = 0
    n_workers = jobs or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        futures = {pool.submit(protect_one, f): f for f in files}
        for future, path in futures.items():
            try:
                future.result()
            except Exception as exc:
                failures += 1
                click.echo(f"error: {path}: {exc}", err=True)

    _write_manifest(out_path / "manifest.json", "protect", {
        "inputs": inputs, "weights": weights, "out_dir": out_dir, "method": method,
        "epsilon": epsilon, "alpha": alpha, "iterations": iterations,
        "target_snr": target_snr, "seed": seed, "jobs": jobs,
        "dump_spectrograms": dump_spectrograms,
    })
    return failures


def _embed_file(path: Path, ws, mel: np.ndarray) -> np.ndarray:
    w = _load_waveform_16k(path)
    feat = log_mel(stft(w).magnitude, mel)
    embedding, _ = forward(feat, ws)
    return embedding


def run_embed(inputs: tuple[str, ...], weights: str, out: str, seed: int = 0) -> None:
    files: list[Path] = []
    for item in inputs:
        files.extend(_collect_wavs(item))
    ws = load_weights(weights)
    mel = mel_matrix(StftConfig().fft_size, ws.config.n_mels, CANONICAL_RATE)
    embeddings: dict[str, np.ndarray] = {}
    for path in files:
        if path.stem in embeddings:
            raise ValueError(f"duplicate key {path.stem!r} (from {path})")
        embeddings[path.stem] = _embed_file(path, ws, mel)
    tensorfile.save(out, embeddings, meta={
        "kind": "embeddings",
        "embed_dim": ws.config.embed_dim,
        "weights": str(weights),
    })
    _write_manifest(str(out) + ".manifest.json", "embed", {
        "inputs": list(inputs), "weights": weights, "out": out, "seed": seed,
    })


def run_eval(trials: str, enroll: str, test: str, out: str, seed: int = 0) -> dict:
    trial_list = parse_trials(trials)
    enroll_embeddings, _ = tensorfile.load(enroll)
    test_embeddings, _ = tensorfile.load(test)
    scores = score_trials(trial_list, enroll_embeddings, test_embeddings)
    with open(f"{out}.scores.txt", "w", encoding="utf-8") as fh:
        for t, s in zip(trial_list, scores):
            fh.write(f"{t.enroll_id} {t.test_id} {t.label} {s:.12g}\n")
    target = [s for t, s in zip(trial_list, scores) if t.label == "target"]
    nontarget = [s for t, s in zip(trial_list, scores) if t.label == "nontarget"]
    eer, threshold = compute_eer(target, nontarget)
    summary = {
        "eer": eer,
        "threshold": threshold,
        "n_target": len(target),
        "n_nontarget": len(nontarget),
    }
    Path(f"{out}.eer.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    _write_manifest(f"{out}.manifest.json", "eval", {
        "trials": trials, "enroll": enroll, "test": test, "out": out, "seed": seed,
    })
    return summary


def run_simmat(rows: str, cols: str | None, out: str, speaker_level: bool = False, seed: int = 0) -> None:
    row_embeddings, _ = tensorfile.load(rows)
    col_embeddings = row_embeddings if cols is None else tensorfile.load(cols)[0]
    matrix, row_keys, col_keys = similarity_matrix(row_embeddings, col_embeddings, speaker_level)
    write_similarity_csv(out, matrix, row_keys, col_keys)
    _write_manifest(str(out) + ".manifest.json", "simmat", {
        "rows": rows, "cols": cols, "out": out, "speaker_level": speaker_level, "seed": seed,
    })


def run_dump_spec(input: str, out: str, seed: int = 0) -> None:
    write_magnitude_csv(stft(_load_waveform_16k(Path(input))), out)
    _write_manifest(str(out) + ".manifest.json", "dump-spec", {
        "input": input, "out": out, "seed": seed,
    })


_RERUN_DISPATCH = {
    "init-encoder": run_init_encoder,
    "protect": run_protect,
    "embed": run_embed,
    "eval": run_eval,
    "simmat": run_simmat,
    "dump-spec": run_dump_spec,
}


def run_rerun(manifest_path: str):
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    command = manifest.get("command")
    if command not in _RERUN_DISPATCH:
        raise ValueError(f"{manifest_path}: unknown command {command!r}")
    params = dict(manifest["params"])
    if command == "embed":
        params["inputs"] = tuple(params["inputs"])
    return _RERUN_DISPATCH[command](**params)


def _fail(exc: BaseException) -> "SystemExit":
    click.echo(f"error: {exc}", err=True)
    return SystemExit(1)


@click.group()
@click.version_option(__version__)
def cli():
    """White-box speaker protection and evaluation toolkit."""
    _setup_logging()


@cli.command("init-encoder")
@click.option("--config", required=True, type=click.Path(exists=True), help="Encoder config JSON.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(), help="Weight file to write.")
def cmd_init_encoder(config, seed, out):
    """Initialize random encoder weights and save them."""
    try:
        run_init_encoder(config, seed, out)
    except Exception as exc:
        raise _fail(exc)


@cli.command("protect")
@click.argument("inputs", type=click.Path(exists=True))
@click.option("--weights", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--method", default="ifgsm", show_default=True,
              type=click.Choice(["fgsm", "ifgsm", "gaussian"]))
@click.option("--epsilon", default=0.02, show_default=True, type=float,
              help="Max per-entry magnitude change.")
@click.option("--alpha", default=0.0004, show_default=True, type=float,
              help="Per-iteration step size.")
@click.option("--iterations", default=50, show_default=True, type=int)
@click.option("--target-snr", default=32.0, show_default=True, type=float,
              help="SNR in dB for the gaussian method.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--jobs", default=None, type=int, help="Worker threads; default = CPU count.")
@click.option("--dump-spectrograms", is_flag=True, help="Also write magnitude CSVs (debug).")
def cmd_protect(inputs, weights, out_dir, method, epsilon, alpha, iterations,
                target_snr, seed, jobs, dump_spectrograms):
    """Perturb a WAV file or a directory of WAV files.

    Writes one protected 16 kHz WAV plus a JSON report per input, and a
    manifest for the batch. Per-file errors are logged and the batch
    continues; the exit status is nonzero if any file failed.
    """
    try:
        cfg = AttackConfig(epsilon=epsilon, alpha=alpha, iterations=iterations)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    del cfg
    try:
        failures = run_protect(inputs, weights, out_dir, method, epsilon, alpha,
                               iterations, target_snr, seed, jobs, dump_spectrograms)
    except Exception as exc:
        raise _fail(exc)
    if failures:
        raise SystemExit(1)


@cli.command("embed")
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--weights", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
def cmd_embed(inputs, weights, out, seed):
    """Extract an embedding per WAV file into an archive (key = file stem)."""
    try:
        run_embed(inputs, weights, out, seed)
    except Exception as exc:
        raise _fail(exc)


@cli.command("eval")
@click.option("--trials", required=True, type=click.Path(exists=True))
@click.option("--enroll", required=True, type=click.Path(exists=True),
              help="Embedding archive for enrollment keys.")
@click.option("--test", required=True, type=click.Path(exists=True),
              help="Embedding archive for test keys.")
@click.option("--out", required=True, type=click.Path(),
              help="Output prefix: <out>.scores.txt and <out>.eer.json.")
@click.option("--seed", default=0, show_default=True, type=int)
def cmd_eval(trials, enroll, test, out, seed):
    """Score trials with cosine similarity and report the EER."""
    try:
        summary = run_eval(trials, enroll, test, out, seed)
    except Exception as exc:
        raise _fail(exc)
    click.echo(json.dumps(summary))


@cli.command("simmat")
@click.option("--rows", required=True, type=click.Path(exists=True),
              help="Embedding archive for matrix rows.")
@click.option("--cols", default=None, type=click.Path(exists=True),
              help="Embedding archive for columns; defaults to --rows.")
@click.option("--speaker-level", is_flag=True,
              help="Average embeddings per speaker prefix (before the first '-') first.")
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
def cmd_simmat(rows, cols, speaker_level, out, seed):
    """Write a cosine similarity matrix as CSV."""
    try:
        run_simmat(rows, cols, out, speaker_level, seed)
    except Exception as exc:
        raise _fail(exc)


@cli.command("dump-spec")
@click.argument("input", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
def cmd_dump_spec(input, out, seed):
    """Dump a WAV file's magnitude spectrogram as CSV (frames as rows)."""
    try:
        run_dump_spec(input, out, seed)
    except Exception as exc:
        raise _fail(exc)


@cli.command("rerun")
@click.argument("manifest", type=click.Path(exists=True))
def cmd_rerun(manifest):
    """Re-execute a recorded run; outputs are reproduced bit-exactly."""
    try:
        result = run_rerun(manifest)
    except Exception as exc:
        raise _fail(exc)
    if isinstance(result, int) and result:
        raise SystemExit(1)


def main():
    cli(prog_name="voicecloak")


if __name__ == "__main__":
    main()
