"""WAV ingestion, CSV manifests and a seeded synthetic spoken-command corpus."""

from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import MelConfig, log_mel
from .errors import FormatError, UserError
from .models import rng_for

SPLITS = ("train", "val", "test")


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono PCM16 samples scaled to [-1, 1) and the sample rate."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, frames = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            if channels != 1:
                raise FormatError(f"{path}: channels={channels}, only mono is supported")
            if width != 2:
                raise FormatError(f"{path}: sample width={8 * width} bits, only PCM16 is supported")
            raw = w.readframes(frames)
    except wave.Error as exc:
        raise FormatError(f"{path}: malformed WAV header or format tag: {exc}") from None
    except EOFError:
        raise FormatError(f"{path}: truncated RIFF header") from None
    if len(raw) != 2 * frames:
        raise FormatError(f"{path}: data chunk holds {len(raw)} bytes, header declares {2 * frames}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, rate


def to_pcm16(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, samples, sample_rate: int) -> np.ndarray:
    """Write mono PCM16; returns the int16 samples actually stored."""
    pcm = to_pcm16(samples)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())
    return pcm


@dataclass
class Manifest:
    rows: list[tuple[str, str]]
    root: Path = Path(".")
    splits: dict[str, list[int]] = field(default_factory=dict)

    @property
    def vocab(self) -> list[str]:
        return sorted({label for _, label in self.rows})

    def label_indices(self, vocab: list[str] | None = None) -> np.ndarray:
        vocab = vocab or self.vocab
        lookup = {label: i for i, label in enumerate(vocab)}
        try:
            return np.array([lookup[label] for _, label in self.rows], dtype=np.int64)
        except KeyError as exc:
            raise UserError(f"label {exc.args[0]!r} is not in the vocabulary {vocab}") from None

    def paths(self) -> list[Path]:
        return [self.root / p for p, _ in self.rows]

    def subset(self, split: str) -> "Manifest":
        return Manifest([self.rows[i] for i in self.splits[split]], self.root)


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "label"])
        w.writerows(manifest.rows)


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise UserError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "label"]:
            raise UserError(f"{path}: expected header 'path,label', got {header}")
        rows = [(r[0], r[1]) for r in reader if r]
    return Manifest(rows, path.parent)


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Class-conditioned chirps in Gaussian noise.

    Class ``c`` starts near ``base_freq * freq_ratio**c`` Hz, sweeps at
    ``chirp_rate`` Hz/s with alternating sign, and decays at a class-specific
    rate. ``jitter`` is the relative per-utterance spread of the start
    frequency. ``snr_db=inf`` disables noise.
    """

    n_classes: int = 4
    samples_per_class: int = 40
    sample_rate: int = 16000
    duration: float = 1.0
    base_freq: float = 400.0
    freq_ratio: float = 1.25
    chirp_rate: float = 150.0
    jitter: float = 0.06
    snr_db: float = 0.0
    seed: int = 0

    def signature(self, c: int) -> tuple[float, float, float]:
        """(start frequency Hz, sweep Hz/s, envelope decay 1/s) of class ``c``."""
        return (
            self.base_freq * self.freq_ratio**c,
            self.chirp_rate * (1 if c % 2 == 0 else -1),
            1.0 + 1.5 * (c % 3),
        )


def synthesize(spec: SyntheticCorpusSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    n = int(round(spec.duration * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    f0, sweep, decay = spec.signature(label)
    f0 *= 1.0 + spec.jitter * rng.uniform(-1.0, 1.0)
    onset = rng.uniform(0.0, 0.2 * spec.duration)
    phase = 2 * np.pi * (f0 * t + 0.5 * sweep * t * t) + rng.uniform(0, 2 * np.pi)
    tt = np.clip(t - onset, 0.0, None)
    env = np.where(t >= onset, np.exp(-decay * tt) * (1 - np.exp(-40.0 * tt)), 0.0)
    sig = env * (np.sin(phase) + 0.4 * np.sin(2 * phase))
    if math.isfinite(spec.snr_db):
        p_sig = np.mean(sig**2)
        noise_std = math.sqrt(p_sig / 10 ** (spec.snr_db / 10))
        sig = sig + rng.normal(0.0, noise_std, size=n)
    peak = np.max(np.abs(sig))
    gain = rng.uniform(0.3, 0.9)
    return sig * (gain / peak) if peak > 0 else sig


def split_sizes(total: int) -> tuple[int, int, int]:
    n_train = int(round(0.70 * total))
    n_val = int(round(0.15 * total))
    return n_train, n_val, total - n_train - n_val


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, out_dir, force: bool = False) -> Manifest:
    """Write one WAV per utterance plus ``manifest.csv`` and per-split manifests."""
    out = Path(out_dir)
    if not out.parent.is_dir():
        raise UserError(f"parent directory does not exist: {out.parent}")
    if out.exists() and any(out.iterdir()) and not force:
        raise UserError(f"{out} already exists and is not empty (use --force to overwrite)")
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UserError(f"cannot create {out}: {exc}") from None

    rng = rng_for(spec.seed)
    rows = []
    for c in range(spec.n_classes):
        label = f"intent_{c:02d}"
        for j in range(spec.samples_per_class):
            rel = f"wav/{label}_{j:04d}.wav"
            try:
                write_wav(out / rel, synthesize(spec, c, rng), spec.sample_rate)
            except OSError as exc:
                raise UserError(f"cannot write {out / rel}: {exc}") from None
            rows.append((rel, label))

    order = rng_for(spec.seed + 1).permutation(len(rows))
    n_train, n_val, _ = split_sizes(len(rows))
    splits = {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }
    manifest = Manifest(rows, out, splits)
    write_manifest(manifest, out / "manifest.csv")
    for name in SPLITS:
        write_manifest(manifest.subset(name), out / f"{name}.csv")
    return manifest


@dataclass
class Split:
    features: np.ndarray  # (N, frames, n_mels) float32
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    vocab: list[str]

    @property
    def n_classes(self) -> int:
        return len(self.vocab)

    @property
    def frames(self) -> int:
        return self.train.features.shape[1]


def manifest_features(manifest: Manifest, mel: MelConfig) -> np.ndarray:
    feats = []
    for p in manifest.paths():
        if not p.is_file():
            raise UserError(f"audio file not found: {p}")
        samples, rate = read_wav(p)
        if rate != mel.sample_rate:
            raise UserError(f"{p}: sample rate {rate} Hz, frontend expects {mel.sample_rate} Hz")
        feats.append(log_mel(samples, mel).values.T.astype(np.float32))
    lengths = {f.shape[0] for f in feats}
    if len(lengths) > 1:
        raise UserError(f"utterances have differing frame counts {sorted(lengths)}; fixed-length audio required")
    return np.stack(feats) if feats else np.zeros((0, 0, mel.n_mels), np.float32)


def load_split(manifest: Manifest, mel: MelConfig, vocab: list[str]) -> Split:
    return Split(manifest_features(manifest, mel), manifest.label_indices(vocab))


def load_corpus(corpus_dir, mel: MelConfig | None = None) -> Dataset:
    """Read ``train/val/test.csv`` from a corpus directory and compute log-mel features."""
    mel = mel or MelConfig()
    root = Path(corpus_dir)
    manifests = {name: read_manifest(root / f"{name}.csv") for name in SPLITS}
    vocab = read_manifest(root / "manifest.csv").vocab if (root / "manifest.csv").is_file() else sorted(
        {label for m in manifests.values() for _, label in m.rows}
    )
    return Dataset(*(load_split(manifests[n], mel, vocab) for n in SPLITS), vocab)
