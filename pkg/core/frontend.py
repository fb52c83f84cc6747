"""Audio ingestion, mel features, augmentation and the synthetic scene dataset."""
from __future__ import annotations

import io
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import librosa
import numpy as np
import pandas as pd
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter
from scipy.signal import get_window

from core.errors import SampleRateError, ShapeError, ValidationError, WavFormatError
from core.models import AudioClip, as_feature_map
from core.multitask import SCENES, LabelPair, parent_of
from core.utils import atomic_write_bytes, atomic_write_text, guard_overwrite, logger

SAMPLE_RATE = 44100
WAV_SUBTYPES = ("PCM_16", "PCM_24", "PCM_32", "FLOAT")
MANIFEST_NAME = "manifest.csv"

Sample = tuple[np.ndarray, LabelPair]


@dataclass(frozen=True, slots=True)
class MelConfig:
    """40 ms Hann window, 20 ms hop, 2048-point FFT, 256 mel bands, power 2, no log."""

    sample_rate: int = SAMPLE_RATE
    n_fft: int = 2048
    win_length: int = 1764
    hop_length: int = 882
    n_mels: int = 256
    fmin: float = 0.0
    fmax: float = 22050.0
    window: str = "hann"
    power: float = 2.0

    def __post_init__(self) -> None:
        if min(self.n_fft, self.win_length, self.hop_length, self.n_mels, self.sample_rate) < 1:
            raise ValidationError("mel config sizes must be positive")
        if self.win_length > self.n_fft:
            raise ValidationError(
                f"win_length {self.win_length} exceeds n_fft {self.n_fft}; frames are zero-padded, not cropped"
            )
        if not 0.0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValidationError(
                f"need 0 <= fmin < fmax <= {self.sample_rate / 2}, got fmin={self.fmin} fmax={self.fmax}"
            )
        if self.power <= 0:
            raise ValidationError(f"power must be positive, got {self.power}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            raise ShapeError(f"clip of {n_samples} samples is shorter than one window ({self.win_length})")
        return (n_samples - self.win_length) // self.hop_length + 1


@dataclass(frozen=True, slots=True)
class AugmentPolicy:
    mixup_enabled: bool = True
    mixup_alpha: float = 1.0
    spec_augment_enabled: bool = True
    n_freq_masks: int = 2
    freq_mask_max: int = 24
    n_time_masks: int = 2
    time_mask_max: int = 48

    def __post_init__(self) -> None:
        if self.mixup_alpha <= 0:
            raise ValidationError(f"mixup_alpha must be positive, got {self.mixup_alpha}")
        if min(self.n_freq_masks, self.freq_mask_max, self.n_time_masks, self.time_mask_max) < 0:
            raise ValidationError("mask counts and widths must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(mixup_enabled=False, spec_augment_enabled=False)


@dataclass(frozen=True, slots=True)
class SynthConfig:
    n_per_class: int = 64
    noise_level: float = 0.1
    n_frames: int = 32
    n_mels: int = 32

    def __post_init__(self) -> None:
        if self.n_per_class < 1:
            raise ValidationError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.noise_level < 0:
            raise ValidationError(f"noise_level must be non-negative, got {self.noise_level}")
        if self.n_frames < 1 or self.n_mels < 1:
            raise ValidationError("synthetic feature extents must be positive")


# ------------------------------------------------------------------------ WAV I/O


def load_wav(path: str | Path) -> AudioClip:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        data, sample_rate = sf.read(str(path), dtype="float64", always_2d=True)
    except (sf.SoundFileError, RuntimeError) as exc:
        raise WavFormatError(f"{path}: cannot parse audio: {exc}") from exc
    if sample_rate != SAMPLE_RATE:
        raise SampleRateError(
            f"{path}: sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz (resampling is not supported)"
        )
    samples = np.clip(data.mean(axis=1), -1.0, 1.0)
    return AudioClip(samples=samples, sample_rate=int(sample_rate), source_id=path.stem)


def save_wav(clip: AudioClip, path: str | Path, subtype: str = "PCM_16") -> Path:
    if subtype not in WAV_SUBTYPES:
        raise ValidationError(f"unsupported WAV subtype {subtype!r}; choose one of {WAV_SUBTYPES}")
    buffer = io.BytesIO()
    sf.write(buffer, np.asarray(clip.samples, dtype=np.float64), clip.sample_rate, subtype=subtype, format="WAV")
    return atomic_write_bytes(path, buffer.getvalue())


# ----------------------------------------------------------------------- features


def stft_magnitude(clip: AudioClip, cfg: MelConfig) -> np.ndarray:
    """One-sided |STFT|**power, shape [n_fft/2 + 1, N]; frames are not centered."""
    if clip.sample_rate != cfg.sample_rate:
        raise SampleRateError(f"clip is {clip.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    samples = np.asarray(clip.samples, dtype=np.float64)
    cfg.n_frames(samples.shape[0])
    window = get_window(cfg.window, cfg.win_length, fftbins=True)
    frames = sliding_window_view(samples, cfg.win_length)[:: cfg.hop_length]
    spectrum = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=1))
    if cfg.power != 1.0:
        spectrum = spectrum**cfg.power
    return spectrum.T


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """[n_mels, n_fft/2 + 1] triangular filters; cached and read-only."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        weights = librosa.filters.mel(
            sr=cfg.sample_rate,
            n_fft=cfg.n_fft,
            n_mels=cfg.n_mels,
            fmin=cfg.fmin,
            fmax=cfg.fmax,
            dtype=np.float64,
        )
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise ValidationError(
            f"{empty.size} empty mel filter(s) for n_mels={cfg.n_mels} over "
            f"{cfg.fmin}-{cfg.fmax} Hz at n_fft={cfg.n_fft}; reduce n_mels"
        )
    weights.setflags(write=False)
    return weights


def melspectrogram(clip: AudioClip, cfg: MelConfig) -> np.ndarray:
    """Mel power features in time-major layout, shape [1, 1, N, n_mels]."""
    mel = mel_filterbank(cfg) @ stft_magnitude(clip, cfg)
    return mel.T[None, None, :, :]


# --------------------------------------------------------------------- augmentation


def mixup(
    x_i: np.ndarray, x_j: np.ndarray, y_i: LabelPair, y_j: LabelPair, lam: float
) -> tuple[np.ndarray, LabelPair]:
    """Blend features and both label sets with the same lambda."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"mixup lambda must lie in [0, 1], got {lam}")
    if x_i.shape != x_j.shape:
        raise ShapeError(f"mixup features differ in shape: {x_i.shape} vs {x_j.shape}")
    if y_i.scene.shape != y_j.scene.shape or y_i.abstract.shape != y_j.abstract.shape:
        raise ShapeError("mixup label shapes differ")
    x = lam * x_i + (1.0 - lam) * x_j
    y = LabelPair(
        scene=lam * y_i.scene + (1.0 - lam) * y_j.scene,
        abstract=lam * y_i.abstract + (1.0 - lam) * y_j.abstract,
    )
    return x, y


def mixup_batch(
    x: np.ndarray, y: LabelPair, alpha: float, rng: np.random.Generator
) -> tuple[np.ndarray, LabelPair]:
    """Mix a batch with a shuffled copy of itself; one Beta(alpha, alpha) draw per batch."""
    lam = float(rng.beta(alpha, alpha))
    order = rng.permutation(x.shape[0])
    partner = LabelPair(scene=y.scene[order], abstract=y.abstract[order])
    return mixup(x, x[order], y, partner, lam)


def _mask_bounds(rng: np.random.Generator, extent: int, max_width: int) -> tuple[int, int]:
    width = int(rng.integers(0, min(max_width, extent) + 1))
    start = int(rng.integers(0, extent - width + 1))
    return start, start + width


def spec_augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Zero random mel bands and frame spans per example; widths are clamped to the extents."""
    x = as_feature_map(x)
    out = x.copy()
    if not policy.spec_augment_enabled:
        return out
    n_frames, n_mels = x.shape[2], x.shape[3]
    for b in range(x.shape[0]):
        for _ in range(policy.n_freq_masks):
            lo, hi = _mask_bounds(rng, n_mels, policy.freq_mask_max)
            out[b, :, :, lo:hi] = 0.0
        for _ in range(policy.n_time_masks):
            lo, hi = _mask_bounds(rng, n_frames, policy.time_mask_max)
            out[b, :, lo:hi, :] = 0.0
    return out


# ------------------------------------------------------------------ synthetic data


def _streams(seed: int, split: int = 0) -> tuple[np.random.Generator, np.random.Generator]:
    """Template stream shared by every split; one independent noise stream per split."""
    template_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(template_seq), np.random.default_rng(noise_seq.spawn(split + 1)[split])


def _smooth_unit(rng: np.random.Generator, shape: tuple[int, int], sigma: tuple[float, float]) -> np.ndarray:
    field = gaussian_filter(rng.normal(size=shape), sigma=sigma, mode="wrap")
    return (field - field.mean()) / field.std()


def scene_templates(seed: int, n_frames: int = 32, n_mels: int = 32) -> np.ndarray:
    """[10, n_frames, n_mels] class templates: a parent-level field plus a scene-level field."""
    rng, _ = _streams(seed)
    sigma = (max(n_frames / 8, 1.0), max(n_mels / 8, 1.0))
    parents = {p: _smooth_unit(rng, (n_frames, n_mels), sigma) for p in sorted({parent_of(s) for s in SCENES})}
    return np.stack(
        [parents[parent_of(scene)] + 0.75 * _smooth_unit(rng, (n_frames, n_mels), sigma) for scene in SCENES]
    )


def synth_dataset(
    n_per_class: int,
    noise_level: float,
    seed: int,
    n_frames: int = 32,
    n_mels: int = 32,
    split: int = 0,
) -> list[Sample]:
    """Templates plus Gaussian noise; ``split`` picks a noise stream over the same templates."""
    cfg = SynthConfig(n_per_class=n_per_class, noise_level=noise_level, n_frames=n_frames, n_mels=n_mels)
    templates = scene_templates(seed, cfg.n_frames, cfg.n_mels)
    if split < 0:
        raise ValidationError(f"split must be non-negative, got {split}")
    _, noise_rng = _streams(seed, split)
    dataset: list[Sample] = []
    for scene_index, scene in enumerate(SCENES):
        for _ in range(cfg.n_per_class):
            noise = noise_rng.normal(size=templates[scene_index].shape)
            features = templates[scene_index] + cfg.noise_level * noise
            dataset.append((features[None, None, :, :], LabelPair.from_scene(scene)))
    return dataset


def stack_dataset(dataset: Sequence[Sample]) -> tuple[np.ndarray, LabelPair]:
    """Concatenate samples into one [N, 1, T, F] batch with [N, 10] / [N, 3] targets."""
    if not dataset:
        raise ValidationError("dataset is empty")
    shapes = {features.shape[1:] for features, _ in dataset}
    if len(shapes) != 1:
        raise ShapeError(f"dataset mixes feature shapes {sorted(shapes)}")
    x = np.concatenate([features for features, _ in dataset], axis=0)
    labels = LabelPair(
        scene=np.stack([label.scene for _, label in dataset]),
        abstract=np.stack([label.abstract for _, label in dataset]),
    )
    return x, labels


# ----------------------------------------------------------------------- manifest


def _features_for(path: Path, cfg: MelConfig) -> np.ndarray:
    suffix = path.suffix.lower()
    if suffix == ".npy":
        features = np.load(path)
        if features.ndim == 2:
            features = features[None, None, :, :]
        return as_feature_map(features.astype(np.float64), str(path))
    if suffix == ".wav":
        return melspectrogram(load_wav(path), cfg)
    raise ValidationError(f"{path}: manifest rows must point at .wav or .npy files")


def load_manifest(path: str | Path, mel_cfg: MelConfig | None = None, threads: int = 1) -> list[Sample]:
    """Read a ``path,scene_label`` CSV (DCASE ``filename`` also accepted, tab or comma separated)."""
    path = Path(path)
    cfg = mel_cfg or MelConfig()
    frame = pd.read_csv(path, sep=None, engine="python", dtype=str)
    frame = frame.rename(columns={"filename": "path"})
    missing = {"path", "scene_label"} - set(frame.columns)
    if missing:
        raise ValidationError(f"{path}: manifest is missing column(s) {sorted(missing)}")
    if frame.empty:
        raise ValidationError(f"{path}: manifest has no rows")

    labels = []
    for raw in frame["scene_label"]:
        try:
            labels.append(LabelPair.from_scene(raw.strip()))
        except ValueError as exc:
            raise ValidationError(f"{path}: unknown scene label {raw!r}") from exc
    files = [p if p.is_absolute() else path.parent / p for p in map(Path, frame["path"])]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            features = list(pool.map(lambda f: _features_for(f, cfg), files))
    else:
        features = [_features_for(f, cfg) for f in files]
    logger.info("Loaded %s clips from %s", len(features), path)
    return list(zip(features, labels))


def write_synthetic(dataset: Iterable[Sample], out_dir: str | Path, force: bool = False) -> Path:
    out_dir = Path(out_dir)
    payloads: dict[str, bytes] = {}
    rows = []
    for index, (features, label) in enumerate(dataset):
        scene = SCENES[label.scene_index].value
        name = f"{scene}_{index:05d}.npy"
        buffer = io.BytesIO()
        np.save(buffer, features[0, 0])
        payloads[name] = buffer.getvalue()
        rows.append({"path": name, "scene_label": scene})

    # refuse before anything lands on disk
    for name in [*payloads, MANIFEST_NAME]:
        guard_overwrite(out_dir / name, force)
    for name, payload in payloads.items():
        atomic_write_bytes(out_dir / name, payload)
    manifest = atomic_write_text(
        out_dir / MANIFEST_NAME, pd.DataFrame(rows, columns=["path", "scene_label"]).to_csv(index=False)
    )
    logger.info("Wrote %s synthetic clips to %s", len(rows), out_dir)
    return manifest
