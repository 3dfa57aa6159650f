"""Waveform I/O, log mel filterbank features, and online waveform augmentation.

Audio is mono 16 kHz 16-bit PCM throughout; there is no resampling and no
voice activity detection. All operations are pure given an explicit rng.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    """Mono 16 kHz sample sequence with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(arr)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass(frozen=True)
class FbankConfig:
    n_mels: int = 40
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    preemph: float = 0.97
    mel_low_hz: float = 20.0
    mel_high_hz: float = 7600.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1:
            raise ConfigError("fbank.n_mels must be >= 1")
        if not (self.win_ms > self.hop_ms > 0):
            raise ConfigError("fbank window must be longer than hop, both positive")
        if self.fft_size < self.win_samples:
            raise ConfigError("fbank.fft_size must cover one window")
        if not (0 < self.mel_low_hz < self.mel_high_hz <= SAMPLE_RATE / 2):
            raise ConfigError("fbank mel range must satisfy 0 < low < high <= 8000")

    @property
    def win_samples(self) -> int:
        return int(round(self.win_ms * SAMPLE_RATE / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * SAMPLE_RATE / 1000.0))


@dataclass(frozen=True)
class FeatureMatrix:
    """T x F frame-level features."""

    frames: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("features must be a T x F matrix with T >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("features contain non-finite entries")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "frames", arr)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.6
    noise_snr_db_range: tuple = (0.0, 20.0)
    kinds: tuple = ("noise", "reverb")

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError("augment.probability must lie in [0, 1]")
        lo, hi = self.noise_snr_db_range
        if lo > hi:
            raise ConfigError("augment SNR range must satisfy low <= high")
        kinds = tuple(sorted(set(self.kinds)))
        for k in kinds:
            if k not in ("noise", "reverb"):
                raise ConfigError(f"unknown augmentation kind: {k}")
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "noise_snr_db_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class AugmentBanks:
    """Noise and impulse-response waveforms, enumerated in sorted filename order."""

    noises: tuple = ()
    rirs: tuple = ()


# ---------------------------------------------------------------------------
# WAV I/O (RIFF little-endian, PCM 16-bit mono 16 kHz only)
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono 16 kHz WAV file, scaling samples by 1/32768."""
    raw = Path(path).read_bytes()
    fmt, data = _parse_riff(raw, str(path))
    audio_format, channels, rate, bits = fmt
    if audio_format != 1:
        raise FormatError(f"{path}: unsupported encoding (expected PCM, got format {audio_format})")
    if channels != 1:
        raise FormatError(f"{path}: unsupported channel count {channels} (expected mono)")
    if rate != SAMPLE_RATE:
        raise FormatError(f"{path}: unsupported sample rate {rate} (expected {SAMPLE_RATE})")
    if bits != 16:
        raise FormatError(f"{path}: unsupported bit depth {bits} (expected 16)")
    if len(data) % 2 != 0 or len(data) == 0:
        raise FormatError(f"{path}: malformed data chunk")
    pcm = np.frombuffer(data, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0)


def read_wav_duration(path) -> float:
    """Duration in seconds from the WAV header, without decoding samples."""
    raw = Path(path).read_bytes()
    fmt, data = _parse_riff(raw, str(path))
    _, channels, rate, bits = fmt
    bytes_per_sample = max(1, bits // 8) * max(1, channels)
    return len(data) / bytes_per_sample / rate


def _parse_riff(raw: bytes, name: str):
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{name}: malformed RIFF/WAVE header")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{name}: truncated chunk {cid!r}")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{name}: malformed fmt chunk")
            audio_format, channels, rate = struct.unpack("<HHI", body[:8])
            bits = struct.unpack("<H", body[14:16])[0]
            fmt = (audio_format, channels, rate, bits)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size % 2)
    if fmt is None or data is None:
        raise FormatError(f"{name}: missing fmt or data chunk")
    return fmt, data


def write_wav(path, wav: Waveform):
    """Write 16-bit PCM mono 16 kHz WAV (deterministic byte layout)."""
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, SAMPLE_RATE, SAMPLE_RATE * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(data))
    Path(path).write_bytes(header + data)


# ---------------------------------------------------------------------------
# Fbank
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FbankConfig) -> np.ndarray:
    """Triangular mel filters evaluated at FFT bin centers, shape (n_mels, fft/2+1)."""
    n_bins = cfg.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * SAMPLE_RATE / cfg.fft_size
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_low_hz), hz_to_mel(cfg.mel_high_hz), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        left, center, right = pts[m], pts[m + 1], pts[m + 2]
        rise = (bin_hz - left) / (center - left)
        fall = (right - bin_hz) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def mel_filter_centers(cfg: FbankConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_low_hz), hz_to_mel(cfg.mel_high_hz), cfg.n_mels + 2))
    return pts[1:-1]


def fbank(wav: Waveform, cfg: FbankConfig = FbankConfig()) -> FeatureMatrix:
    """Log mel filterbank energies.

    Pipeline: pre-emphasis -> Hamming window -> |FFT|^2 -> triangular mel
    filterbank -> log(max(energy, log_floor)). Frame count is
    floor((N - win) / hop) + 1; trailing samples short of a window are dropped.
    """
    win, hop = cfg.win_samples, cfg.hop_samples
    x = wav.samples
    if x.size < win:
        raise DataError(f"waveform of {x.size} samples is shorter than one {win}-sample window")
    emph = np.concatenate(([x[0]], x[1:] - cfg.preemph * x[:-1]))
    n_frames = (x.size - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = emph[idx] * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg).T
    out = np.log(np.maximum(energies, cfg.log_floor))
    return FeatureMatrix(out, frame_rate_hz=SAMPLE_RATE / hop)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def mix_noise(wav: Waveform, noise: Waveform, snr_db: float, rng: np.random.Generator) -> Waveform:
    """Add a random crop of `noise` at the requested segmental SNR.

    The gain g satisfies 20*log10(rms(wav) / (g*rms(crop))) = snr_db; the sum
    is hard-clipped to [-1, 1]. snr_db = +inf returns the input unchanged.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return wav
    n = len(wav)
    nz = noise.samples
    if nz.size < n:
        reps = -(-n // nz.size)
        nz = np.tile(nz, reps)
    offset = int(rng.integers(0, nz.size - n + 1))
    crop = nz[offset : offset + n]
    rms_n = float(np.sqrt(np.mean(crop**2)))
    if rms_n == 0.0:
        raise DataError("noise crop has zero energy; SNR is undefined")
    rms_s = wav.rms()
    gain = rms_s / (rms_n * 10.0 ** (snr_db / 20.0))
    return Waveform(np.clip(wav.samples + gain * crop, -1.0, 1.0))


def apply_rir(wav: Waveform, ir: Waveform) -> Waveform:
    """Convolve with an impulse response, truncate to the input length, match RMS."""
    h = ir.samples
    if not np.any(h != 0.0):
        raise DataError("impulse response has zero energy")
    out = np.convolve(wav.samples, h)[: len(wav)]
    rms_in = wav.rms()
    rms_out = float(np.sqrt(np.mean(out**2)))
    if rms_out > 0.0:
        out = out * (rms_in / rms_out)
    return Waveform(np.clip(out, -1.0, 1.0))


def augment(
    wav: Waveform,
    banks: AugmentBanks,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> Waveform:
    """With probability cfg.probability apply one uniformly chosen augmentation kind.

    Returns the input object unchanged when not triggered. Fully determined
    by the rng state: the trigger draw always happens first, then kind, then
    kind-specific parameters.
    """
    triggered = rng.random() < cfg.probability
    if not triggered or not cfg.kinds:
        return wav
    kind = cfg.kinds[int(rng.integers(0, len(cfg.kinds)))]
    if kind == "noise":
        if not banks.noises:
            raise DataError("noise augmentation enabled but the noise bank is empty")
        noise = banks.noises[int(rng.integers(0, len(banks.noises)))]
        lo, hi = cfg.noise_snr_db_range
        snr = float(rng.uniform(lo, hi))
        return mix_noise(wav, noise, snr, rng)
    if not banks.rirs:
        raise DataError("reverb augmentation enabled but the RIR bank is empty")
    ir = banks.rirs[int(rng.integers(0, len(banks.rirs)))]
    return apply_rir(wav, ir)


def load_bank(directory) -> tuple:
    """Load every .wav under `directory` in sorted filename order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"augmentation bank directory not found: {directory}")
    return tuple(read_wav(p) for p in sorted(directory.glob("*.wav")))
