"""Waveform decoding, resampling, peak cropping and log-mel extraction.

The pipeline for one clip is ``decode_wav -> resample -> peak_crop -> log_mel``.
All functions are pure; nothing here holds state.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np


class DecodeError(ValueError):
    """Base class for WAV decoding failures."""


class MalformedHeaderError(DecodeError):
    pass


class UnsupportedCodecError(DecodeError):
    pass


class EmptyAudioError(DecodeError):
    pass


class ConfigError(ValueError):
    """A spectrogram configuration that cannot produce a valid output."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = 16000
    n_fft: int = 2048
    hop: int = 502
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 8000.0
    top_db: float = 80.0
    clip_samples: int = 80000
    # Target frame count; extra frames are center-cropped. None keeps them all.
    n_frames: int | None = 160

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ConfigError(
                f"need 0 <= f_min < f_max <= sample_rate/2, got f_min={self.f_min}, "
                f"f_max={self.f_max}, sample_rate={self.sample_rate}"
            )
        if self.hop < 1 or self.n_fft < self.hop:
            raise ConfigError(f"need hop >= 1 and n_fft >= hop, got hop={self.hop}, n_fft={self.n_fft}")
        if self.n_mels < 2:
            raise ConfigError(f"n_mels must be >= 2, got {self.n_mels}")
        if self.clip_samples <= 0:
            raise ConfigError(f"clip_samples must be positive, got {self.clip_samples}")
        if self.top_db < 0:
            raise ConfigError(f"top_db must be non-negative, got {self.top_db}")
        if self.n_frames is not None and self.n_frames > self.raw_frames:
            raise ConfigError(
                f"clip of {self.clip_samples} samples at hop {self.hop} gives {self.raw_frames} "
                f"frames, fewer than the requested {self.n_frames}"
            )

    @property
    def raw_frames(self) -> int:
        return 1 + self.clip_samples // self.hop

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_frames or self.raw_frames, self.n_mels)

    def fingerprint(self) -> bytes:
        """8-byte digest identifying every parameter that shapes the output."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=8).digest()


ESC50_CONFIG = SpectrogramConfig()
KAGGLE18_CONFIG = SpectrogramConfig(hop=201, clip_samples=32000)


@dataclass(frozen=True)
class LogMelSpectrogram:
    values: np.ndarray  # (T, F) dB, time-major
    fingerprint: bytes

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def F(self) -> int:
        return self.values.shape[1]


# --------------------------------------------------------------------------- WAV

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def decode_wav(data: bytes) -> Waveform:
    """Decode a RIFF/WAVE byte string (PCM16 or IEEE float) to a mono waveform."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeaderError("not a RIFF/WAVE container")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedHeaderError("fmt chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _EXTENSIBLE:
                if len(body) < 26:
                    raise MalformedHeaderError("truncated WAVE_FORMAT_EXTENSIBLE fmt chunk")
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
            if len(body) < size:
                raise MalformedHeaderError(f"data chunk declares {size} bytes, file holds {len(body)}")
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise MalformedHeaderError("missing fmt chunk")
    if payload is None:
        raise MalformedHeaderError("missing data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise MalformedHeaderError(f"invalid channel count {channels} or sample rate {rate}")
    if tag == _PCM and bits == 16:
        samples = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FLOAT and bits in (32, 64):
        dt = "<f4" if bits == 32 else "<f8"
        width = bits // 8
        samples = np.frombuffer(payload[: len(payload) // width * width], dtype=dt).astype(np.float64)
    else:
        raise UnsupportedCodecError(f"unsupported format tag {tag} with {bits} bits per sample")

    frames = len(samples) // channels
    if frames == 0:
        raise EmptyAudioError("data chunk contains no complete sample frames")
    samples = samples[: frames * channels].reshape(frames, channels).mean(axis=1)
    return Waveform(samples, int(rate))


def read_wav(path) -> Waveform:
    with open(path, "rb") as fh:
        return decode_wav(fh.read())


def encode_wav(w: Waveform, float32: bool = False) -> bytes:
    """Encode mono audio as PCM16 (clipped) or IEEE float32 WAV bytes."""
    if float32:
        payload = np.asarray(w.samples, dtype="<f4").tobytes()
        tag, bits = _FLOAT, 32
    else:
        q = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767)
        payload = q.astype("<i2").tobytes()
        tag, bits = _PCM, 16
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, w.sample_rate, w.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


# -------------------------------------------------------------------- resampling

RESAMPLE_BETA = 14.0
RESAMPLE_ZEROS = 32  # zero crossings per side at the lower rate (64 taps per phase)
RESAMPLE_ROLLOFF = 0.945


def _sinc_table(up: int, down: int):
    """Polyphase Kaiser-windowed sinc taps, one row per output phase."""
    scale = min(1.0, up / down) * RESAMPLE_ROLLOFF
    half = RESAMPLE_ZEROS / scale  # half-width in input samples
    J = int(np.ceil(half))
    offsets = np.arange(-J + 1, J + 1)
    frac = (np.arange(up) * down % up) / up
    x = offsets[None, :] - frac[:, None]
    u = np.clip(x / half, -1.0, 1.0)
    window = np.i0(RESAMPLE_BETA * np.sqrt(1.0 - u**2)) / np.i0(RESAMPLE_BETA)
    taps = scale * np.sinc(scale * x) * window
    taps[np.abs(x) > half] = 0.0
    return offsets, taps


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited rational resampling with a Kaiser-windowed sinc kernel."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return w
    ratio = Fraction(target_rate, w.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    x = np.asarray(w.samples, dtype=np.float64)
    n_out = int(round(len(x) * target_rate / w.sample_rate))
    offsets, taps = _sinc_table(up, down)
    pad = len(offsets)
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    out = np.empty(n_out)
    chunk = 8192
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(start + chunk, n_out))
        base = n * down // up
        phase = n % up
        idx = base[:, None] + offsets[None, :] + pad
        out[start : start + len(n)] = np.einsum("ij,ij->i", xp[idx], taps[phase])
    return Waveform(out, target_rate)


# ------------------------------------------------------------------ peak crop

PEAK_WINDOW_SECONDS = 0.025


def peak_index(w: Waveform) -> int:
    """Sample index of the waveform peak.

    The 25 ms window with the largest energy is located first (lowest start on
    ties); the peak is the largest-magnitude sample inside it.
    """
    x = np.asarray(w.samples, dtype=np.float64)
    win = max(1, int(round(PEAK_WINDOW_SECONDS * w.sample_rate)))
    if len(x) <= win:
        return int(np.argmax(np.abs(x)))
    cs = np.concatenate([[0.0], np.cumsum(x * x)])
    energy = cs[win:] - cs[:-win]
    start = int(np.argmax(energy))
    return start + int(np.argmax(np.abs(x[start : start + win])))


def peak_crop(w: Waveform, clip_samples: int) -> Waveform:
    """Fixed-length window centred on the waveform peak, clamped to the signal.

    Inputs shorter than ``clip_samples`` are zero-padded symmetrically.
    """
    if clip_samples <= 0:
        raise ValueError(f"clip_samples must be positive, got {clip_samples}")
    x = np.asarray(w.samples)
    n = len(x)
    if n == clip_samples:
        return w
    if n < clip_samples:
        left = (clip_samples - n) // 2
        out = np.zeros(clip_samples, dtype=x.dtype)
        out[left : left + n] = x
        return Waveform(out, w.sample_rate)
    start = peak_index(w) - clip_samples // 2
    start = min(max(start, 0), n - clip_samples)
    return Waveform(x[start : start + clip_samples].copy(), w.sample_rate)


# ------------------------------------------------------------------- mel / STFT


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(
        f >= min_log_hz,
        min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
        f / f_sp,
    )


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_center_frequencies(config: SpectrogramConfig) -> np.ndarray:
    mels = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2)
    return mel_to_hz(mels)[1:-1]


def mel_filterbank(config: SpectrogramConfig) -> np.ndarray:
    """Area-normalised triangular mel filters, shape ``(n_mels, n_fft//2 + 1)``."""
    n_bins = config.n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, config.sample_rate / 2, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2))
    fdiff = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if len(empty):
        raise ConfigError(
            f"{len(empty)} of {config.n_mels} mel filters are empty at n_fft={config.n_fft}; "
            f"first empty band {empty[0]} (reduce n_mels or raise n_fft)"
        )
    return weights


def power_spectrogram(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centred, reflect-padded Hann STFT power, shape ``(frames, n_fft//2 + 1)``."""
    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft)[::hop]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)  # periodic Hann
    spec = np.fft.rfft(frames * window, axis=1)
    return spec.real**2 + spec.imag**2


AMIN = 1e-10


def power_to_db(S: np.ndarray, top_db: float, amin: float = AMIN) -> np.ndarray:
    """Decibels relative to the clip maximum, floored ``top_db`` below the peak."""
    ref = max(float(S.max()), amin)
    db = 10.0 * np.log10(np.maximum(S, amin)) - 10.0 * np.log10(ref)
    return np.maximum(db, db.max() - top_db)


def log_mel(w: Waveform, config: SpectrogramConfig, filterbank: np.ndarray | None = None) -> LogMelSpectrogram:
    """Log-mel spectrogram of a clip that already matches ``config``'s rate and length."""
    if w.sample_rate != config.sample_rate:
        raise ValueError(f"sample rate mismatch: expected {config.sample_rate} Hz, got {w.sample_rate} Hz")
    if len(w) != config.clip_samples:
        raise ValueError(f"clip length mismatch: expected {config.clip_samples} samples, got {len(w)}")
    fb = mel_filterbank(config) if filterbank is None else filterbank
    power = power_spectrogram(np.asarray(w.samples, dtype=np.float64), config.n_fft, config.hop)
    db = power_to_db(power @ fb.T, config.top_db)
    if config.n_frames is not None and db.shape[0] > config.n_frames:
        start = (db.shape[0] - config.n_frames) // 2
        db = db[start : start + config.n_frames]
    return LogMelSpectrogram(db.astype(np.float32), config.fingerprint())


def standardize(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-spectrogram zero mean / unit variance over the last two axes."""
    x = np.asarray(x)
    mean = x.mean(axis=(-2, -1), keepdims=True)
    std = x.std(axis=(-2, -1), keepdims=True)
    return ((x - mean) / (std + eps)).astype(x.dtype, copy=False)


def process_clip(w: Waveform, config: SpectrogramConfig, filterbank: np.ndarray | None = None) -> LogMelSpectrogram:
    """Resample, peak-crop and extract; the full per-file preparation step."""
    w = resample(w, config.sample_rate)
    w = peak_crop(w, config.clip_samples)
    return log_mel(w, config, filterbank)
