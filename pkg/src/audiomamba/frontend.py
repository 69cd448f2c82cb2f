"""WAV decoding, resampling, log-mel extraction, and patch-window layout.

The pipeline turns a 10 s clip at 32 kHz into a (1024, 64) log-mel grid
(1000 frames plus 24 appended silence frames), then folds the time axis
into patch windows so the token raster keeps same-frame frequency bins
adjacent: ordering is window-outer, time-middle, frequency-inner.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 32000
WIN_SIZE = 1024
HOP_SIZE = 320
N_MELS = 64
TARGET_FRAMES = 1024
N_WINDOWS = 4
LOG_EPS = 1e-10


class WavDecodeError(ValueError):
    """Malformed or unsupported WAV payload; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class AudioClip:
    samples: np.ndarray  # mono float in [-1, 1]
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [T, F] log-mel energies

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM, hand-rolled so decode errors carry byte offsets)
# ---------------------------------------------------------------------------

def load_wav(path) -> AudioClip:
    """Decode a RIFF PCM WAV file: 8/16/24/32-bit int or 32-bit float,
    any channel count. Channels are averaged to mono, values scaled to [-1, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != b"RIFF":
        raise WavDecodeError("missing RIFF magic", 0)
    if raw[8:12] != b"WAVE":
        raise WavDecodeError("missing WAVE form type", 8)

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (csize,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + csize]
        if len(body) < csize:
            raise WavDecodeError(f"truncated '{cid.decode(errors='replace')}' chunk", pos)
        if cid == b"fmt ":
            if csize < 16:
                raise WavDecodeError("fmt chunk too small", pos)
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = (body, pos + 8)
        pos += 8 + csize + (csize & 1)
    if fmt is None:
        raise WavDecodeError("no fmt chunk", pos)
    if data is None:
        raise WavDecodeError("no data chunk", pos)

    audio_format, n_channels, sample_rate, _, _, bits = fmt
    body, data_off = data
    if audio_format == 0xFFFE and len(body) >= 2:  # extensible: trust bit depth
        audio_format = 1 if bits != 32 else 1
    if audio_format == 1:
        if bits == 8:
            x = (np.frombuffer(body, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
        elif bits == 16:
            x = np.frombuffer(body, dtype="<i2").astype(np.float64) / 32768.0
        elif bits == 24:
            b = np.frombuffer(body, dtype=np.uint8)
            n = len(b) // 3
            b = b[:n * 3].reshape(n, 3)
            v = (b[:, 0].astype(np.int32) | (b[:, 1].astype(np.int32) << 8)
                 | (b[:, 2].astype(np.int32) << 16))
            v = np.where(v >= 1 << 23, v - (1 << 24), v)
            x = v.astype(np.float64) / float(1 << 23)
        elif bits == 32:
            x = np.frombuffer(body, dtype="<i4").astype(np.float64) / float(1 << 31)
        else:
            raise WavDecodeError(f"unsupported PCM bit depth {bits}", data_off)
    elif audio_format == 3:
        if bits != 32:
            raise WavDecodeError(f"unsupported float bit depth {bits}", data_off)
        x = np.frombuffer(body, dtype="<f4").astype(np.float64)
    else:
        raise WavDecodeError(f"unsupported codec (format tag {audio_format})", data_off)

    if n_channels < 1:
        raise WavDecodeError("zero channels", data_off)
    n = len(x) // n_channels
    x = x[:n * n_channels].reshape(n, n_channels).mean(axis=1)
    return AudioClip(samples=x, sample_rate=sample_rate)


def save_wav(path, clip: AudioClip, bits: int = 16) -> None:
    """Write mono 16-bit PCM (test fixture helper)."""
    if bits != 16:
        raise ValueError("only 16-bit output supported")
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16)
    payload = (b"WAVE"
               + b"fmt " + struct.pack("<I", len(fmt)) + fmt
               + b"data" + struct.pack("<I", len(body)) + body)
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(payload)) + payload)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def resample(clip: AudioClip, target: int = SAMPLE_RATE, method: str = "linear") -> AudioClip:
    """Resample to the target rate; linear interpolation by default, with a
    windowed-sinc option for when resampler quality matters."""
    if clip.sample_rate <= 0:
        raise ValueError("source sample rate must be positive")
    if clip.sample_rate == target:
        return clip
    n_out = int(round(len(clip.samples) * target / clip.sample_rate))
    if method == "linear":
        t_in = np.arange(len(clip.samples)) / clip.sample_rate
        t_out = np.arange(n_out) / target
        out = np.interp(t_out, t_in, clip.samples)
    elif method == "sinc":
        out = _sinc_resample(clip.samples, clip.sample_rate, target, n_out)
    else:
        raise ValueError(f"unknown resample method '{method}'")
    return AudioClip(samples=out, sample_rate=target)


def _sinc_resample(x: np.ndarray, sr_in: int, sr_out: int, n_out: int,
                   half_width: int = 32) -> np.ndarray:
    ratio = sr_in / sr_out
    cutoff = min(1.0, 1.0 / ratio)
    out = np.empty(n_out)
    taps = np.arange(-half_width, half_width + 1)
    for i in range(n_out):
        center = i * ratio
        k = int(math.floor(center))
        frac = center - k
        idx = k + taps
        valid = (idx >= 0) & (idx < len(x))
        t = taps - frac
        kernel = cutoff * np.sinc(cutoff * t) * np.hanning(len(t) + 2)[1:-1]
        out[i] = np.dot(x[idx[valid]], kernel[valid])
    return out


# ---------------------------------------------------------------------------
# log-mel extraction
# ---------------------------------------------------------------------------

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int = WIN_SIZE, n_mels: int = N_MELS,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """HTK-style triangular filters from 0 Hz to Nyquist: [n_fft//2+1, n_mels]."""
    nyquist = sample_rate / 2.0
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(nyquist), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_fft // 2 + 1, n_mels))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / (ctr - lo)
        down = (hi - fft_freqs) / (hi - ctr)
        fb[:, m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_frequencies(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return _mel_to_hz(mel_pts)[1:-1]


def log_mel(clip: AudioClip, win: int = WIN_SIZE, hop: int = HOP_SIZE,
            n_mels: int = N_MELS, eps: float = LOG_EPS,
            allow_short: bool = False) -> MelSpectrogram:
    """Hann STFT power spectrum -> HTK mel filterbank -> log(x + eps).

    Center padding makes the frame count exactly len(samples) // hop, so a
    10 s clip at 32 kHz yields 1000 frames.
    """
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {clip.sample_rate}; resample first")
    x = np.asarray(clip.samples, dtype=np.float64)
    n_frames = len(x) // hop
    if n_frames == 0:
        if not allow_short:
            raise ValueError(f"clip shorter than one hop ({len(x)} samples); "
                             "pass allow_short=True to pad")
        n_frames = 1
    pad = win // 2
    xp = np.pad(x, (pad, pad + max(0, (n_frames - 1) * hop + win - (len(x) + 2 * pad))))
    window = np.hanning(win + 1)[:-1]
    starts = np.arange(n_frames) * hop
    frames = np.lib.stride_tricks.sliding_window_view(xp, win)[starts]
    spec = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    mel = spec @ mel_filterbank(win, n_mels, clip.sample_rate)
    return MelSpectrogram(values=np.log(mel + eps))


def pad_frames(m: MelSpectrogram, target_frames: int = TARGET_FRAMES,
               eps: float = LOG_EPS, allow_truncate: bool = False) -> MelSpectrogram:
    """Append silence frames (log eps) along time to reach the target length."""
    t = m.n_frames
    if t > target_frames:
        if not allow_truncate:
            raise ValueError(f"{t} frames exceed target {target_frames} and truncation is disabled")
        return MelSpectrogram(values=m.values[:target_frames].copy())
    if t == target_frames:
        return m
    fill = np.full((target_frames - t, m.n_mels), np.log(eps), dtype=m.values.dtype)
    return MelSpectrogram(values=np.concatenate([m.values, fill], axis=0))


# ---------------------------------------------------------------------------
# patch-window layout
# ---------------------------------------------------------------------------

def window_reshape(m: MelSpectrogram, n_windows: int = N_WINDOWS) -> np.ndarray:
    """Fold [T, F] into a 2D map [(n*F), T/n]: time is cut into n windows,
    stacked along the frequency axis. For the standard (1024, 64) input with
    n = 4 this yields a 256 x 256 map."""
    t, f = m.values.shape
    if t % n_windows != 0:
        raise ValueError(f"time frames {t} not divisible by window count {n_windows}")
    per = t // n_windows
    # out[w*F + fbin, tt] = m[w*per + tt, fbin]
    return (m.values.reshape(n_windows, per, f)
            .transpose(0, 2, 1)
            .reshape(n_windows * f, per).copy())


def inverse_window_reshape(grid: np.ndarray, n_windows: int = N_WINDOWS) -> MelSpectrogram:
    h, per = grid.shape
    if h % n_windows != 0:
        raise ValueError(f"grid height {h} not divisible by window count {n_windows}")
    f = h // n_windows
    values = (grid.reshape(n_windows, f, per)
              .transpose(0, 2, 1)
              .reshape(n_windows * per, f).copy())
    return MelSpectrogram(values=values)


def token_order(n_mels: int, frames_per_window: int, n_windows: int) -> list[tuple[int, int]]:
    """Canonical token enumeration over the folded map: window outermost,
    time next, frequency innermost, so same-time different-frequency tokens
    are adjacent. Returns (row, col) positions into the window_reshape map."""
    order = []
    for w in range(n_windows):
        for t in range(frames_per_window):
            for f in range(n_mels):
                order.append((w * n_mels + f, t))
    return order


def mel_to_grid(m: MelSpectrogram, n_windows: int = N_WINDOWS,
                normalize: bool = True) -> np.ndarray:
    """Model-ready [1, H, W] grid; per-clip standardization by default."""
    grid = window_reshape(m, n_windows)
    if normalize:
        grid = (grid - grid.mean()) / (grid.std() + 1e-6)
    return grid[None, :, :]
