"""Mono WAV helpers (16 kHz float32 by default) and feature-cache files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

FEATURE_MAGIC = b"RSFEAT01"


def write_wav(path, audio, sample_rate_hz: int = 16000, dtype: str = "float32"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    audio = np.asarray(audio)
    if dtype == "float32":
        wavfile.write(path, sample_rate_hz, audio.astype(np.float32))
    elif dtype == "int16":
        peak = np.max(np.abs(audio)) or 1.0
        scaled = np.clip(audio / peak, -1.0, 1.0)
        wavfile.write(path, sample_rate_hz, (scaled * 32767).astype(np.int16))
    else:
        raise ValueError(f"unsupported WAV dtype {dtype!r}")


def read_wav(path):
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono WAV")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    else:
        data = data.astype(np.float64)
    return data, int(sr)


def write_feature_cache(path, values: np.ndarray):
    """Little-endian float32 matrix with an 8-byte magic and F, T header."""
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("feature cache stores 2-D matrices")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", values.shape[0], values.shape[1]))
        fh.write(values.tobytes(order="C"))


def read_feature_cache(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad feature-cache magic {magic!r}")
        f, t = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * f * t), dtype="<f4")
    if data.size != f * t:
        raise ValueError(f"{path}: truncated feature cache")
    return data.reshape(f, t).astype(np.float32)


def feature_cache_header(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad feature-cache magic {magic!r}")
        f, t = struct.unpack("<II", fh.read(8))
    return f, t
