"""Gammatone + low-frequency-phase feature blocks.

A 20-band ERB-spaced complex gammatone bank (50-2000 Hz) filters the
waveform in the time domain; each band is reduced to frames by a
Hann-weighted sum over 64-sample windows hopped by 32. The block stacks
20 log-magnitude rows, 5 phase rows (bands below 500 Hz), and 5 wrapped
phase-derivative rows: 30 x T, with T = 1997 for a 4 s clip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

SAMPLE_RATE = 16000
FRAME_LEN = 64
FRAME_HOP = 32
N_BANDS = 20
F_LO = 50.0
F_HI = 2000.0
PHASE_CUTOFF_HZ = 500.0
N_PHASE_BANDS = 5
LOG_FLOOR = 1e-10
FEATURE_ROWS = 30
# valid-mode framing of 4 s yields 1999 frames; the block is truncated
# by two trailing frames so a 4 s clip is exactly 30 x 1997
FRAME_TRUNCATE = 2


def erb_hz(f_hz):
    """Equivalent rectangular bandwidth at centre frequency f (Glasberg-Moore)."""
    return 24.7 * (1.0 + 4.37 * f_hz / 1000.0)


def hz_to_erbscale(f_hz):
    return 21.4 * np.log10(1.0 + 0.00437 * f_hz)


def erbscale_to_hz(e):
    return (10.0 ** (e / 21.4) - 1.0) / 0.00437


@dataclass
class GammatoneBank:
    center_freqs_hz: np.ndarray
    poles: np.ndarray          # one complex pole per band (4th-order cascade)
    gains: np.ndarray          # unit response at each centre frequency
    sample_rate_hz: int
    order: int = 4


def build_gammatone_bank(sample_rate=SAMPLE_RATE, n_bands=N_BANDS,
                         f_lo=F_LO, f_hi=F_HI) -> GammatoneBank:
    """ERB-spaced 4th-order complex gammatone bank with pinned endpoints.

    The grid is split at the phase cutoff so exactly N_PHASE_BANDS
    centres fall strictly below it: bands 0..5 are ERB-uniform on
    [f_lo, cutoff] (band 5 sits exactly at the cutoff) and bands 5..19
    ERB-uniform on [cutoff, f_hi].
    """
    if f_hi >= sample_rate / 2:
        raise ValueError("upper band edge must be below Nyquist")
    if not (f_lo < PHASE_CUTOFF_HZ < f_hi):
        raise ValueError("phase cutoff must lie inside the band range")
    lo_e = hz_to_erbscale(f_lo)
    cut_e = hz_to_erbscale(PHASE_CUTOFF_HZ)
    hi_e = hz_to_erbscale(f_hi)
    low = erbscale_to_hz(np.linspace(lo_e, cut_e, N_PHASE_BANDS + 1))
    high = erbscale_to_hz(np.linspace(cut_e, hi_e, n_bands - N_PHASE_BANDS))
    centers = np.concatenate([low[:-1], high])
    # pin endpoints and the cutoff band exactly so the 5-below-cutoff
    # guarantee is not at the mercy of ERB-scale round-trip error
    centers[0], centers[-1] = f_lo, f_hi
    centers[N_PHASE_BANDS] = PHASE_CUTOFF_HZ

    bw = 1.019 * erb_hz(centers)
    poles = np.exp(-2.0 * np.pi * bw / sample_rate
                   + 1j * 2.0 * np.pi * centers / sample_rate)
    # normalize the 4th-order cascade to unit magnitude at each centre
    w = 2.0 * np.pi * centers / sample_rate
    h_fc = (1.0 / (1.0 - poles * np.exp(-1j * w))) ** 4
    gains = 1.0 / np.abs(h_fc)
    return GammatoneBank(center_freqs_hz=centers, poles=poles, gains=gains,
                         sample_rate_hz=sample_rate)


def gammatone_filter(bank: GammatoneBank, audio) -> np.ndarray:
    """Complex band signals, shape (n_bands, n_samples)."""
    audio = np.asarray(audio, dtype=np.float64)
    out = np.empty((bank.center_freqs_hz.size, audio.size), dtype=np.complex128)
    for b, (p, g) in enumerate(zip(bank.poles, bank.gains)):
        z = audio.astype(np.complex128)
        for _ in range(bank.order):
            z = lfilter([1.0], [1.0, -p], z)
        out[b] = g * z
    return out


def frame_count(n_samples: int) -> int:
    if n_samples < FRAME_LEN:
        raise ValueError(f"input shorter than one {FRAME_LEN}-sample frame")
    valid = (n_samples - FRAME_LEN) // FRAME_HOP + 1
    if valid <= FRAME_TRUNCATE:
        raise ValueError("input too short after frame truncation")
    return valid - FRAME_TRUNCATE


def gammatone_spectrogram(audio, bank: GammatoneBank | None = None) -> np.ndarray:
    """Complex 20 x T spectrogram: Hann-weighted frame sums per band."""
    audio = np.asarray(audio, dtype=np.float64)
    if bank is None:
        bank = _default_bank()
    n_frames = frame_count(audio.size)
    band_sig = gammatone_filter(bank, audio)
    window = np.hanning(FRAME_LEN)
    # strided frame view: (n_bands, n_frames, FRAME_LEN)
    frames = np.lib.stride_tricks.sliding_window_view(
        band_sig, FRAME_LEN, axis=1)[:, ::FRAME_HOP, :][:, :n_frames, :]
    return np.einsum("btw,w->bt", frames, window)


def phase_features(spec: np.ndarray) -> np.ndarray:
    """Phase of the 5 lowest bands, wrapped into (-pi, pi]; angle(0) = 0."""
    phase = np.angle(spec[:N_PHASE_BANDS])
    phase = np.where(phase <= -np.pi, phase + 2.0 * np.pi, phase)
    return phase


def wrap_phase(x):
    """Wrap into (-pi, pi]."""
    wrapped = np.mod(x + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)


def phase_derivative(phase: np.ndarray) -> np.ndarray:
    """Wrapped first difference along the band axis; row 0 copies row 1."""
    diff = wrap_phase(np.diff(phase, axis=0))
    return np.vstack([diff[:1], diff])


@dataclass
class FeatureBlock:
    values: np.ndarray      # 30 x T float
    frame_rate_hz: float = SAMPLE_RATE / FRAME_HOP

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]


_BANK = None


def _default_bank() -> GammatoneBank:
    global _BANK
    if _BANK is None:
        _BANK = build_gammatone_bank()
    return _BANK


def featurize(audio, bank: GammatoneBank | None = None) -> FeatureBlock:
    """30 x T block: [log magnitude (20); phase (5); phase derivative (5)]."""
    spec = gammatone_spectrogram(audio, bank)
    log_mag = np.log(np.maximum(np.abs(spec), LOG_FLOOR))
    phase = phase_features(spec)
    deriv = phase_derivative(phase)
    values = np.vstack([log_mag, phase, deriv]).astype(np.float32)
    assert values.shape[0] == FEATURE_ROWS
    return FeatureBlock(values=values)
