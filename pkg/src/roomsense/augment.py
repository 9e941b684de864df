"""Offline spectrogram augmentation of noise-free reverberant clips.

Clips are taken to a log mel spectrogram (1024-point Hann STFT, 256
hop), warped along time, masked along frequency and time, and taken
back to the waveform with the retained STFT phase. Augmented rows are
only ever appended to the training split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000
N_FFT = 1024
HOP = 256
LOG_FLOOR = 1e-10


@dataclass
class AugmentParams:
    warp_frames: int = 40       # time-warp parameter W
    freq_mask: int = 8          # frequency-mask parameter F (mel channels)
    time_mask: int = 100        # time-mask parameter T (frames)
    n_mels: int = 64
    n_freq_masks: int = 1
    n_time_masks: int = 1
    seed: int = 0


@dataclass
class MelSpectrogram:
    values: np.ndarray          # n_mels x frames, log magnitude
    phase_ref: np.ndarray | None  # complex STFT retained for inversion
    sample_rate_hz: int = SAMPLE_RATE

    @property
    def n_mels(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int = N_FFT, sr: int = SAMPLE_RATE):
    """Triangular mel filters over the rfft bins, shape (n_mels, n_fft//2+1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2), n_mels + 2))
    bins = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bins - lo) / max(mid - lo, 1e-9)
        down = (hi - bins) / max(hi - mid, 1e-9)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


_FB_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _filterbank(n_mels: int):
    if n_mels not in _FB_CACHE:
        fb = mel_filterbank(n_mels)
        _FB_CACHE[n_mels] = (fb, np.linalg.pinv(fb))
    return _FB_CACHE[n_mels]


def mel_forward(audio, n_mels: int = 64) -> MelSpectrogram:
    audio = np.asarray(audio, dtype=np.float64)
    if audio.size < N_FFT:
        raise ValueError(f"audio shorter than one {N_FFT}-sample window")
    _, _, stft = signal.stft(audio, fs=SAMPLE_RATE, window="hann",
                             nperseg=N_FFT, noverlap=N_FFT - HOP,
                             boundary="zeros", padded=True)
    fb, _ = _filterbank(n_mels)
    mel_mag = fb @ np.abs(stft)
    values = np.log(np.maximum(mel_mag, LOG_FLOOR))
    return MelSpectrogram(values=values, phase_ref=stft)


def mel_inverse(spec: MelSpectrogram, n_samples: int) -> np.ndarray:
    """Pseudo-inverse mel magnitudes recombined with the retained phase."""
    if spec.phase_ref is None:
        raise ValueError("spectrogram has no retained phase; cannot invert")
    fb, fb_pinv = _filterbank(spec.n_mels)
    # pseudo-inverse of the mel-domain residual against the retained
    # reference magnitude: an untouched spectrogram inverts exactly
    ref_mag = np.abs(spec.phase_ref)
    residual = np.exp(spec.values) - fb @ ref_mag
    lin_mag = np.clip(ref_mag + fb_pinv @ residual, 0.0, None)
    stft = lin_mag * np.exp(1j * np.angle(spec.phase_ref))
    _, audio = signal.istft(stft, fs=SAMPLE_RATE, window="hann",
                            nperseg=N_FFT, noverlap=N_FFT - HOP)
    audio = np.asarray(audio, dtype=np.float64)
    if audio.size >= n_samples:
        return audio[:n_samples]
    return np.pad(audio, (0, n_samples - audio.size))


def time_warp(spec: MelSpectrogram, warp_frames: int,
              rng: np.random.Generator) -> MelSpectrogram:
    """1-D piecewise-linear time remap fixing the first and last frame.

    An anchor frame t0 drawn from [W, tau - W] is displaced by w drawn
    from [0, W] (sign chosen at random); columns are linearly
    interpolated at the remapped positions.
    """
    tau = spec.n_frames
    if warp_frames == 0:
        return MelSpectrogram(spec.values.copy(), spec.phase_ref, spec.sample_rate_hz)
    if tau <= 2 * warp_frames:
        raise ValueError("frame count must exceed twice the warp parameter")
    t0 = int(rng.integers(warp_frames, tau - warp_frames + 1))
    w = int(rng.integers(0, warp_frames + 1))
    if rng.integers(2):
        w = -w
    t1 = int(np.clip(t0 + w, 1, tau - 2))
    # output position t pulls from source coordinate src(t); anchor maps t1 <- t0
    pos = np.arange(tau, dtype=np.float64)
    src = np.interp(pos, [0.0, float(t1), float(tau - 1)],
                    [0.0, float(t0), float(tau - 1)])
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, tau - 1)
    frac = src - lo
    values = spec.values[:, lo] * (1.0 - frac) + spec.values[:, hi] * frac
    return MelSpectrogram(values=values, phase_ref=spec.phase_ref,
                          sample_rate_hz=spec.sample_rate_hz)


def freq_mask(spec: MelSpectrogram, mask_param: int,
              rng: np.random.Generator) -> MelSpectrogram:
    """Mask a contiguous run of mel channels with the spectrogram mean."""
    values = spec.values.copy()
    if mask_param > 0:
        f1 = int(rng.integers(0, mask_param + 1))
        if f1 > 0:
            f0 = int(rng.integers(0, spec.n_mels - f1 + 1))
            values[f0 : f0 + f1, :] = values.mean()
    return MelSpectrogram(values=values, phase_ref=spec.phase_ref,
                          sample_rate_hz=spec.sample_rate_hz)


def time_mask(spec: MelSpectrogram, mask_param: int,
              rng: np.random.Generator) -> MelSpectrogram:
    """Mask a contiguous run of frames with the spectrogram mean."""
    values = spec.values.copy()
    if mask_param > 0:
        t1 = int(rng.integers(0, mask_param + 1))
        if t1 > 0:
            t0 = int(rng.integers(0, spec.n_frames - t1 + 1))
            values[:, t0 : t0 + t1] = values.mean()
    return MelSpectrogram(values=values, phase_ref=spec.phase_ref,
                          sample_rate_hz=spec.sample_rate_hz)


def specaugment_pipeline(clean_reverberant, params: AugmentParams) -> np.ndarray:
    """Warp + mask in the mel domain, then back to a same-length waveform."""
    audio = np.asarray(clean_reverberant, dtype=np.float64)
    rng = np.random.default_rng(params.seed)
    spec = mel_forward(audio, n_mels=params.n_mels)
    if params.warp_frames > 0:
        spec = time_warp(spec, params.warp_frames, rng)
    for _ in range(params.n_freq_masks):
        spec = freq_mask(spec, params.freq_mask, rng)
    for _ in range(params.n_time_masks):
        spec = time_mask(spec, params.time_mask, rng)
    return mel_inverse(spec, audio.size)


def augment_manifest(manifest, out_dir, params: AugmentParams | None = None,
                     fraction: float = 0.25, seed: int = 0):
    """Grow the training split by `fraction` with warped/masked copies.

    Augmentation reads each picked row's noise-free reverberant clip,
    runs the warp/mask pipeline on it, remixes noise at the row's
    declared SNR, and appends the result as a new augmented=True train
    row. Validation and test rows are never touched. Default fraction
    0.25 turns 192 train rows into 240.
    """
    from dataclasses import replace as dc_replace
    from pathlib import Path
    from . import datagen
    from .audio_io import read_wav, write_wav

    if params is None:
        params = AugmentParams()
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    out_dir = Path(out_dir)
    train_rows = [r for r in manifest.rows if r.split == "train"]
    if not train_rows:
        raise ValueError("manifest has no training rows to augment")
    n_new = int(round(fraction * len(train_rows)))
    rng = np.random.default_rng(datagen.derive_seed(seed, "augment-pick"))
    picked = [train_rows[i] for i in sorted(rng.choice(len(train_rows), n_new,
                                                       replace=False))]
    new_rows = []
    for i, src in enumerate(picked):
        clean, _ = read_wav(datagen.clean_path_for(src.path))
        row_seed = datagen.derive_seed(seed, "augment", src.id)
        p = dc_replace(params, seed=row_seed)
        warped = specaugment_pipeline(clean, p)
        if np.mean(warped ** 2) == 0:
            raise ValueError(f"{src.id}: augmentation produced silence")
        if src.noise_kind == "white":
            noise = datagen.white_noise(warped.size,
                                        datagen.derive_seed(row_seed, "white"))
        else:
            # reuse the row's own original noise realization shape: babble is
            # rebuilt from the residual of the stored noisy/clean pair
            noisy_src, _ = read_wav(src.path)
            noise = noisy_src.astype(np.float64) - clean.astype(np.float64)
        noisy, _ = datagen.mix_noise(warped, noise, src.snr_db)
        new_id = f"aug_{src.id}_{i:04d}"
        new_path = str(out_dir / "noisy" / f"{new_id}.wav")
        write_wav(new_path, noisy, SAMPLE_RATE)
        write_wav(datagen.clean_path_for(new_path), warped, SAMPLE_RATE)
        new_rows.append(dc_replace(src, id=new_id, path=new_path,
                                   augmented=True, seed=row_seed))
    out = datagen.Manifest(list(manifest.rows) + new_rows)
    return out, new_rows
