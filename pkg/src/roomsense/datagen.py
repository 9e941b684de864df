"""Reverberant-noisy speech corpus construction.

Anechoic speech is convolved with room impulse responses, trimmed to a
fixed 4 s clip, and mixed with white or babble noise at one of four SNR
levels. Every sample carries log10-volume and RT60 labels plus a split
tag; held-out rooms never appear in training.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .audio_io import read_wav, write_wav

SAMPLE_RATE = 16000
CLIP_SECONDS = 4.0
CLIP_SAMPLES = int(CLIP_SECONDS * SAMPLE_RATE)
SNR_LEVELS = (30, 20, 10, 0)
NOISE_KINDS = ("white", "babble")

# label anchors for the joint RT60->volume mapping (corpus ranges)
RT60_RANGE = (0.41, 19.68)
VOLUME_RANGE = (11.88, 21000.0)

MANIFEST_COLUMNS = [
    "id", "path", "room_id", "volume_m3", "rt60_s",
    "snr_db", "noise_kind", "split", "augmented", "seed",
]


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary string-able parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class CorpusSample:
    id: str
    path: str
    room_id: str
    volume_m3: float
    rt60_s: float
    snr_db: int
    noise_kind: str
    split: str
    augmented: bool
    seed: int

    @property
    def label_logvol(self) -> float:
        return encode_volume_label(self.volume_m3)

    @property
    def label_rt60_s(self) -> float:
        return self.rt60_s


class Manifest:
    """Ordered collection of corpus rows with CSV round-trip."""

    def __init__(self, rows=None):
        self.rows: list[CorpusSample] = list(rows or [])

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def split(self, name: str) -> "Manifest":
        return Manifest(r for r in self.rows if r.split == name)

    def split_sizes(self):
        sizes = {}
        for r in self.rows:
            sizes[r.split] = sizes.get(r.split, 0) + 1
        return sizes

    def rooms(self, split=None):
        return sorted({r.room_id for r in self.rows if split is None or r.split == split})

    def append(self, row: CorpusSample):
        self.rows.append(row)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_COLUMNS)
            for r in self.rows:
                d = asdict(r)
                d["augmented"] = int(d["augmented"])
                writer.writerow([d[c] for c in MANIFEST_COLUMNS])

    @classmethod
    def load(cls, path) -> "Manifest":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != MANIFEST_COLUMNS:
                raise ValueError(f"{path}: unexpected manifest columns {reader.fieldnames}")
            for d in reader:
                rows.append(CorpusSample(
                    id=d["id"], path=d["path"], room_id=d["room_id"],
                    volume_m3=float(d["volume_m3"]), rt60_s=float(d["rt60_s"]),
                    snr_db=int(d["snr_db"]), noise_kind=d["noise_kind"],
                    split=d["split"], augmented=bool(int(d["augmented"])),
                    seed=int(d["seed"]),
                ))
        return cls(rows)


# ---------------------------------------------------------------------------
# label encodings

def encode_volume_label(volume_m3: float) -> float:
    if volume_m3 <= 0:
        raise ValueError("volume must be positive")
    return math.log10(volume_m3)


def decode_volume_label(label: float) -> float:
    return 10.0 ** label


@dataclass(frozen=True)
class JointLabel:
    u: float  # scaled RT60 label, volume-range aligned
    v: float  # log10 volume


_JOINT_A = (math.log10(VOLUME_RANGE[1]) - math.log10(VOLUME_RANGE[0])) / (
    math.log10(RT60_RANGE[1]) - math.log10(RT60_RANGE[0]))
_JOINT_B = math.log10(VOLUME_RANGE[0]) - _JOINT_A * math.log10(RT60_RANGE[0])


def encode_joint_label(rt60_s: float, volume_m3: float) -> JointLabel:
    """Affine-in-log map sending the RT60 range onto the volume range."""
    if not (RT60_RANGE[0] <= rt60_s <= RT60_RANGE[1]):
        raise ValueError(f"rt60 {rt60_s} outside mapped range {RT60_RANGE}")
    if not (VOLUME_RANGE[0] <= volume_m3 <= VOLUME_RANGE[1]):
        raise ValueError(f"volume {volume_m3} outside mapped range {VOLUME_RANGE}")
    return JointLabel(u=_JOINT_A * math.log10(rt60_s) + _JOINT_B,
                      v=math.log10(volume_m3))


def decode_joint_label(label: JointLabel):
    rt60 = 10.0 ** ((label.u - _JOINT_B) / _JOINT_A)
    return rt60, 10.0 ** label.v


# ---------------------------------------------------------------------------
# signal operations

def convolve_reverb(speech, rir_samples, rir_sample_rate=SAMPLE_RATE,
                    speech_sample_rate=SAMPLE_RATE, clip_samples=CLIP_SAMPLES):
    """Full convolution with the RIR, trimmed or zero-padded to clip length."""
    if rir_sample_rate != speech_sample_rate:
        raise ValueError("speech and RIR sample rates must match")
    out = fftconvolve(np.asarray(speech, dtype=np.float64),
                      np.asarray(rir_samples, dtype=np.float64))
    return fix_length(out, clip_samples)


def fix_length(audio, n: int):
    audio = np.asarray(audio, dtype=np.float64)
    if audio.size >= n:
        return audio[:n].copy()
    return np.pad(audio, (0, n - audio.size))


def mix_noise(clean, noise, snr_db: float):
    """Add noise scaled so the full-clip SNR equals snr_db exactly."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    p_clean = np.mean(clean ** 2)
    if p_clean == 0:
        raise ValueError("clean signal has zero power")
    if noise.size < clean.size:
        noise = np.tile(noise, int(np.ceil(clean.size / noise.size)))
    noise = noise[: clean.size]
    p_noise = np.mean(noise ** 2)
    if p_noise == 0:
        raise ValueError("noise signal has zero power")
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise, gain


def white_noise(n_samples: int, seed: int):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(n_samples)


def make_babble(speech_pool, k_talkers: int, seed: int, n_samples: int = CLIP_SAMPLES):
    """Sum of k randomly offset, RMS-normalized speech clips at unit RMS."""
    if not speech_pool:
        raise ValueError("speech pool is empty")
    if k_talkers < 2:
        raise ValueError("babble needs at least 2 talkers")
    rng = np.random.default_rng(seed)
    out = np.zeros(n_samples)
    for _ in range(k_talkers):
        clip = np.asarray(speech_pool[rng.integers(len(speech_pool))], dtype=np.float64)
        if clip.size < n_samples:
            clip = np.tile(clip, int(np.ceil(n_samples / clip.size)))
        offset = int(rng.integers(clip.size))
        rolled = np.roll(clip, offset)[:n_samples]
        rms = np.sqrt(np.mean(rolled ** 2))
        if rms > 0:
            out += rolled / rms
    rms = np.sqrt(np.mean(out ** 2))
    if rms == 0:
        raise ValueError("babble mixture is silent")
    return out / rms


def synthetic_speech(duration_s: float, seed: int, sample_rate=SAMPLE_RATE):
    """Speech-like test signal: pitched pulse trains through formant-ish
    resonators, interleaved with noise bursts and pauses."""
    rng = np.random.default_rng(seed)
    n = int(duration_s * sample_rate)
    out = np.zeros(n)
    pos = 0
    while pos < n:
        seg_len = int(rng.uniform(0.08, 0.3) * sample_rate)
        seg_len = min(seg_len, n - pos)
        kind = rng.uniform()
        if kind < 0.6:  # voiced: pulse train + resonator
            f0 = rng.uniform(80, 260)
            period = max(2, int(sample_rate / f0))
            seg = np.zeros(seg_len)
            seg[::period] = 1.0
            formant = rng.uniform(300, 2500)
            bw = rng.uniform(80, 250)
            r = math.exp(-math.pi * bw / sample_rate)
            theta = 2 * math.pi * formant / sample_rate
            b, a = [1.0], [1.0, -2 * r * math.cos(theta), r * r]
            seg = lfilter(b, a, seg)
        elif kind < 0.85:  # unvoiced burst
            seg = rng.standard_normal(seg_len) * 0.3
            seg = lfilter([1, -0.97], [1], seg)
        else:  # pause
            seg = np.zeros(seg_len)
        env = np.hanning(max(seg_len, 2))[:seg_len]
        out[pos : pos + seg_len] = seg * env
        pos += seg_len
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def generate_speech_dir(out_dir, n_files: int, seed: int,
                        duration_s: float = 5.0):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_files):
        audio = synthetic_speech(duration_s, derive_seed(seed, "speech", i))
        p = out_dir / f"speech_{i:03d}.wav"
        write_wav(p, audio, SAMPLE_RATE)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# corpus assembly

def _largest_remainder(total: int, weights):
    """Integer allocation of `total` proportional to weights, exact sum."""
    raw = [total * w / sum(weights) for w in weights]
    base = [int(math.floor(x)) for x in raw]
    rem = total - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (raw[i] - base[i], -i), reverse=True)
    for i in order[:rem]:
        base[i] += 1
    return base


def assign_room_splits(room_ids, ratio=(6, 2, 2), seed: int = 0):
    """Partition rooms into train/validation/test, seeded and disjoint."""
    room_ids = sorted(room_ids)
    if len(room_ids) < 3:
        raise ValueError("need at least 3 rooms to cover all splits")
    rng = np.random.default_rng(derive_seed(seed, "room-split"))
    perm = [room_ids[i] for i in rng.permutation(len(room_ids))]
    counts = _largest_remainder(len(room_ids), ratio)
    counts = [max(1, c) for c in counts]
    while sum(counts) > len(room_ids):
        counts[counts.index(max(counts))] -= 1
    splits = {}
    it = iter(perm)
    for name, c in zip(("train", "validation", "test"), counts):
        splits[name] = sorted(next(it) for _ in range(c))
    return splits


def load_rir_manifest(path):
    """RIR sidecar manifest written by the simulate-rir stage."""
    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            rows.append({
                "room_id": d["room_id"],
                "path": d["path"],
                "volume_m3": float(d["volume_m3"]),
                "rt60_s": float(d["rt60_s"]),
                "source_pos": d["source_pos"],
                "mic_pos": d["mic_pos"],
            })
    if not rows:
        raise ValueError(f"{path}: empty RIR manifest")
    return rows


def save_rir_manifest(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["room_id", "path", "volume_m3", "rt60_s", "source_pos", "mic_pos"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r[c] for c in cols])


def synthesize_row(row: CorpusSample, rir_samples, speech_paths, babble_pool,
                   k_talkers: int = 6):
    """Deterministically rebuild (clean, noisy) audio for a manifest row."""
    rng = np.random.default_rng(row.seed)
    speech, sr = read_wav(speech_paths[rng.integers(len(speech_paths))])
    clean = convolve_reverb(speech, rir_samples, SAMPLE_RATE, sr)
    if row.noise_kind == "white":
        noise = white_noise(CLIP_SAMPLES, derive_seed(row.seed, "white"))
    elif row.noise_kind == "babble":
        noise = make_babble(babble_pool, k_talkers, derive_seed(row.seed, "babble"))
    else:
        raise ValueError(f"unknown noise kind {row.noise_kind!r}")
    noisy, _ = mix_noise(clean, noise, row.snr_db)
    return clean, noisy


def build_corpus(rir_rows, speech_dir, out_dir, n_samples: int = 320,
                 ratio=(6, 2, 2), snr_levels=SNR_LEVELS,
                 noise_kinds=NOISE_KINDS, k_talkers: int = 6,
                 seed: int = 0) -> Manifest:
    """Emit WAVs and a manifest crossing speech x RIR x SNR x noise kind.

    Rooms are split disjointly; within a split every room receives the
    same number of samples (remainders spread deterministically). Both
    the noisy clip and its noise-free reverberant version are written so
    downstream stages (augmentation, SNR verification) can recover s(t).
    """
    out_dir = Path(out_dir)
    speech_paths = sorted(Path(speech_dir).glob("*.wav"))
    if not speech_paths:
        raise ValueError(f"no speech WAVs in {speech_dir}; need at least 1 "
                         f"(and >= 2 distinct clips recommended for babble)")
    bad = [int(s) for s in snr_levels if int(s) not in SNR_LEVELS]
    if bad:
        raise ValueError(f"unsupported SNR levels {bad}; allowed {SNR_LEVELS}")

    by_room = {}
    for r in rir_rows:
        by_room.setdefault(r["room_id"], []).append(r)
    splits = assign_room_splits(by_room.keys(), ratio=ratio, seed=seed)
    split_counts = dict(zip(("train", "validation", "test"),
                            _largest_remainder(n_samples, ratio)))

    babble_pool = [read_wav(p)[0] for p in speech_paths]
    rir_cache = {}

    def rir_for(row_meta):
        p = row_meta["path"]
        if p not in rir_cache:
            rir_cache[p], _ = read_wav(p)
        return rir_cache[p]

    manifest = Manifest()
    idx = 0
    for split in ("train", "validation", "test"):
        rooms = splits[split]
        per_room = _largest_remainder(split_counts[split], [1] * len(rooms))
        for room_id, count in zip(rooms, per_room):
            room_rirs = by_room[room_id]
            for j in range(count):
                sample_id = f"{split}_{idx:05d}"
                row_seed = derive_seed(seed, "row", sample_id)
                rng = np.random.default_rng(derive_seed(row_seed, "assign"))
                meta = room_rirs[j % len(room_rirs)]
                snr = int(snr_levels[j % len(snr_levels)])
                kind = noise_kinds[(j // len(snr_levels)) % len(noise_kinds)]
                row = CorpusSample(
                    id=sample_id,
                    path=str(out_dir / "noisy" / f"{sample_id}.wav"),
                    room_id=room_id,
                    volume_m3=meta["volume_m3"],
                    rt60_s=meta["rt60_s"],
                    snr_db=snr,
                    noise_kind=kind,
                    split=split,
                    augmented=False,
                    seed=row_seed,
                )
                clean, noisy = synthesize_row(row, rir_for(meta), speech_paths,
                                              babble_pool, k_talkers)
                write_wav(row.path, noisy, SAMPLE_RATE)
                write_wav(clean_path_for(row.path), clean, SAMPLE_RATE)
                manifest.append(row)
                idx += 1

    manifest.save(out_dir / "manifest.csv")
    return manifest


def clean_path_for(noisy_path) -> str:
    """Noise-free reverberant clip written alongside each noisy clip."""
    p = Path(noisy_path)
    return str(p.parent.parent / "clean" / p.name)


def measured_snr_db(noisy, clean) -> float:
    noise = np.asarray(noisy, dtype=np.float64) - np.asarray(clean, dtype=np.float64)
    p_s = np.mean(np.asarray(clean, dtype=np.float64) ** 2)
    p_n = np.mean(noise ** 2)
    if p_n == 0:
        return math.inf
    return 10.0 * math.log10(p_s / p_n)
