"""Acceptance gate: ten end-to-end checks of the published structural
numbers and the pipeline's measurable properties. Each test prints a
single PASS/FAIL line with the measured values."""

import math
import time

import numpy as np
import pytest
from scipy import stats as sp_stats

from roomsense import datagen, rirgen, evalkit
from roomsense.audio_io import read_wav, write_wav
from roomsense.augment import (AugmentParams, MelSpectrogram, freq_mask,
                               time_mask, specaugment_pipeline,
                               augment_manifest)
from roomsense.datagen import CorpusSample, Manifest, encode_volume_label
from roomsense.features import featurize, frame_count
from roomsense.neural.tensor import Tensor
from roomsense.neural.config import (TransformerConfig, ConvNetConfig,
                                     ConvRecurrentConfig)
from roomsense.neural import models as M
from roomsense.neural.gradcheck import grad_check
from roomsense.neural.transfer import (transfer_channel_average,
                                       interpolate_positional, reinit_head)
from roomsense.neural.checkpoint import checkpoint_from_model, load_checkpoint
from roomsense.pipeline import RunConfig, desk_preset, run_pipeline
from roomsense.train import loss_single, loss_joint, adam_step, AdamState

DESK_SEED = 11


def _verdict(name: str, ok: bool, detail: str = ""):
    print(f"{name}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name} failed: {detail}"


# ---------------------------------------------------------------------------
# 1. patch shape law

def test_01_patch_shape_law():
    audio = np.random.default_rng(0).standard_normal(64000) * 0.1
    block = featurize(audio).values
    t0 = time.monotonic()
    patches_4s, grid_4s = M.patch_split(block)
    n_4s = patches_4s.shape[0]
    f2, t2 = 30, frame_count(32000)
    rows2, cols2 = M.patch_grid_dims(f2, t2)
    n_2s = rows2 * cols2
    elapsed = time.monotonic() - t0
    ok = (block.shape == (30, 1997) and n_4s == 398 and grid_4s == (2, 199)
          and (f2, t2) == (30, 997) and n_2s == 198 and elapsed < 1.0)
    _verdict("patch shape law", ok,
             f"block {block.shape}, 4s patches {n_4s}, 2s patches {n_2s}, "
             f"{elapsed:.3f}s")


# ---------------------------------------------------------------------------
# 2. gradient verification

def test_02_gradient_verification(monkeypatch):
    t0 = time.monotonic()
    target = np.array([[1.2], [3.0]])
    blocks = np.random.default_rng(2).normal(size=(2, 30, 64))

    cfg = TransformerConfig(embed_dim=16, n_layers=2, n_heads=2,
                            input_shape=(30, 64))
    ast = M.PatchTransformer(cfg, seed=0, dtype=np.float64)
    patches, grid = M.blocks_to_patches(blocks)

    def tloss(m):
        return ((m.forward(patches, grid) - Tensor(target)) ** 2).mean()

    cnn = M.CnnRegressor(ConvNetConfig(channels=(4, 4, 8, 8, 16, 16),
                                       input_shape=(30, 64),
                                       dropout_rate=0.0),
                         seed=1, dtype=np.float64)
    crnn = M.CrnnRegressor(ConvRecurrentConfig(channels=(4, 4, 8, 8, 8, 8),
                                               lstm_hidden=8,
                                               dropout_rate=0.0),
                           seed=1, dtype=np.float64)

    def bloss(m):
        return ((m.forward(blocks) - Tensor(target)) ** 2).mean()

    errs = {
        "ast": grad_check(ast, tloss, max_coords=200),
        "cnn": grad_check(cnn, bloss, max_coords=200),
        "crnn": grad_check(crnn, bloss, max_coords=200),
    }

    # negative control: a 5% scale fault in one backward rule must be caught
    def bad_sigmoid(self):
        from scipy import special
        out = special.expit(self.data)
        return Tensor(out, parents=(self,),
                      backward=lambda g: (g * out * (1.0 - out) * 1.05,))

    monkeypatch.setattr(Tensor, "sigmoid", bad_sigmoid)
    corrupted = M.PatchTransformer(cfg, seed=0, dtype=np.float64)
    control = grad_check(corrupted, tloss, max_coords=200)
    elapsed = time.monotonic() - t0

    ok = all(e < 1e-4 for e in errs.values()) and control > 1e-2 \
        and elapsed < 300
    _verdict("gradient verification", ok,
             ", ".join(f"{k} {v:.2e}" for k, v in errs.items())
             + f", control {control:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 3. overfit capacity

def test_03_overfit_capacity():
    rng = np.random.default_rng(7)
    cfg = TransformerConfig(embed_dim=16, n_layers=2, n_heads=2,
                            input_shape=(30, 1997))
    model = M.PatchTransformer(cfg, seed=1)
    blocks = rng.normal(size=(8, 30, 1997)).astype(np.float32)
    patches, grid = M.blocks_to_patches(blocks)
    y = rng.uniform(1.0, 4.0, size=(8, 1)).astype(np.float32)

    state = AdamState()
    t0 = time.monotonic()
    final = math.inf
    steps = 2000
    for step in range(2000):
        for t in model.params.values():
            t.zero_grad()
        loss = loss_single(model.forward(patches, grid), y)
        loss.backward()
        adam_step(model.params, state, 1e-3, 0.0)
        final = loss.item()
        if final < 1e-3:
            steps = step + 1
            break
    elapsed = time.monotonic() - t0
    ok = final < 1e-3 and steps <= 2000 and elapsed < 600
    _verdict("overfit capacity", ok,
             f"loss {final:.2e} after {steps} steps, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 4. reverberation-time oracle

def test_04_rt60_oracle():
    t0 = time.monotonic()
    fs = 16000
    worst_exp = 0.0
    for t60 in (0.3, 0.5, 1.0, 3.0, 10.0):
        dur = 0.7 * t60
        t = np.arange(int(dur * fs)) / fs
        envelope = np.exp(-6.907755278982137 * t / t60)
        errs = []
        for seed in range(20):
            h = np.random.default_rng(seed).standard_normal(t.size) * envelope
            est = rirgen.estimate_rt60(rirgen.schroeder_decay_samples(h, fs))
            errs.append(abs(est - t60) / t60)
        worst_exp = max(worst_exp, float(np.mean(errs)))

    worst_ism = 0.0
    for alpha in (0.1, 0.15, 0.2, 0.3, 0.4):
        order = 90 if alpha < 0.15 else 70
        room = rirgen.ShoeboxRoom(length_m=4.0, width_m=3.5, height_m=3.0,
                                  absorption=alpha, max_image_order=order)
        rir = rirgen.simulate_rir(room, (1.1, 1.2, 1.3), (2.9, 2.3, 1.7))
        sab = rirgen.sabine_rt60(room.volume_m3, room.surface_m2, alpha)
        worst_ism = max(worst_ism, abs(rir.rt60_s - sab) / sab)
    elapsed = time.monotonic() - t0

    ok = worst_exp < 0.05 and worst_ism < 0.35 and elapsed < 120
    _verdict("reverberation-time oracle", ok,
             f"exponential mean err {worst_exp:.3f}, "
             f"image-source vs diffuse-field err {worst_ism:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# desk pipeline fixture shared by criteria 5 and 9

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("desk") / "run"
    config = desk_preset(run_dir=run_dir, seed=DESK_SEED)
    t0 = time.monotonic()
    run_pipeline(config)
    return config, run_dir, time.monotonic() - t0


# ---------------------------------------------------------------------------
# 5. mixing exactness

def test_05_snr_mixing_exactness(desk_run):
    config, run_dir, _ = desk_run
    manifest = Manifest.load(run_dir / "corpus" / "manifest.csv")
    t0 = time.monotonic()
    worst = 0.0
    for row in manifest.rows:
        noisy, _ = read_wav(row.path)
        clean, _ = read_wav(datagen.clean_path_for(row.path))
        measured = datagen.measured_snr_db(noisy, clean)
        worst = max(worst, abs(measured - row.snr_db))
    elapsed = time.monotonic() - t0
    ok = worst < 0.05 and elapsed < 60
    _verdict("mixing exactness", ok,
             f"worst deviation {worst:.4f} dB over {len(manifest)} rows, "
             f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 6. metric identities

def test_06_metric_identities():
    t0 = time.monotonic()
    t = np.array([10.0, 200.0, 4000.0])
    mm_exact = evalkit.metric_meanmult(t, t)
    mm_e = evalkit.metric_meanmult(t * math.e, t)
    rho_pos = evalkit.metric_pearson(np.arange(8.0), np.arange(8.0))
    rho_neg = evalkit.metric_pearson(-np.arange(8.0), np.arange(8.0))

    rng = np.random.default_rng(1)
    u_t = rng.uniform(1, 2, (4, 1))
    v_t = rng.uniform(1, 2, (4, 1))
    u_p = u_t * 1.1
    v_p = v_t * 0.9
    base_u = loss_joint(Tensor(u_p), Tensor(v_t), u_t, v_t, 1.0, 1.0).item()
    both = loss_joint(Tensor(u_p), Tensor(v_p), u_t, v_t, 1.0, 1.0).item()
    lam = loss_joint(Tensor(u_p), Tensor(v_p), u_t, v_t, 1.0, 3.0).item()
    linearity = abs(lam - (base_u + 3.0 * (both - base_u)))
    c = 11.7
    scaled = loss_joint(Tensor(c * u_p), Tensor(v_p), c * u_t, v_t).item()
    plain = loss_joint(Tensor(u_p), Tensor(v_p), u_t, v_t).item()
    scale_inv = abs(scaled - plain)
    elapsed = time.monotonic() - t0

    ok = (abs(mm_exact - 1.0) < 1e-12 and abs(mm_e - math.e) < 1e-12
          and abs(rho_pos - 1.0) < 1e-12 and abs(rho_neg + 1.0) < 1e-12
          and linearity < 1e-12 and scale_inv < 1e-12 and elapsed < 1.0)
    _verdict("metric identities", ok,
             f"MM {mm_exact:.15f}/{mm_e:.15f}, rho {rho_pos:+.0f}/{rho_neg:+.0f}, "
             f"lambda linearity {linearity:.1e}, scale inv {scale_inv:.1e}")


# ---------------------------------------------------------------------------
# 7. transfer-operation identities

def test_07_transfer_identities():
    t0 = time.monotonic()
    rng = np.random.default_rng(3)
    one = rng.standard_normal((1, 16, 16, 24))
    avg = transfer_channel_average(np.repeat(one, 3, axis=0))
    channel_ok = np.allclose(avg, one[0].reshape(-1, 24), rtol=1e-15, atol=0)

    grid = M.PositionalGrid(rng.standard_normal((2 * 199 + 1, 16)), 2, 199)
    same = interpolate_positional(grid, (2, 199))
    interp_ok = np.array_equal(same.embeddings, grid.embeddings)

    cfg = TransformerConfig(embed_dim=16, n_layers=1, n_heads=2)
    model = M.PatchTransformer(cfg, seed=0)
    ckpt = checkpoint_from_model(model)
    moved = reinit_head(ckpt, "vol", seed=9)
    trunk_ok = all(np.array_equal(moved.params[k], ckpt.params[k])
                   for k in ckpt.params if not k.startswith("head."))
    head_changed = any(not np.array_equal(moved.params[k], ckpt.params[k])
                       for k in ckpt.params if k.startswith("head."))
    elapsed = time.monotonic() - t0

    ok = channel_ok and interp_ok and trunk_ok and head_changed and elapsed < 1.0
    _verdict("transfer identities", ok,
             f"channel avg {channel_ok}, interp identity {interp_ok}, "
             f"trunk preserved {trunk_ok}, head reinit {head_changed}")


# ---------------------------------------------------------------------------
# 8. augmentation statistics and bookkeeping

def _mask_widths(mask_fn, mask_param, axis, n_draws, seed):
    rng = np.random.default_rng(seed)
    base = MelSpectrogram(np.random.default_rng(99).standard_normal((64, 50)),
                          phase_ref=None, sample_rate_hz=16000)
    widths = np.empty(n_draws, dtype=np.int64)
    for i in range(n_draws):
        masked = mask_fn(base, mask_param, rng)
        changed = (masked.values != base.values).any(axis=axis)
        widths[i] = int(changed.sum())
    return widths


def test_08_augmentation_statistics(tmp_path):
    t0 = time.monotonic()
    n_draws = 10000
    p_values = []
    for (fn, axis), seed in (((freq_mask, 1), 4), ((time_mask, 0), 14)):
        widths = _mask_widths(fn, 8, axis, n_draws, seed=seed)
        counts = np.bincount(widths, minlength=9)
        p_values.append(sp_stats.chisquare(counts).pvalue)

    audio = np.random.default_rng(5).standard_normal(32000) * 0.1
    passthrough = specaugment_pipeline(audio, AugmentParams(
        warp_frames=0, freq_mask=0, time_mask=0,
        n_freq_masks=0, n_time_masks=0, seed=0))
    round_trip_err = float(np.max(np.abs(passthrough - audio)))

    # eight train rows grown by a quarter: 8 -> 10, the published ratio
    rows = []
    rng = np.random.default_rng(6)
    for i in range(8):
        clean = rng.standard_normal(32000) * 0.1
        noise = datagen.white_noise(32000, seed=100 + i)
        snr = (30, 20, 10, 0)[i % 4]
        noisy, _ = datagen.mix_noise(clean, noise, snr)
        path = tmp_path / "noisy" / f"s{i:02d}.wav"
        write_wav(path, noisy, 16000)
        write_wav(datagen.clean_path_for(path), clean, 16000)
        rows.append(CorpusSample(id=f"s{i:02d}", path=str(path),
                                 room_id=f"room_{i % 4}", volume_m3=100.0,
                                 rt60_s=0.5, snr_db=snr, noise_kind="white",
                                 split="train", augmented=False, seed=i))
    grown, new_rows = augment_manifest(Manifest(rows), tmp_path, fraction=0.25,
                                       seed=1)
    n_train = sum(1 for r in grown.rows if r.split == "train")
    growth_ok = len(new_rows) == 2 and n_train == 10
    snr_ok = all(
        abs(datagen.measured_snr_db(read_wav(r.path)[0],
                                    read_wav(datagen.clean_path_for(r.path))[0])
            - r.snr_db) < 0.05
        for r in new_rows)
    elapsed = time.monotonic() - t0

    ok = (all(p > 0.01 for p in p_values) and round_trip_err < 1e-6
          and growth_ok and snr_ok and elapsed < 300)
    _verdict("augmentation statistics", ok,
             f"mask chi2 p {p_values[0]:.3f}/{p_values[1]:.3f}, "
             f"round trip {round_trip_err:.1e}, train 8->{n_train}, "
             f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9. end-to-end learning signal

def test_09_end_to_end_learning_signal(desk_run):
    config, run_dir, pipeline_s = desk_run
    manifest = Manifest.load(run_dir / "corpus" / "manifest.csv")
    train = manifest.split("train")
    test = manifest.split("test")
    y_train = np.array([encode_volume_label(r.volume_m3) for r in train.rows])
    y_test = np.array([encode_volume_label(r.volume_m3) for r in test.rows])
    const_mse = float(np.mean((y_test - y_train.mean()) ** 2))
    model_mse = evalkit.load_metrics_csv(
        run_dir / "reports" / "metrics.csv")["all"].mse
    ratio = model_mse / const_mse

    t0 = time.monotonic()
    ckpt = load_checkpoint(run_dir / "ckpts" / "best.ckpt")
    per_len = evalkit.evaluate_varlen(ckpt, test, mode="pad")
    mses = [per_len[k].mse for k in sorted(per_len)]  # 1.0 s .. 4.0 s
    non_improving = sum(1 for shorter, longer in zip(mses[:-1], mses[1:])
                        if shorter >= longer)
    elapsed = pipeline_s + (time.monotonic() - t0)

    ok = ratio <= 0.70 and non_improving >= 5 and elapsed < 1800
    _verdict("end-to-end learning signal", ok,
             f"model/constant MSE ratio {ratio:.3f}, "
             f"non-improving length pairs {non_improving}/6, "
             f"varlen MSEs {['%.3f' % v for v in mses]}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 10. determinism

def _reduced(run_dir, seed=5) -> RunConfig:
    cfg = RunConfig(seed=seed, run_dir=str(run_dir))
    cfg.n_rooms = 5
    cfg.n_receivers = 2
    cfg.volume_range_m3 = (50.0, 800.0)
    cfg.absorption = 0.3
    cfg.max_image_order = 18
    cfg.n_samples = 20
    cfg.n_speech_files = 4
    cfg.model = TransformerConfig(embed_dim=16, n_layers=1,
                                  n_heads=2).to_dict()
    cfg.train = {"epochs": 2, "initial_lr": 1e-3, "batch_size": 8,
                 "loss_kind": "L1_single"}
    return cfg


def test_10_pipeline_determinism(tmp_path):
    t0 = time.monotonic()
    dirs = []
    for name in ("a", "b"):
        run_dir = tmp_path / name
        run_pipeline(_reduced(run_dir))
        dirs.append(run_dir / "reports")
    identical = {
        name: (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
        for name in ("metrics.csv", "heatmap.csv", "config.json")
    }
    elapsed = time.monotonic() - t0
    ok = all(identical.values())
    _verdict("pipeline determinism", ok,
             ", ".join(f"{k} {'same' if v else 'DIFFERS'}"
                       for k, v in identical.items()) + f", {elapsed:.0f}s")
