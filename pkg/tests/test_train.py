import numpy as np
import pytest

from roomsense.neural.tensor import Tensor
from roomsense.neural.config import TransformerConfig
from roomsense.neural.models import PatchTransformer, blocks_to_patches
from roomsense.neural.checkpoint import model_from_checkpoint
from roomsense.train import (
    TrainConfig, loss_single, loss_joint, adam_step, AdamState,
    PlateauSchedule, EarlyStopper, train_loop, grid_search, load_train_state,
)


class TestLossSingle:
    def test_perfect_prediction(self):
        p = Tensor(np.array([[1.0], [2.0]]))
        assert loss_single(p, np.array([[1.0], [2.0]])).item() == 0.0

    def test_hand_value(self):
        p = Tensor(np.array([[1.0], [-1.0]]))
        t = np.array([[0.0], [0.0]])
        assert loss_single(p, t).item() == pytest.approx(1.0)

    def test_scale_law(self):
        rng = np.random.default_rng(0)
        e = rng.standard_normal((5, 1))
        base = loss_single(Tensor(e), np.zeros((5, 1))).item()
        scaled = loss_single(Tensor(3.0 * e), np.zeros((5, 1))).item()
        assert scaled == pytest.approx(9.0 * base, rel=1e-12)


class TestLossJoint:
    def test_perfect_prediction(self):
        u = np.array([[1.0], [2.0]])
        v = np.array([[3.0], [4.0]])
        assert loss_joint(Tensor(u), Tensor(v), u, v).item() == 0.0

    def test_u_error_only_hand_value(self):
        u_t = np.array([[1.0], [2.0]])
        v_t = np.array([[3.0], [4.0]])
        u_p = u_t + np.array([[0.5], [-0.5]])
        got = loss_joint(Tensor(u_p), Tensor(v_t), u_t, v_t,
                         lambda1=1.0, lambda2=2.0).item()
        # sum e^2 / (B * sum u^2) = 0.5 / (2 * 5)
        assert got == pytest.approx(0.05, rel=1e-12)

    def test_lambda_linearity(self):
        rng = np.random.default_rng(1)
        u_t = rng.uniform(1, 2, (4, 1))
        v_t = rng.uniform(1, 2, (4, 1))
        u_p = u_t + rng.standard_normal((4, 1)) * 0.1
        v_p = v_t + rng.standard_normal((4, 1)) * 0.1
        base_u = loss_joint(Tensor(u_p), Tensor(v_t), u_t, v_t, 1.0, 1.0).item()
        both = loss_joint(Tensor(u_p), Tensor(v_p), u_t, v_t, 1.0, 1.0).item()
        doubled = loss_joint(Tensor(u_p), Tensor(v_p), u_t, v_t, 1.0, 2.0).item()
        v_term = both - base_u
        assert doubled == pytest.approx(base_u + 2.0 * v_term, rel=1e-10)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        u_t = rng.uniform(1, 2, (4, 1))
        v_t = rng.uniform(1, 2, (4, 1))
        u_p = u_t * 1.1
        v_p = v_t * 0.9
        a = loss_joint(Tensor(u_p), Tensor(v_p), u_t, v_t).item()
        c = 7.3
        b = loss_joint(Tensor(c * u_p), Tensor(v_p), c * u_t, v_t).item()
        assert b == pytest.approx(a, rel=1e-12)

    def test_zero_normalizer_rejected(self):
        z = np.zeros((2, 1))
        with pytest.raises(ValueError):
            loss_joint(Tensor(z), Tensor(z), z, np.ones((2, 1)))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        u_t = rng.uniform(1, 2, (3, 1))
        v_t = rng.uniform(1, 2, (3, 1))
        up = Tensor(u_t * 1.2, requires_grad=True)
        vp = Tensor(v_t * 0.8, requires_grad=True)
        loss_joint(up, vp, u_t, v_t).backward()
        eps = 1e-7
        for i in range(3):
            plus = up.data.copy(); plus[i, 0] += eps
            minus = up.data.copy(); minus[i, 0] -= eps
            num = (loss_joint(Tensor(plus), Tensor(vp.data), u_t, v_t).item()
                   - loss_joint(Tensor(minus), Tensor(vp.data), u_t, v_t).item()) \
                / (2 * eps)
            assert up.grad[i, 0] == pytest.approx(num, rel=1e-6)


class _Quadratic:
    """One-parameter model for optimizer tests."""

    def __init__(self, x0=1.0):
        self.params = {"x": Tensor.param(np.array([x0]))}


class TestAdam:
    def test_zero_gradient_no_decay_is_noop(self):
        m = _Quadratic(2.0)
        m.params["x"].grad = np.zeros(1)
        adam_step(m.params, AdamState(), lr=0.1, weight_decay=0.0)
        assert m.params["x"].data[0] == 2.0

    def test_constant_gradient_step_approaches_lr(self):
        # after many constant-gradient steps each update converges to lr
        m = _Quadratic(0.0)
        st = AdamState()
        for _ in range(200):
            m.params["x"].grad = np.array([1.0])
            adam_step(m.params, st, lr=0.01)
        m.params["x"].grad = np.array([1.0])
        before = m.params["x"].data[0]
        adam_step(m.params, st, lr=0.01)
        assert before - m.params["x"].data[0] == pytest.approx(0.01, rel=1e-3)

    def test_decoupled_weight_decay(self):
        m = _Quadratic(10.0)
        m.params["x"].grad = np.zeros(1)
        adam_step(m.params, AdamState(), lr=0.1, weight_decay=0.01)
        assert m.params["x"].data[0] == pytest.approx(10.0 - 0.1 * 0.01 * 10.0)

    def test_bit_identical_trajectories(self):
        runs = []
        for _ in range(2):
            m = _Quadratic(1.0)
            st = AdamState()
            rng = np.random.default_rng(5)
            for _ in range(10):
                m.params["x"].grad = rng.standard_normal(1)
                adam_step(m.params, st, lr=0.05, weight_decay=1e-4)
            runs.append(m.params["x"].data.copy())
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_state_round_trip(self):
        st = AdamState()
        st.step = 7
        st.m["x"] = np.array([0.5])
        st.v["x"] = np.array([0.25])
        back = AdamState.from_arrays(st.to_arrays(), dtype=np.float64)
        assert back.step == 7
        np.testing.assert_allclose(back.m["x"], st.m["x"])
        np.testing.assert_allclose(back.v["x"], st.v["x"])


class TestSchedules:
    def test_plateau_constant_while_improving(self):
        s = PlateauSchedule(1e-3)
        for loss in (1.0, 0.9, 0.8, 0.7):
            assert s.update(loss) == 1e-3

    def test_plateau_halves_after_five_flat(self):
        s = PlateauSchedule(1e-3, patience=5)
        s.update(1.0)
        for _ in range(5):
            s.update(1.0)
        assert s.lr == pytest.approx(5e-4)

    def test_lr_floor(self):
        s = PlateauSchedule(2e-8, patience=1)
        s.update(1.0)
        for _ in range(10):
            s.update(1.0)
        assert s.lr == 1e-8

    def test_early_stop_after_ten_flat(self):
        es = EarlyStopper(patience=10)
        assert not es.update(1.0)
        flags = [es.update(1.0) for _ in range(10)]
        assert flags[-1] and not any(flags[:-1])

    def test_early_stop_never_fires_while_improving(self):
        es = EarlyStopper(patience=10)
        assert not any(es.update(1.0 / (i + 1)) for i in range(50))


def tiny_setup(n=12, seed=0):
    cfg = TransformerConfig(embed_dim=16, n_layers=1, n_heads=2,
                            input_shape=(30, 30))
    model = PatchTransformer(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 30, 30)).astype(np.float32)
    y = rng.uniform(1.0, 4.0, (n, 1)).astype(np.float32)

    def forward(xb, train, drop_rng):
        patches, grid = blocks_to_patches(xb)
        return model.forward(patches, grid, train=train, rng=drop_rng)

    return model, forward, (x[:8], y[:8]), (x[8:], y[8:])


class TestTrainLoop:
    def test_history_and_best_checkpoint(self, tmp_path):
        model, forward, tr, va = tiny_setup()
        tc = TrainConfig(epochs=5, initial_lr=1e-3, batch_size=4, seed=1)
        best, hist = train_loop(model, forward, tr, va, tc, ckpt_dir=tmp_path)
        assert len(hist.rows) == 5
        assert best.metadata["best_val_loss"] == pytest.approx(
            min(r[2] for r in hist.rows))
        assert (tmp_path / "best.ckpt").exists()
        assert (tmp_path / "last.ckpt").exists()
        hist.save(tmp_path / "history.csv")
        lines = (tmp_path / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr"
        assert len(lines) == 6

    def test_empty_split_rejected(self):
        model, forward, tr, va = tiny_setup()
        tc = TrainConfig(epochs=1)
        with pytest.raises(ValueError):
            train_loop(model, forward, (tr[0][:0], tr[1][:0]), va, tc)

    def test_reproducible(self, tmp_path):
        losses = []
        for _ in range(2):
            model, forward, tr, va = tiny_setup()
            tc = TrainConfig(epochs=3, initial_lr=1e-3, batch_size=4, seed=9)
            _, hist = train_loop(model, forward, tr, va, tc)
            losses.append([r[1] for r in hist.rows])
        assert losses[0] == losses[1]

    def test_resume_retraces_full_run(self, tmp_path):
        tc_full = TrainConfig(epochs=6, initial_lr=1e-3, batch_size=4, seed=3)
        model, forward, tr, va = tiny_setup()
        _, hist_full = train_loop(model, forward, tr, va, tc_full)

        part = tmp_path / "part"
        model2, forward2, _, _ = tiny_setup()
        tc_half = TrainConfig(epochs=3, initial_lr=1e-3, batch_size=4, seed=3)
        _, hist_a = train_loop(model2, forward2, tr, va, tc_half, ckpt_dir=part)

        ckpt, adam, next_epoch = load_train_state(part / "last.ckpt")
        model3 = model_from_checkpoint(ckpt)

        def forward3(xb, train, rng):
            patches, grid = blocks_to_patches(xb)
            return model3.forward(patches, grid, train=train, rng=rng)

        _, hist_b = train_loop(model3, forward3, tr, va, tc_full,
                               start_epoch=next_epoch, adam_state=adam,
                               prior_val_losses=[r[2] for r in hist_a.rows])
        stitched = hist_a.rows + hist_b.rows
        assert [r[0] for r in stitched] == [r[0] for r in hist_full.rows]
        for a, b in zip(stitched, hist_full.rows):
            assert a[1] == pytest.approx(b[1], rel=1e-6)
            assert a[2] == pytest.approx(b[2], rel=1e-6)


class TestGridSearch:
    def _runner(self, scores):
        def build_and_train(config):
            from roomsense.train import TrainHistory
            hist = TrainHistory()
            hist.rows.append((0, 1.0, scores[(config.initial_lr,
                                              config.batch_size)], config.initial_lr))
            return None, hist
        return build_and_train

    def test_single_candidate(self):
        c = TrainConfig(initial_lr=1e-3, batch_size=8)
        best, table = grid_search([c], self._runner({(1e-3, 8): 0.5}))
        assert best["config"] is c
        assert len(table) == 1

    def test_lowest_validation_wins(self):
        cands = [TrainConfig(initial_lr=lr, batch_size=8)
                 for lr in (1e-3, 1e-4)]
        best, _ = grid_search(cands, self._runner(
            {(1e-3, 8): 0.5, (1e-4, 8): 0.2}))
        assert best["config"].initial_lr == 1e-4

    def test_tie_breaks_lower_lr_then_smaller_batch(self):
        cands = [TrainConfig(initial_lr=lr, batch_size=b)
                 for lr in (1e-3, 1e-4) for b in (8, 16)]
        scores = {(lr, b): 0.5 for lr in (1e-3, 1e-4) for b in (8, 16)}
        best, _ = grid_search(cands, self._runner(scores))
        assert best["config"].initial_lr == 1e-4
        assert best["config"].batch_size == 8

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            grid_search([], lambda c: (None, None))


class TestTrainConfig:
    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(loss_kind="L3")
        with pytest.raises(ValueError):
            TrainConfig(loss_kind="L2_joint", lambda2=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
