import json

import numpy as np
import pytest

from motok import model as mdl
from motok import trainer as tr
from motok.errors import ArgumentError, TrainingError
from motok.model import ModelConfig
from motok.tensorcore import Tensor
from motok.trainer import OptimState, SyntheticMotionSpec, TrainerConfig


def adamw_scalar_reference(x0, grads_per_step, lr, b1, b2, eps, wd):
    """Scalar-loop AdamW oracle with the same float32 rounding as the update."""
    f = np.float32
    x = [f(v) for v in x0]
    m = [f(0)] * len(x0)
    v = [f(0)] * len(x0)
    history = []
    for t, grads in enumerate(grads_per_step, start=1):
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for i, g in enumerate(grads):
            g = f(g)
            m[i] = f(b1) * m[i] + f(1.0 - b1) * g
            v[i] = f(b2) * v[i] + f(1.0 - b2) * (g * g)
            if wd:
                x[i] = x[i] - f(lr * wd) * x[i]
            mhat = m[i] / f(bc1)
            vhat = v[i] / f(bc2)
            x[i] = x[i] - f(lr) * mhat / (np.sqrt(vhat) + f(eps))
        history.append(list(x))
    return history


def tiny_config(**kw):
    base = dict(compression="F8", vocab=16, embed_dim=8, base_channels=8,
                in_channels=2, input_extents=(8, 16, 16), lambda_adv=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_windows(cfg, n=3, seed=0):
    rng = np.random.default_rng(seed)
    t, h, w = cfg.input_extents
    return [rng.uniform(size=(t, cfg.in_channels, h, w)).astype(np.float32)
            for _ in range(n)]


def fast_tcfg(**kw):
    base = dict(lr=1e-3, warmup_steps=2)
    base.update(kw)
    return TrainerConfig(**base)


class TestAdamw:
    def test_ten_step_trajectory_matches_scalar_reference(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=4).astype(np.float32)
        grads = [rng.normal(size=4).astype(np.float32) for _ in range(10)]
        lr, b1, b2, eps, wd = 1e-2, 0.5, 0.9, 1e-8, 1e-2

        p = Tensor(x0.copy(), requires_grad=True)
        opt = OptimState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
        want = adamw_scalar_reference(x0, grads, lr, b1, b2, eps, wd)
        for t in range(10):
            tr.adamw_step({"p": p}, {"p": grads[t]}, opt)
            assert np.max(np.abs(p.data.astype(np.float64)
                                 - np.array(want[t], dtype=np.float64))) < 1e-12

    def test_no_decay_defaults(self):
        p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        opt = OptimState(lr=0.1, weight_decay=0.0)
        tr.adamw_step({"p": p}, {"p": np.zeros(2, dtype=np.float32)}, opt)
        assert np.array_equal(p.data, np.ones(2, dtype=np.float32))

    def test_decoupled_decay_with_zero_grad(self):
        p = Tensor(np.full(2, 2.0, dtype=np.float32), requires_grad=True)
        opt = OptimState(lr=0.1, weight_decay=0.5)
        tr.adamw_step({"p": p}, {"p": np.zeros(2, dtype=np.float32)}, opt)
        assert np.allclose(p.data, 2.0 * (1 - 0.1 * 0.5))

    def test_missing_grad_skipped(self):
        p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        opt = OptimState()
        tr.adamw_step({"p": p}, {}, opt)
        assert np.array_equal(p.data, np.ones(2, dtype=np.float32))

    def test_nonfinite_grad_raises(self):
        p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(TrainingError) as err:
            tr.adamw_step({"p": p}, {"p": np.array([np.nan, 0.0])}, OptimState())
        assert "p" in str(err.value)

    def test_buffer_round_trip(self):
        rng = np.random.default_rng(1)
        p = Tensor(rng.normal(size=3).astype(np.float32), requires_grad=True)
        opt = OptimState(lr=1e-2)
        for _ in range(3):
            tr.adamw_step({"p": p}, {"p": rng.normal(size=3).astype(np.float32)}, opt)
        buffers = opt.export_buffers("opt_g")
        fresh = OptimState(lr=1e-2)
        fresh.import_buffers("opt_g", buffers)
        assert fresh.t == opt.t
        assert np.array_equal(fresh.m["p"], opt.m["p"])
        assert np.array_equal(fresh.v["p"], opt.v["p"])


class TestSynthMotion:
    @pytest.mark.parametrize("family", tr.MOTION_FAMILIES)
    @pytest.mark.parametrize("dims", [2, 3])
    def test_in_bounds(self, family, dims):
        spec = SyntheticMotionSpec(joints=5, frames=128, family=family,
                                   dims=dims, width=64, height=48, depth=32,
                                   noise=0.5, seed=3)
        kp = tr.synth_motion(spec)
        assert kp.coords.shape == (128, 5, dims)
        hi = [63, 47] + ([31] if dims == 3 else [])
        for d, top in enumerate(hi):
            assert kp.coords[..., d].min() >= 0
            assert kp.coords[..., d].max() <= top

    def test_deterministic(self):
        spec = SyntheticMotionSpec(seed=7)
        a = tr.synth_motion(spec)
        b = tr.synth_motion(spec)
        assert np.array_equal(a.coords, b.coords)

    def test_seed_varies_output(self):
        a = tr.synth_motion(SyntheticMotionSpec(seed=1))
        b = tr.synth_motion(SyntheticMotionSpec(seed=2))
        assert not np.array_equal(a.coords, b.coords)

    def test_motion_is_smooth(self):
        kp = tr.synth_motion(SyntheticMotionSpec(frames=256, seed=0))
        step = np.abs(np.diff(kp.coords, axis=0))
        assert step.max() < 0.2 * 128  # no teleporting between frames

    def test_actually_moves(self):
        kp = tr.synth_motion(SyntheticMotionSpec(seed=0))
        assert kp.coords.std(axis=0).max() > 1.0

    def test_bad_family(self):
        with pytest.raises(ArgumentError):
            SyntheticMotionSpec(family="jazz-hands")


class TestPrepareWindows:
    def test_array_passthrough(self):
        cfg = tiny_config()
        wins = tr.prepare_windows(cfg, tiny_windows(cfg, n=2))
        assert len(wins) == 2
        t, h, w = cfg.input_extents
        assert wins[0].shape == (cfg.in_channels, t, h, w)

    def test_keypoints_rendered(self):
        cfg = tiny_config()
        spec = SyntheticMotionSpec(joints=cfg.in_channels, frames=8,
                                   width=16, height=16, seed=0)
        wins = tr.prepare_windows(cfg, [tr.synth_motion(spec)])
        assert wins[0].shape == (2, 8, 16, 16)
        # continuous coordinates rarely hit a pixel center exactly
        assert wins[0].max() > 0.9

    def test_shape_mismatch(self):
        cfg = tiny_config()
        with pytest.raises(ArgumentError):
            tr.prepare_windows(cfg, [np.zeros((8, 3, 16, 16), dtype=np.float32)])


class TestClipGrads:
    def test_under_norm_untouched(self):
        g = {"a": np.array([0.3, 0.4], dtype=np.float32)}
        out = tr._clip_grads(g, 1.0)
        assert out["a"] is g["a"]

    def test_over_norm_scaled(self):
        g = {"a": np.array([3.0, 4.0], dtype=np.float32)}
        out = tr._clip_grads(g, 1.0)
        norm = np.sqrt(np.sum(out["a"] ** 2))
        assert norm == pytest.approx(1.0, rel=1e-6)

    def test_zero_disables(self):
        g = {"a": np.array([30.0], dtype=np.float32)}
        assert tr._clip_grads(g, 0.0)["a"] is g["a"]


class TestTrainLoop:
    def test_loss_decreases_and_logs(self):
        cfg = tiny_config()
        res = tr.train(cfg, tiny_windows(cfg), steps=8, seed=0, tcfg=fast_tcfg())
        assert res.state.step == 8
        recs = [json.loads(line) for line in res.log_lines]
        assert [r["step"] for r in recs] == list(range(1, 9))
        assert recs[-1]["l1"] < recs[0]["l1"]
        assert all(np.isfinite(r["total"]) for r in recs)

    def test_same_seed_identical_logs(self):
        cfg = tiny_config()
        a = tr.train(cfg, tiny_windows(cfg), steps=4, seed=5, tcfg=fast_tcfg())
        b = tr.train(cfg, tiny_windows(cfg), steps=4, seed=5, tcfg=fast_tcfg())
        assert a.log_lines == b.log_lines
        for k in a.state.params:
            assert np.array_equal(a.state.params[k].data, b.state.params[k].data)

    def test_warmup_freezes_discriminator(self):
        cfg = tiny_config(lambda_adv=0.1)
        state = mdl.build(cfg, seed=0)
        before = {k: v.data.copy() for k, v in state.params.items()
                  if k.startswith("disc.")}
        res = tr.train(cfg, tiny_windows(cfg), steps=3, seed=0,
                       tcfg=fast_tcfg(warmup_steps=10), state=state)
        for k, v in before.items():
            assert np.array_equal(res.state.params[k].data, v)
        recs = [json.loads(line) for line in res.log_lines]
        assert all(r["g"] == 0.0 and r["d"] == 0.0 for r in recs)

    def test_adversarial_updates_after_warmup(self):
        cfg = tiny_config(lambda_adv=0.1)
        state = mdl.build(cfg, seed=0)
        before = {k: v.data.copy() for k, v in state.params.items()
                  if k.startswith("disc.")}
        res = tr.train(cfg, tiny_windows(cfg), steps=3, seed=0,
                       tcfg=fast_tcfg(warmup_steps=1), state=state)
        changed = any(not np.array_equal(res.state.params[k].data, v)
                      for k, v in before.items())
        assert changed
        recs = [json.loads(line) for line in res.log_lines]
        assert recs[0]["d"] == 0.0 and recs[-1]["d"] != 0.0

    def test_resume_is_bit_exact(self, tmp_path):
        cfg = tiny_config(lambda_adv=0.1)
        tcfg = fast_tcfg(warmup_steps=2, checkpoint_every=3)
        data = tiny_windows(cfg)

        full = tr.train(cfg, data, steps=6, seed=9, tcfg=tcfg,
                        out_dir=tmp_path / "full")
        tr.train(cfg, data, steps=3, seed=9, tcfg=tcfg, out_dir=tmp_path / "half")
        state, extra = mdl.load_checkpoint(tmp_path / "half" / "ckpt_final.mck")
        resumed = tr.train(cfg, data, steps=6, seed=9, tcfg=tcfg,
                           state=state, opt_buffers=extra)

        for k in full.state.params:
            assert np.array_equal(full.state.params[k].data,
                                  resumed.state.params[k].data), k
        assert np.array_equal(full.state.codebook.entries.data,
                              resumed.state.codebook.entries.data)
        assert full.log_lines[3:] == resumed.log_lines

    def test_nan_parameter_aborts_with_checkpoint(self, tmp_path):
        cfg = tiny_config()
        state = mdl.build(cfg, seed=0)
        state.params["enc.stem.w"].data[0, 0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingError):
            tr.train(cfg, tiny_windows(cfg), steps=2, seed=0,
                     tcfg=fast_tcfg(), state=state, out_dir=tmp_path)
        assert (tmp_path / "ckpt_abort.mck").exists()

    def test_empty_data_rejected(self):
        with pytest.raises(ArgumentError):
            tr.train(tiny_config(), [], steps=1, seed=0)
