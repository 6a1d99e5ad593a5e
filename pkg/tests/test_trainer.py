import math

import numpy as np
import pytest

from poseprior import stt
from poseprior.dataset import build_windows, motion_inputs
from poseprior.motion import MotionPrior
from poseprior.synth import SynthSpec, generate
from poseprior.trainer import (
    AdamW,
    TrainConfig,
    TrainingDiverged,
    loss_and_grads,
    normalize_confidence,
    reconstruction_loss,
    reconstruction_loss_grad,
    train,
    warmup_lr,
)


def small_windows(n=6, seed=0, k=4):
    spec = SynthSpec(n_normal=n, n_anomalous=0, length=20, skeleton=np.random.default_rng(9).uniform(-0.5, 0.5, (k, 2)), seed=seed)
    trajs, _ = generate(spec)
    return build_windows(trajs, window=6, stride=2, poses_per_window=3)


# --- loss ------------------------------------------------------------------------


def test_loss_single_joint_diagonal():
    recon = np.zeros((1, 1, 2))
    target = np.ones((1, 1, 2))
    assert reconstruction_loss(recon, target, np.ones((1, 1))) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_zero_weights_zero_loss(rng):
    a, b = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
    assert reconstruction_loss(a, b, np.zeros((3, 4))) == 0.0


def test_nan_input_rejected():
    recon = np.zeros((1, 2, 2))
    recon[0, 1, 0] = np.nan
    with pytest.raises(FloatingPointError):
        reconstruction_loss(recon, np.zeros((1, 2, 2)), np.ones((1, 2)))


def test_loss_matches_loop(rng):
    recon, target = rng.standard_normal((2, 3, 4, 2)), rng.standard_normal((2, 3, 4, 2))
    w = rng.uniform(0, 1, (2, 3, 4))
    exp = 0.0
    for idx in np.ndindex(2, 3, 4):
        exp += w[idx] * math.hypot(*(recon[idx] - target[idx]))
    assert reconstruction_loss(recon, target, w) == pytest.approx(exp, rel=1e-12)


def test_loss_nonnegative_and_zero_on_exact(rng):
    t = rng.standard_normal((3, 4, 2))
    w = rng.uniform(0, 1, (3, 4))
    assert reconstruction_loss(t, t, w) == 0.0
    assert reconstruction_loss(t + 0.1, t, w) > 0


def test_confidence_normalization():
    conf = np.array([[1.0, 3.0], [0.0, 0.0]])
    np.testing.assert_array_equal(normalize_confidence(conf), [[0.25, 0.75], [0.0, 0.0]])


def test_loss_gradient_finite_differences(rng):
    recon, target = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
    w = rng.uniform(0, 1, (3, 4))
    g = reconstruction_loss_grad(recon, target, w)
    h = 1e-6
    for idx in np.ndindex(*recon.shape):
        r = recon.copy()
        r[idx] += h
        up = reconstruction_loss(r, target, w)
        r[idx] -= 2 * h
        fd = (up - reconstruction_loss(r, target, w)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_loss_gradient_zero_at_exact_match(rng):
    t = rng.standard_normal((3, 4, 2))
    np.testing.assert_array_equal(reconstruction_loss_grad(t, t, np.ones((3, 4))), 0)


# --- schedule & optimizer ----------------------------------------------------------


def test_warmup_schedule():
    cfg = TrainConfig()
    assert warmup_lr(0, cfg) == 0.0
    assert warmup_lr(500, cfg) == pytest.approx(2.5e-5)
    assert warmup_lr(1000, cfg) == pytest.approx(5e-5)
    assert warmup_lr(10_000, cfg) == pytest.approx(5e-5)
    assert warmup_lr(0, TrainConfig(warmup_steps=0)) == cfg.learning_rate


def test_warmup_longer_than_budget_rejected(tiny_config):
    with pytest.raises(ValueError, match="warmup"):
        train(small_windows(), None, tiny_config, TrainConfig(warmup_steps=100, max_steps=10))


def test_adamw_matches_reference_update(rng):
    p = {"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)}
    ref = {k: v.copy() for k, v in p.items()}
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v2 = {k: np.zeros_like(v) for k, v in p.items()}
    opt = AdamW(p, weight_decay=0.1)
    for t in range(1, 4):
        g = {k: rng.standard_normal(v.shape) for k, v in p.items()}
        opt.step(p, g, 1e-2)
        for k in ref:
            m[k] = 0.9 * m[k] + 0.1 * g[k]
            v2[k] = 0.999 * v2[k] + 0.001 * g[k] ** 2
            upd = (m[k] / (1 - 0.9**t)) / (np.sqrt(v2[k] / (1 - 0.999**t)) + 1e-8)
            if k == "w":
                upd = upd + 0.1 * ref[k]
            ref[k] = ref[k] - 1e-2 * upd
        for k in ref:
            np.testing.assert_allclose(p[k], ref[k], rtol=1e-12)


def test_zero_gradient_no_decay_is_noop(rng):
    p = {"w": rng.standard_normal((3, 2))}
    before = p["w"].copy()
    AdamW(p, weight_decay=0.0).step(p, {"w": np.zeros((3, 2))}, 1e-3)
    np.testing.assert_array_equal(p["w"], before)


def test_zero_learning_rate_keeps_params(tiny_config):
    wins = small_windows()
    init = stt.init_params(tiny_config, 0, dtype=np.float32)
    res = train(wins, None, tiny_config, TrainConfig(learning_rate=0.0, warmup_steps=0, batch_size=4, max_steps=5))
    for k, v in init.items():
        np.testing.assert_array_equal(res.params[k], v)


# --- training ----------------------------------------------------------------------


def test_same_seed_same_history(tiny_config):
    wins = small_windows()
    prior = MotionPrior("rayleigh", {"sigma": 0.02})
    cfg = TrainConfig(learning_rate=1e-3, warmup_steps=2, batch_size=4, max_steps=8, seed=4)
    a = train(wins, prior, tiny_config, cfg)
    b = train(wins, prior, tiny_config, cfg)
    assert a.losses == b.losses
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = train(wins, prior, tiny_config, TrainConfig(**{**cfg.to_dict(), "seed": 5}))
    assert c.losses != a.losses


def test_overfits_tiny_set():
    cfg = stt.STTConfig(dim=16, spatial_layers=1, temporal_layers=1, heads=2, num_poses=3, num_joints=4, mask_ratio=0.0)
    wins = small_windows(n=2).subset(np.arange(8))
    res = train(wins, None, cfg, TrainConfig(learning_rate=3e-3, warmup_steps=20, batch_size=8, epochs=500, dtype="float64"))
    assert res.steps == 500
    assert res.losses[-1] < 0.1 * res.losses[0]


def test_target_is_unscaled_pose(tiny_config):
    wins = small_windows()
    prior = MotionPrior("rayleigh", {"sigma": 0.02})
    inputs, scales = motion_inputs(wins, prior)
    assert (scales < 1).any()
    assert not np.allclose(inputs, wins.normalized)
    # loss on the identity reconstruction of the normalized pose is zero, on the scaled input it is not
    w = normalize_confidence(wins.confidences)
    assert reconstruction_loss(wins.normalized, wins.normalized, w) == 0.0
    assert reconstruction_loss(inputs, wins.normalized, w) > 0


def test_batch_loss_is_mean_of_windows(tiny_config, rng):
    wins = small_windows()
    params = stt.init_params(tiny_config, 0)
    x, y = wins.normalized[:4], wins.normalized[:4]
    w = normalize_confidence(wins.confidences[:4])
    total, _ = loss_and_grads(params, tiny_config, x, y, w, training=False)
    single = [loss_and_grads(params, tiny_config, x[i : i + 1], y[i : i + 1], w[i : i + 1], training=False)[0] for i in range(4)]
    assert total == pytest.approx(np.mean(single), rel=1e-12)


def test_divergence_raises_with_params(tiny_config):
    wins = small_windows()
    wins.normalized[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(wins, None, tiny_config, TrainConfig(warmup_steps=0, batch_size=len(wins), max_steps=2))
    assert info.value.step == 0 and info.value.params is not None


def test_checkpoints_written(tmp_path, tiny_config):
    train(small_windows(), None, tiny_config, TrainConfig(warmup_steps=0, batch_size=4, max_steps=4, checkpoint_every=2),
          checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step_0000002.npz", "step_0000004.npz"]


def test_config_validation():
    for bad in ({"batch_size": 0}, {"learning_rate": -1}, {"dtype": "float16"}, {"max_steps": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(batch_size=10, epochs=3).total_steps(25) == 9
