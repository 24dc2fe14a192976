import numpy as np
import pytest

from stcnn import autodiff as ad
from stcnn.cae import TemporalCAE, temporal_loss
from stcnn.joint import (STAGES, STCNN, Subject, TrainConfig, TrainTrace, TrainingError, forward_full,
                         infer, joint_loss, joint_operator, moving_average, train_stage1,
                         train_stage2, train_stage3)
from stcnn.optim import Adam
from stcnn.unet import UNet3D, spatial_loss
from stcnn.volume import Volume4D, normalize


def dot_oracle(frames, m):
    return np.array([sum(f.ravel()[i] * m.ravel()[i] for i in range(m.size)) for f in frames])


def test_joint_operator_examples():
    out = joint_operator(np.ones((3, 2, 2, 2)), np.ones((2, 2, 2)))
    assert out.data.tolist() == [8.0, 8.0, 8.0]
    rng = np.random.default_rng(0)
    frames = rng.standard_normal((5, 3, 3, 3))
    delta = np.zeros((3, 3, 3))
    delta[1, 2, 0] = 1.0
    np.testing.assert_array_equal(joint_operator(frames, delta).data, frames[:, 1, 2, 0])
    vol, m = rng.standard_normal((4, 5, 5, 5)), rng.standard_normal((5, 5, 5))
    assert np.abs(joint_operator(vol, m).data - dot_oracle(vol, m)).max() < 1e-12
    with pytest.raises(ad.DimensionError):
        joint_operator(vol, m[:4])


def test_joint_operator_linear_in_map():
    rng = np.random.default_rng(1)
    vol = rng.standard_normal((6, 4, 4, 4))
    m1, m2 = rng.standard_normal((2, 4, 4, 4))
    lhs = joint_operator(vol, 2.5 * m1 + m2).data
    rhs = 2.5 * joint_operator(vol, m1).data + joint_operator(vol, m2).data
    assert np.abs(lhs - rhs).max() < 1e-12


def small_subjects(n=3, t=16, size=8, seed=0):
    rng = np.random.default_rng(seed)
    course = np.sin(np.linspace(0, 4 * np.pi, t))
    m = np.zeros((size,) * 3)
    m[2:5, 2:5, 2:5] = 1.0
    out = []
    for i in range(n):
        data = np.outer(course, m.ravel()).reshape(t, *m.shape) + 0.3 * rng.standard_normal((t, *m.shape))
        out.append(Subject(f"s{i}", normalize(Volume4D(data)), 0.1 * m, course))
    return out


def small_config(**kw):
    base = dict(stage1_steps=6, stage2_steps=6, stage3_steps=6, levels=2, base_channels=4,
                checkpoint_every=3)
    base.update(kw)
    return TrainConfig(**base)


def test_forward_full_contract():
    subj = small_subjects(1)[0]
    unet, cae = UNet3D(16, levels=2, base_channels=4), TemporalCAE()
    unet.params["out.w"].data[...] = 0.2
    m, raw, refined = forward_full(unet, cae, subj.volume)
    assert m.shape == (8, 8, 8) and raw.shape == (16,) and refined.shape == (16,)
    assert not refined.constant_input


def test_zero_networks_flag_constant():
    subj = small_subjects(1)[0]
    unet, cae = UNet3D(16, levels=2, base_channels=4), TemporalCAE()
    for t in unet.parameters() + cae.parameters():
        t.data[...] = 0.0
    m, raw, refined = forward_full(unet, cae, subj.volume)
    assert not m.data.any() and not raw.data.any() and not refined.data.any()
    assert refined.constant_input


def test_temporal_loss_reaches_unet():
    subj = small_subjects(1)[0]
    unet, cae = UNet3D(16, levels=2, base_channels=4, seed=1), TemporalCAE(seed=2)
    unet.params["out.w"].data[...] = 0.2
    _, _, refined = forward_full(unet, cae, subj.volume)
    temporal_loss(refined, subj.label_series).backward()
    assert any(np.abs(t.grad).max() > 0 for k, t in unet.params.items() if k != "out.b")


def test_stage_isolation_and_determinism():
    data = small_subjects()
    cfg = small_config()
    unet, cae = UNet3D(16, 2, 4, seed=0), TemporalCAE(seed=1)
    cae_before = cae.state_dict()
    t1 = train_stage1(unet, data, cfg)
    assert all(np.array_equal(cae_before[k], v.data) for k, v in cae.params.items())
    unet_before = unet.state_dict()
    train_stage2(cae, unet, data, cfg)
    assert all(unet_before[k].tobytes() == v.data.tobytes() for k, v in unet.params.items())
    again = train_stage1(UNet3D(16, 2, 4, seed=0), data, cfg)
    assert t1.to_csv(timings=False) == again.to_csv(timings=False)


def test_zero_steps_leave_parameters():
    data = small_subjects()
    cfg = small_config(stage1_steps=0, stage2_steps=0)
    unet, cae = UNet3D(16, 2, 4, seed=0), TemporalCAE(seed=1)
    u0, c0 = unet.state_dict(), cae.state_dict()
    train_stage1(unet, data, cfg)
    train_stage2(cae, unet, data, cfg)
    assert all(np.array_equal(u0[k], v.data) for k, v in unet.params.items())
    assert all(np.array_equal(c0[k], v.data) for k, v in cae.params.items())


def test_stage3_without_temporal_weight_matches_stage1_direction():
    subj = small_subjects(1)[0]
    unet_a, unet_b = UNet3D(16, 2, 4, seed=3), UNet3D(16, 2, 4, seed=3)
    cae = TemporalCAE(seed=4)
    for u in (unet_a, unet_b):
        u.params["out.w"].data[...] = 0.1
    before = unet_a.state_dict()
    opt_a = Adam(unet_a.parameters(), lr=1e-3)
    spatial_loss(unet_a(subj.volume.data), subj.label_map).backward()
    opt_b = Adam(unet_b.parameters() + cae.parameters(), lr=1e-3)
    joint_loss(unet_b, cae, subj, 10.0, 0.0)[0].backward()
    for k in before:
        ga, gb = unet_a.params[k].grad, unet_b.params[k].grad
        assert np.abs(gb - 10.0 * ga).max() <= 1e-12 * max(1.0, np.abs(gb).max())
    opt_a.step()
    opt_b.step()
    da = np.concatenate([(unet_a.params[k].data - before[k]).ravel() for k in before])
    db = np.concatenate([(unet_b.params[k].data - before[k]).ravel() for k in before])
    assert np.array_equal(np.sign(da), np.sign(db))


def test_trace_header_and_order():
    data = small_subjects()
    est = STCNN(**vars(small_config(w_spatial=10.0, w_temporal=1.0))).fit(data)
    text = est.trace_.to_csv()
    assert text.startswith("# w_spatial = 10.0\n# w_temporal = 1.0\n")
    back = TrainTrace.from_csv(text)
    assert back.weights == (10.0, 1.0)
    assert [r[0] for r in back.records] == [s for s in STAGES for _ in range(6)]
    with pytest.raises(ValueError):
        back.append(STAGES[0], 1, 0.0, 0.0, 0.0, 0.0)


def test_non_finite_loss_aborts():
    data = small_subjects(1)
    data[0].label_map = np.full((8, 8, 8), np.inf)
    with pytest.raises(TrainingError) as info:
        train_stage1(UNet3D(16, 2, 4), data, small_config())
    assert isinstance(info.value.trace, TrainTrace)


def test_checkpoints_written(tmp_path):
    data = small_subjects()
    STCNN(**vars(small_config())).fit(data, checkpoint_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["joint_finetune.cae.ckpt", "joint_finetune.unet.ckpt", "latest.cae.ckpt",
                     "latest.unet.ckpt", "spatial_only.unet.ckpt", "temporal_only.cae.ckpt"]


def test_estimator_roundtrip_and_inference(tmp_path):
    data = small_subjects()
    est = STCNN(**vars(small_config()))
    assert est.get_params()["w_spatial"] == 10.0
    est.fit([s.volume for s in data], [(s.label_map, s.label_series) for s in data])
    m1, s1 = est.predict_one(data[0].volume)
    m2, s2 = est.predict_one(data[0].volume)
    assert m1.tobytes() == m2.tobytes() and s1.tobytes() == s2.tobytes()
    assert m1.shape == (8, 8, 8) and s1.shape == (16,)
    est.save(tmp_path)
    m3, s3 = STCNN.load(tmp_path).predict(data[:1])[0]
    assert m3.tobytes() == m1.tobytes() and s3.tobytes() == s1.tobytes()
    with pytest.raises(ad.DimensionError):
        infer(est.unet_, est.cae_, Volume4D(np.zeros((12, 8, 8, 8))))


def test_config_text_roundtrip():
    cfg = small_config(lr_finetune=2e-4)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_text("bogus = 1\n")
    with pytest.raises(ValueError):
        TrainConfig.from_text("w_spatial = -1\n")


def test_moving_average():
    np.testing.assert_allclose(moving_average(np.arange(25.0)), np.arange(6) + 9.5)
    assert moving_average([1.0, 3.0]).tolist() == [2.0]


def test_stage2_smoke_reaches_target():
    data = small_subjects(3, t=32)
    cfg = small_config(stage1_steps=60, stage2_steps=200)
    unet, cae = UNet3D(32, 2, 4, seed=0), TemporalCAE(seed=1)
    train_stage1(unet, data, cfg)
    trace = train_stage2(cae, unet, data, cfg)
    assert moving_average(trace.column("temporal_loss"))[-1] <= -0.8


def test_stage3_runs_and_is_finite():
    data = small_subjects()
    cfg = small_config()
    unet, cae = UNet3D(16, 2, 4), TemporalCAE(seed=1)
    trace = train_stage3(unet, cae, data, cfg)
    assert np.all(np.isfinite(trace.column("joint_loss")))
