import json

import numpy as np
import pytest

from tempo4d.checkpoint import params_hash
from tempo4d.config import EngineConfig, config_from_dict, config_to_dict, load_config, replace, save_config
from tempo4d.denoiser import DenoiserConfig, init_denoiser
from tempo4d.engine import (
    fresh_stage2,
    load_stage1,
    load_stage2,
    prepare_stage2,
    make_schedule,
    run_pipeline,
    run_stage1,
    sample_sequence,
    save_stage2,
    stage1_sequences,
    train_stage1,
    train_stage2,
)
from tempo4d.autograd import Tensor
from tempo4d.losses import composite_sc_t
from tempo4d.optim import AdamState, adam_step, lr_schedule
from tempo4d.schedule import DdimPlan, ddim_plan, ddpm_reverse_step, linear_schedule
from tempo4d.ssm import TriDirConfig
from tempo4d.synthetic import SyntheticSpec, centroid, inject_misalignment, make_synthetic
from tempo4d.volume import Volume4D

TINY = replace(
    EngineConfig(),
    schedule={"T": 50, "beta_start": 1e-4, "beta_end": 0.05, "ddim_steps": 5},
    denoiser=DenoiserConfig(frame_size=(8, 8), patch_size=4, embed_dim=8, num_heads=2, depth=1,
                            n_intermediate=2, max_t=50),
    tridir=TriDirConfig(channels=4, state_dim=2, blocks=1),
    synthetic=SyntheticSpec(frames=4, size=(8, 8), depth=4, cases=3),
    train={"stage1_steps": 6, "stage2_epochs": 2, "batch_size": 2, "checkpoint_every": 3},
)


@pytest.fixture(scope="module")
def tiny_cases():
    return make_synthetic(TINY.synthetic, np.random.default_rng(0))


# --------------------------------------------------------------------- adam
def test_adam_single_step_hand_value():
    p = {"w": np.array([0.5])}
    g = {"w": np.array([0.3])}
    adam_step(p, g, AdamState.zeros_like(p), lr=1e-3)
    # m_hat = g and v_hat = g^2 after bias correction
    assert abs(p["w"][0] - (0.5 - 1e-3 * 0.3 / (0.3 + 1e-8))) < 1e-12


def test_adam_constant_gradient_update_approaches_lr():
    p = {"w": np.zeros(3)}
    state = AdamState.zeros_like(p)
    g = {"w": np.array([0.7, -2.0, 1e-3])}
    for _ in range(2000):
        before = p["w"].copy()
        adam_step(p, g, state, lr=1e-2)
    assert np.allclose(np.abs(before - p["w"]), 1e-2, rtol=1e-4)


def test_adam_zero_gradient_and_non_finite():
    p = {"w": np.array([1.0, 2.0])}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    assert np.array_equal(p["w"], [1.0, 2.0]) and state.step == 1
    with pytest.raises(FloatingPointError, match="'w'"):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, state, lr=0.1)
    assert np.array_equal(p["w"], [1.0, 2.0]) and state.step == 1
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(3)}, state, lr=0.1)


def test_lr_schedule():
    assert lr_schedule(1, 0, 100) == 1e-4 and lr_schedule(1, 77, 100) == 1e-4
    assert lr_schedule(2, 100, 100) == 0.0
    assert lr_schedule(2, 50, 100) == pytest.approx(5e-5, rel=1e-15)
    for s1, s2 in [(0, 10), (3, 41), (20, 80)]:
        assert lr_schedule(2, s1, 100) + lr_schedule(2, s2, 100) == pytest.approx(
            2 * lr_schedule(2, (s1 + s2) // 2, 100), rel=1e-12)
    with pytest.raises(ValueError):
        lr_schedule(2, 101, 100)
    with pytest.raises(ValueError):
        lr_schedule(3, 0, 10)


# ------------------------------------------------------------------ stage 1
def test_stage1_zero_lr_leaves_params_bit_identical(tiny_cases):
    cfg = replace(TINY, optim={"lr": 0.0})
    params, log = train_stage1(cfg, stage1_sequences(tiny_cases))
    fresh, _ = train_stage1(cfg, stage1_sequences(tiny_cases), steps=0)
    assert params_hash(params) == params_hash(fresh)
    assert len(log.rows) == 6


def test_stage1_resume_is_bit_exact(tiny_cases, tmp_path):
    seqs = stage1_sequences(tiny_cases)
    full, log_full = train_stage1(TINY, seqs)
    train_stage1(TINY, seqs, steps=4, checkpoint_path=tmp_path / "s1")
    _, state, meta = load_stage1(tmp_path / "s1")
    assert meta["step"] == 4 and state.step == 4
    resumed, log_res = train_stage1(TINY, seqs, resume=tmp_path / "s1")
    assert [r["step"] for r in log_res.rows] == [5, 6]
    assert log_res.rows[0]["loss"] == log_full.rows[4]["loss"]
    assert params_hash(resumed) == params_hash(full)


def test_stage1_log_csv(tiny_cases, tmp_path):
    train_stage1(TINY, stage1_sequences(tiny_cases), steps=2, log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr,t_mean" and len(lines) == 3


def test_stage1_rejects_bad_datasets():
    with pytest.raises(ValueError):
        train_stage1(TINY, np.zeros((0, 4, 8, 8)))
    with pytest.raises(ValueError):
        train_stage1(TINY, np.zeros((2, 3, 8, 8)))
    with pytest.raises(ValueError):
        stage1_sequences([])


def test_stage1_smoke_loss_halves():
    """2,000 steps on translating blobs with N = 2 at 16x16."""
    cfg = replace(EngineConfig(), denoiser={"n_intermediate": 2}, synthetic={"frames": 4, "cases": 6})
    cases = make_synthetic(cfg.synthetic, np.random.default_rng(1))
    _, log = train_stage1(cfg, stage1_sequences(cases))
    loss = log.column("loss")
    assert len(loss) == 2000
    assert loss[-100:].mean() < 0.5 * loss[:100].mean()


# ----------------------------------------------------------------- sampling
def test_zero_eps_sampling_follows_closed_form():
    cfg = TINY
    s = make_schedule(cfg)
    plan = ddim_plan(s, 5)
    params = init_denoiser(cfg.denoiser, np.random.default_rng(2))
    I0 = np.zeros((8, 8), np.float32)
    out = sample_sequence(params, cfg.denoiser, s, plan, I0, I0, np.random.default_rng(3), clip=False)
    x_T = np.random.default_rng(3).standard_normal((1, 2, 8, 8)).astype(np.float32)[0]
    expected = x_T / np.sqrt(s.alpha_bars[s.T])
    assert out.shape == (2, 8, 8)
    assert np.max(np.abs(out - expected)) <= 1e-5 * np.abs(expected).max()
    clipped = sample_sequence(params, cfg.denoiser, s, plan, I0, I0, np.random.default_rng(3))
    assert np.array_equal(clipped, np.clip(out, -1, 1))


def test_sampling_is_deterministic_and_shaped():
    cfg = TINY
    s = make_schedule(cfg)
    params = init_denoiser(cfg.denoiser, np.random.default_rng(4))
    params["out.w"][:] = np.random.default_rng(5).standard_normal(params["out.w"].shape) * 0.1
    I = np.random.default_rng(6).uniform(-1, 1, (3, 8, 8)).astype(np.float32)

    def run():
        rngs = [np.random.default_rng([9, z]) for z in range(3)]
        return sample_sequence(params, cfg.denoiser, s, ddim_plan(s, 5), I, I[::-1], rngs)

    a = run()
    assert a.shape == (3, 2, 8, 8) and a.dtype == np.float32
    assert a.tobytes() == run().tobytes()
    assert np.abs(a).max() <= 1.0
    with pytest.raises(ValueError):
        sample_sequence(params, cfg.denoiser, s, ddim_plan(s, 5), I, I, [np.random.default_rng(0)])


def test_full_plan_eta1_matches_ancestral_sampling():
    s = linear_schedule(20, 1e-3, 0.2)
    dcfg = DenoiserConfig(frame_size=(4, 4), patch_size=4, embed_dim=4, num_heads=1, depth=1,
                          n_intermediate=1, max_t=20)
    params = init_denoiser(dcfg, np.random.default_rng(7))  # predicts eps = 0 exactly
    runs = 1000
    I = np.zeros((runs, 4, 4), np.float32)
    plan = DdimPlan(tuple(range(1, 21)), eta=1.0)
    a = sample_sequence(params, dcfg, s, plan, I, I, np.random.default_rng(8), clip=False).astype(np.float64)
    rng = np.random.default_rng(9)
    b = rng.standard_normal(a.shape)
    for t in range(20, 0, -1):
        b = ddpm_reverse_step(s, b, t, np.zeros_like(b), rng.standard_normal(b.shape))
    n = a.size
    pooled = (a.var() + b.var()) / 2
    assert abs(a.mean() - b.mean()) < 3 * np.sqrt(2 * pooled / n)
    assert abs(a.var() - b.var()) < 3 * np.sqrt(2 * 2 * pooled**2 / n)


def test_run_stage1_copies_boundaries(tiny_cases):
    params = init_denoiser(TINY.denoiser, np.random.default_rng(10))
    params["out.w"][:] = 0.05
    v = tiny_cases[0].volume.data
    out = run_stage1(TINY, params, v, case_id=3)
    assert out.shape == (4,) + v.shape[1:]
    assert np.array_equal(out[0], v[0]) and np.array_equal(out[-1], v[-1])
    threaded = run_stage1(TINY, params, v, case_id=3, jobs=2)
    assert threaded.tobytes() == out.tobytes()


# ------------------------------------------------------------------ stage 2
def test_stage2_freezes_stage1_and_starts_at_identity(tiny_cases, tmp_path):
    dparams, _ = train_stage1(TINY, stage1_sequences(tiny_cases))
    h = params_hash(dparams)
    tparams, log, hist = train_stage2(TINY, dparams, tiny_cases[:2], tiny_cases[2:],
                                      checkpoint_path=tmp_path / "s2", log_path=tmp_path / "s2.csv")
    assert params_hash(dparams) == h
    assert [r["epoch"] for r in hist.rows] == [0, 1, 2]
    assert len(log.rows) == 4
    # epoch 0 is the unenhanced stage-1 output
    val = prepare_stage2(TINY, dparams, tiny_cases[2:], 2)
    raw = composite_sc_t(Tensor(val.inputs[0]), val.targets[0], TINY.loss.weights, TINY.loss.wavelet_levels)[0]
    assert hist.rows[0]["val_sc"] == float(raw.data)
    assert params_hash(load_stage2(tmp_path / "s2")) == params_hash(tparams)
    header = (tmp_path / "s2.csv").read_text().splitlines()[0]
    assert header == "step,epoch,mse,wavelet,tv,total,lr"


def test_stage2_checkpoint_kind_checked(tmp_path):
    save_stage2(tmp_path / "s2", TINY, fresh_stage2(TINY))
    with pytest.raises(ValueError):
        load_stage1(tmp_path / "s2")


# ----------------------------------------------------------------- pipeline
def test_pipeline_shape_identity_and_determinism(tiny_cases):
    dparams = init_denoiser(TINY.denoiser, np.random.default_rng(11))
    dparams["out.w"][:] = 0.02
    case = tiny_cases[1].volume
    two = Volume4D(case.data[[0, -1]], intensity_range=(-1.0, 1.0), normalized=True)
    a = run_pipeline(TINY, two, dparams, fresh_stage2(TINY), case_id=5)
    assert a.enhanced.shape == (4,) + case.shape[1:]
    assert a.enhanced.tobytes() == a.stage1.tobytes()
    assert np.array_equal(a.enhanced[0], case.data[0]) and np.array_equal(a.enhanced[-1], case.data[-1])
    b = run_pipeline(TINY, two, dparams, fresh_stage2(TINY), case_id=5)
    assert a.volume.data.tobytes() == b.volume.data.tobytes()


def test_pipeline_denormalizes_raw_input():
    rng = np.random.default_rng(12)
    raw = Volume4D(100 + 50 * rng.uniform(size=(2, 2, 8, 8)))
    dparams = init_denoiser(TINY.denoiser, rng)
    res = run_pipeline(TINY, raw, dparams, fresh_stage2(TINY))
    assert np.allclose(res.volume.data[0], raw.data[0], rtol=1e-5)
    with pytest.raises(ValueError):
        run_pipeline(TINY, Volume4D(raw.data[:1]), dparams, fresh_stage2(TINY))


# ---------------------------------------------------------------- synthetic
def test_zero_motion_frames_identical():
    cases = make_synthetic(SyntheticSpec(motion=0.0, cases=3), np.random.default_rng(13))
    for c in cases:
        d = c.volume.data
        assert d.shape == (12, 4, 16, 16)
        assert all(np.array_equal(d[0], d[t]) for t in range(12))


@pytest.mark.parametrize("amp", [2.2, 5.5])
def test_blob_centroid_moves_evenly(amp):
    spec = SyntheticSpec(size=(32, 32), depth=1, motion=amp, cases=4)
    for c in make_synthetic(spec, np.random.default_rng(14)):
        cs = np.array([centroid(f[0]) for f in c.volume.data])
        steps = np.linalg.norm(np.diff(cs, axis=0), axis=1)
        assert np.all(np.abs(steps - amp / 11) < 0.1)


def test_misalignment_injection():
    v = make_synthetic(SyntheticSpec(cases=1), np.random.default_rng(15))[0].volume.data
    assert np.array_equal(inject_misalignment(v, (0.0, 0.0)), v)
    shifted = inject_misalignment(v, (1.0, 0.0))
    assert np.array_equal(shifted[:, 0::2], v[:, 0::2])
    assert not np.array_equal(shifted[:, 1::2], v[:, 1::2])


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(frames=2).validate()
    with pytest.raises(ValueError):
        SyntheticSpec(kind="spiral").validate()


# ------------------------------------------------------------------- config
def test_config_round_trip_and_strictness(tmp_path):
    save_config(TINY, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == TINY
    doc = config_to_dict(EngineConfig())
    doc["train"]["stage3_steps"] = 1
    with pytest.raises(ValueError, match="stage3_steps"):
        config_from_dict(doc)
    with pytest.raises(ValueError):
        config_from_dict({"schedule": {"T": 10}})  # denoiser.max_t still 1000
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ValueError):
        load_config(tmp_path / "bad.json")
    assert config_from_dict({}) == EngineConfig()
    assert json.loads(json.dumps(config_to_dict(TINY)))["seed"] == 0
