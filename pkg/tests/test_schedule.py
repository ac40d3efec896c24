import json
import math

import numpy as np
import pytest

from esam3.model import GROUPS, ModelConfig, init_student
from esam3.numerics import NumericalError, Tensor
from esam3.schedule import zoo
from esam3.schedule.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from esam3.schedule.config import PUBLISHED_PRESETS, ConfigError, StageConfig, freezing_policy, lr_at, preset
from esam3.schedule.optim import AdamState, AdamW, clip_by_global_norm, ema_update, optimizer_step, warmup_cosine
from esam3.schedule.runner import MissingCheckpointError, read_log, run_stage, strip_wall

# learning rate -------------------------------------------------------------------


def test_lr_examples():
    cfg = PUBLISHED_PRESETS[1]
    assert lr_at(0, cfg) == 0.0
    assert lr_at(cfg.warmup_steps, cfg) == 1e-4
    mid = cfg.warmup_steps + (cfg.total_steps - cfg.warmup_steps) // 2
    assert lr_at(mid, cfg) == pytest.approx(5e-5, rel=1e-12)
    assert lr_at(cfg.total_steps, cfg) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        lr_at(cfg.total_steps + 1, cfg)
    with pytest.raises(ValueError):
        warmup_cosine(-1, 1.0, 0, 10)


def test_lr_continuous_and_nonnegative():
    base, warm, total = 2e-3, 50, 400
    vals = [warmup_cosine(s, base, warm, total) for s in range(total + 1)]
    assert min(vals) >= 0.0
    assert max(abs(a - b) for a, b in zip(vals, vals[1:])) <= base / warm + 1e-15
    assert vals[warm] == base


def test_default_warmup_rule():
    assert StageConfig(1, 1e-3, 20000, 4).warmup_steps == 1000
    assert StageConfig(1, 1e-3, 300, 4).warmup_steps == 30
    assert StageConfig(1, 1e-3, 0, 4).warmup_steps == 0
    with pytest.raises(ConfigError):
        StageConfig(1, 1e-3, 10, 4, warmup_steps=10)
    assert preset(1).with_overrides(total_steps=100).warmup_steps == 10


# optimizer -----------------------------------------------------------------------


def _reference_adamw(p, g, m, v, t, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g**2
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    p = p - lr * wd * p - lr * mhat / (np.sqrt(vhat) + eps)
    return p, m, v


def test_zero_grads_zero_decay_leave_params():
    p = {"a": np.array([1.0, -2.0])}
    new, state, norm = optimizer_step(p, {"a": np.zeros(2)}, AdamState(), lr=0.1, groups={"a": "other"}, weight_decay={"other": 0.0})
    assert np.array_equal(new["a"], p["a"]) and norm == 0.0 and state.step == 1


def test_clipping_scales_by_norm():
    g = {"a": np.array([6.0, 8.0])}
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 10.0
    np.testing.assert_allclose(clipped["a"], [0.6, 0.8])
    assert clip_by_global_norm(g, None)[0] is g


def test_quadratic_trajectory_matches_transcription():
    rng = np.random.default_rng(42)
    a = rng.standard_normal(4)
    target = rng.standard_normal(4)
    params = {"enc": a.copy(), "dec": a.copy() + 1}
    groups = {"enc": "encoder", "dec": "other"}
    wd = {"encoder": 0.05, "other": 0.01}
    state = AdamState()
    ref = {k: (v.copy(), np.zeros(4), np.zeros(4)) for k, v in params.items()}
    for t in range(1, 4):
        grads = {k: 2 * (v - target) for k, v in params.items()}
        params, state, _ = optimizer_step(params, grads, state, lr=0.05, groups=groups, weight_decay=wd)
        for k in ref:
            p, m, v = ref[k]
            ref[k] = _reference_adamw(p, 2 * (p - target), m, v, t, 0.05, wd[groups[k]])
        for k in ref:
            np.testing.assert_allclose(params[k], ref[k][0], rtol=0, atol=1e-15)


def test_weight_decay_split_single_step():
    p = {"e": np.array([2.0]), "o": np.array([2.0])}
    new, _, _ = optimizer_step(
        p,
        {"e": np.zeros(1), "o": np.zeros(1)},
        AdamState(),
        lr=0.1,
        groups={"e": "encoder", "o": "other"},
        weight_decay={"encoder": 0.05, "other": 0.01},
    )
    assert new["e"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.05), abs=1e-15)
    assert new["o"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), abs=1e-15)
    assert StageConfig(1, 1e-3, 10, 1).weight_decay == {"encoder": 0.05, "other": 0.01}


def test_nonfinite_grad_names_parameter():
    with pytest.raises(NumericalError, match="bad"):
        optimizer_step({"bad": np.ones(1)}, {"bad": np.array([np.nan])}, AdamState(), lr=1.0, groups={"bad": "other"}, weight_decay={"other": 0.0})


def test_adamw_wrapper_skips_params_without_grad():
    a = Tensor(np.ones(2), requires_grad=True, name="a")
    b = Tensor(np.ones(2), requires_grad=True, name="b")
    a.grad = np.array([1.0, -1.0])
    opt = AdamW({"other": [a, b]}, {"other": 0.0})
    opt.step(0.1)
    np.testing.assert_allclose(a.data, [0.9, 1.1], atol=1e-6)
    assert np.array_equal(b.data, np.ones(2)) and a.grad is None


# EMA ------------------------------------------------------------------------------


def test_ema_limits_and_closed_form():
    rng = np.random.default_rng(0)
    p = {"w": rng.standard_normal(3)}
    e = {"w": rng.standard_normal(3)}
    assert np.array_equal(ema_update(p, e, 0.0)["w"], p["w"])
    np.testing.assert_allclose(ema_update(p, e, 1 - 1e-12)["w"], e["w"], atol=1e-11)

    d = 0.99
    e0 = rng.standard_normal(3)
    seq = [rng.standard_normal(3) for _ in range(5)]
    ema = {"w": e0.copy()}
    for s in seq:
        ema = ema_update({"w": s}, ema, d)
    closed = d**5 * e0 + sum((1 - d) * d ** (5 - k) * s for k, s in enumerate(seq, start=1))
    assert np.max(np.abs(ema["w"] - closed)) < 1e-12
    with pytest.raises(ValueError):
        ema_update({"w": np.ones(2)}, {"w": np.ones(3)}, 0.5)
    with pytest.raises(ValueError):
        ema_update(p, e, 1.0)


# freezing / config / zoo ----------------------------------------------------------


def test_freezing_policy():
    assert freezing_policy(1) == {"encoder", "projection", "decoder"}
    assert freezing_policy(2) == {"perceiver", "tracking_head"}
    assert freezing_policy(3) == {"perceiver", "decoder", "presence_head", "concept_embedding"}
    assert "encoder" in freezing_policy(2, unfreeze_encoder=True)
    assert all("concept_embedding" not in freezing_policy(s) for s in (1, 2))
    with pytest.raises(ConfigError):
        freezing_policy(4)
    assert set().union(*(freezing_policy(s) for s in (1, 2, 3))) <= set(GROUPS)


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = preset(3)
    again = StageConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(ConfigError, match="lrate"):
        StageConfig.from_dict({"stage": 1, "base_lr": 1e-3, "total_steps": 10, "batch_size": 1, "lrate": 1})
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        StageConfig.load(tmp_path / "c.json")
    with pytest.raises(ConfigError):
        preset(1, "huge")
    assert StageConfig(1, 1e-3, 10, 1).seed == 42


def test_published_presets():
    assert (PUBLISHED_PRESETS[1].base_lr, PUBLISHED_PRESETS[1].batch_size) == (1e-4, 64)
    assert (PUBLISHED_PRESETS[2].base_lr, PUBLISHED_PRESETS[2].batch_size) == (5e-5, 16)
    assert (PUBLISHED_PRESETS[3].base_lr, PUBLISHED_PRESETS[3].batch_size, PUBLISHED_PRESETS[3].clips_per_batch) == (2e-5, 32, 8)


def test_zoo_ordering():
    assert len(zoo.ZOO) == 9
    for fam in ("RepViT", "TinyViT", "EfficientViT"):
        entries = zoo.family(fam)
        assert len(entries) == 3
        nominal = [e.nominal_params for e in entries]
        toy = [e.toy_params for e in entries]
        assert nominal == sorted(nominal) and len(set(nominal)) == 3
        assert all(a < b for a, b in zip(toy, toy[1:]))
    assert zoo.get(zoo.DEFAULT_VARIANT).model_config() == ModelConfig()
    with pytest.raises(KeyError):
        zoo.get("ES-XX-S")


# checkpoints ------------------------------------------------------------------------


def test_checkpoint_roundtrip_and_corruption(tmp_path):
    model = init_student(ModelConfig(), np.random.default_rng(1))
    ema = {n: t.data * 2 for n, t in model.named_parameters()}
    state = AdamState(3, {"x": np.ones(2)}, {"x": np.full(2, 0.5)})
    path = save_checkpoint(tmp_path / "ck", Checkpoint(model, 2, 3, state, ema, {"k": 1}))
    back = load_checkpoint(path)
    assert (back.stage, back.step, back.stage_config) == (2, 3, {"k": 1})
    assert all(np.array_equal(a.data, b.data) for (_, a), (_, b) in zip(model.named_parameters(), back.model.named_parameters()))
    assert np.array_equal(back.optimizer.v["x"], state.v["x"]) and back.optimizer.step == 3
    assert all(np.array_equal(ema[k], back.ema[k]) for k in ema)
    assert not (tmp_path / "ck.partial").exists()

    victim = next((path / "weights").iterdir())
    blob = bytearray(victim.read_bytes())
    blob[-3] ^= 0x10
    victim.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


# runner -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def stage1_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("s1")
    cfg = preset(1).with_overrides(total_steps=4, batch_size=2)
    res = run_stage(cfg, out_dir=out, log_path=out / "m.jsonl")
    return cfg, res, out


def test_run_stage_logs_and_frozen_groups(stage1_run):
    cfg, res, out = stage1_run
    recs = read_log(out / "m.jsonl")
    assert [r["step"] for r in recs] == [0, 1, 2, 3, 4]
    assert recs == res.records
    assert [r["lr"] for r in recs] == [lr_at(s, cfg) for s in range(5)]
    assert all(math.isfinite(r["loss_total"]) for r in recs)
    ck = load_checkpoint(res.checkpoint)
    assert ck.stage == 1 and ck.step == 4
    frozen = [g for g in GROUPS if g not in cfg.trainable]
    assert ck.model.param_hash(frozen) == res.frozen_hash


def test_run_stage_is_deterministic(stage1_run, tmp_path):
    cfg, res, _ = stage1_run
    again = run_stage(cfg, log_path=tmp_path / "m.jsonl")
    assert strip_wall(again.records) == strip_wall(res.records)
    logged = json.dumps(strip_wall(read_log(tmp_path / "m.jsonl")), sort_keys=True)
    assert logged == json.dumps(strip_wall(res.records), sort_keys=True)


def test_later_stage_needs_checkpoint(stage1_run):
    with pytest.raises(MissingCheckpointError):
        run_stage(preset(2).with_overrides(total_steps=1))
    _, res, _ = stage1_run
    with pytest.raises(MissingCheckpointError):
        run_stage(preset(3).with_overrides(total_steps=1), checkpoint=res.checkpoint)


def test_zero_steps_returns_input_weights(stage1_run, tmp_path):
    _, res, _ = stage1_run
    out = run_stage(preset(2).with_overrides(total_steps=0), checkpoint=res.checkpoint, out_dir=tmp_path)
    src = load_checkpoint(res.checkpoint).model
    dst = load_checkpoint(out.checkpoint).model
    assert src.param_hash() == dst.param_hash()
    assert [r["step"] for r in out.records] == [0]


def test_stage2_keeps_encoder_and_stage3_unfreeze_moves_it(stage1_run, tmp_path):
    _, res, _ = stage1_run
    before = load_checkpoint(res.checkpoint).model
    s2 = run_stage(preset(2).with_overrides(total_steps=2, batch_size=1), checkpoint=res.checkpoint, out_dir=tmp_path / "s2")
    assert s2.model.param_hash(["encoder", "projection", "decoder"]) == before.param_hash(["encoder", "projection", "decoder"])
    assert s2.model.param_hash(["perceiver"]) != before.param_hash(["perceiver"])

    s3 = run_stage(
        preset(3).with_overrides(total_steps=1, batch_size=1, clips_per_batch=0, unfreeze_encoder=True),
        checkpoint=s2.checkpoint,
    )
    assert s3.model.param_hash(["encoder"]) != s2.model.param_hash(["encoder"])
    assert s3.model.param_hash(["projection", "tracking_head"]) == s2.model.param_hash(["projection", "tracking_head"])


def test_loaded_checkpoint_is_reusable(stage1_run):
    _, res, _ = stage1_run
    ckpt = load_checkpoint(res.checkpoint)
    before = ckpt.model.param_hash()
    cfg = preset(2).with_overrides(total_steps=2, batch_size=1)
    a, b = run_stage(cfg, checkpoint=ckpt), run_stage(cfg, checkpoint=ckpt)
    assert ckpt.model.param_hash() == before
    assert strip_wall(a.records) == strip_wall(b.records)
    assert a.model.param_hash() == b.model.param_hash()


def test_resume_matches_uninterrupted(tmp_path):
    cfg = preset(1).with_overrides(total_steps=4, batch_size=1, checkpoint_every=2)
    full = run_stage(cfg, out_dir=tmp_path / "a")
    resumed = run_stage(cfg, checkpoint=tmp_path / "a" / "step_000002")
    assert strip_wall(resumed.records) == strip_wall(full.records[2:])
    assert resumed.model.param_hash() == full.model.param_hash()


@pytest.mark.slow
def test_every_stage_reduces_loss_over_200_steps(tmp_path):
    drops = {1: [], 2: [], 3: []}
    for seed in range(5):
        ck = None
        for stage in (1, 2, 3):
            cfg = preset(stage).with_overrides(total_steps=200, seed=seed)
            res = run_stage(cfg, checkpoint=ck, out_dir=tmp_path / f"{seed}-{stage}", log_every=200)
            drops[stage].append(res.records[-1]["loss_total"] - res.records[0]["loss_total"])
            ck = res.checkpoint
    for stage, d in drops.items():
        assert np.median(d) < 0, (stage, d)
