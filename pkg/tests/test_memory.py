import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esam3.losses import LossWeights, mask_terms, score_bce
from esam3.memory.bank import MemoryBank, MemoryEntry, bank_update, init_memory_encoder, memory_encode
from esam3.memory.bench import CSV_COLUMNS, attention_cost, benchmark, write_csv
from esam3.memory.perceiver import (
    LatentSet,
    PerceiverWeights,
    cross_attend,
    dense_compress_baseline,
    spatial_compress,
)
from esam3.memory.stage2 import clip_features, clip_targets, stage2_step, track_clip
from esam3.memory.tracker import memory_tokens, track_decode
from esam3.model import ModelConfig, init_student
from esam3.numerics import ShapeError, Tensor, grad_check
from esam3.numerics.nn import ParamGroup
from esam3.pcs_sim.scenes import SceneConfig, gen_clip
from esam3.promptloop.teacher import Teacher, TeacherConfig


def _weights(rng, c=8, dk=4, p=0.1):
    return PerceiverWeights(*(Tensor(rng.standard_normal(s)) for s in ((c, dk), (c, dk), (c, c))), dropout_p=p)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@pytest.fixture(scope="module")
def tiny():
    cfg = ModelConfig()
    model = init_student(cfg, np.random.default_rng(0))
    teacher = Teacher(TeacherConfig(), cfg)
    return cfg, model, teacher


# bank ------------------------------------------------------------------------


def _entry(t, oid=0):
    return MemoryEntry(Tensor(np.full((2, 2, 3), float(t))), t, oid)


def test_bank_fifo():
    b = bank_update(MemoryBank(), _entry(0))
    assert len(b) == 1
    b = MemoryBank(capacity=4)
    for t in range(1, 7):
        b = bank_update(b, _entry(t))
    assert b.frame_indices == [3, 4, 5, 6]
    assert b.stacked().shape == (4, 2, 2, 3)
    assert b.stacked().data[0, 0, 0, 0] == 3.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.lists(st.integers(1, 3), min_size=1, max_size=20))
def test_bank_matches_list_slice_oracle(cap, gaps):
    b, ref, t = MemoryBank(capacity=cap), [], 0
    for g in gaps:
        t += g
        b = bank_update(b, _entry(t))
        ref = (ref + [t])[-cap:]
        assert b.frame_indices == ref
        assert len(b) <= cap


def test_bank_rejects_bad_updates():
    b = bank_update(MemoryBank(), _entry(3))
    with pytest.raises(ValueError):
        bank_update(b, _entry(3))
    with pytest.raises(ValueError):
        bank_update(b, _entry(5, oid=1))
    with pytest.raises(ValueError):
        MemoryBank(capacity=0)
    with pytest.raises(ValueError):
        MemoryBank().stacked()


def test_memory_encoder_matches_hand_conv():
    rng = np.random.default_rng(2)
    g = ParamGroup("m")
    init_memory_encoder(g, 3, 5, rng)
    g["mem.conv.b"].data[:] = rng.standard_normal(5)
    g["mem.out.b"].data[:] = rng.standard_normal(5)
    f = rng.standard_normal((4, 4, 3))
    m = (rng.random((4, 4)) < 0.5).astype(float)
    out = memory_encode(g, f, m, 2, 9)
    assert (out.frame_index, out.object_id) == (2, 9)

    x = np.pad(np.concatenate([f, m[..., None]], axis=-1), ((1, 1), (1, 1), (0, 0)))
    w = g["mem.conv.w"].data
    y = np.zeros((4, 4, 5))
    for i in range(4):
        for j in range(4):
            y[i, j] = np.einsum("hwc,hwco->o", x[i : i + 3, j : j + 3], w) + g["mem.conv.b"].data
    ref = np.maximum(y, 0) @ g["mem.out.w"].data + g["mem.out.b"].data
    np.testing.assert_allclose(out.features.data, ref, atol=1e-12)
    assert np.array_equal(memory_encode(g, f, m).features.data, out.features.data)

    zero = memory_encode(g, np.zeros((4, 4, 3)), np.zeros((4, 4))).features.data
    np.testing.assert_allclose(zero, np.broadcast_to(np.maximum(g["mem.conv.b"].data, 0) @ g["mem.out.w"].data + g["mem.out.b"].data, zero.shape), atol=1e-12)
    with pytest.raises(ShapeError):
        memory_encode(g, f, np.zeros((3, 4)))


# perceiver -------------------------------------------------------------------


def test_dense_zero_query_gives_value_mean():
    rng = np.random.default_rng(0)
    w = _weights(rng)
    w.w_q.data[:] = 0.0
    f = rng.standard_normal((16, 8))
    out = dense_compress_baseline(f, Tensor(rng.standard_normal((1, 8))), w)
    np.testing.assert_allclose(out.data, (f @ w.w_v.data).mean(axis=0, keepdims=True), atol=1e-12)


def test_dense_single_token_is_its_value():
    rng = np.random.default_rng(1)
    w = _weights(rng)
    f = rng.standard_normal((1, 8))
    out = dense_compress_baseline(f, Tensor(rng.standard_normal((5, 8))), w)
    np.testing.assert_allclose(out.data, np.repeat(f @ w.w_v.data, 5, axis=0), atol=1e-12)


def test_dense_matches_step_by_step_and_rows_sum_to_one():
    rng = np.random.default_rng(2)
    w = _weights(rng)
    lat = rng.standard_normal((4, 8))
    f = rng.standard_normal((16, 8))
    out, attn = dense_compress_baseline(f, Tensor(lat), w, return_weights=True)
    a = _softmax((lat @ w.w_q.data) @ (f @ w.w_k.data).T / math.sqrt(4))
    np.testing.assert_allclose(out.data, a @ (f @ w.w_v.data), atol=1e-12)
    assert np.max(np.abs(attn.data.sum(axis=-1) - 1)) < 1e-9
    bad = PerceiverWeights(w.w_q, Tensor(np.ones((8, 3))), w.w_v)
    with pytest.raises(ShapeError):
        dense_compress_baseline(f, Tensor(lat), bad)


def test_dropout_only_with_rng():
    rng = np.random.default_rng(3)
    w = _weights(rng)
    lat, f = Tensor(rng.standard_normal((4, 8))), rng.standard_normal((16, 8))
    a = dense_compress_baseline(f, lat, w).data
    assert np.array_equal(a, dense_compress_baseline(f, lat, w).data)
    assert not np.array_equal(a, dense_compress_baseline(f, lat, w, rng=np.random.default_rng(0)).data)


@pytest.mark.parametrize("seed", range(5))
def test_spatial_degenerate_cases_equal_dense(seed):
    rng = np.random.default_rng(seed)
    w = _weights(rng)
    f = rng.standard_normal((2, 8, 8, 8))
    q = Tensor(rng.standard_normal((12, 8)))
    dense = dense_compress_baseline(f, q, w).data
    assert np.array_equal(spatial_compress(f, LatentSet(q, 12, (2, 2)), w).data, dense)
    one = spatial_compress(f, LatentSet(q, 0, (8, 8)), w).data
    np.testing.assert_allclose(one, dense, atol=1e-12)


def test_spatial_rows_match_per_window_oracle():
    rng = np.random.default_rng(7)
    w = _weights(rng)
    f = rng.standard_normal((8, 8, 8))
    k_global, per = 3, 2
    q = Tensor(rng.standard_normal((k_global + 16 * per, 8)))
    out = spatial_compress(f, LatentSet(q, k_global, (2, 2)), w).data
    np.testing.assert_array_equal(out[:k_global], dense_compress_baseline(f, q[:k_global], w).data)
    for n in range(16):
        r, c = divmod(n, 4)
        win = f[2 * r : 2 * r + 2, 2 * c : 2 * c + 2]
        lo = k_global + n * per
        ref = dense_compress_baseline(win, q[lo : lo + per], w).data
        np.testing.assert_allclose(out[lo : lo + per], ref, atol=1e-12)


def test_spatial_locality_exact():
    rng = np.random.default_rng(11)
    for _ in range(100):
        w = _weights(rng)
        f = rng.standard_normal((3, 8, 8, 8))
        q = Tensor(rng.standard_normal((2 + 16, 8)))
        lat = LatentSet(q, 2, (2, 2))
        base = spatial_compress(f, lat, w).data
        n = int(rng.integers(16))
        r, c = divmod(n, 4)
        g = f.copy()
        keep = np.zeros((8, 8), bool)
        keep[2 * r : 2 * r + 2, 2 * c : 2 * c + 2] = True
        g[:, ~keep] += rng.standard_normal((3, int((~keep).sum()), 8))
        moved = spatial_compress(g, lat, w).data
        assert np.array_equal(moved[2 + n], base[2 + n])


def test_spatial_divisibility_errors():
    rng = np.random.default_rng(0)
    w = _weights(rng)
    with pytest.raises(ShapeError, match=r"\(9, 9\)"):
        spatial_compress(rng.standard_normal((7, 7, 8)), LatentSet(Tensor(np.ones((20, 8))), 4, (3, 3)), w)
    with pytest.raises(ShapeError):
        spatial_compress(rng.standard_normal((8, 8, 8)), LatentSet(Tensor(np.ones((21, 8))), 4, (2, 2)), w)


def test_default_model_latent_split(tiny):
    cfg, model, _ = tiny
    assert cfg.num_latents == 128 and cfg.k_global == 16
    assert (cfg.num_latents - cfg.k_global) % 16 == 0
    assert cfg.bank_capacity == 7 and cfg.perceiver_dropout == 0.1


def test_cross_attend_batched_matches_loop():
    rng = np.random.default_rng(4)
    w = _weights(rng)
    q = rng.standard_normal((3, 2, 8))
    x = rng.standard_normal((3, 5, 8))
    out = cross_attend(Tensor(q), Tensor(x), w).data
    for b in range(3):
        np.testing.assert_allclose(out[b], cross_attend(Tensor(q[b]), Tensor(x[b]), w).data, atol=1e-12)


# tracking head / stage 2 -----------------------------------------------------


def test_track_decode_fallback_and_determinism(tiny):
    cfg, model, _ = tiny
    feat = np.random.default_rng(0).standard_normal((8, 8, 64))
    a, s = track_decode(model, feat, 2, None)
    assert a.shape == (8, 8) and s.shape == (1,)
    assert np.all(np.isfinite(a.data))
    b, _ = track_decode(model, feat, 2, None)
    assert np.array_equal(a.data, b.data)
    bank = bank_update(MemoryBank(), memory_encode(model["perceiver"], feat, np.ones((8, 8))))
    mem = memory_tokens(model, bank)
    assert mem.shape == (cfg.num_latents, cfg.mem_dim)
    assert memory_tokens(model, bank, compressed=False).shape == (64, cfg.mem_dim)
    assert memory_tokens(model, MemoryBank()) is None


def test_stage2_short_clip_rejected(tiny):
    cfg, model, teacher = tiny
    clip = gen_clip(SceneConfig(), 3, length=2)
    with pytest.raises(ValueError):
        stage2_step(clip[:1], model, teacher, LossWeights())


def test_stage2_matches_hand_composition(tiny):
    cfg, model, teacher = tiny
    w = LossWeights()
    for length in (2, 4):
        clip = gen_clip(SceneConfig(), 5, length=length)
        total, parts = stage2_step(clip, model, teacher, w)
        tg = clip_targets(clip, cfg.stride)
        feats = clip_features(model, clip)
        masks, scores = [], []
        for o, (oid, cid) in enumerate(zip(tg.identities, tg.concepts)):
            bank = MemoryBank(cfg.bank_capacity, oid)
            for t in range(length - 1):
                bank = bank_update(bank, memory_encode(model["perceiver"], feats[t], tg.masks[o, t], t, oid))
                logits, score = track_decode(model, feats[t + 1], cid, memory_tokens(model, bank))
                tgt = tg.masks[o, t + 1]
                masks.append(mask_terms(logits, tgt, w).item())
                scores.append(score_bce(score, np.array([float(tgt.any())])).item())
        assert len(masks) == len(tg.identities) * (length - 1)
        assert parts["mask"] == pytest.approx(np.mean(masks), rel=1e-12)
        assert parts["score"] == pytest.approx(np.mean(scores), rel=1e-12)
        assert total.item() == pytest.approx(parts["mask"] + parts["score"], rel=1e-12)


def test_stage2_readout_term(tiny):
    cfg, model, teacher = tiny
    clip = gen_clip(SceneConfig(), 5, length=3)
    _, base = stage2_step(clip, model, teacher, LossWeights())
    _, more = stage2_step(clip, model, teacher, LossWeights(), readout_weight=0.5)
    assert base["feat"] == 0.0 and more["feat"] > 0.0
    assert more["total"] == pytest.approx(base["total"] + 0.5 * more["feat"], rel=1e-12)


@pytest.mark.parametrize("seed", range(2))
def test_stage2_gradient_check(tiny, seed):
    cfg, model, teacher = tiny
    m = model.copy()
    clip = gen_clip(SceneConfig(instance_range=(2, 2)), 100 + seed, length=2)
    for group, key, coords in (("tracking_head", "score.b", None), ("perceiver", "w_q", np.arange(0, 1024, 97))):
        g = m[group]
        x = Tensor(g[key].data.copy())

        def f(p):
            g[key] = p
            return stage2_step(clip, m, teacher, LossWeights())[0]

        assert grad_check(f, x, eps=1e-6, coords=coords) < 1e-5
        g[key] = x


def test_track_clip_uses_first_frame_mask(tiny):
    cfg, model, _ = tiny
    clip = gen_clip(SceneConfig(), 8, length=3)
    tg = clip_targets(clip, cfg.stride)
    out = track_clip(model, clip, targets=tg)
    assert out.shape == tg.masks.shape
    assert np.array_equal(out[:, 0], tg.masks[:, 0])
    assert set(np.unique(out)) <= {0.0, 1.0}


# cost model / benchmark ------------------------------------------------------


def test_attention_cost_examples():
    assert attention_cost(128, 128, 64, 64).ratio == 1.0
    assert attention_cost(4096, 128, 64, 64).ratio == 32.0
    a, b = attention_cost(1000, 50, 32, 32), attention_cost(1000, 50, 64, 64)
    assert (b.dense, b.compressed) == (2 * a.dense, 2 * a.compressed)
    assert b.ratio == a.ratio
    with pytest.raises(ValueError):
        attention_cost(0, 1, 1, 1)


def test_benchmark_row_and_csv(tmp_path):
    row = benchmark(512, 64, repeats=3)
    assert tuple(row) == CSV_COLUMNS
    assert row["flops_dense"] / row["flops_compressed"] == 8.0
    assert row["wall_us_dense"] > 0 and row["wall_us_compressed"] > 0
    write_csv([row], tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 2
