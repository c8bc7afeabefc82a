import numpy as np
import pytest

from laneattn import diffcore as dc
from laneattn import network as nw
from laneattn.errors import AttentionError, DimensionError, UsageError

CFG = nw.ModelConfig()
PARAMS = nw.init_params(CFG, 0)
P = nw.as_tensors(PARAMS)


def random_track(rng):
    pos = np.cumsum(rng.normal(size=(20, 2)) + [1.0, 0.0], axis=0)
    return pos, np.gradient(pos, 0.1, axis=0)


def test_param_shapes_match_architecture():
    shapes = nw.param_shapes(CFG)
    assert shapes["pos_lstm.w_x"] == (2, 256) and shapes["vel_lstm.w_h"] == (64, 256)
    assert shapes["lane_conv1.w"] == (64, 2, 1) and shapes["lane_conv2.w"] == (64, 64, 1)
    assert shapes["lane_mlp.w"] == (64, 128)
    assert shapes["W_t"] == shapes["W_l"] == shapes["W_I"] == (128, 64)
    assert shapes["decoder_lstm.w_x"] == (384, 512) and shapes["decoder_head.w"] == (128, 5)
    nw.check_params(PARAMS, CFG)


def test_init_bounds_and_forget_bias():
    for name, arr in PARAMS.items():
        if name.endswith("_lstm.b"):
            h = arr.size // 4
            assert np.all(arr[h:2 * h] == 1.0) and np.all(arr[:h] == 0) and np.all(arr[2 * h:] == 0)
        elif name.endswith(".b"):
            assert np.all(arr == 0)
    assert np.abs(PARAMS["pos_lstm.w_x"]).max() <= 1 / np.sqrt(2 + 64)
    assert np.abs(PARAMS["lane_conv2.w"]).max() <= 1 / np.sqrt(64)
    np.testing.assert_array_equal(nw.init_params(CFG, 0)["W_t"], PARAMS["W_t"])


def test_ablation_configs_drop_parameters():
    shapes = nw.param_shapes(nw.ModelConfig(use_lanes=False, use_interaction=False))
    assert "W_l" not in shapes and "W_I" not in shapes and "lane_mlp.w" not in shapes
    assert shapes["decoder_lstm.w_x"] == (128, 512)


def test_trajectory_encoder_zero_case():
    zero = {k: np.zeros_like(v) for k, v in PARAMS.items()}
    f = nw.encode_trajectory(np.zeros((20, 2)), np.zeros((20, 2)), zero, CFG)
    assert f.shape == (128,) and np.all(f == 0)


def test_trajectory_encoder_distinct_and_order_sensitive():
    rng = np.random.default_rng(0)
    a, va = random_track(rng)
    b, vb = random_track(rng)
    fa = nw.encode_trajectory(a, va, PARAMS, CFG)
    assert not np.allclose(fa, nw.encode_trajectory(b, vb, PARAMS, CFG))
    assert not np.allclose(fa, nw.encode_trajectory(a[::-1], va[::-1], PARAMS, CFG))


def test_trajectory_encoder_checks_length():
    with pytest.raises(DimensionError):
        nw.encode_trajectory(np.zeros((19, 2)), np.zeros((19, 2)), PARAMS, CFG)


def test_lane_encoder_output_and_order_invariance():
    lane = np.column_stack([np.linspace(0, 30, 10), 0.02 * np.linspace(0, 30, 10) ** 2])
    f = nw.encode_lane(lane, PARAMS, CFG)
    assert f.shape == (128,)
    # kernel-1 convs plus max-pool ignore point order; only BLAS rounding differs
    np.testing.assert_allclose(f, nw.encode_lane(lane[::-1], PARAMS, CFG), rtol=0, atol=1e-12)
    other = np.column_stack([np.linspace(0, 30, 10), -0.02 * np.linspace(0, 30, 10) ** 2])
    assert not np.allclose(f, nw.encode_lane(other, PARAMS, CFG))
    with pytest.raises(DimensionError):
        nw.encode_lane(lane[:9], PARAMS, CFG)


def attention(target, lanes, mask):
    return nw.lane_attention(dc.constant(target[None]), dc.constant(lanes[None]), np.asarray(mask)[None], P).data[0]


def test_lane_attention_examples():
    rng = np.random.default_rng(1)
    t = rng.normal(size=128)
    lanes = rng.normal(size=(4, 128))
    np.testing.assert_array_equal(attention(t, lanes[:1], [True]), [1.0])
    dup = np.stack([lanes[0], lanes[0]])
    p = attention(t, dup, [True, True])
    assert p[0] == p[1] == 0.5
    perm = np.array([2, 0, 3, 1])
    full = attention(t, lanes, [True] * 4)
    np.testing.assert_allclose(attention(t, lanes[perm], [True] * 4), full[perm], atol=1e-15)
    masked = attention(t, lanes, [True, False, True, False])
    assert masked[1] == 0.0 and masked[3] == 0.0
    assert abs(masked.sum() - 1) < 1e-12


def test_lane_attention_all_masked():
    with pytest.raises(AttentionError):
        attention(np.ones(128), np.ones((2, 128)), [False, False])


def test_argmax_lane_survives_temperature_scaling():
    rng = np.random.default_rng(2)
    for _ in range(20):
        t, lanes = rng.normal(size=128), rng.normal(size=(5, 128))
        base = np.argmax(attention(t, lanes, [True] * 5))
        scaled = dict(P)
        c = rng.uniform(0.1, 3.0)
        scaled["W_t"] = dc.constant(PARAMS["W_t"] * c)
        p = nw.lane_attention(dc.constant(t[None]), dc.constant(lanes[None]), np.ones((1, 5), bool), scaled)
        assert np.argmax(p.data[0]) == base


def interact(target, others, mask):
    return nw.interaction(dc.constant(target[None]), dc.constant(others[None]), np.asarray(mask)[None], P).data[0]


def test_interaction_examples():
    rng = np.random.default_rng(3)
    t = rng.normal(size=128)
    one = rng.normal(size=(1, 128))
    assert np.all(interact(t, np.zeros((1, 128)), [False]) == 0)
    np.testing.assert_allclose(interact(t, one, [True]), one[0], atol=1e-15)
    twins = np.stack([one[0], one[0]])
    np.testing.assert_allclose(interact(t, twins, [True, True]), one[0], atol=1e-14)
    w = nw.interaction_weights(dc.constant(t[None]), dc.constant(rng.normal(size=(1, 3, 128))),
                               np.array([[True, True, False]]), P).data[0]
    assert abs(w.sum() - 1) < 1e-12 and w[2] == 0


def test_decode_ranges_and_length():
    rng = np.random.default_rng(4)
    ctx = dc.constant(rng.normal(size=(3, 384)) * 5)
    out = nw.decode(ctx, P, CFG)
    assert out.mu.shape == (3, 30, 2)
    assert np.all(out.sigma.data > 0) and np.all(np.abs(out.rho.data) < 1)
    big = {k: dc.constant(v * 50) for k, v in PARAMS.items()}
    out = nw.decode(ctx, big, CFG)
    assert np.all(out.sigma.data >= nw.SIGMA_MIN) and np.all(out.sigma.data <= nw.SIGMA_MAX)
    assert np.all(np.abs(out.rho.data) < 1)


def test_decode_zero_head_is_stationary():
    p = dict(P)
    p["decoder_head.w"] = dc.constant(np.zeros((128, 5)))
    p["decoder_head.b"] = dc.constant(np.zeros(5))
    out = nw.decode(dc.constant(np.random.default_rng(5).normal(size=(1, 384))), p, CFG)
    assert np.all(out.mu.data == 0)


def test_decode_depends_on_lane_feature():
    rng = np.random.default_rng(6)
    target, f_act = rng.normal(size=(1, 128)), rng.normal(size=(1, 128))
    outs = [nw.decode(nw.decoder_context(dc.constant(target), dc.constant(f_act),
                                         dc.constant(rng.normal(size=(1, 128)))), P, CFG).mu.data
            for _ in range(2)]
    assert np.abs(outs[0] - outs[1]).max() > 1e-6


# -- multi-hypothesis prediction

@pytest.fixture(scope="module")
def scenes(tiny_dataset):
    return tiny_dataset.scenes


def test_predict_k1_is_argmax_lane(scenes):
    s = next(x for x in scenes if x.num_lanes > 1)
    (h,) = nw.predict_multimodal(s, PARAMS, CFG, 1)
    assert h.probability == 1.0
    probs = nw.encode_batch(nw.collate([s]), P, CFG).lane_probs.data[0]
    assert h.source_lane == int(np.argmax(probs))


def test_predict_k_equals_n_matches_attention(scenes):
    s = max(scenes, key=lambda x: x.num_lanes)
    n = s.num_lanes
    hyps = nw.predict_multimodal(s, PARAMS, CFG, n)
    probs = nw.encode_batch(nw.collate([s]), P, CFG).lane_probs.data[0]
    got = sorted((h.source_lane, h.probability) for h in hyps)
    np.testing.assert_allclose([p for _, p in got], probs[:n], atol=1e-12)
    assert abs(sum(h.probability for h in hyps) - 1) < 1e-9


def test_predict_samples_extra_hypotheses(scenes):
    s = next(x for x in scenes if x.num_lanes == 2) if any(x.num_lanes == 2 for x in scenes) else \
        min(scenes, key=lambda x: x.num_lanes)
    n = s.num_lanes
    hyps = nw.predict_multimodal(s, PARAMS, CFG, 6)
    assert len(hyps) == 6
    assert sum(h.sampled for h in hyps) == 6 - n
    assert abs(sum(h.probability for h in hyps) - 1) < 1e-9
    top = hyps[0]
    for h in hyps[n:]:
        assert h.probability == pytest.approx(top.probability, rel=1e-12)
    again = nw.predict_multimodal(s, PARAMS, CFG, 6)
    for a, b in zip(hyps, again):
        np.testing.assert_array_equal(a.mu, b.mu)


def test_predict_rejects_bad_k(scenes):
    with pytest.raises(UsageError):
        nw.predict_multimodal(scenes[0], PARAMS, CFG, 0)


def test_predictions_are_in_city_frame(scenes):
    s = scenes[0]
    (h,) = nw.predict_multimodal(s, PARAMS, CFG, 1)
    local = nw.predict_batch([s], PARAMS, CFG, 1, world=False)[0][0]
    np.testing.assert_allclose(h.mu, s.frame.to_world(local.mu), atol=1e-9)


def test_batched_prediction_matches_single(scenes):
    batch = nw.predict_batch(scenes[:6], PARAMS, CFG, 3)
    for s, hyps in zip(scenes[:6], batch):
        single = nw.predict_multimodal(s, PARAMS, CFG, 3)
        for a, b in zip(hyps, single):
            np.testing.assert_allclose(a.mu, b.mu, atol=1e-10)
            assert a.probability == pytest.approx(b.probability, abs=1e-12)


def test_forward_is_bit_deterministic(scenes):
    a = nw.predict_batch(scenes[:4], PARAMS, CFG, 6, seed=3)
    b = nw.predict_batch(scenes[:4], PARAMS, CFG, 6, seed=3)
    for ha, hb in zip(a, b):
        for x, y in zip(ha, hb):
            assert x.mu.tobytes() == y.mu.tobytes() and x.probability == y.probability


def test_covariance_rotates_with_frame(scenes):
    s = scenes[1]
    local = nw.predict_batch([s], PARAMS, CFG, 1, world=False)[0][0]
    world = local.transformed(s.frame)

    def cov(h):
        sx, sy, r = h.sigma[:, 0], h.sigma[:, 1], h.rho
        return np.stack([np.stack([sx * sx, r * sx * sy], -1), np.stack([r * sx * sy, sy * sy], -1)], -2)

    rot = s.frame.rotation
    np.testing.assert_allclose(cov(world), rot @ cov(local) @ rot.T, atol=1e-9)
