import numpy as np
import pytest

from anofuse.errors import ConfigurationError, ShapeError
from anofuse.gateway import STATES, FusionGateway
from anofuse.tensor import Tensor, no_grad


def make_gateway(c=6, n=3, hidden=4, tau=0.07, dynamic=True, seed=0, randomize=False):
    gw = FusionGateway(c, n, hidden, tau, dynamic=dynamic, rng=np.random.default_rng(seed))
    if randomize and dynamic:
        rng = np.random.default_rng(seed + 50)
        for state in STATES:
            gw.w2[state].data[:] = rng.normal(0, 0.5, gw.w2[state].data.shape)
    return gw


def rand_features(c=6, n=3, b=2, l=9, seed=1):
    rng = np.random.default_rng(seed)
    v_list = [Tensor(rng.normal(size=(b, l, c))) for _ in range(n)]
    t_feats = [[Tensor(rng.normal(size=(c,))) for _ in STATES] for _ in range(n)]
    return v_list, t_feats


def test_zero_init_gate_gives_uniform_weights():
    gw = make_gateway()
    v = Tensor(np.random.default_rng(2).normal(size=(4, 6)))
    w = gw.fusion_weights(v, "normal").data
    np.testing.assert_array_equal(w, np.full((4, 3), 1.0 / 3.0))


def test_fusion_weights_normalized_and_positive():
    gw = make_gateway(randomize=True)
    v = Tensor(np.random.default_rng(3).normal(size=(5, 6)) * 3)
    for state in STATES:
        w = gw.fusion_weights(v, state).data
        assert (w > 0).all()
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12


def test_gate_output_shift_leaves_weights_unchanged():
    gw = make_gateway(randomize=True)
    v = Tensor(np.random.default_rng(4).normal(size=(3, 6)))
    base = gw.fusion_weights(v, "normal").data.copy()
    gw.w2["normal"].data += 0.0  # no-op guard
    # adding a constant to every logit: shift all output columns equally
    logits = gw.gate_logits(v, "normal").data
    shifted = Tensor(logits + 7.5)
    from anofuse.tensor import softmax
    np.testing.assert_allclose(softmax(shifted, axis=-1).data, base, rtol=0, atol=1e-12)


def test_peaked_logits_match_high_precision_oracle():
    import mpmath
    mpmath.mp.dps = 50
    from anofuse.tensor import softmax_vec
    got = softmax_vec(np.array([10.0, 0.0, 0.0]))
    es = [mpmath.exp(v) for v in (10.0, 0.0, 0.0)]
    tot = sum(es)
    want = np.array([float(e / tot) for e in es])
    np.testing.assert_allclose(got, want, rtol=1e-15)
    assert abs(got[0] - 0.99991) < 1e-4


def test_fuse_text_one_hot_selects_exactly():
    gw = make_gateway()
    _, t_feats = rand_features(seed=5)
    feats = [t_feats[j][0] for j in range(3)]
    for j in range(3):
        w = np.zeros((2, 3))
        w[:, j] = 1.0
        fused = gw.fuse_text(w, feats).data
        np.testing.assert_array_equal(fused[0], feats[j].data)
        np.testing.assert_array_equal(fused[1], feats[j].data)


def test_fuse_text_identical_features_ignore_weights():
    gw = make_gateway()
    f = Tensor(np.random.default_rng(6).normal(size=(6,)))
    feats = [f, f, f]
    w = np.array([[0.2, 0.5, 0.3]])
    fused = gw.fuse_text(w, feats).data
    np.testing.assert_allclose(fused[0], f.data, rtol=0, atol=1e-12)


def test_fuse_text_hand_linear_combination():
    gw = FusionGateway(2, 2, 2, 0.07, dynamic=False)
    feats = [Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.0, 1.0]))]
    fused = gw.fuse_text(np.array([[0.25, 0.75]]), feats).data
    np.testing.assert_array_equal(fused, [[0.25, 0.75]])


def test_fuse_text_count_mismatch():
    gw = make_gateway()
    _, t_feats = rand_features(seed=7)
    with pytest.raises(ShapeError):
        gw.fuse_text(np.ones((1, 3)) / 3, [t_feats[0][0], t_feats[1][0]])


def test_level_map_equal_descriptors_give_half():
    gw = make_gateway()
    rng = np.random.default_rng(8)
    v = Tensor(rng.normal(size=(2, 9, 6)))
    t = Tensor(rng.normal(size=(2, 6)))
    m = gw.level_map(v, t, t, (3, 3)).data
    np.testing.assert_array_equal(m, np.full((2, 3, 3), 0.5))


def test_level_map_sigmoid_scalar_oracle():
    import math
    gw = make_gateway(c=2, tau=1.0)
    # patch aligned with abnormal descriptor, orthogonal to normal
    v = Tensor(np.array([[[1.0, 0.0]] * 4]))
    t_n = Tensor(np.array([[0.0, 1.0]]))
    t_a = Tensor(np.array([[1.0, 0.0]]))
    m = gw.level_map(v, t_n, t_a, (2, 2)).data
    want = math.exp(1.0) / (math.exp(0.0) + math.exp(1.0))
    np.testing.assert_allclose(m, want, rtol=1e-12)
    assert abs(want - 0.7311) < 1e-4


def test_level_map_sharpens_as_temperature_drops():
    gw_hot = make_gateway(c=2, tau=1.0)
    gw_cold = make_gateway(c=2, tau=0.01)
    v = Tensor(np.array([[[1.0, 0.2]] * 4]))
    t_n = Tensor(np.array([[0.0, 1.0]]))
    t_a = Tensor(np.array([[1.0, 0.0]]))
    hot = gw_hot.level_map(v, t_n, t_a, (2, 2)).data
    cold = gw_cold.level_map(v, t_n, t_a, (2, 2)).data
    assert (cold > hot).all() and cold.max() > 0.999


def test_level_map_monotone_in_abnormal_similarity():
    gw = make_gateway(c=3, tau=0.5)
    t_n = Tensor(np.array([[0.0, 0.0, 1.0]]))
    t_a = Tensor(np.array([[1.0, 0.0, 0.0]]))
    prev = -1.0
    for alpha in np.linspace(0.1, 0.9, 7):
        # v orthogonal to t_n always; cos(v, t_a) = alpha
        v = np.array([[[alpha, np.sqrt(1 - alpha * alpha), 0.0]] * 4])
        m = gw.level_map(Tensor(v), t_n, t_a, (2, 2)).data[0, 0, 0]
        assert m > prev
        prev = m


def test_static_mode_ignores_gate_parameters():
    v_list, t_feats = rand_features(seed=9)
    gw1 = make_gateway(randomize=True, seed=10)
    gw2 = make_gateway(randomize=True, seed=99)
    with no_grad():
        m1 = gw1.forward(v_list, t_feats, (3, 3), (9, 9), mode="static")
        m2 = gw2.forward(v_list, t_feats, (3, 3), (9, 9), mode="static")
    for a, b in zip(m1.per_level, m2.per_level):
        np.testing.assert_array_equal(a.data, b.data)


def test_dynamic_forced_one_hot_equals_static_bitwise():
    v_list, t_feats = rand_features(seed=11)
    gw = make_gateway(randomize=True, seed=12)
    diag = np.eye(3)
    with no_grad():
        forced = gw.forward(v_list, t_feats, (3, 3), (9, 9), mode="dynamic",
                            override_weights=lambda i, s: diag[i])
        static = gw.forward(v_list, t_feats, (3, 3), (9, 9), mode="static")
    for a, b in zip(forced.per_level, static.per_level):
        np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(forced.aggregated.data, static.aggregated.data)
    np.testing.assert_array_equal(forced.upsampled.data, static.upsampled.data)


def test_single_level_degenerates_to_plain_map():
    c, n = 6, 1
    gw = FusionGateway(c, n, 4, 0.07, dynamic=True, rng=np.random.default_rng(13))
    rng = np.random.default_rng(14)
    v_list = [Tensor(rng.normal(size=(2, 4, c)))]
    t_feats = [[Tensor(rng.normal(size=(c,))), Tensor(rng.normal(size=(c,)))]]
    with no_grad():
        dyn = gw.forward(v_list, t_feats, (2, 2), (4, 4), mode="dynamic")
        sta = gw.forward(v_list, t_feats, (2, 2), (4, 4), mode="static")
        plain = gw.level_map(v_list[0], t_feats[0][0], t_feats[0][1], (2, 2))
    np.testing.assert_array_equal(dyn.per_level[0].data, sta.per_level[0].data)
    np.testing.assert_array_equal(dyn.per_level[0].data, plain.data)


def test_forward_composition_oracle():
    # straight-line numpy recomputation: pool, gate, normalize, fuse,
    # cosine, two-way softmax, average
    for seed in range(5):
        v_list, t_feats = rand_features(seed=100 + seed)
        gw = make_gateway(randomize=True, seed=200 + seed)
        with no_grad():
            out = gw.forward(v_list, t_feats, (3, 3), (9, 9), mode="dynamic")
        maps = []
        for i in range(3):
            vg = v_list[i].data.mean(axis=1)
            fused = {}
            for s, state in enumerate(STATES):
                logits = np.tanh(vg @ gw.w1[state].data) @ gw.w2[state].data
                e = np.exp(logits - logits.max(axis=1, keepdims=True))
                w = e / e.sum(axis=1, keepdims=True)
                t_mat = np.stack([t_feats[j][s].data for j in range(3)])
                fused[state] = w @ t_mat
            v = v_list[i].data
            nv = np.sqrt((v * v).sum(axis=2))
            sims = {}
            for state in STATES:
                t = fused[state]
                nt = np.sqrt((t * t).sum(axis=1))
                sims[state] = (v * t[:, None, :]).sum(axis=2) / (nv * nt[:, None])
            z = np.stack([sims["normal"], sims["abnormal"]], axis=-1) / 0.07
            ez = np.exp(z - z.max(axis=-1, keepdims=True))
            m = (ez[..., 1] / ez.sum(axis=-1)).reshape(2, 3, 3)
            maps.append(m)
        want = np.mean(maps, axis=0)
        assert np.abs(out.aggregated.data - want).max() < 1e-12
        for i in range(3):
            assert np.abs(out.per_level[i].data - maps[i]).max() < 1e-12


def test_forward_invariants_ranges_and_weight_count():
    v_list, t_feats = rand_features(seed=15)
    gw = make_gateway(randomize=True, seed=16)
    with no_grad():
        out = gw.forward(v_list, t_feats, (3, 3), (12, 12), mode="dynamic")
    assert len(out.fusion_weights) == 2 * 3  # states x levels
    for w in out.fusion_weights.values():
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12
    for m in out.per_level + [out.aggregated]:
        assert (m.data > 0).all() and (m.data < 1).all()
    assert out.upsampled.data.min() >= out.aggregated.data.min() - 1e-12
    assert out.upsampled.data.max() <= out.aggregated.data.max() + 1e-12


def test_bad_construction_and_modes():
    with pytest.raises(ConfigurationError):
        FusionGateway(6, 3, 4, 0.0)
    with pytest.raises(ConfigurationError):
        FusionGateway(6, 3, 0, 0.07)
    gw = make_gateway()
    v_list, t_feats = rand_features(seed=17)
    with pytest.raises(ConfigurationError):
        gw.forward(v_list, t_feats, (3, 3), (9, 9), mode="bogus")
    static_only = make_gateway(dynamic=False)
    with pytest.raises(ConfigurationError):
        static_only.fusion_weights(Tensor(np.zeros((1, 6))), "normal")
    assert static_only.param_count() == 0
