import numpy as np
import pytest

from flagcns import supernet as N
from flagcns.space import ArchCode, SpaceConfig, parse_code

from _util import fd_check, random_codes, random_theta, small_space, tiny_graph


def relu(x):
    return np.maximum(x, 0)


def params(w, key):
    return {b.name: w.view(b) for b in w.group(key)}


def dense_layer(kind, p, x, g):
    """Dense-matrix reference implementations of the six layer types."""
    a = g.adjacency.to_dense()
    n = len(a)
    ai = a + np.eye(n)
    d = 1 / np.sqrt(ai.sum(1))
    s = ai * d[:, None] * d[None, :]
    if kind == "gcn":
        return s @ x @ p["W"] + p["b"]
    if kind == "sage":
        deg = a.sum(1, keepdims=True)
        mean = np.divide(a @ x, deg, out=np.zeros_like(x), where=deg > 0)
        return np.hstack([mean, x]) @ p["W"] + p["b"]
    if kind == "sgc":
        return s @ s @ x @ p["W"] + p["b"]
    if kind == "appnp":
        z = x @ p["W"] + p["b"]
        out = z
        for _ in range(10):
            out = 0.9 * s @ out + 0.1 * z
        return out
    if kind == "gin":
        m = (1 + p["eps"]) * x + a @ x
        return relu(m @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]
    if kind == "gat":
        z = x @ p["W"]
        e = (z @ p["a_dst"]) + (z @ p["a_src"]).T  # e[i, j]: i receives from j
        e = np.where(e > 0, e, 0.2 * e)
        e = np.where(ai > 0, e, -np.inf)
        att = np.exp(e - e.max(1, keepdims=True))
        att /= att.sum(1, keepdims=True)
        return att @ z + p["b"]
    raise KeyError(kind)


ACT = {
    0: lambda x: 1 / (1 + np.exp(-x)),
    1: np.tanh,
    2: relu,
    3: lambda x: np.exp(x - x.max(1, keepdims=True)) / np.exp(x - x.max(1, keepdims=True)).sum(1, keepdims=True),
    4: lambda x: x,
}


def dense_forward(w, code, g):
    p = params(w, ("is", code.is_))
    outs = [ACT[code.is_](g.features @ p["W"] + p["b"])]
    for i in range(code.num_valid()):
        kind = w.cfg.layer_types[code.ltype[i]]
        outs.append(relu(dense_layer(kind, params(w, ("slot", i + 1, code.ltype[i])), outs[code.lpre[i]], g)))
    h = np.mean(outs[1:], axis=0) if code.num_valid() else outs[0]
    p = params(w, ("os", code.os))
    return ACT[code.os](h @ p["W"] + p["b"])


@pytest.mark.parametrize("t", range(6))
def test_each_layer_type_matches_dense_reference(t):
    cfg = SpaceConfig(2, hidden=5)
    g = tiny_graph(t, n=9, f=4, c=3)
    w = random_theta(N.build(cfg, 4, 3, seed=t), np.random.default_rng(t))
    code = ArchCode(t % 5, (t, t), (0, 1), (t + 2) % 5)
    np.testing.assert_allclose(N.forward(w, code, g), dense_forward(w, code, g), atol=1e-12)


def test_no_valid_slot_uses_input_stage():
    cfg = small_space()
    g = tiny_graph(1)
    w = N.build(cfg, 5, 3, seed=0)
    code = ArchCode(2, (0, 0), (None, None), 4)
    np.testing.assert_allclose(N.forward(w, code, g), dense_forward(w, code, g), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_finite_differences_small(seed):
    cfg = small_space()
    g = tiny_graph(seed, n=8, f=3, c=3)
    w = random_theta(N.build(cfg, 3, 3, seed=seed), np.random.default_rng(seed))
    code = random_codes(cfg, 1, seed)[0]
    assert fd_check(w, code, g) < 1e-4


def test_local_grad_zero_outside_mask():
    cfg = small_space(3)
    g = tiny_graph(4)
    w = random_theta(N.build(cfg, 5, 3), np.random.default_rng(0))
    for code in random_codes(cfg, 20, 1):
        grad = N.local_grad(w, code, g)
        assert not grad[~w.mask(code)].any()


def test_population_grad_is_sum():
    cfg = small_space()
    g = tiny_graph(5)
    w = random_theta(N.build(cfg, 5, 3), np.random.default_rng(1))
    pop = random_codes(cfg, 4, 2)
    want = sum(N.local_grad(w, c, g) for c in pop)
    np.testing.assert_allclose(N.population_grad(w, pop, g), want, atol=1e-14)


def test_param_count_equals_mask_size():
    cfg = SpaceConfig(4, hidden=6)
    w = N.build(cfg, 7, 3)
    for code in random_codes(cfg, 30, 3):
        assert N.param_count(code, cfg, 7, 3) == int(w.mask(code).sum())


def test_gcn2_param_count_hand_computed():
    cfg = SpaceConfig(2, hidden=64)
    code = parse_code("IS4 | L1:gcn<-0 L2:gcn<-1 | OS4", cfg)
    f, c, h = 1433, 7, 64
    assert N.param_count(code, cfg, f, c) == (f * h + h) + 2 * (h * h + h) + (h * c + c)


def test_views_share_memory_with_theta():
    w = N.build(small_space(), 5, 3)
    b = w.group(("slot", 1, 0))[0]
    w.view(b)[...] = 7.0
    assert np.all(w.theta[b.offset:b.offset + b.size] == 7.0)


def test_build_deterministic_and_glorot_bounds():
    cfg = small_space()
    a, b = N.build(cfg, 5, 3, seed=9), N.build(cfg, 5, 3, seed=9)
    np.testing.assert_array_equal(a.theta, b.theta)
    for blk in a.layout:
        v = a.view(blk)
        if blk.fan_in:
            assert np.abs(v).max() <= np.sqrt(6 / (blk.fan_in + blk.fan_out))
        else:
            assert not v.any()


def test_checkpoint_round_trip(tmp_path):
    w = random_theta(N.build(small_space(), 5, 3), np.random.default_rng(0))
    w.save(tmp_path / "w.ckpt")
    v = N.SuperNetWeights.load(tmp_path / "w.ckpt")
    np.testing.assert_array_equal(v.theta, w.theta)
    assert v.layout_hash == w.layout_hash


def test_layout_hash_depends_on_shape():
    assert N.build(small_space(), 5, 3).layout_hash != N.build(small_space(), 6, 3).layout_hash


def test_feature_width_mismatch_rejected():
    w = N.build(small_space(), 4, 3)
    with pytest.raises(ValueError):
        N.forward(w, random_codes(small_space(), 1)[0], tiny_graph(f=5))


def test_training_reduces_loss():
    cfg = SpaceConfig(2, hidden=8)
    g = tiny_graph(7, n=12, f=5, c=3)
    w = N.build(cfg, 5, 3, seed=0)
    code = parse_code("IS4 | L1:gcn<-0 L2:None | OS4", cfg)
    before = N.split_loss(w, code, g, "train")
    for _ in range(100):
        w.theta -= 0.1 * N.local_grad(w, code, g)
    assert N.split_loss(w, code, g, "train") < 0.5 * before
