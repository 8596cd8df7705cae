import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micar.attention import MdlaConfig
from micar.autodiff import Tensor
from micar.autodiff.gradcheck import check_parameters
from micar.errors import ConfigurationError, ContractError
from micar.fusion import (GatedFusion, MixtureOfExperts, RoutingTrace, emit_routing_artifacts, load_balance,
                          read_score_heatmap, top_k_indices)


def mcfg():
    return MdlaConfig(d_model=8, d_latent=12, heads=2, d_nope=2, d_rope=4, attn_dropout=0.0)


def rms(x, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def fusion_parts(fusion, x, img):
    parts = []
    fusion(Tensor(x), Tensor(img), parts=parts)
    return parts[0]


# -- gated fusion --------------------------------------------------------------------

@pytest.mark.parametrize("bias,which", [(1e3, "att"), (-1e3, "text")])
def test_gate_endpoints(bias, which):
    rng = np.random.default_rng(0)
    fusion = GatedFusion(rng, mcfg())
    fusion.gate_out.bias.data[:] = bias
    p = fusion_parts(fusion, rng.normal(size=(5, 8)), rng.normal(size=(4, 8)))
    expect = p.att_norm if which == "att" else p.x_norm
    np.testing.assert_array_equal(p.f_gated, expect)


def test_gate_is_convex_on_1000_inputs():
    rng = np.random.default_rng(1)
    fusion = GatedFusion(rng, mcfg())
    for p in fusion.params().values():
        p.data += rng.normal(0, 0.5, size=p.shape)
    x = rng.normal(size=(40, 25, 8)) * rng.uniform(0.1, 10)
    img = rng.normal(size=(40, 6, 8))
    parts = []
    fusion(Tensor(x), Tensor(img), parts=parts)
    p = parts[0]
    assert np.all((p.gate > 0) & (p.gate < 1))
    lo = np.minimum(p.att_norm, p.x_norm)
    hi = np.maximum(p.att_norm, p.x_norm)
    slack = 1e-12 * (1 + np.abs(hi))
    assert np.all(p.f_gated >= lo - slack) and np.all(p.f_gated <= hi + slack)
    assert p.f_gated.reshape(-1, 8).shape[0] == 1000


def test_constant_image_context():
    rng = np.random.default_rng(2)
    fusion = GatedFusion(rng, mcfg())
    row = rng.normal(size=8)
    p = fusion_parts(fusion, rng.normal(size=(3, 8)), np.tile(row, (5, 1)))
    m = rms(row)
    expect = np.concatenate([m, m]) @ fusion.context.weight.data + fusion.context.bias.data
    np.testing.assert_allclose(p.context.reshape(-1), expect, atol=1e-13)


def test_fusion_output_formula():
    rng = np.random.default_rng(3)
    fusion = GatedFusion(rng, mcfg())
    x, img = rng.normal(size=(3, 8)), rng.normal(size=(4, 8))
    parts = []
    z, _ = fusion(Tensor(x), Tensor(img), parts=parts)
    att, _ = fusion.cross(Tensor(rms(x)), Tensor(rms(img)))
    i_att = att.data + x
    p = parts[0]
    g = np.tile(p.context, (3, 1))
    expect = np.concatenate([p.f_gated, i_att, g], axis=1) @ fusion.fuse.weight.data + fusion.fuse.bias.data + i_att
    np.testing.assert_allclose(z.data, expect, atol=1e-12)


def test_empty_image_is_contract_error():
    fusion = GatedFusion(np.random.default_rng(0), mcfg())
    with pytest.raises(ContractError):
        fusion(Tensor(np.ones((2, 8))), Tensor(np.ones((0, 8))))


def test_fusion_gradcheck():
    rng = np.random.default_rng(4)
    fusion = GatedFusion(rng, mcfg())
    for p in fusion.params().values():
        p.data += rng.normal(0, 0.3, size=p.shape)
    x, img = Tensor(rng.normal(size=(2, 3, 8))), Tensor(rng.normal(size=(2, 4, 8)))
    w = rng.normal(size=(2, 3, 8))
    rows = check_parameters(lambda: (fusion(x, img)[0] * w).sum(), fusion.params(), 1e-5, 10, 1, 0)
    worst = max(rows, key=lambda r: r.worst_error)
    assert worst.worst_error < 1e-4, worst


# -- routing -------------------------------------------------------------------------

def test_zero_router_uniform_and_tie_break():
    moe = MixtureOfExperts(np.random.default_rng(0), 8, 16, 8, 2)
    moe.router.data[:] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(5, 8)))
    scores, idx = moe.route(x)
    np.testing.assert_allclose(scores.data, 1 / 8, atol=1e-15)
    np.testing.assert_array_equal(idx, np.tile([0, 1], (5, 1)))
    _, lb, _ = moe(x)
    assert abs(float(lb.data) + math.log(8)) < 1e-9
    assert abs(float(lb.data) - (-2.0794)) < 1e-4


def test_ordering_example():
    s = np.array([[0.5, 0.3, 0.15, 0.05]])
    idx = top_k_indices(s, 2)
    np.testing.assert_array_equal(idx, [[0, 1]])
    np.testing.assert_array_equal(np.take_along_axis(s, idx, 1), [[0.5, 0.3]])


def test_top_k_matches_sort_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        e = int(rng.integers(2, 10))
        k = int(rng.integers(1, e + 1))
        row = rng.dirichlet(np.ones(e))
        if rng.uniform() < 0.3:
            row[rng.integers(e)] = row[rng.integers(e)]
        order = sorted(range(e), key=lambda j: (-row[j], j))[:k]
        assert list(top_k_indices(row[None], k)[0]) == order


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31))
def test_score_rows_and_exactly_k(k_off, seed):
    rng = np.random.default_rng(seed)
    e = 6
    k = min(k_off, e)
    moe = MixtureOfExperts(rng, 4, 8, e, k)
    moe.router.data[:] = rng.normal(0, 2, size=(4, e))
    _, _, trace = moe(Tensor(rng.normal(size=(7, 4))))
    np.testing.assert_allclose(trace.scores.sum(axis=1), 1.0, atol=1e-12)
    assert trace.indices.shape == (7, k)
    assert all(len(set(r)) == k for r in trace.indices)
    assert trace.counts().sum() == 7 * k
    for row, idx in zip(trace.scores, trace.indices):
        assert row[idx].min() >= np.delete(row, idx).max(initial=-1.0)


def test_bad_k():
    with pytest.raises(ConfigurationError):
        MixtureOfExperts(np.random.default_rng(0), 4, 8, 2, 3)
    with pytest.raises(ConfigurationError):
        MixtureOfExperts(np.random.default_rng(0), 4, 8, 2, 0)


# -- forward -------------------------------------------------------------------------

def test_single_expert_equals_ffn():
    rng = np.random.default_rng(6)
    moe = MixtureOfExperts(rng, 8, 16, 1, 1)
    x = rng.normal(size=(2, 5, 8))
    out, lb, _ = moe(Tensor(x))
    np.testing.assert_allclose(out.data, moe.experts[0](Tensor(x)).data, atol=1e-12)
    assert float(lb.data) == 0.0


def dense_oracle(moe, x):
    flat = x.reshape(-1, x.shape[-1])
    logits = flat @ moe.router.data
    s = np.exp(logits - logits.max(axis=1, keepdims=True))
    s /= s.sum(axis=1, keepdims=True)
    keep = np.zeros_like(s)
    for i, row in enumerate(s):
        keep[i, np.argsort(-row, kind="stable")[: moe.top_k]] = 1.0
    out = sum(moe.experts[e](Tensor(flat)).data * (s[:, e] * keep[:, e])[:, None] for e in range(moe.n_experts))
    mean = s.mean(axis=0)
    return out.reshape(x.shape), float(np.sum(mean * np.log(mean)))


@pytest.mark.parametrize("seed", range(4))
def test_dense_masking_oracle(seed):
    rng = np.random.default_rng(seed)
    moe = MixtureOfExperts(rng, 8, 16, 5, 2)
    moe.router.data[:] = rng.normal(0, 1, size=moe.router.shape)
    x = rng.normal(size=(3, 4, 8))
    out, lb, _ = moe(Tensor(x))
    ref, ref_lb = dense_oracle(moe, x)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
    assert abs(float(lb.data) - ref_lb) < 1e-12


class Counted:
    def __init__(self, inner, calls, e):
        self.inner, self.calls, self.e = inner, calls, e

    def __call__(self, x):
        self.calls[self.e] += x.shape[0]
        return self.inner(x)


def test_unselected_experts_are_not_called():
    rng = np.random.default_rng(7)
    moe = MixtureOfExperts(rng, 8, 16, 6, 2)
    moe.router.data[:] = rng.normal(0, 2, size=moe.router.shape)
    calls = np.zeros(6, dtype=int)
    moe.experts = [Counted(ex, calls, e) for e, ex in enumerate(moe.experts)]
    _, _, trace = moe(Tensor(rng.normal(size=(9, 8))))
    np.testing.assert_array_equal(calls, trace.counts())
    assert calls.sum() == 9 * 2
    np.testing.assert_array_equal(moe.expert_rows, calls)


def test_load_balance_bounds_and_endpoints():
    assert abs(float(load_balance(Tensor(np.full(8, 1 / 8))).data) + math.log(8)) < 1e-12
    assert float(load_balance(Tensor(np.array([1.0, 0.0, 0.0]))).data) == 0.0
    rng = np.random.default_rng(8)
    for _ in range(200):
        e = int(rng.integers(1, 12))
        v = float(load_balance(Tensor(rng.dirichlet(np.ones(e) * rng.uniform(0.05, 5)))).data)
        assert -math.log(e) - 1e-12 <= v <= 1e-15


def test_token_mask_excludes_padding_from_balance():
    rng = np.random.default_rng(9)
    moe = MixtureOfExperts(rng, 4, 8, 4, 2)
    moe.router.data[:] = rng.normal(size=(4, 4))
    x = rng.normal(size=(6, 4))
    mask = np.array([1, 1, 1, 0, 0, 0], dtype=bool)
    _, lb, trace = moe(Tensor(x), token_mask=mask)
    _, lb3, _ = moe(Tensor(x[:3]))
    assert abs(float(lb.data) - float(lb3.data)) < 1e-14
    assert trace.scores.shape == (3, 4)
    with pytest.raises(ContractError):
        moe(Tensor(x), token_mask=np.zeros(6, dtype=bool))


def test_load_balance_router_gradcheck():
    rng = np.random.default_rng(10)
    moe = MixtureOfExperts(rng, 6, 8, 5, 2)
    moe.router.data[:] = rng.normal(0, 0.7, size=moe.router.shape)
    x = Tensor(rng.normal(size=(7, 6)))
    rows = check_parameters(lambda: moe(x)[1], {"router": moe.router}, 1e-5, None, 2, 0)
    assert rows[0].worst_error < 1e-4


def test_moe_gradcheck():
    rng = np.random.default_rng(11)
    moe = MixtureOfExperts(rng, 6, 8, 4, 2)
    moe.router.data[:] = rng.normal(0, 0.7, size=moe.router.shape)
    for ex in moe.experts:
        for p in ex.params().values():
            p.data *= 10
    x = Tensor(rng.normal(size=(5, 6)))
    w = rng.normal(size=(5, 6))
    rows = check_parameters(lambda: (moe(x)[0] * w).sum() + moe(x)[1], moe.params(), 1e-6, None, 1, 0)
    worst = max(rows, key=lambda r: r.worst_error)
    assert worst.worst_error < 1e-4, worst


# -- artifacts -----------------------------------------------------------------------

def test_routing_csv_shapes(tmp_path):
    scores = np.array([[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]])
    trace = RoutingTrace(scores, top_k_indices(scores, 1), -0.6, ["a", "b", "c"])
    heat, counts, assign = emit_routing_artifacts(trace, tmp_path)
    lines = heat.read_text().splitlines()
    assert lines[0] == "token,e0,e1"
    assert len(lines) == 4 and all(len(l.split(",")) == 3 for l in lines[1:])
    c = [int(l.split(",")[1]) for l in counts.read_text().splitlines()[1:]]
    assert sum(c) == 3 * 1 and c == [2, 1]
    assert assign.read_text().splitlines()[1] == "0,a,e0"


def test_routing_csv_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    moe = MixtureOfExperts(rng, 4, 8, 5, 2)
    moe.router.data[:] = rng.normal(size=moe.router.shape)
    _, _, trace = moe(Tensor(rng.normal(size=(6, 4))), tokens=[f"w{i}" for i in range(6)])
    heat, counts, _ = emit_routing_artifacts(trace, tmp_path / "sub", prefix="x")
    labels, back = read_score_heatmap(heat)
    assert labels == [f"w{i}" for i in range(6)]
    np.testing.assert_allclose(back, trace.scores, atol=1e-9)
    total = sum(int(l.split(",")[1]) for l in counts.read_text().splitlines()[1:])
    assert total == 6 * 2


def test_routing_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    trace = RoutingTrace(np.ones((1, 1)), np.zeros((1, 1), dtype=int), 0.0)
    with pytest.raises(OSError):
        emit_routing_artifacts(trace, blocker / "inside")
