import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dccn import oracle
from dccn import tensor as T
from dccn.errors import ConfigError, InputError, NumericError
from dccn.rng import stream
from dccn.routing import DCCN, RHO_BOUND, canonical_order, pcc, route, route_conventional, squash

from helpers import dccn_lists, grad_check

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures", "oracle_fixtures.json")


def fixtures(kind):
    with open(FIXTURES, encoding="utf-8") as fh:
        return [r for r in json.load(fh)["records"] if r["kind"] == kind]


class Params:
    """Plain-array parameter holder built from fixture lists."""

    def __init__(self, p, n_itr):
        self.W_u, self.W_m, self.W_v, self.W_f, self.b_f = (T.Tensor(np.array(p[k])) for k in
                                                          ("W_u", "W_m", "W_v", "W_f", "b_f"))
        self.n_v, self.n_itr = self.W_u.shape[0], n_itr
        self.d_model = self.W_f.shape[0]


def instance(n_u, n_v, n_itr, d, seed):
    net = DCCN(d, d, n_v, n_itr, seed=seed, name="test")
    rng = stream(seed, f"routing-test/{n_u}/{n_v}/{d}")
    return net, rng.normal(size=d), rng.normal(0.0, d ** -0.5, size=(n_u, d))


# PCC

def test_pcc_examples():
    assert pcc([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]).item() == pytest.approx(1.0, abs=1e-15)
    assert pcc([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]).item() == pytest.approx(-1.0, abs=1e-15)
    assert pcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]).item() == 0.0


def test_pcc_fixture():
    (rec,) = fixtures("pcc")
    assert pcc(rec["inputs"]["u"], rec["inputs"]["w"]).item() == pytest.approx(rec["expected"], abs=1e-15)
    assert rec["expected"] == pytest.approx(0.8, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=12), st.integers(0, 10_000))
def test_pcc_bounded_and_symmetric(xs, seed):
    u = np.array(xs)
    w = stream(seed, "pcc").normal(size=u.size)
    r = pcc(u, w).item()
    assert -1.0 - 1e-12 <= r <= 1.0 + 1e-12
    assert r == pytest.approx(pcc(w, u).item(), abs=1e-12)


def test_pcc_gradient_nonconstant():
    u, w = T.Tensor(stream(1, "a").normal(size=6)), T.Tensor(stream(2, "b").normal(size=6))
    assert max(grad_check(lambda: pcc(u, w), {"u": u, "w": w}).values()) < 1e-6


# fixtures

@pytest.mark.parametrize("rec", fixtures("route"), ids=lambda r: r["name"])
def test_route_matches_frozen_fixture(rec):
    inp = rec["inputs"]
    params = Params(inp["params"], inp["n_itr"])
    trace = []
    out = route(np.array(inp["context"]), np.array(inp["I"]), params, trace=trace)
    np.testing.assert_allclose(out.data, rec["expected"]["out"], atol=1e-12, rtol=0)
    if "trace" in rec["expected"]:
        for mine, ref in zip(trace, rec["expected"]["trace"]):
            for key in ("b", "c", "rho"):
                # oracle traces index [i][j]; ours [B, T, j, i]
                np.testing.assert_allclose(mine[key][0, 0].T, ref[key], atol=1e-12, rtol=0)
    if "conventional" in rec["expected"]:
        conv = route_conventional(np.array(inp["I"]), params)
        np.testing.assert_allclose(conv.data, rec["expected"]["conventional"], atol=1e-12, rtol=0)


def test_hand_set_fixture_has_unit_couplings():
    (rec,) = [r for r in fixtures("route") if r["name"].startswith("hand-set")]
    trace = rec["expected"]["trace"]
    assert [row[0] for row in trace[0]["c"]] == [1.0, 1.0]


# oracle equivalence (small sweep; the full one lives in the acceptance suite)

@pytest.mark.parametrize("n_u,n_v,n_itr", [(2, 1, 1), (10, 3, 3), (10, 1, 4), (2, 3, 4)])
def test_route_matches_oracle(n_u, n_v, n_itr):
    net, ctx, I = instance(n_u, n_v, n_itr, 8, seed=n_u * 31 + n_v)
    expected = oracle.oracle_route(ctx.tolist(), I.tolist(), dccn_lists(net), n_itr)
    assert np.max(np.abs(route(ctx, I, net).data - expected)) <= 1e-10
    conv = oracle.oracle_route_conventional(I.tolist(), dccn_lists(net), n_itr)
    assert np.max(np.abs(route_conventional(I, net).data - conv)) <= 1e-10


def test_batched_route_matches_per_instance_calls():
    net = DCCN(8, 8, 3, 3, seed=4, name="batch")
    rng = stream(4, "batch")
    C = rng.normal(size=(2, 3, 8))
    I = rng.normal(0, 0.3, size=(2, 7, 8))
    batched = net(C, I).data
    for b in range(2):
        for t in range(3):
            np.testing.assert_allclose(batched[b, t], route(C[b, t], I[b], net).data, atol=1e-13, rtol=0)


# invariants

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.sampled_from([1, 3]), st.integers(1, 4), st.integers(0, 10_000))
def test_trace_invariants(n_u, n_v, n_itr, seed):
    net, ctx, I = instance(n_u, n_v, n_itr, 8, seed)
    trace = []
    route(ctx, I, net, trace=trace)
    assert len(trace) == n_itr
    for entry in trace:
        c, rho = entry["c"][0, 0], entry["rho"][0, 0]
        assert np.all(np.abs(c.sum(axis=0) - 1.0) <= 1e-12)
        assert np.all(c > 0)
        assert np.all(np.abs(rho) <= RHO_BOUND)
        if n_v == 1:
            assert np.all(c == 1.0)


def test_first_iteration_couplings_are_uniform():
    net, ctx, I = instance(6, 3, 2, 8, 0)
    trace = []
    route(ctx, I, net, trace=trace)
    np.testing.assert_array_equal(trace[0]["c"], np.full((1, 1, 3, 6), 1 / 3))


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 20), st.sampled_from([1, 3]), st.integers(0, 10_000))
def test_permutation_invariance_bit_exact(n_u, n_v, seed):
    net, ctx, I = instance(n_u, n_v, 3, 8, seed)
    perm = stream(seed, "perm").permutation(n_u)
    assert np.array_equal(route(ctx, I, net).data, route(ctx, I[perm], net).data)
    assert np.array_equal(route_conventional(I, net).data, route_conventional(I[perm], net).data)


def test_permutation_invariance_with_duplicate_leading_columns():
    net, ctx, I = instance(8, 1, 3, 8, 3)
    I[:, :4] = 0.25  # the sort must fall back to the full key
    perm = np.arange(8)[::-1]
    assert np.array_equal(route(ctx, I, net).data, route(ctx, I[perm], net).data)


def test_canonical_order_puts_absent_rows_last():
    I = T.Tensor(np.array([[[0.0, 0.0], [3.0, 1.0], [-1.0, 2.0]]]))
    order = canonical_order(I, np.array([[False, True, True]]))
    assert order.tolist() == [[2, 1, 0]]


def test_trace_is_reported_in_input_row_order():
    net, ctx, I = instance(5, 1, 2, 8, 8)
    perm = np.array([3, 0, 4, 1, 2])
    t1, t2 = [], []
    route(ctx, I, net, trace=t1)
    route(ctx, I[perm], net, trace=t2)
    for a, b in zip(t1, t2):
        np.testing.assert_array_equal(a["rho"][..., perm], b["rho"])


def test_determinism():
    net, ctx, I = instance(10, 3, 3, 8, 5)
    assert np.array_equal(route(ctx, I, net).data, route(ctx, I, net).data)


def test_masked_rows_equal_unpadded_route():
    net, ctx, I = instance(6, 3, 3, 8, 6)
    padded = np.concatenate([I, np.zeros((4, 8))])
    mask = np.array([True] * 6 + [False] * 4)
    np.testing.assert_allclose(route(ctx, padded, net, mask=mask).data, route(ctx, I, net).data, atol=1e-13, rtol=0)
    np.testing.assert_allclose(route_conventional(padded, net, mask=mask).data, route_conventional(I, net).data,
                               atol=1e-13, rtol=0)


def test_masked_rows_stay_out_of_couplings_sum():
    net, ctx, I = instance(3, 1, 2, 8, 2)
    padded = np.concatenate([I, np.full((2, 8), 5.0)])
    mask = np.array([True, True, True, False, False])
    np.testing.assert_allclose(route(ctx, padded, net, mask=mask).data, route(ctx, I, net).data, atol=1e-13, rtol=0)


def test_context_sensitivity():
    net, ctx, I = instance(10, 1, 3, 8, 9)
    other = stream(1, "other-context").normal(size=8)
    assert not np.allclose(route(ctx, I, net).data, route(other, I, net).data)
    t1, t2 = [], []
    route_conventional(I, net, trace=t1)
    route_conventional(I, net, trace=t2)
    assert all(np.array_equal(a["v_norm"], b["v_norm"]) for a, b in zip(t1, t2))


def test_b_starts_at_zero_every_call():
    net, ctx, I = instance(4, 3, 1, 8, 1)
    for _ in range(2):
        trace = []
        route(ctx, I, net, trace=trace)
        np.testing.assert_array_equal(trace[0]["c"], np.full((1, 1, 3, 4), 1 / 3))


# squash

def test_squash_examples():
    np.testing.assert_allclose(squash(T.Tensor([3.0, 4.0])).data, [3 * 5 / 26, 4 * 5 / 26], atol=1e-15)
    assert np.array_equal(squash(T.Tensor([0.0, 0.0])).data, [0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_squash_norm_strictly_below_one(xs):
    out = squash(T.Tensor(np.array(xs))).data
    assert np.linalg.norm(out) < 1.0


def test_conventional_high_level_capsules_are_squashed():
    net, _, I = instance(10, 3, 3, 8, 3)
    I *= 100.0
    trace = []
    route_conventional(I, net, trace=trace)
    for entry in trace:
        assert np.all(entry["v_norm"] < 1.0)


# gradients

def test_route_gradients_all_inputs_and_params():
    net, ctx, I = instance(5, 1, 3, 8, 11)
    ctx_t, I_t = T.Tensor(ctx), T.Tensor(I)
    leaves = {"context": ctx_t, "I": I_t, **dict(net.named_parameters())}
    errs = grad_check(lambda: route(ctx_t, I_t, net), leaves)
    assert max(errs.values()) <= 1e-4, errs


def test_route_gradients_multiple_capsules():
    net, ctx, I = instance(5, 3, 3, 8, 12)
    ctx_t, I_t = T.Tensor(ctx), T.Tensor(I)
    errs = grad_check(lambda: route(ctx_t, I_t, net), {"context": ctx_t, "I": I_t, **dict(net.named_parameters())})
    assert max(errs.values()) <= 1e-4, errs


def test_conventional_gradients():
    net, _, I = instance(5, 3, 3, 8, 13)
    I_t = T.Tensor(I)
    errs = grad_check(lambda: route_conventional(I_t, net),
                      {"I": I_t, **{k: v for k, v in net.named_parameters() if k != "W_m"}})
    assert max(errs.values()) <= 1e-4, errs


# errors

def test_invalid_sizes_rejected():
    with pytest.raises(ConfigError):
        DCCN(8, 8, 0, 3, seed=0, name="x")
    with pytest.raises(ConfigError):
        DCCN(8, 8, 1, 0, seed=0, name="x")


def test_nonfinite_context_rejected():
    net, ctx, I = instance(3, 1, 1, 8, 0)
    ctx[2] = np.nan
    with pytest.raises(InputError):
        route(ctx, I, net)


def test_feature_width_must_match_capsule_width():
    net, ctx, I = instance(3, 1, 1, 8, 0)
    with pytest.raises(InputError, match="width 9"):
        route(ctx, np.zeros((3, 9)), net)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_overflow_reports_iteration():
    net, ctx, I = instance(10, 1, 4, 8, 0)
    net.W_v.data = net.W_v.data * 1e90
    with pytest.raises(NumericError) as info:
        route(ctx * 1e10, I, net)
    assert info.value.iteration is not None and info.value.iteration >= 1


# scale calibration

def test_rescale_sets_final_capsule_rms_to_context_rms():
    net = DCCN(8, 8, 3, 3, seed=21, name="scale")
    rng = stream(21, "scale")
    C, I = rng.normal(size=(2, 4, 8)), rng.normal(0, 0.3, size=(2, 12, 8))
    net(C, I)
    assert net.last_stats["n_itr"] == 3
    factor = net.rescale()
    assert factor is not None and factor != 1.0
    stats = {}
    route(C, I, net, stats=stats)
    assert stats["m_rms"] == pytest.approx(stats["context_rms"], rel=1e-9)


def test_inference_calls_do_not_record_stats():
    net, ctx, I = instance(4, 1, 2, 8, 0)
    with T.no_grad():
        net(ctx, I)
    assert net.last_stats is None and net.rescale() is None


def test_v_scale_multiplies_effective_w_v():
    net, ctx, I = instance(6, 1, 3, 8, 1)
    ref = DCCN(8, 8, 1, 3, seed=1, name="test")
    net.v_scale[0] = 0.5
    ref.W_v.data = ref.W_v.data * 0.5
    np.testing.assert_allclose(route(ctx, I, net).data, route(ctx, I, ref).data, atol=1e-14, rtol=0)
