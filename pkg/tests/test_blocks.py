import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvnas import autodiff as ad, blocks as bl
from pvnas.autodiff import Graph, Tensor
from pvnas.dataset import time_features
from pvnas.selection import FeatureMask, mrmr_select, pearson_select, select_features

from blockcases import BLOCKS, check_block
from conftest import hourly_frame
from mrmr_oracle import mrmr_oracle


# --- feature selection -------------------------------------------------------------------------

def textbook_r(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


def test_pearson_examples(rng):
    y = rng.standard_normal(200)
    f = hourly_frame(np.stack([y, y, -y, np.full(200, 3.0), rng.standard_normal(200)], 1))
    m = pearson_select(f, 0.3)
    assert m.keep.tolist()[:4] == [True, True, True, False]
    assert m.scores[3] == 0.0


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_pearson_matches_textbook(seed):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(50)
    vals = np.stack([y] + [0.5 * y * rng.random() + rng.standard_normal(50) for _ in range(4)], 1)
    m = pearson_select(hourly_frame(vals), 0.4)
    for j in range(1, 5):
        r = abs(textbook_r(vals[:, j].tolist(), y.tolist()))
        assert abs(m.scores[j] - r) <= 1e-12
        assert m.keep[j] == (r >= 0.4)


def test_mrmr_duplicate_is_penalized(rng):
    y = rng.standard_normal(400)
    a = rng.standard_normal(400)
    a -= a @ (y - y.mean()) / ((y - y.mean()) @ (y - y.mean())) * (y - y.mean())
    a *= np.linalg.norm(y - y.mean()) / np.linalg.norm(a - a.mean())
    vals = np.stack([y, y + a, y + a, y - a], 1)
    m = mrmr_select(hourly_frame(vals), 0.3)
    assert m.order[0] == 1
    assert 3 in m.order
    assert 2 not in m.order or m.order.index(2) > m.order.index(3)


def test_mrmr_independent_features(rng):
    vals = rng.standard_normal((2000, 5))
    assert mrmr_select(hourly_frame(vals), 0.3).indices.tolist() == [0]


def test_single_feature_frame(rng):
    f = hourly_frame(rng.standard_normal(30))
    for method in ("NoFilter", "Pearson", "mRMR"):
        assert select_features(method, f, 0.3).keep.tolist() == [True]


@given(st.integers(0, 100_000), st.integers(2, 5), st.sampled_from([0.0, 0.1, 0.3, 0.4, 0.5]))
@settings(max_examples=80, deadline=None)
def test_mrmr_matches_exhaustive(seed, d, threshold):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((60, 2))
    vals = base @ rng.standard_normal((2, d)) + 0.7 * rng.standard_normal((60, d))
    target = int(rng.integers(d))
    m = mrmr_select(hourly_frame(vals, target_index=target), threshold)
    orders = mrmr_oracle(vals, target, threshold)
    assert orders == [m.order]
    want = np.zeros(d, bool)
    want[[target, *m.order]] = True
    assert np.array_equal(m.keep, want)


def test_mask_needs_one_feature():
    with pytest.raises(ValueError):
        FeatureMask(np.zeros(3, bool), np.zeros(3))


# --- data processing blocks ------------------------------------------------------------------------

def test_gaussian_augment(rng):
    x = rng.standard_normal((4, 10, 3))
    assert bl.gaussian_augment(x, 0.0, 1) is x
    assert bl.gaussian_augment(x, 0.5, 1, train=False) is x
    a, b = bl.gaussian_augment(x, 0.5, 1), bl.gaussian_augment(x, 0.5, 1)
    assert np.array_equal(a, b) and not np.array_equal(a, x)
    big = np.zeros((200, 100, 2))
    noise = bl.gaussian_augment(big, 0.1, 3, feature_std=np.array([1.0, 5.0]))
    assert np.allclose(noise.std(axis=(0, 1)), [0.1, 0.5], rtol=0.02)


def test_revin_roundtrip(rng):
    x = rng.standard_normal((5, 30, 4)) * 7.0 + 3.0
    xn, stats = bl.revin_norm(x)
    for f in range(4):
        back = bl.revin_denorm(xn.data[..., f:f + 1], stats, f).data[..., 0]
        assert np.max(np.abs(back - x[..., f])) <= 1e-6
    assert np.allclose(xn.data.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(xn.data.std(axis=1), 1.0, atol=1e-5)


def test_revin_constant(rng):
    x = np.full((2, 12, 1), 4.25)
    xn, stats = bl.revin_norm(x)
    assert np.array_equal(xn.data, np.zeros_like(x))
    assert np.allclose(bl.revin_denorm(xn.data, stats, 0).data, x, atol=1e-12)


def test_dain_initial_is_standardization(rng):
    x = rng.standard_normal((3, 20, 4)) * 5.0 + 2.0
    out = bl.dain_transform(x).data
    std = (x - x.mean(axis=1, keepdims=True)) / np.sqrt(x.var(axis=1, keepdims=True) + 1e-5)
    assert np.max(np.abs(out - std)) < 1e-3


def test_dain_grads_reach_all_sublayers(rng):
    m = bl.DAIN(3)
    x = Tensor(rng.standard_normal((4, 10, 3)))
    proj = rng.standard_normal((4, 10, 3))
    (m(x) * proj).sum().backward()
    for name, p in m.parameters().items():
        assert np.abs(p.grad).sum() > 0, name


def test_dain_zero_variance_finite():
    x = np.concatenate([np.full((2, 8, 1), 3.0), np.arange(16.0).reshape(2, 8, 1)], -1)
    assert np.all(np.isfinite(bl.dain_transform(x).data))


def test_time_features():
    ts = np.array(["2023-01-02T00:00", "2023-01-02T23:00"], dtype="datetime64[s]")
    tf = time_features(ts)
    assert tf[0, 0] == -0.5 and tf[1, 0] == 0.5
    assert np.all((tf >= -0.5) & (tf <= 0.5))
    x = np.zeros((1, 2, 3))
    out = bl.add_time_features(x, tf[None])
    assert out.shape == (1, 2, 7)
    assert np.array_equal(time_features(ts), tf)


def test_decompose_constant():
    s, t = bl.decompose(np.full((1, 40, 2), 1.75), 25)
    assert np.array_equal(t.data, np.full((1, 40, 2), 1.75)) and not s.data.any()
    s, t = bl.multi_scale_decompose(np.full((1, 40, 2), -3.5))
    assert np.array_equal(t.data, np.full((1, 40, 2), -3.5)) and not s.data.any()


def test_decompose_ramp():
    x = np.arange(20.0).reshape(1, 20, 1)
    s, _ = bl.decompose(x, 3)
    assert np.all(s.data[0, 1:-1, 0] == 0.0)
    assert s.data[0, 0, 0] == pytest.approx(-1 / 3) and s.data[0, -1, 0] == pytest.approx(1 / 3)


def test_decompose_identity(rng):
    x = rng.random((20, 96, 11))
    for s, t in (bl.decompose(x), bl.multi_scale_decompose(x)):
        assert np.array_equal(s.data + t.data, x)


def test_multi_scale_duplicate_kernel(rng):
    x = rng.standard_normal((2, 30, 3))
    a, b = bl.multi_scale_decompose(x, [7, 7]), bl.decompose(x, 7)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


@pytest.mark.parametrize("bad", [[7], [4, 7], [1, 3]])
def test_multi_scale_bad_kernels(bad):
    with pytest.raises(ValueError):
        bl.multi_scale_decompose(np.zeros((1, 10, 1)), bad)
    with pytest.raises(ValueError):
        bl.decompose(np.zeros((1, 10, 1)), 4)


def test_time_feature_mix_zero_is_identity(rng):
    m = bl.TimeFeatureMix(8, 3, 5, rng)
    for p in m.parameters().values():
        p.data[:] = 0.0
    x = rng.standard_normal((2, 8, 3))
    assert np.array_equal(m(Tensor(x), train=True, rng=rng).data, x)


def _input_graph(fn, module, x):
    return Graph(lambda d: fn(x), {"x": x, **module.parameters()})


def test_time_feature_mix_grad(rng):
    m = bl.TimeFeatureMix(8, 3, 4, rng)
    x = Tensor(rng.standard_normal((1, 8, 3)), requires_grad=True)
    out = bl.time_feature_mix(x.data, 4)
    assert out.shape == (1, 8, 3)
    assert ad.grad_check(_input_graph(m, m, x), {}, rng=np.random.default_rng(99)) < 1e-4


def test_frequency_mix_identity(rng):
    x = rng.standard_normal((3, 17, 4))
    assert np.max(np.abs(bl.frequency_mix(x, identity=True).data - x)) <= 1e-8
    assert bl.frequency_mix(x, rng).shape == x.shape


def test_frequency_mix_grad(rng):
    m = bl.FrequencyMix(8, 2, rng, init_scale=0.3)
    x = Tensor(rng.standard_normal((1, 8, 2)), requires_grad=True)
    assert ad.grad_check(_input_graph(m, m, x), {}, rng=np.random.default_rng(98)) < 1e-4


# --- core structures and head -------------------------------------------------------------------

def test_mlp_one_layer_is_linear(rng):
    m = bl.build_cps("MLP", 1, 64, 12, 5, 3, rng)
    assert len(m.layers) == 1 and m.num_params() == 12 * 5 + 5
    f = lambda v: m(Tensor(v)).data
    a, b = rng.standard_normal((2, 12, 3)), rng.standard_normal((2, 12, 3))
    zero = np.zeros((2, 12, 3))
    assert np.allclose(f(a + b) - f(b), f(a) - f(zero), atol=1e-12)


@pytest.mark.parametrize("kind", bl.CPS_KINDS)
@pytest.mark.parametrize("layers", bl.LAYER_OPTIONS)
def test_cps_shape_and_count(kind, layers, rng):
    m = bl.build_cps(kind, layers, 64, 20, 6, 5, rng)
    assert m(Tensor(rng.standard_normal((2, 20, 5)))).shape == (2, 6, 5)
    assert m.num_params() == bl.cps_param_count(kind, layers, 64, 20, 6, 5)


def test_tcn_receptive_field(rng):
    m = bl.build_cps("TCN", 3, 64, 40, 1, 1, rng)
    assert m.receptive_field() == 15
    # impulse response of the conv stack alone: causal and 15 steps wide
    def stack(v):
        out = Tensor(v)
        for w, bias, dil in m.convs:
            out = ad.relu(ad.conv1d(out, w, bias, dilation=dil, padding="causal"))
        return out.data

    base = stack(np.zeros((1, 40, 1)))
    reach = set()
    for s in range(40):
        x = np.zeros((1, 40, 1))
        x[0, s, 0] = 1.0
        diff = np.abs(stack(x) - base).sum(axis=-1)[0]
        reach |= {t - s for t in np.nonzero(diff > 0)[0]}
    assert min(reach) >= 0 and max(reach) <= 14


@pytest.mark.parametrize("args", [("GRU", 1, 64), ("MLP", 4, 64), ("MLP", 1, 100)])
def test_build_cps_invalid(args):
    with pytest.raises(bl.InvalidOption):
        bl.build_cps(*args, 10, 2, 3)


def test_aggregate_head(rng):
    h = bl.AggregateHead(1, rng)
    h.weight.data[:] = 1.0
    h.bias.data[:] = 0.0
    x = rng.standard_normal((2, 6, 1))
    assert np.array_equal(bl.aggregate_head(Tensor(x), h).data, x)
    h = bl.AggregateHead(4, rng)
    h.weight.data[:] = [[1.0], [0.0], [0.0], [0.0]]
    h.bias.data[:] = 0.0
    x = rng.standard_normal((2, 6, 4))
    out = bl.aggregate_head(Tensor(x), h).data
    assert out.shape == (2, 6, 1) and np.array_equal(out[..., 0], x[..., 0])


@pytest.mark.parametrize("name", sorted(BLOCKS))
def test_block_gradients(name):
    worst, stats = check_block(name, n_cases=10, seed=1)
    assert worst < 1e-4
    assert stats["skipped"] <= 0.05 * (stats["checked"] + stats["skipped"])
