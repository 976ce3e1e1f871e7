import numpy as np
import pytest

from rawnl import gradcheck
from rawnl.config import ConfigError, NetworkConfig
from rawnl.core import Tensor, mul, sum_all
from rawnl.core.tensor import ShapeError
from rawnl.layers import ParamStore, convnext_forward, convnext_specs, init_params as init_from_specs
from rawnl.network import count_params, init_params, param_specs


def minimal_count_by_hand():
    """1 scale, C=1, K=1, offset hidden 1, 8 -> 4 channels, enumerated layer by layer."""
    head = 8 * 1 * 9 + 1
    convnext = (1 * 49 + 1) + (1 * 4 + 4) + (4 * 1 + 1)
    offset_cnn = (1 * 9 + 1) + 4 * (1 * 9 + 1) + (1 * 2 * 9 + 2)
    transform = inverse = 1 * 1 + 1
    modulation = 3 * (9 + 1)
    aggregate = 1 + 1
    tail = 1 * 4 * 9 + 4
    return head + 2 * convnext + offset_cnn + transform + modulation + inverse + aggregate + tail


class TestInit:
    def test_deterministic(self):
        cfg = NetworkConfig(scales=2, c_per_scale=(4, 8), k_per_scale=(3, 2))
        a, b = init_params(cfg, 7), init_params(cfg, 7)
        assert a.names() == b.names()
        for n in a:
            assert a[n].data.tobytes() == b[n].data.tobytes()

    def test_offset_head_zero(self):
        cfg = NetworkConfig(scales=2, c_per_scale=(4, 8), k_per_scale=(3, 2))
        p = init_params(cfg, 1)
        last = [n for n in p if ".offset_cnn.conv5." in n]
        assert len(last) == 6  # weight + bias per NL block, 3 blocks
        for n in last:
            assert not p[n].data.any()

    def test_biases_zero(self):
        p = init_params(NetworkConfig(scales=1, c_per_scale=(4,), k_per_scale=(2,)), 3)
        assert all(not p[n].data.any() for n in p if n.endswith(".bias"))

    def test_kaiming_bound(self):
        specs = {"c.weight": param_specs(NetworkConfig(scales=1, c_per_scale=(16,), k_per_scale=(2,)))[
            "scale0.bottom.nlfemf.offset_cnn.conv1.weight"]}
        assert specs["c.weight"].shape == (16, 16, 3, 3)
        w = init_from_specs(specs, 0)["c.weight"].data
        bound = 1 / np.sqrt(144)
        assert np.all(np.abs(w) <= bound)
        assert np.abs(w).max() > 0.9 * bound


class TestCountParams:
    def test_minimal_by_hand(self):
        cfg = NetworkConfig(scales=1, c_per_scale=(1,), k_per_scale=(1,))
        assert count_params(cfg) == minimal_count_by_hand() == 345

    def test_zero_width_invalid(self):
        with pytest.raises(ConfigError):
            NetworkConfig(scales=1, c_per_scale=(0,), k_per_scale=(1,))

    def test_monotone_in_k_and_c(self):
        base = NetworkConfig(scales=2, c_per_scale=(8, 16), k_per_scale=(3, 3))
        n = count_params(base)
        assert count_params(NetworkConfig(scales=2, c_per_scale=(8, 16), k_per_scale=(6, 3))) > n
        assert count_params(NetworkConfig(scales=2, c_per_scale=(8, 16), k_per_scale=(3, 6))) > n
        assert count_params(NetworkConfig(scales=2, c_per_scale=(9, 16), k_per_scale=(3, 3))) > n
        assert count_params(NetworkConfig(scales=2, c_per_scale=(8, 17), k_per_scale=(3, 3))) > n

    def test_matches_store(self):
        cfg = NetworkConfig(scales=2, c_per_scale=(4, 8), k_per_scale=(2, 3))
        assert init_params(cfg, 0).num_elements() == count_params(cfg)


class TestParamStore:
    def test_order_and_uniqueness(self):
        s = ParamStore()
        s.add("b", np.zeros(2))
        s.add("a", np.zeros(3))
        assert s.names() == ["b", "a"]
        with pytest.raises(KeyError):
            s.add("a", np.zeros(1))

    def test_buffers_match_shapes(self):
        p = init_params(NetworkConfig(scales=1, c_per_scale=(2,), k_per_scale=(2,)), 0)
        for _, par in p.items():
            assert par.grad.shape == par.m.shape == par.v.shape == par.value.shape

    def test_ntf_round_trip(self, tmp_path):
        cfg = NetworkConfig(scales=2, c_per_scale=(4, 8), k_per_scale=(2, 2))
        p = init_params(cfg, 5)
        p.save(tmp_path / "ckpt", cfg.to_dict())
        q, c = ParamStore.load(tmp_path / "ckpt")
        assert NetworkConfig.from_dict(c) == cfg
        assert q.names() == p.names()
        for n in p:
            assert q[n].data.tobytes() == p[n].data.tobytes()
        # element counts on disk equal count_params
        total = sum((tmp_path / "ckpt" / "params" / f"{n}.ntf").stat().st_size for n in p)
        header = sum(12 + 4 * p[n].ndim for n in p)
        assert (total - header) // 4 == count_params(cfg)


def convnext_store(c, seed=0, zero=False):
    specs = convnext_specs("blk", c)
    store = init_from_specs(specs, seed)
    if zero:
        for n in store:
            store.set(n, np.zeros(store[n].shape))
    return store


class TestConvNeXt:
    @pytest.mark.parametrize("h,w", [(5, 7), (8, 8), (3, 4)])
    def test_zero_weights_identity(self, h, w):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, h, w)).astype(np.float32))
        y = convnext_forward(x, convnext_store(3, zero=True), "blk")
        np.testing.assert_array_equal(y.data, x.data)

    @pytest.mark.parametrize("h,w", [(5, 7), (8, 9)])
    def test_shape(self, h, w):
        x = Tensor(np.ones((1, 4, h, w)))
        assert convnext_forward(x, convnext_store(4), "blk").shape == (1, 4, h, w)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            convnext_forward(Tensor(np.ones((1, 3, 5, 5))), convnext_store(4), "blk")

    def test_gradients(self):
        rng = np.random.default_rng(1)
        store = convnext_store(3, seed=2).astype(np.float64)
        for n in store:
            if n.endswith("bias"):
                store.set(n, rng.uniform(-0.2, 0.2, store[n].shape))
        x = Tensor(rng.uniform(-2, 2, (1, 3, 6, 5)))
        proj = Tensor(rng.standard_normal((1, 3, 6, 5)))
        leaves = {"x": x, **{n: store[n] for n in store}}
        reps = gradcheck.check(lambda: sum_all(mul(convnext_forward(x, store, "blk"), proj)), leaves)
        for rep in reps:
            assert rep.max_rel_err < 1e-4, rep
