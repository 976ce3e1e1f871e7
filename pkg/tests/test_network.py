import json

import numpy as np
import pytest

from rawnl import gradcheck, network
from rawnl.config import ConfigError, NetworkConfig, build_awgn_variant
from rawnl.core import Tensor
from rawnl.core.tensor import ShapeError
from rawnl.network import (
    count_params, crop, denoise, forward, init_params, pad_reflect_to_multiple, param_specs,
)

SMALL = NetworkConfig(scales=3, c_per_scale=(4, 8, 8), k_per_scale=(3, 2, 2), search_radius=3.0)


def inputs(b, h, w, seed=0, img=4, nmap=4):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.uniform(0, 1, (b, img, h, w)).astype(np.float32)),
            Tensor(rng.uniform(0, 0.1, (b, nmap, h, w)).astype(np.float32)))


class TestForward:
    def test_shape_32(self):
        x, m = inputs(2, 32, 32)
        out = forward(x, m, init_params(SMALL, 0), SMALL)
        assert out.shape == (2, 4, 32, 32)
        assert np.all(np.isfinite(out.data))

    def test_zero_input_zero_output(self):
        params = init_params(SMALL, 1)  # biases start at zero
        out = forward(Tensor(np.zeros((1, 4, 16, 16))), Tensor(np.zeros((1, 4, 16, 16))), params, SMALL)
        assert not out.data.any()

    def test_zero_params_zero_output(self):
        params = init_params(SMALL, 2)
        for n in params:
            params.set(n, np.zeros(params[n].shape))
        x, m = inputs(1, 16, 16)
        assert not forward(x, m, params, SMALL).data.any()

    def test_indivisible_rejected_with_padding(self):
        x, m = inputs(1, 18, 16)
        with pytest.raises(ShapeError, match=r"pad by \(2, 0\)"):
            forward(x, m, init_params(SMALL, 0), SMALL)

    def test_channel_mismatch(self):
        x, m = inputs(1, 8, 8, nmap=1)
        with pytest.raises(ShapeError):
            forward(x, m, init_params(SMALL, 0), SMALL)

    def test_spatial_contract(self, monkeypatch):
        seen = []
        real = network.nl_block_forward

        def spy(x, params, prefix, cfg):
            seen.append((prefix, x.shape))
            return real(x, params, prefix, cfg)

        monkeypatch.setattr(network, "nl_block_forward", spy)
        x, m = inputs(1, 16, 24)
        forward(x, m, init_params(SMALL, 0), SMALL)
        assert seen == [
            ("scale0.enc", (1, 4, 16, 24)), ("scale1.enc", (1, 8, 8, 12)), ("scale2.bottom", (1, 8, 4, 6)),
            ("scale1.dec", (1, 8, 8, 12)), ("scale0.dec", (1, 4, 16, 24)),
        ]

    def test_symmetric_sampling(self):
        for scales in (1, 2, 3):
            cfg = NetworkConfig(scales=scales, c_per_scale=(4,) * scales, k_per_scale=(2,) * scales)
            names = param_specs(cfg)
            downs = [n for n in names if n.endswith(".down.weight")]
            ups = [n for n in names if n.endswith(".up.weight")]
            assert len(downs) == len(ups) == scales - 1

    def test_additive_skips_keep_width(self):
        specs = param_specs(SMALL)
        assert specs["scale0.dec.convnext_in.dw.weight"].shape[0] == SMALL.c_per_scale[0]
        assert specs["scale0.up.weight"].shape == (8, 4, 2, 2)

    def test_local_window_network(self):
        cfg = NetworkConfig(scales=2, c_per_scale=(4, 4), k_per_scale=(3, 3), matching="local_window")
        x, m = inputs(1, 8, 8)
        assert forward(x, m, init_params(cfg, 0), cfg).shape == (1, 4, 8, 8)


def test_micro_gradient_check():
    reports = gradcheck.network_check(NetworkConfig.from_dict(gradcheck.MICRO_CONFIG), seed=0)
    groups = {g.split(".")[0] for g in reports}
    assert groups == {"head", "scale0", "scale1", "tail"}
    for rep in reports.values():
        assert rep.max_rel_err < 1e-4, rep


class TestPadding:
    def test_divisible_unchanged(self):
        x = np.random.default_rng(0).standard_normal((1, 2, 8, 12))
        y, rec = pad_reflect_to_multiple(x, 4)
        assert y is x and crop(y, rec) is not None and crop(y, rec).shape == x.shape

    def test_round_trip(self):
        x = np.random.default_rng(1).standard_normal((1, 1, 5, 5))
        y, rec = pad_reflect_to_multiple(x, 4)
        assert y.shape == (1, 1, 8, 8)
        np.testing.assert_array_equal(crop(y, rec), x)

    def test_reflect_boundary(self):
        x = np.arange(25, dtype=float).reshape(1, 1, 5, 5)
        y, _ = pad_reflect_to_multiple(x, 4)
        np.testing.assert_array_equal(y[..., :5, 5], x[..., :, 3])
        np.testing.assert_array_equal(y[..., 5, :5], x[..., 3, :])

    def test_denoise_arbitrary_size(self):
        x, m = inputs(1, 18, 22)
        out = denoise(x.data, m.data, init_params(SMALL, 0), SMALL)
        assert out.shape == (1, 4, 18, 22)


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(SMALL.to_json())
        assert NetworkConfig.load(p) == SMALL
        assert set(json.loads(p.read_text())) >= {"scales", "k_per_scale", "c_per_scale", "search_radius",
                                                  "matching", "mode"}

    def test_defaults(self):
        cfg = NetworkConfig()
        assert cfg.k_per_scale == (15, 9, 7) and cfg.c_per_scale == (48, 96, 192)
        assert cfg.in_channels == 8 and cfg.out_channels == 4 and cfg.search_radius == 9.0

    def test_invalid(self):
        with pytest.raises(ConfigError):
            NetworkConfig(scales=2, k_per_scale=(3,), c_per_scale=(4, 8))
        with pytest.raises(ConfigError):
            NetworkConfig.from_dict({"scales": 1, "k_per_scale": [2], "c_per_scale": [4], "bogus": 1})
        with pytest.raises(ConfigError):
            NetworkConfig(scales=1, k_per_scale=(2,), c_per_scale=(4,), in_channels=5)

    def test_awgn_variant(self):
        awgn = build_awgn_variant(SMALL)
        assert (awgn.in_channels, awgn.out_channels, awgn.mode) == (4, 3, "awgn")
        raw_specs, awgn_specs = param_specs(SMALL), param_specs(awgn)
        assert raw_specs.keys() == awgn_specs.keys()
        for n in raw_specs:
            if n.startswith(("head.weight", "tail.")):
                continue
            assert raw_specs[n].shape == awgn_specs[n].shape, n
        assert awgn_specs["head.weight"].shape == (4, 4, 3, 3)
        x, m = inputs(1, 8, 8, img=3, nmap=1)
        m = Tensor(np.full((1, 1, 8, 8), 25 / 255, dtype=np.float32))  # sigma/255 map
        assert forward(x, m, init_params(awgn, 0), awgn).shape == (1, 3, 8, 8)
        assert NetworkConfig.from_dict(awgn.to_dict()) == awgn
        assert NetworkConfig.from_dict({"mode": "awgn", "scales": 1, "k_per_scale": [2], "c_per_scale": [4]}) \
            .in_channels == 4

    def test_default_count_positive_and_stable(self):
        assert count_params(NetworkConfig()) == count_params(NetworkConfig()) > 0
