import numpy as np
import pytest

from rpnet import tensor as T
from rpnet.backbone import (BackboneConfig, classify, forward, init_params, load_checkpoint,
                            save_checkpoint)
from rpnet.tensor import ShapeError, Tape, Tensor

from oracles import conv2d_loop, finite_diff, max_rel_err


class TestConfig:
    def test_defaults(self):
        c = BackboneConfig()
        assert (c.num_blocks, c.channels, c.groups, c.unified_channels) == (3, [32, 64, 64], 1, 256)
        assert c.strides() == [2, 2, 1]

    @pytest.mark.parametrize("kw", [dict(num_blocks=1, channels=[8]), dict(channels=[8, 8]),
                                    dict(channels=[8, 6, 8], groups=4)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BackboneConfig(**kw)


class TestForward:
    def test_default_extents(self):
        cfg = BackboneConfig()
        pyr = forward(Tensor(np.random.default_rng(0).random((64, 64, 3))), init_params(cfg), cfg)
        assert [f.shape for f in pyr.features] == [(32, 32, 32), (16, 16, 64), (16, 16, 64)]
        assert pyr.block(3) is pyr.last

    def test_zero_image_zero_pyramid(self):
        cfg = BackboneConfig(channels=[4, 8, 8])
        pyr = forward(Tensor(np.zeros((16, 16, 3))), init_params(cfg), cfg)
        assert all(not f.data.any() for f in pyr.features)

    def test_nonnegative(self, rng):
        cfg = BackboneConfig(channels=[4, 8, 8])
        pyr = forward(Tensor(rng.normal(size=(20, 20, 3))), init_params(cfg, 3), cfg)
        assert all((f.data >= 0).all() for f in pyr.features)

    def test_grouped_first_block_matches_split_oracle(self, rng):
        cfg = BackboneConfig(channels=[8, 8], num_blocks=2, groups=4, in_channels=4)
        params = init_params(cfg, 1)
        for n in (1, 2):
            params[f"block{n}.conv1.bias"] = Tensor(rng.normal(size=8) * 0.1)
        img = rng.normal(size=(16, 16, 4))
        got = forward(Tensor(img), params, cfg).block(1).data

        def layer(x, name, stride):
            k = params[f"block1.{name}.weight"].data
            b = params[f"block1.{name}.bias"].data
            parts = [conv2d_loop(x[..., g:g + 1] if name == "conv1" else x[..., 2 * g:2 * g + 2],
                                 k[..., 2 * g:2 * g + 2], stride, 1) for g in range(4)]
            return np.maximum(np.concatenate(parts, -1) + b, 0)
        want = layer(layer(img, "conv1", 1), "conv2", 2)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_errors(self):
        cfg = BackboneConfig(channels=[4, 8, 8])
        p = init_params(cfg)
        with pytest.raises(ShapeError, match="too small"):
            forward(Tensor(np.ones((8, 8, 3))), p, cfg)
        with pytest.raises(ShapeError, match="channels"):
            forward(Tensor(np.ones((16, 16, 1))), p, cfg)


class TestClassify:
    def test_ones(self):
        v = classify(Tensor(np.ones((4, 4, 6))), Tensor(np.ones((6, 3))))
        np.testing.assert_array_equal(v.data, [6.0, 6.0, 6.0])

    def test_zero_theta(self, rng):
        v = classify(Tensor(rng.random((4, 4, 6))), Tensor(np.zeros((6, 2))))
        np.testing.assert_array_equal(v.data, [0.0, 0.0])

    def test_matches_loop(self, rng):
        f = rng.random((3, 5, 4))
        th = rng.normal(size=(4, 2))
        want = [sum(f[x, y, d] * th[d, c] for x in range(3) for y in range(5) for d in range(4)) / 15
                for c in range(2)]
        np.testing.assert_allclose(classify(Tensor(f), Tensor(th)).data, want, atol=1e-9)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            classify(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((4, 2))))


def test_kernel_gradients_through_backbone(rng):
    cfg = BackboneConfig(channels=[2, 4], num_blocks=2, unified_channels=2, num_classes=2)
    params = init_params(cfg, 2)
    img = Tensor(rng.normal(size=(16, 16, 3)))
    u = np.array([1.0, 0.0])

    def loss():
        return T.softplus_bce(classify(forward(img, params, cfg).last, params["theta"]), u)

    with Tape() as tape:
        L = loss()
    tape.backward(L)
    for name in ("block1.conv1.weight", "block2.conv2.weight", "theta"):
        p = params[name]
        num = finite_diff(lambda: float(loss().data), p.data, h=1e-6, idx=range(0, p.data.size, 3))
        assert max_rel_err(p.grad, num) < 1e-3, name


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = BackboneConfig(channels=[4, 8], num_blocks=2, unified_channels=4)
        p = init_params(cfg, 7)
        save_checkpoint(tmp_path / "m.ckpt", p, cfg, {"seed": 7})
        q, cfg2, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert cfg2 == cfg and meta == {"seed": 7}
        assert sorted(q) == sorted(p)
        for k in p:
            np.testing.assert_array_equal(q[k].data, p[k].data)

    def test_bytes_deterministic(self, tmp_path):
        cfg = BackboneConfig(channels=[4, 8], num_blocks=2)
        save_checkpoint(tmp_path / "a", init_params(cfg, 1), cfg)
        save_checkpoint(tmp_path / "b", init_params(cfg, 1), cfg)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_corrupt(self, tmp_path):
        cfg = BackboneConfig(channels=[4, 8], num_blocks=2)
        save_checkpoint(tmp_path / "a", init_params(cfg, 1), cfg)
        data = (tmp_path / "a").read_bytes()
        (tmp_path / "t").write_bytes(data[:-10])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(tmp_path / "t")
        (tmp_path / "m").write_bytes(b"XXXX" + data[4:])
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "m")
