import numpy as np
import pytest

from adaconv.errors import ConfigError, FormatError, ShapeError, StateError
from adaconv.net import (
    KernelPair, NetworkConfig, build_network, forward_kernel, init_network, load_checkpoint,
    save_checkpoint,
)
from adaconv.tensor import Conv2D, check_gradients
from adaconv.synth import batch_loss


def test_paper_shape_chain_matches_table():
    chain = NetworkConfig.paper().shape_chain()
    assert chain == [
        ("conv", 32, 73), ("down-conv", 32, 36), ("conv", 64, 32), ("down-conv", 64, 16),
        ("conv", 128, 12), ("down-conv", 128, 6), ("conv", 256, 4), ("conv", 2048, 1),
        ("conv", 3362, 1),
    ]
    assert NetworkConfig.paper().kernel_length == 3362


def test_desk_config():
    cfg = NetworkConfig.desk()
    assert (cfg.receptive_field, cfg.patch_size, cfg.down_conv_count) == (23, 11, 1)
    assert cfg.kernel_length == 242
    assert cfg.shape_chain()[-1] == ("conv", 242, 1)


def test_symbolic_chain_matches_forward_pass():
    cfg = NetworkConfig.desk()
    net = init_network(cfg, 0)
    x = np.random.default_rng(0).random((2, 6, 23, 23)).astype(np.float32)
    shapes = []
    for layer in net.layers[:-1]:
        x = layer.forward(x)
        if isinstance(layer, Conv2D):
            shapes.append((x.shape[1], x.shape[2]))
    assert shapes == [(c, e) for _, c, e in cfg.shape_chain()]


@pytest.mark.parametrize("cfg, fragment", [
    (NetworkConfig(23, 11, 1, (16, 32, 512), (7, 5, 5, 1)), "layer 3 "),
    (NetworkConfig(24, 11, 1, (16, 32, 512), (7, 5, 4, 1)), "odd"),
    (NetworkConfig(23, 11, 1, (16, 32), (7, 5, 4, 1)), "widths"),
    (NetworkConfig(23, 11, 1, (16, 32, 512), (7, 5, 3, 1)), "layer 4 "),
])
def test_invalid_chain_names_layer(cfg, fragment):
    with pytest.raises(ConfigError, match=fragment):
        init_network(cfg, 0)


def test_xavier_bounds_and_determinism():
    cfg = NetworkConfig.desk()
    a, b = init_network(cfg, 7), init_network(cfg, 7)
    for ta, tb in zip(a.state_tensors(), b.state_tensors()):
        assert np.array_equal(ta, tb)
    first = a.layers[0].params["weight"]
    bound = np.sqrt(6 / (6 * 49 + 16 * 49))
    assert np.abs(first).max() <= bound and np.abs(first).max() > 0.9 * bound
    assert not a.layers[0].params["bias"].any()
    assert not np.array_equal(first, init_network(cfg, 8).layers[0].params["weight"])


def test_forward_kernel_normalized_and_deterministic():
    cfg = NetworkConfig.desk()
    net = init_network(cfg, 1)
    rng = np.random.default_rng(1)
    r1, r2 = rng.random((3, 23, 23)), rng.random((3, 23, 23))
    kp = forward_kernel(net, r1, r2)
    assert kp.k1.shape == kp.k2.shape == (11, 11)
    assert (kp.k1 >= 0).all() and (kp.k2 >= 0).all()
    assert abs(kp.k1.sum() + kp.k2.sum() - 1) < 1e-6
    again = forward_kernel(net, r1, r2)
    assert np.array_equal(kp.k1, again.k1) and np.array_equal(kp.k2, again.k2)
    with pytest.raises(ShapeError):
        forward_kernel(net, r1[:, :21, :21], r2[:, :21, :21])


def test_kernel_split_is_column_wise():
    k = np.arange(2 * 3 * 6, dtype=float).reshape(2, 3, 6)
    kp = KernelPair.from_kernel(k)
    assert np.array_equal(kp.k1, k[..., :3]) and np.array_equal(kp.k2, k[..., 3:])
    assert np.array_equal(kp.kernel, k)


def test_paper_config_output_reshapes_to_41x82():
    cfg = NetworkConfig.paper()
    net = build_network(cfg)
    # zero weights give uniform logits; one forward pass on the paper-size input
    x = np.zeros((1, 6, 79, 79), np.float32)
    k = net.forward(x)
    assert k.shape == (1, 41, 82)
    np.testing.assert_allclose(k, 1 / 3362, rtol=1e-5)


def _desk_loss(rng, n, k):
    p1, p2 = rng.random((n, 3, k + 2, k + 2)), rng.random((n, 3, k + 2, k + 2))
    color, grads = rng.random((n, 3)), rng.uniform(-1, 1, (n, 8, 3))

    def loss(kernel):
        (total, _, _), d = batch_loss(p1, p2, kernel, color, grads, 1.0)
        return float(total.mean()), d / n

    return loss


def test_backward_matches_finite_differences():
    cfg = NetworkConfig.desk()
    net = init_network(cfg, 0, dtype=np.float64)
    rng = np.random.default_rng(3)
    x = rng.random((2, 6, 23, 23))
    err = check_gradients(net, x, 1e-5, loss=_desk_loss(rng, 2, 11), max_entries=15)
    assert err < 1e-4


def test_backward_zero_and_shapes():
    cfg = NetworkConfig.desk()
    net = init_network(cfg, 0)
    with pytest.raises(StateError):
        net.backward(np.zeros((2, 11, 22), np.float32))
    x = np.random.default_rng(0).random((3, 6, 23, 23)).astype(np.float32)
    net.forward(x, train=True)
    net.backward(np.zeros((3, 11, 22), np.float32))
    grads = net.gradients()
    for name, p in net.parameters():
        assert grads[name].shape == p.shape
        assert not grads[name].any()


def test_checkpoint_round_trip(tmp_path):
    net = init_network(NetworkConfig.desk(), 5)
    net.layers[1].buffers["running_mean"][:] = np.linspace(-1, 1, 16)
    path = tmp_path / "m.adkn"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.config == net.config
    assert loaded.config.receptive_field == 23 and loaded.config.patch_size == 11
    for a, b in zip(net.state_tensors(), loaded.state_tensors()):
        assert a.tobytes() == b.tobytes()
    assert path.read_bytes()[:4] == b"ADKN"


def test_checkpoint_errors(tmp_path):
    net = init_network(NetworkConfig.desk(), 5)
    path = tmp_path / "m.adkn"
    save_checkpoint(net, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.adkn").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "trunc.adkn")
    (tmp_path / "magic.adkn").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "magic.adkn")
    (tmp_path / "ver.adkn").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "ver.adkn")
    # header says k=13: tensors no longer match the architecture
    bad = bytearray(raw)
    bad[12:16] = (13).to_bytes(4, "little")
    (tmp_path / "cfg.adkn").write_bytes(bytes(bad))
    with pytest.raises((ConfigError, FormatError)):
        load_checkpoint(tmp_path / "cfg.adkn")
