import shutil

import numpy as np
import pytest

from fusionseg.errors import CorruptCheckpoint, MissingInput, ShapeMismatch, UnknownNetwork
from fusionseg.models import LayerSpec, build_network, load_architecture, load_checkpoint, predict, save_checkpoint
from fusionseg.optim import make_rng

# Layer columns written out by hand: (filter, out_channels) per conv-like layer, None for maxpool.
HAND = {
    "cloudsnet": {"vnir": [(5, 8), None, (5, 16), None], "swir": [(1, 8), (3, 16), (5, 32)],
                  "trunk": [(5, 64), (5, 64), (4, 64), (4, 64), (1, 4)]},
    "fcn_vnir": {"vnir": [], "swir": [],
                 "trunk": [(5, 8), None, (5, 16), None, (5, 32), (5, 64), (4, 64), (4, 64), (1, 4)]},
    "fcn_swir": {"vnir": [], "swir": [],
                 "trunk": [(1, 8), (3, 16), (5, 16), (5, 32), (5, 64), (4, 64), (4, 64), (1, 4)]},
}


def hand_count(name):
    arch = HAND[name]
    total = 0
    ins = {"vnir": 3, "swir": 1}
    outs = []
    for arm in ("vnir", "swir"):
        c = ins[arm]
        for layer in arch[arm]:
            if layer is None:
                continue
            F, K = layer
            total += K * c * F * F + 2 * K
            c = K
        if arch[arm]:
            outs.append(c)
    c = sum(outs) if outs else (3 if name == "fcn_vnir" else 1)
    trunk = arch["trunk"]
    for i, layer in enumerate(trunk):
        if layer is None:
            continue
        F, K = layer
        if i == len(trunk) - 1:
            total += K * c * F * F + K   # classifier: bias, no BN
        else:
            total += K * c * F * F + 2 * K
        c = K
    return total


@pytest.mark.parametrize("name", ["cloudsnet", "fcn_vnir", "fcn_swir"])
def test_parameter_count_matches_hand_count(name):
    assert build_network(name).parameter_count() == hand_count(name)


def test_known_counts():
    assert hand_count("cloudsnet") == 328964


def test_cloudsnet_layer_lists():
    arch = load_architecture("cloudsnet")
    assert arch["vnir"] == ["Conv5-1-8", "maxpool", "Conv5-1-16", "maxpool"]
    assert arch["swir"] == ["Conv1-1-8", "Conv3-1-16", "Conv5-1-32"]
    assert arch["trunk"] == ["Conv5-1-64", "Conv5-2-64", "TConv4-2-1-64", "TConv4-2-1-64", "Conv1-1-4"]
    assert load_architecture("fcn_swir")["trunk"] == [
        "Conv1-1-8", "Conv3-1-16", "Conv5-1-16", "Conv5-1-32", "Conv5-2-64", "TConv4-2-1-64", "TConv4-2-1-64",
        "Conv1-1-4"]


@pytest.mark.parametrize("token", ["Conv5-2-64", "TConv4-2-1-64", "maxpool", "Conv1-1-4"])
def test_token_roundtrip(token):
    assert LayerSpec.parse(token).token == token


def test_bad_token_and_network():
    with pytest.raises(ValueError):
        LayerSpec.parse("Dense-10")
    with pytest.raises(UnknownNetwork):
        build_network("unet")


def test_cloudsnet_shapes_full_size():
    net = build_network("cloudsnet")
    trace = dict(net.shape_trace((1, 3, 200, 200), (1, 1, 50, 50)))
    assert trace["vnir.3:maxpool"] == (1, 16, 50, 50)
    assert trace["swir.2:Conv5-1-32"] == (1, 32, 50, 50)
    assert trace["concat"] == (1, 48, 50, 50)
    assert trace["trunk.1:Conv5-2-64"] == (1, 64, 50, 50)
    assert trace["trunk.2:TConv4-2-1-64"] == (1, 64, 100, 100)
    assert trace["trunk.4:Conv1-1-4"] == (1, 4, 200, 200)


def test_miniature_forward(rng):
    net = build_network("cloudsnet", rng=rng)
    y = net.forward(rng.standard_normal((1, 3, 32, 32)), rng.standard_normal((1, 1, 8, 8)))
    assert y.shape == (1, 4, 32, 32)
    fv = build_network("fcn_vnir", rng=rng)
    assert fv.forward(vnir=rng.standard_normal((2, 3, 32, 32))).shape == (2, 4, 32, 32)
    fs = build_network("fcn_swir", rng=rng)
    assert fs.forward(swir=rng.standard_normal((2, 1, 8, 8))).shape == (2, 4, 32, 32)


def test_input_contract(rng):
    net = build_network("cloudsnet")
    with pytest.raises(MissingInput):
        net.forward(vnir=np.zeros((1, 3, 16, 16)))
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 3, 16, 16)), np.zeros((1, 1, 8, 8)))
    with pytest.raises(MissingInput):
        build_network("fcn_vnir").forward(np.zeros((1, 3, 16, 16)), np.zeros((1, 1, 4, 4)))


def test_head_has_bias_and_no_bn():
    params = build_network("cloudsnet").parameters()
    head = [k for k in params if k.startswith("trunk.4.")]
    assert sorted(head) == ["trunk.4.conv.bias", "trunk.4.conv.weight"]
    assert "trunk.3.bn.gamma" in params and "trunk.3.conv.bias" not in params


def test_init_is_seeded():
    a = build_network("fcn_swir", rng=make_rng(3)).parameters()
    b = build_network("fcn_swir", rng=make_rng(3)).parameters()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_xavier_bound_uses_effective_width():
    w = build_network("cloudsnet", rng=make_rng(0)).parameters()["trunk.1.conv.weight"]
    bound = np.sqrt(6 / (64 * 81 + 64 * 81))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.95 * bound


def test_predict_tie_breaks_low():
    class Fixed:
        def forward(self, vnir, swir, train=False):
            x = np.zeros((1, 4, 2, 2))
            x[0, 2, 0, 0] = 1.0
            return x
    lab = predict(Fixed())
    assert lab.dtype == np.uint8
    np.testing.assert_array_equal(lab[0], [[2, 0], [0, 0]])


@pytest.fixture
def saved(tmp_path, rng):
    net = build_network("cloudsnet", rng=rng)
    v = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    s = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
    net.forward(v, s, train=True)  # move the BN running stats off their defaults
    save_checkpoint(net, tmp_path / "ck")
    return net, v, s, tmp_path / "ck"


def test_checkpoint_roundtrip_bit_exact(saved):
    net, v, s, path = saved
    back = load_checkpoint(path)
    np.testing.assert_array_equal(back.forward(v, s), net.forward(v, s))


def test_checkpoint_missing_tensor(saved):
    _, _, _, path = saved
    (path / "params" / "trunk.0.conv.weight.bin").unlink()
    (path / "params" / "trunk.0.conv.weight.meta.json").unlink()
    with pytest.raises(CorruptCheckpoint, match="missing"):
        load_checkpoint(path)


def test_checkpoint_truncated_tensor(saved):
    _, _, _, path = saved
    p = path / "buffers" / "trunk.0.bn.running_mean.bin"
    p.write_bytes(p.read_bytes()[:5])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_wrong_network(tmp_path, saved):
    save_checkpoint(build_network("fcn_vnir"), tmp_path / "fv")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "fv", expected_name="cloudsnet")
    # swap in a foreign parameter directory under a cloudsnet header
    _, _, _, path = saved
    shutil.rmtree(path / "params")
    shutil.copytree(tmp_path / "fv" / "params", path / "params")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
