import numpy as np
import pytest

from picanet import functional as F
from picanet.errors import ConfigurationError
from picanet.layers import (DECODER, ENCODER, BatchNorm2d, Conv2d, LSTMParams, ParamRegistry,
                            bilstm_scan, orthogonal)
from picanet.network import NetworkSpec, SaliencyNet
from picanet.tensor import Tape, Tensor, backward
from picanet.training import TrainConfig, training_loss


def hand_tally(channels=(16, 32, 64, 64, 128), placement="GGLLN", hidden=32, grid=36,
               local_ctx=16, local_kernel=7, local_grid=49):
    """Parameter count from layer arithmetic alone."""
    conv = lambda cin, cout, k: cin * cout * k * k + cout
    lstm = lambda i, h: i * 4 * h + h * 4 * h + 4 * h
    total, cin = 0, 3
    for c in channels:
        total += conv(cin, c, 3) + conv(c, c, 3)
        cin = c
    prev = channels[-1]
    for k, code in enumerate(placement):
        i = len(channels) - k
        c = channels[i - 1]
        out = channels[i - 2] if i >= 2 else channels[0]
        total += 2 * c + conv(c + prev, c, 1)
        if code == "G":
            total += 2 * lstm(c, hidden) + 2 * lstm(2 * hidden, hidden) \
                + conv(2 * hidden, grid, 1) + 2 * grid
        elif code == "L":
            total += conv(c, local_ctx, local_kernel) + conv(local_ctx, local_grid, 1) + 2 * local_grid
        total += conv(2 * c if code != "N" else c, out, 1) + 2 * out + conv(out, 1, 1)
        prev = out
    return total


def test_registry_rejects_duplicates_and_bad_group():
    reg = ParamRegistry()
    reg.add("a", np.zeros(2), ENCODER)
    with pytest.raises(ConfigurationError):
        reg.add("a", np.zeros(2), ENCODER)
    with pytest.raises(ConfigurationError):
        reg.add("b", np.zeros(2), "head")


def test_registry_names_unique_and_ordered():
    net = SaliencyNet(NetworkSpec(), seed=0)
    names = net.registry.names()
    assert len(names) == len(set(names))
    assert names[0] == "encoder.block1.conv1.weight"
    assert names == SaliencyNet(NetworkSpec(), seed=5).registry.names()


def test_same_seed_identical_registries():
    a = SaliencyNet(NetworkSpec(), seed=3).registry
    b = SaliencyNet(NetworkSpec(), seed=3).registry
    for n in a:
        assert np.array_equal(a[n].data, b[n].data)
    c = SaliencyNet(NetworkSpec(), seed=4).registry
    assert not np.array_equal(a["encoder.block1.conv1.weight"].data,
                              c["encoder.block1.conv1.weight"].data)


def test_groups_split_encoder_and_decoder():
    reg = SaliencyNet(NetworkSpec()).registry
    for n in reg:
        assert reg.group(n) == (ENCODER if n.startswith("encoder.") else DECODER)


def test_recurrent_matrices_orthogonal():
    reg = SaliencyNet(NetworkSpec()).registry
    w_hh = [reg[n].data.astype(np.float64) for n in reg if n.endswith("w_hh")]
    assert w_hh
    for w in w_hh:
        h = w.shape[0]
        for k in range(4):
            block = w[:, k * h:(k + 1) * h]
            np.testing.assert_allclose(block.T @ block, np.eye(h), atol=1e-4)


def test_init_contract():
    reg = SaliencyNet(NetworkSpec()).registry
    for n, t in reg.items():
        if n.endswith(".gamma"):
            np.testing.assert_array_equal(t.data, 1)
        if n.endswith(".beta"):
            np.testing.assert_array_equal(t.data, 0)
        if n.endswith((".fwd.bias", ".bwd.bias")):
            h = t.size // 4
            np.testing.assert_array_equal(t.data[h:2 * h], 1.0)
            np.testing.assert_array_equal(t.data[:h], 0.0)
        elif n.endswith(".bias"):
            np.testing.assert_array_equal(t.data, 0.0)


def test_orthogonal_helper(rng):
    q = orthogonal(rng, 7)
    np.testing.assert_allclose(q @ q.T, np.eye(7), atol=1e-12)


@pytest.mark.parametrize("placement", ["GGLLN", "NNNNN", "GGNNN", "LLLLL"])
def test_parameter_count_matches_hand_tally(placement):
    net = SaliencyNet(NetworkSpec(placement=placement))
    assert net.registry.num_parameters() == hand_tally(placement=placement)


def test_default_parameter_count_literal():
    assert SaliencyNet(NetworkSpec()).registry.num_parameters() == 648_419


def test_pooling_placements_have_no_attention_params():
    mp = SaliencyNet(NetworkSpec(placement="GGLLN-MP")).registry
    assert not any(".global." in n or ".local." in n for n in mp)


def test_load_state_validates():
    reg = ParamRegistry()
    reg.add("w", np.zeros((2, 2)), DECODER)
    with pytest.raises(ConfigurationError):
        reg.load_state({"w": np.zeros(3)})
    with pytest.raises(ConfigurationError):
        reg.load_state({"w": np.zeros((2, 2)), "x": np.zeros(1)})
    src = np.ones((2, 2))
    reg.load_state({"w": src})
    src[0, 0] = 5
    assert reg["w"].data[0, 0] == 1


def test_conv_layer_same_padding(rng):
    reg = ParamRegistry(np.float64)
    conv = Conv2d(reg, "c", 2, 3, kernel=7, dilation=2, rng=rng)
    assert conv(Tensor(np.zeros((1, 2, 9, 9)))).shape == (1, 3, 9, 9)


def test_batchnorm_layer_registers_buffers():
    reg = ParamRegistry()
    BatchNorm2d(reg, "bn", 4)
    assert reg.names() == ["bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var"]
    assert not reg.is_trainable("bn.running_mean")
    assert len(reg.parameters()) == 2


# --- bilstm_scan ----------------------------------------------------------------


def _lstm_pair(rng, inputs=3, hidden=2, zero=False):
    reg = ParamRegistry(np.float64)
    fwd = LSTMParams.create(reg, "f", inputs, hidden, rng=rng)
    bwd = LSTMParams.create(reg, "b", inputs, hidden, rng=rng)
    for _, t in reg.items():
        t.data = np.zeros(t.shape) if zero else rng.normal(size=t.shape)
    return fwd, bwd


def test_bilstm_length_one(rng):
    fwd, bwd = _lstm_pair(rng)
    x = Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
    out = bilstm_scan([x], fwd, bwd)
    assert len(out) == 1 and out[0].shape == (2, 4)
    # swapping the chains swaps the halves
    swapped = bilstm_scan([x], bwd, fwd)[0].data
    np.testing.assert_allclose(out[0].data[:, :2], swapped[:, 2:])


def test_bilstm_reversal_swaps_halves(rng):
    fwd, bwd = _lstm_pair(rng)
    seq = [Tensor(rng.normal(size=(2, 3)), dtype=np.float64) for _ in range(5)]
    out = [t.data for t in bilstm_scan(seq, fwd, bwd)]
    rev = [t.data for t in bilstm_scan(seq[::-1], bwd, fwd)]
    for t in range(5):
        mirrored = rev[4 - t]
        np.testing.assert_allclose(out[t][:, :2], mirrored[:, 2:], atol=1e-12)
        np.testing.assert_allclose(out[t][:, 2:], mirrored[:, :2], atol=1e-12)


def test_bilstm_zero_params(rng):
    fwd, bwd = _lstm_pair(rng, zero=True)
    seq = [Tensor(rng.normal(size=(2, 3)), dtype=np.float64) for _ in range(4)]
    for t in bilstm_scan(seq, fwd, bwd):
        np.testing.assert_array_equal(t.data, 0)


def test_bilstm_stacked_matches_list_form(rng):
    from picanet.layers import BiLSTM

    reg = ParamRegistry(np.float64)
    bi = BiLSTM(reg, "bi", 3, 2, rng=rng)
    seq = rng.normal(size=(4, 2, 3))
    stacked = bi.scan(Tensor(seq, dtype=np.float64)).data
    listed = bilstm_scan([Tensor(s, dtype=np.float64) for s in seq], bi.fwd, bi.bwd)
    np.testing.assert_allclose(stacked, np.stack([t.data for t in listed]), atol=1e-12)


def test_bilstm_rejects_bad_sequences(rng):
    fwd, bwd = _lstm_pair(rng)
    with pytest.raises(ConfigurationError):
        bilstm_scan([], fwd, bwd)
    with pytest.raises(ConfigurationError):
        bilstm_scan([Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 3)))], fwd, bwd)


# --- leak check -----------------------------------------------------------------


@pytest.mark.parametrize("placement", ["GGLLN", "NNNNN", "GGLLN-AP"])
def test_every_gradient_lands_in_the_registry(rng, placement):
    from picanet.certify import tiny_network_spec

    net = SaliencyNet(tiny_network_spec(placement), seed=0)
    images = rng.uniform(size=(2, 3, 16, 16)).astype(np.float32)
    masks = (rng.uniform(size=(2, 1, 16, 16)) > 0.5).astype(np.float32)
    cfg = TrainConfig(loss_weights=net.spec.loss_weights)
    registered = {id(t) for t in net.registry.parameters()}
    net.registry.zero_grad()
    with Tape() as tape:
        loss = training_loss(net, images, masks, cfg)
    produced = {id(o) for r in tape.records for o in r.outputs}
    leaves = {id(t) for r in tape.records for t in r.inputs
              if t.requires_grad and id(t) not in produced}
    assert leaves <= registered
    backward(loss, tape)
    for name, t in net.registry.named_parameters():
        assert t.grad is not None, name
        assert t.grad.shape == t.shape and np.all(np.isfinite(t.grad))
    for name, t in net.registry.items():
        if not net.registry.is_trainable(name):
            assert t.grad is None
