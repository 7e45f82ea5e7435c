import numpy as np
import pytest

from longseq import autograd as ag
from longseq import ledger as L
from longseq.autograd import Tensor
from longseq.model import ModelConfig
from longseq.offload import checkpoint_offload
from longseq.train import DataConfig, FeatureConfig, RunConfig, TrainConfig, cmd_train


def _cfg(layers: int, ckpt: bool, offload: bool, host_budget=None) -> RunConfig:
    return RunConfig(
        model=ModelConfig(vocab_size=64, hidden_size=16, n_layers=layers, q_heads=4, kv_heads=2,
                          max_position=64),
        features=FeatureConfig(ckpt=ckpt, ckpt_offload=offload, host_budget=host_budget),
        train=TrainConfig(steps=2),
        data=DataConfig(seqlen=32),
    )


def _ckpt_peaks(layers, ckpt, offload):
    res = cmd_train(_cfg(layers, ckpt, offload))
    return res.peak(L.DEVICE, "activation-checkpoint"), res.peak(L.HOST, "activation-checkpoint"), res.losses


def test_device_checkpoint_peak_is_flat_in_layers_with_offload():
    d4, h4, _ = _ckpt_peaks(4, True, True)
    d8, h8, _ = _ckpt_peaks(8, True, True)
    layer_input = 1 * 32 * 16 * 8
    assert d4 == d8 == layer_input
    assert (h4, h8) == (4 * layer_input, 8 * layer_input)


def test_device_checkpoint_peak_is_layer_proportional_without_offload():
    d4, h4, _ = _ckpt_peaks(4, True, False)
    d8, h8, _ = _ckpt_peaks(8, True, False)
    assert d8 == 2 * d4 == 8 * 32 * 16 * 8
    assert h4 == h8 == 0


def test_offload_leaves_losses_bit_identical():
    _, _, on = _ckpt_peaks(4, True, True)
    _, _, off = _ckpt_peaks(4, True, False)
    _, _, plain = _ckpt_peaks(4, False, False)
    assert [x.hex() for x in on] == [x.hex() for x in off] == [x.hex() for x in plain]


def test_host_oom_reports_exact_deficit():
    layer_input = 32 * 16 * 8
    budget = 3 * layer_input + 100
    with pytest.raises(L.OutOfMemoryError) as info:
        cmd_train(_cfg(4, True, True, host_budget=budget))
    err = info.value
    assert err.tier == L.HOST and "host-OOM" in str(err)
    assert err.deficit == layer_input - 100


def test_checkpoint_offload_gradients_equal_plain(rng):
    w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
    x = rng.normal(size=(2, 6))

    def layer(t):
        return ag.silu(ag.linear(t, w))

    led = L.MemoryLedger()
    a = Tensor(x, requires_grad=True)
    ag.sum_(layer(a)).backward()
    ga, gw = a.grad, w.grad
    w.grad = None
    b = Tensor(x, requires_grad=True)
    y = checkpoint_offload(layer, b, led=led)
    assert led.live_bytes(L.HOST, "activation-checkpoint") == x.nbytes
    with led.activate():
        ag.sum_(y).backward()
    np.testing.assert_array_equal(y.data, layer(Tensor(x)).data)
    assert np.max(np.abs(b.grad - ga)) <= 1e-12
    assert np.max(np.abs(w.grad - gw)) <= 1e-12
