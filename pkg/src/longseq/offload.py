"""Activation-checkpoint offload to the host tier.

``checkpoint_offload`` is a checkpoint whose saved layer input lives on the
host between forward and backward. On device, checkpoint storage therefore
never exceeds a single layer input (the one being restored), whatever the
layer count.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autograd as ag
from . import ledger
from .autograd import Tensor


def offload_to_host(arr: np.ndarray) -> np.ndarray:
    host = np.array(arr, copy=True)
    led = ledger.current()
    if led is not None:
        # raises OutOfMemoryError (host-OOM) with the exact deficit when over budget
        led.observe(host, tag="activation-checkpoint", tier=ledger.HOST)
    return host


def restore_to_device(host: np.ndarray) -> np.ndarray:
    dev = np.array(host, copy=True)
    ledger.observe(dev, tag="activation-checkpoint")
    return dev


def checkpoint_offload(layer_fn: Callable, hidden_states: Tensor,
                       led: "ledger.MemoryLedger | None" = None):
    """Checkpoint ``layer_fn`` with its saved input held in host memory."""
    if led is not None:
        with led.activate():
            return checkpoint_offload(layer_fn, hidden_states)
    return ag.checkpoint(layer_fn, hidden_states, pack=offload_to_host, unpack=restore_to_device)
