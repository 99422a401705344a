"""Gated memory propagation: a convolutional RNN cell, its unrolling, and
the bi-directional pairing with 1x1 memory fusion.

One step computes

    r_t = sigmoid(W_xr * x_t + W_hr * h_prev + b_r)
    h_t = relu(W_xh * x_t + (r_t . h_prev) * W_hh + b_h)

where ``*`` is same-padding convolution and ``.`` the element-wise product:
the reset gate scales the previous hidden state first, and the gated state
is then convolved.  A reset gate near zero therefore erases the memory
entirely, making the step input-driven.  Hidden channels equal input
channels, all recurrent kernels are 3x3, and sequences start from a zero
hidden state.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError

KERNEL = 3


def uniform_kernel(rng, shape, dtype):
    """Fan-in-scaled uniform init: limit = 1/sqrt(kh*kw*C_in)."""
    fan_in = shape[0] * shape[1] * shape[2]
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, shape).astype(dtype)


class GatedUnit:
    """Parameters of one gated recurrent direction over P channels."""

    FIELDS = ("wxr", "whr", "wxh", "whh", "br", "bh")

    def __init__(self, channels, rng=None, dtype=np.float32):
        self.channels = channels
        kshape = (KERNEL, KERNEL, channels, channels)
        if rng is None:
            k = {f: np.zeros(kshape, dtype) for f in ("wxr", "whr", "wxh", "whh")}
        else:
            k = {f: uniform_kernel(rng, kshape, dtype) for f in ("wxr", "whr", "wxh", "whh")}
        self.wxr = T.Tensor(k["wxr"], requires_grad=True)
        self.whr = T.Tensor(k["whr"], requires_grad=True)
        self.wxh = T.Tensor(k["wxh"], requires_grad=True)
        self.whh = T.Tensor(k["whh"], requires_grad=True)
        self.br = T.Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.bh = T.Tensor(np.zeros(channels, dtype), requires_grad=True)

    def named_params(self, prefix):
        return {f"{prefix}.{f}": getattr(self, f) for f in self.FIELDS}


def _check_step_shapes(x_t, h_prev, params):
    if x_t.data.ndim != 4 or h_prev.data.ndim != 4:
        raise ShapeError("gated_step: inputs must be (N, H, W, C)")
    if x_t.data.shape != h_prev.data.shape:
        raise ShapeError(
            f"gated_step: x_t shape {x_t.data.shape} != h_prev shape {h_prev.data.shape}"
        )
    if x_t.data.shape[3] != params.channels:
        raise ShapeError(
            f"gated_step: {x_t.data.shape[3]} channels, unit expects {params.channels}"
        )


def reset_gate(x_t, h_prev, params):
    """r_t, strictly inside (0,1)."""
    _check_step_shapes(x_t, h_prev, params)
    return T.sigmoid(T.conv2d(x_t, params.wxr, params.br) + T.conv2d(h_prev, params.whr))


def gated_step(x_t, h_prev, params):
    """One recurrence step; returns the new hidden state (>= 0 everywhere)."""
    r = reset_gate(x_t, h_prev, params)
    gated = r * h_prev
    return T.relu(T.conv2d(x_t, params.wxh, params.bh) + T.conv2d(gated, params.whh))


def run_forward_packed(x, k, b, params, reverse=False, gates=None):
    """Unroll over a packed step-major sequence from a zero initial state.

    ``x`` is (K*B, H, W, P) with row t*B + i holding step t of sequence i;
    the returned hidden states are packed the same way for either
    direction.  The input-side convolutions of both gates do not depend on
    the recurrence, so they run once over the whole packed tensor (or are
    supplied precomputed via ``gates`` as a (K*B, H, W, 2P) tensor whose
    first P channels are the reset-gate drive and last P the candidate
    drive); only the hidden-state convolutions unroll step by step.  At
    the first step the zero initial state makes both recurrent terms
    vanish exactly, so they are skipped rather than convolved.
    """
    if x.data.ndim != 4:
        raise ShapeError("run_forward_packed: input must be (K*B, H, W, C)")
    if k < 1 or b < 1 or x.data.shape[0] != k * b:
        raise ShapeError(
            f"run_forward_packed: {x.data.shape[0]} rows != k*b = {k}*{b}"
        )
    c = params.channels
    if x.data.shape[3] != c:
        raise ShapeError(
            f"run_forward_packed: {x.data.shape[3]} channels, unit expects {c}"
        )
    if gates is None:
        gates = T.conv2d(
            x,
            T.concat_last(params.wxr, params.wxh),
            T.concat_last(params.br, params.bh),
        )
    order = range(k - 1, -1, -1) if reverse else range(k)
    outs = [None] * k
    h = None
    for t in order:
        g = T.rows(gates, t * b, (t + 1) * b)
        xh = T.channels(g, c, 2 * c)
        if h is None:
            h = T.relu(xh)
        else:
            r = T.sigmoid(T.channels(g, 0, c) + T.conv2d(h, params.whr))
            h = T.relu(xh + T.conv2d(r * h, params.whh))
        outs[t] = h
    return T.stack_rows(outs)


def run_forward(sequence, params):
    """Unroll over a list of (N, H, W, P) tensors from a zero initial state."""
    sequence = list(sequence)
    if not sequence:
        raise ShapeError("run_forward: empty sequence")
    shape = sequence[0].data.shape
    for s in sequence[1:]:
        if s.data.shape != shape:
            raise ShapeError(f"run_forward: mixed step shapes {shape} vs {s.data.shape}")
    n = shape[0]
    packed = run_forward_packed(T.stack_rows(sequence), len(sequence), n, params)
    return [T.rows(packed, t * n, (t + 1) * n) for t in range(len(sequence))]


class BiDirectionalBlock:
    """Forward and backward gated units plus a 1x1 fusion over 2P -> P.

    The fusion kernel's first P input channels read the forward memory and
    the last P the backward memory.
    """

    def __init__(self, channels, rng=None, dtype=np.float32):
        self.channels = channels
        self.forward_unit = GatedUnit(channels, rng, dtype)
        self.backward_unit = GatedUnit(channels, rng, dtype)
        fshape = (1, 1, 2 * channels, channels)
        fw = np.zeros(fshape, dtype) if rng is None else uniform_kernel(rng, fshape, dtype)
        self.fuse_w = T.Tensor(fw, requires_grad=True)
        self.fuse_b = T.Tensor(np.zeros(channels, dtype), requires_grad=True)

    def named_params(self, prefix):
        out = {}
        out.update(self.forward_unit.named_params(f"{prefix}.f"))
        out.update(self.backward_unit.named_params(f"{prefix}.b"))
        out[f"{prefix}.fuse.w"] = self.fuse_w
        out[f"{prefix}.fuse.b"] = self.fuse_b
        return out

    def swapped(self):
        """Exchange the two directions, including the fusion channel halves."""
        other = BiDirectionalBlock.__new__(BiDirectionalBlock)
        other.channels = self.channels
        other.forward_unit = self.backward_unit
        other.backward_unit = self.forward_unit
        p = self.channels
        w = self.fuse_w.data
        other.fuse_w = T.Tensor(
            np.concatenate([w[:, :, p:, :], w[:, :, :p, :]], axis=2),
            requires_grad=True,
        )
        other.fuse_b = self.fuse_b
        return other


def run_bidirectional_packed(x, k, b, block):
    """Fused memories over a packed step-major sequence.

    fused_t = fusion(concat(h_forward_t, h_backward_t)) where the backward
    unit consumed the sequence in reverse; both directions pack their
    outputs in original step order, so the fusion runs as one 1x1
    convolution over the whole packed pair.  The input-side gate drives of
    both directions share a single convolution (one im2col, one matmul
    over 4P output channels) before the per-direction unrolls.
    """
    fu, bu = block.forward_unit, block.backward_unit
    c = block.channels
    gates = T.conv2d(
        x,
        T.concat_last(T.concat_last(fu.wxr, fu.wxh), T.concat_last(bu.wxr, bu.wxh)),
        T.concat_last(T.concat_last(fu.br, fu.bh), T.concat_last(bu.br, bu.bh)),
    )
    h_fwd = run_forward_packed(x, k, b, fu, gates=T.channels(gates, 0, 2 * c))
    h_bwd = run_forward_packed(
        x, k, b, bu, reverse=True, gates=T.channels(gates, 2 * c, 4 * c)
    )
    return T.conv2d(T.concat_channels(h_fwd, h_bwd), block.fuse_w, block.fuse_b)


def run_bidirectional(sequence, block):
    """Fused memories, one per step, aligned to the input order."""
    sequence = list(sequence)
    if not sequence:
        raise ShapeError("run_bidirectional: empty sequence")
    n = sequence[0].data.shape[0]
    packed = run_bidirectional_packed(
        T.stack_rows(sequence), len(sequence), n, block
    )
    return [T.rows(packed, t * n, (t + 1) * n) for t in range(len(sequence))]
