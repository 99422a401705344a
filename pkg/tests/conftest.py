"""Shared test oracles: brute-force layer references and finite differences.

Everything here is deliberately independent of the library's fast paths:
plain loops and direct formula evaluation, trusted by inspection.
"""

import numpy as np
import pytest


def conv2d_oracle(x, w, b=None):
    """Direct same-padding convolution by explicit loops.

    x: (N, H, W, C_in), w: (kh, kw, C_in, C_out). Out-of-bounds taps are zero.
    """
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = kh // 2, kw // 2
    y = np.zeros((n, h, wd, cout), np.float64)
    for nn in range(n):
        for i in range(h):
            for j in range(wd):
                for ki in range(kh):
                    for kj in range(kw):
                        ii, jj = i + ki - ph, j + kj - pw
                        if 0 <= ii < h and 0 <= jj < wd:
                            y[nn, i, j] += x[nn, ii, jj] @ w[ki, kj]
    if b is not None:
        y += b
    return y.astype(x.dtype)


def deconv2_oracle(x, w, b=None):
    """Direct stride-2 transposed convolution with a 2x2 kernel."""
    n, h, wd, cin = x.shape
    _, _, _, cout = w.shape
    y = np.zeros((n, 2 * h, 2 * wd, cout), np.float64)
    for nn in range(n):
        for i in range(h):
            for j in range(wd):
                for di in range(2):
                    for dj in range(2):
                        y[nn, 2 * i + di, 2 * j + dj] += x[nn, i, j] @ w[di, dj]
    if b is not None:
        y += b
    return y.astype(x.dtype)


def maxpool2_oracle(x):
    n, h, wd, c = x.shape
    y = np.zeros((n, h // 2, wd // 2, c), x.dtype)
    for i in range(h // 2):
        for j in range(wd // 2):
            y[:, i, j] = x[:, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(1, 2))
    return y


def fd_gradient(f, arrays, which, h=1e-5):
    """Central finite-difference gradient of scalar f w.r.t. arrays[which].

    Mutates the chosen array in place element by element and restores it.
    Arrays should be float64 for the advertised accuracy.
    """
    a = arrays[which]
    flat = a.reshape(-1)
    g = np.zeros(flat.size, np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(*arrays)
        flat[i] = orig - h
        fm = f(*arrays)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(a.shape)


def rel_error(analytic, numeric):
    """Max absolute difference normalized by the largest gradient magnitude."""
    analytic = np.asarray(analytic, np.float64)
    numeric = np.asarray(numeric, np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def network_fd_check(base_channels=4, patch_size=16, k=3, sample_frac=0.01, seed=5):
    """End-to-end finite-difference check of the full bidirectional network.

    Builds a float64 net, runs sigmoid-output BCE against a random binary
    target, and compares the analytic gradient with central differences on
    ``sample_frac`` of the entries of every parameter tensor (at least one
    per tensor).

    Central differences are only a valid derivative oracle where the loss
    is smooth across the probe interval, and relu plus max pooling make it
    only piecewise smooth.  Two measures keep the comparison meaningful
    without ever looking at the analytic value being judged:

    * the parameters are jittered after construction, so no relu input or
      pooling tie sits exactly at a kink (zero-initialized biases would
      otherwise put the evaluation point on one, where no gradient exists
      at all and the analytic pass can only report a subgradient);
    * each coordinate is probed at two step sizes (h and h/2).  On a
      smooth stretch the two estimates agree to O(h^2); a window that
      straddles a kink does not converge, and the coordinate is excluded.

    Exclusions are counted and every tensor is topped up with fresh
    coordinates so none goes unchecked.  Returns (worst scaled error,
    kept count, excluded count), where errors are
    |analytic - numeric| / max(1, global max |gradient|).
    """
    from seqseg import tensor as T
    from seqseg.network import NetConfig, SegNet

    config = NetConfig(base_channels=base_channels, patch_size=patch_size)
    net = SegNet(config, seed=seed, dtype=np.float64)
    jit = np.random.default_rng(seed + 3)
    for p in net.params().values():
        p.data += jit.uniform(-0.02, 0.02, p.data.shape)
    gen = np.random.default_rng(seed + 1)
    patches = gen.normal(size=(1, k, patch_size, patch_size))
    target = (gen.random((k, patch_size, patch_size, 1)) < 0.5).astype(np.float64)

    def loss_value():
        out = net.forward_batch(patches)
        return T.bce_mean(out, target).data.item()

    loss = T.bce_mean(net.forward_batch(patches), target)
    loss.backward()
    scale = max(1.0, *(np.abs(p.grad).max() for p in net.params().values()))
    eps, converge_tol = 1e-5, 1e-7

    def probe(flat, i):
        orig = flat[i]
        vals = {}
        for step in (eps, eps / 2, -eps / 2, -eps):
            flat[i] = orig + step
            vals[step] = loss_value()
        flat[i] = orig
        num_h = (vals[eps] - vals[-eps]) / (2.0 * eps)
        num_half = (vals[eps / 2] - vals[-eps / 2]) / eps
        return num_half, abs(num_h - num_half)

    worst, kept, excluded = 0.0, 0, 0
    pick = np.random.default_rng(seed + 2)
    for name, p in net.params().items():
        flat = p.data.reshape(-1)
        n_take = max(1, round(sample_frac * flat.size))
        extra = min(flat.size - n_take, 8)
        idx = pick.choice(flat.size, size=n_take + extra, replace=False)
        analytic = p.grad.reshape(-1)[idx]
        kept_here = 0
        for row, i in enumerate(idx):
            if kept_here and row >= n_take:
                break  # top-up coordinates only fill in for exclusions
            numeric, drift = probe(flat, i)
            if drift > converge_tol * scale:
                excluded += 1
                continue
            worst = max(worst, abs(analytic[row] - numeric) / scale)
            kept_here += 1
        if not kept_here:
            raise AssertionError(f"no smooth probe coordinate found in {name}")
        kept += kept_here
    return worst, kept, excluded
