"""The patch-sequence segmentation network.

Contracting path: three conv blocks (two time-distributed 3x3 convolutions
each, relu) separated by two 2x2 max poolings, channel widths C, 2C, 4C
with C = base_channels.  At each enabled level the assembled feature map
passes through a gated recurrent block spanning the patch sequence; its
output is upsampled by a stride-2 deconv and concatenated with the
contracting-path feature map of matching size.  The top level runs at full
patch resolution and feeds a 1x1 convolution + sigmoid head, giving one
foreground probability map per patch.

Sequences are packed step-major: a batch of B sequences of length K flows
through the convolutional layers as one (K*B, H, W, C) tensor (the weights
are shared across steps), and is split back into K step tensors of B rows
around each recurrent block.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .convrnn import (
    BiDirectionalBlock,
    GatedUnit,
    run_bidirectional_packed,
    run_forward_packed,
    uniform_kernel,
)
from .errors import FormatError, ShapeError

LEVELS = ("bottom", "middle", "top")
VARIANTS = {
    "full": (("bottom", "middle", "top"), True),
    "single_direction": (("bottom", "middle", "top"), False),
    "bottom_only": (("bottom",), True),
    "bottom_middle": (("bottom", "middle"), True),
}

CHECKPOINT_MAGIC = b"RPSM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 16
    rnn_levels: tuple = ("bottom", "middle", "top")
    bidirectional: bool = True
    patch_size: int = 32
    levels: int = 3

    def __post_init__(self):
        if self.base_channels < 1:
            raise ShapeError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.levels != 3:
            raise ShapeError("the architecture is fixed at 3 levels")
        if self.patch_size < 4 or self.patch_size % 4:
            raise ShapeError(
                f"patch_size must be a positive multiple of 4, got {self.patch_size}"
            )
        bad = [l for l in self.rnn_levels if l not in LEVELS]
        if bad:
            raise ShapeError(f"unknown rnn levels {bad}; valid: {list(LEVELS)}")
        object.__setattr__(self, "rnn_levels", tuple(l for l in LEVELS if l in self.rnn_levels))

    def to_json_dict(self):
        return {
            "base_channels": self.base_channels,
            "rnn_levels": list(self.rnn_levels),
            "bidirectional": self.bidirectional,
            "patch_size": self.patch_size,
            "levels": self.levels,
        }


def build_variant(name, base_channels=16, patch_size=32):
    """NetConfig for one of: full, single_direction, bottom_only, bottom_middle."""
    if name not in VARIANTS:
        raise ShapeError(f"unknown variant {name!r}; valid: {sorted(VARIANTS)}")
    rnn_levels, bidirectional = VARIANTS[name]
    return NetConfig(
        base_channels=base_channels,
        rnn_levels=rnn_levels,
        bidirectional=bidirectional,
        patch_size=patch_size,
    )


class _Conv:
    def __init__(self, kh, cin, cout, rng, dtype):
        shape = (kh, kh, cin, cout)
        w = np.zeros(shape, dtype) if rng is None else uniform_kernel(rng, shape, dtype)
        self.w = T.Tensor(w, requires_grad=True)
        self.b = T.Tensor(np.zeros(cout, dtype), requires_grad=True)


class _Deconv:
    def __init__(self, cin, cout, rng, dtype):
        shape = (2, 2, cin, cout)
        w = np.zeros(shape, dtype) if rng is None else uniform_kernel(rng, shape, dtype)
        self.w = T.Tensor(w, requires_grad=True)
        self.b = T.Tensor(np.zeros(cout, dtype), requires_grad=True)


class SegNet:
    """Model parameters plus the forward computation.

    Parameter creation order is fixed (encoder, then bottom-to-top through
    the decoder); it determines both the seeded initialization stream and
    the checkpoint serialization order.
    """

    def __init__(self, config=None, seed=0, dtype=np.float32, _init=True):
        self.config = config or NetConfig()
        self.dtype = np.dtype(dtype).type
        c1 = self.config.base_channels
        c2, c3 = 2 * c1, 4 * c1
        self.channels = {"top": 2 * c1, "middle": 2 * c2, "bottom": c3}
        rng = np.random.default_rng(seed) if _init else None
        dt = self.dtype
        self.enc = [
            (_Conv(3, 1, c1, rng, dt), _Conv(3, c1, c1, rng, dt)),
            (_Conv(3, c1, c2, rng, dt), _Conv(3, c2, c2, rng, dt)),
            (_Conv(3, c2, c3, rng, dt), _Conv(3, c3, c3, rng, dt)),
        ]
        self.rnn = {}
        if "bottom" in self.config.rnn_levels:
            self.rnn["bottom"] = self._make_rnn(c3, rng, dt)
        self.up2 = _Deconv(c3, c2, rng, dt)
        if "middle" in self.config.rnn_levels:
            self.rnn["middle"] = self._make_rnn(2 * c2, rng, dt)
        self.up1 = _Deconv(2 * c2, c1, rng, dt)
        if "top" in self.config.rnn_levels:
            self.rnn["top"] = self._make_rnn(2 * c1, rng, dt)
        self.head = _Conv(1, 2 * c1, 1, rng, dt)

    def _make_rnn(self, channels, rng, dtype):
        if self.config.bidirectional:
            return BiDirectionalBlock(channels, rng, dtype)
        return GatedUnit(channels, rng, dtype)

    # parameter bookkeeping ---------------------------------------------------

    def params(self):
        """Ordered name -> Tensor mapping (the declared serialization order)."""
        out = {}
        for i, (a, b) in enumerate(self.enc, start=1):
            out[f"enc{i}.conv1.w"] = a.w
            out[f"enc{i}.conv1.b"] = a.b
            out[f"enc{i}.conv2.w"] = b.w
            out[f"enc{i}.conv2.b"] = b.b
        if "bottom" in self.rnn:
            out.update(self._rnn_params("bottom"))
        out["up2.w"] = self.up2.w
        out["up2.b"] = self.up2.b
        if "middle" in self.rnn:
            out.update(self._rnn_params("middle"))
        out["up1.w"] = self.up1.w
        out["up1.b"] = self.up1.b
        if "top" in self.rnn:
            out.update(self._rnn_params("top"))
        out["head.w"] = self.head.w
        out["head.b"] = self.head.b
        return out

    def _rnn_params(self, level):
        block = self.rnn[level]
        prefix = f"rnn_{level}"
        if isinstance(block, BiDirectionalBlock):
            return block.named_params(prefix)
        return block.named_params(f"{prefix}.f")

    def param_report(self):
        count = sum(p.data.size for p in self.params().values())
        return {"parameter_count": int(count), "serialized_bytes": len(self.to_bytes())}

    # forward -----------------------------------------------------------------

    def forward_packed(self, x, k, b):
        """x: (K*B, P, P, 1) step-major Tensor -> (K*B, P, P, 1) probabilities."""
        e1 = self._enc_block(x, 0)
        e2 = self._enc_block(T.maxpool2(e1), 1)
        e3 = self._enc_block(T.maxpool2(e2), 2)
        bottom = self._run_rnn("bottom", e3, k, b)
        u2 = T.relu(T.deconv2(bottom, self.up2.w, self.up2.b))
        middle = self._run_rnn("middle", T.concat_channels(u2, e2), k, b)
        u1 = T.relu(T.deconv2(middle, self.up1.w, self.up1.b))
        top = self._run_rnn("top", T.concat_channels(u1, e1), k, b)
        return T.sigmoid(T.conv2d(top, self.head.w, self.head.b))

    def _enc_block(self, x, i):
        a, bb = self.enc[i]
        return T.relu(T.conv2d(T.relu(T.conv2d(x, a.w, a.b)), bb.w, bb.b))

    def _run_rnn(self, level, x, k, b):
        if level not in self.rnn:
            return x
        block = self.rnn[level]
        if isinstance(block, BiDirectionalBlock):
            return run_bidirectional_packed(x, k, b, block)
        return run_forward_packed(x, k, b, block)

    def forward_batch(self, patches):
        """patches: (B, K, P, P) array -> probability Tensor (K*B, P, P, 1).

        Row t*B + b of the output is step t of sequence b.
        """
        arr = np.asarray(patches, self.dtype)
        if arr.ndim != 4:
            raise ShapeError(f"forward_batch: expected (B, K, P, P), got {arr.shape}")
        b, k, ph, pw = arr.shape
        p = self.config.patch_size
        if ph != p or pw != p:
            raise ShapeError(f"forward_batch: patches are {ph}x{pw}, config wants {p}x{p}")
        packed = arr.transpose(1, 0, 2, 3).reshape(k * b, ph, pw, 1)
        return self.forward_packed(T.Tensor(packed), k, b)

    def forward_sequence(self, patches):
        """One sequence of K patches -> list of K probability maps (P, P)."""
        plist = list(patches)
        if not plist:
            raise ShapeError("forward_sequence: empty sequence")
        p = self.config.patch_size
        for i, a in enumerate(plist):
            if np.asarray(a).shape != (p, p):
                raise ShapeError(
                    f"forward_sequence: patch {i} has shape {np.asarray(a).shape}, "
                    f"expected ({p}, {p})"
                )
        out = self.forward_batch(np.asarray(plist, self.dtype)[None])
        return [out.data[t, :, :, 0] for t in range(len(plist))]

    # serialization -----------------------------------------------------------

    def to_bytes(self):
        """Checkpoint layout: magic 'RPSM', u16 version, u32 JSON config
        length + UTF-8 config, u32 parameter count, then per parameter:
        u16 name length, name, u32 element count, float32 little-endian data.
        """
        cfg = json.dumps(self.config.to_json_dict(), sort_keys=True).encode()
        parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
        parts.append(struct.pack("<I", len(cfg)))
        parts.append(cfg)
        params = self.params()
        parts.append(struct.pack("<I", len(params)))
        for name, p in params.items():
            nb = name.encode()
            parts.append(struct.pack("<H", len(nb)))
            parts.append(nb)
            parts.append(struct.pack("<I", p.data.size))
            parts.append(np.ascontiguousarray(p.data, "<f4").tobytes())
        return b"".join(parts)

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as f:
            f.write(data)
        return len(data)

    @classmethod
    def from_bytes(cls, blob):
        off = 0

        def take(n, what):
            nonlocal off
            if off + n > len(blob):
                raise FormatError(f"checkpoint truncated reading {what}", offset=off)
            chunk = blob[off : off + n]
            off += n
            return chunk

        if take(4, "magic") != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic", offset=0)
        (version,) = struct.unpack("<H", take(2, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        (cfg_len,) = struct.unpack("<I", take(4, "config length"))
        cfg_bytes = take(cfg_len, "config")
        try:
            cfg = json.loads(cfg_bytes.decode())
            config = NetConfig(
                base_channels=cfg["base_channels"],
                rnn_levels=tuple(cfg["rnn_levels"]),
                bidirectional=cfg["bidirectional"],
                patch_size=cfg["patch_size"],
            )
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
            raise FormatError(f"bad checkpoint config block: {e}", offset=10) from e
        net = cls(config, dtype=np.float32, _init=False)
        params = net.params()
        (n_params,) = struct.unpack("<I", take(4, "parameter count"))
        if n_params != len(params):
            raise FormatError(
                f"checkpoint has {n_params} parameters, architecture needs {len(params)}"
            )
        for name, p in params.items():
            (name_len,) = struct.unpack("<H", take(2, "name length"))
            got = take(name_len, "name").decode()
            if got != name:
                raise FormatError(f"parameter order mismatch: expected {name!r}, got {got!r}")
            (count,) = struct.unpack("<I", take(4, "element count"))
            if count != p.data.size:
                raise FormatError(
                    f"parameter {name!r}: {count} elements, expected {p.data.size}"
                )
            raw = take(4 * count, f"data of {name!r}")
            p.data = np.frombuffer(raw, "<f4").reshape(p.data.shape).copy()
        if off != len(blob):
            raise FormatError(f"{len(blob) - off} trailing bytes after checkpoint", offset=off)
        return net

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as f:
                blob = f.read()
        except OSError as e:
            raise FormatError(f"cannot read checkpoint {path}: {e}") from e
        return cls.from_bytes(blob)
