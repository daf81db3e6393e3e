"""The two-branch network: a shared convolutional encoder, a segmentation
head producing per-pixel class probabilities, and a matching-feature head
whose output feeds cosine-similarity label transfer.

Both branches read the same encoder features and the encoder parameters are
literally shared (one tensor object per parameter), so the pair of frames in
a training step always passes through identical weights. The two heads keep
disjoint parameter sets.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SPNCKPT1\n"


@dataclass
class ModelConfig:
    input_channels: int = 3
    num_classes: int = 5
    base_width: int = 16
    encoder_blocks: int = 3
    output_stride: int = 4
    prop_feature_dim: int = 32
    seed: int = 0

    def validate(self) -> None:
        s = self.output_stride
        if s < 1 or (s & (s - 1)) != 0:
            raise ValueError(f"output_stride must be a power of 2, got {s}")
        if self.encoder_blocks < s.bit_length() - 1:
            raise ValueError(
                f"need at least {s.bit_length() - 1} encoder blocks for stride {s}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def feature_channels(self) -> int:
        return self.base_width * 2 ** (self.encoder_blocks - 1)


class SegPropModel:
    """Parameter container plus the three forward paths.

    Parameters are an ordered name -> Tensor mapping with prefixes `enc.`,
    `seg.` and `prop.`; the prefix split realizes the shared-encoder /
    separate-heads structure.
    """

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._layers_enc = []
        self._layers_seg = []
        self._layers_prop = []
        self._build(np.random.default_rng(cfg.seed))

    # -- construction -----------------------------------------------------

    def _add_conv(self, group: list, name: str, rng, c_in: int, c_out: int,
                  k: int, stride: int) -> None:
        fan_in = c_in * k * k
        a = np.sqrt(1.0 / fan_in)
        w = Tensor(rng.uniform(-a, a, size=(c_out, c_in, k, k)), requires_grad=True)
        b = Tensor(rng.uniform(-a, a, size=(c_out,)), requires_grad=True)
        self.params[f"{name}.w"] = w
        self.params[f"{name}.b"] = b
        group.append((w, b, stride, k // 2))

    def _build(self, rng) -> None:
        cfg = self.cfg
        n_stride2 = cfg.output_stride.bit_length() - 1
        c_in = cfg.input_channels
        for i in range(cfg.encoder_blocks):
            c_out = cfg.base_width * 2 ** i
            s = 2 if i < n_stride2 else 1
            self._add_conv(self._layers_enc, f"enc.b{i}.c0", rng, c_in, c_out, 3, 1)
            self._add_conv(self._layers_enc, f"enc.b{i}.c1", rng, c_out, c_out, 3, s)
            c_in = c_out
        feat = cfg.feature_channels
        self._add_conv(self._layers_seg, "seg.c0", rng, feat, feat, 3, 1)
        self._add_conv(self._layers_seg, "seg.c1", rng, feat, feat, 3, 1)
        self._add_conv(self._layers_seg, "seg.out", rng, feat, cfg.num_classes, 1, 1)
        self._add_conv(self._layers_prop, "prop.c0", rng, feat, feat, 3, 1)
        self._add_conv(self._layers_prop, "prop.c1", rng, feat, feat, 3, 1)
        self._add_conv(self._layers_prop, "prop.out", rng, feat, cfg.prop_feature_dim, 1, 1)

    # -- parameter views ---------------------------------------------------

    def enc_params(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.params.items() if k.startswith("enc."))

    def seg_params(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.params.items() if k.startswith("seg."))

    def prop_params(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.params.items() if k.startswith("prop."))

    # -- forward paths ------------------------------------------------------

    @staticmethod
    def _run_convs(x: Tensor, layers, final_relu: bool) -> Tensor:
        last = len(layers) - 1
        for idx, (w, b, stride, pad) in enumerate(layers):
            x = T.conv2d(x, w, b, stride=stride, padding=pad)
            if idx != last or final_relu:
                x = T.relu(x)
        return x

    def encode(self, frame: Tensor) -> Tensor:
        """(3, H, W) frame -> (feature_channels, H/s, W/s) feature map."""
        frame = T.as_tensor(frame)
        if frame.ndim != 3 or frame.shape[0] != self.cfg.input_channels:
            raise ValueError(f"encode: expected ({self.cfg.input_channels}, H, W), "
                             f"got {frame.shape}")
        h, w = frame.shape[1:]
        s = self.cfg.output_stride
        if h % s or w % s:
            raise ValueError(f"encode: dims {h}x{w} not divisible by stride {s}")
        x = T.reshape(frame, (1, *frame.shape))
        x = self._run_convs(x, self._layers_enc, final_relu=True)
        return T.reshape(x, x.shape[1:])

    def seg_forward(self, feat: Tensor) -> Tensor:
        """Feature map -> full-resolution (C, H, W) probability map.

        Class scores are produced at feature resolution, softmaxed, then the
        probabilities themselves are bilinearly upsampled and renormalized,
        so both resolutions carry valid distributions.
        """
        x = T.reshape(feat, (1, *feat.shape))
        x = self._run_convs(x, self._layers_seg, final_relu=False)
        x = T.softmax_channel(x)
        x = T.upsample_bilinear(x, self.cfg.output_stride)
        x = T.normalize_channel(x)
        return T.reshape(x, x.shape[1:])

    def prop_features(self, feat: Tensor) -> Tensor:
        """Feature map -> (prop_feature_dim, H/s, W/s) matching features.

        No normalization here; the cosine similarity downstream supplies it.
        """
        x = T.reshape(feat, (1, *feat.shape))
        x = self._run_convs(x, self._layers_prop, final_relu=False)
        return T.reshape(x, x.shape[1:])

    def segment(self, frame: Tensor) -> Tensor:
        return self.seg_forward(self.encode(frame))

    # -- state -----------------------------------------------------------

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def load_state(self, arrays) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise DataError(f"checkpoint mismatch: missing {sorted(missing)}, "
                            f"unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            p = self.params[name]
            if p.data.shape != arr.shape:
                raise DataError(f"checkpoint tensor {name}: shape {arr.shape} "
                                f"!= model shape {p.data.shape}")
            p.data[...] = arr


def save_checkpoint(path, params, step: int = 0) -> None:
    """Write named float64 tensors plus a global step counter.

    Layout: magic, u32 tensor count, then per tensor a u16 name length,
    UTF-8 name, u8 ndim, ndim u32 dims and the row-major little-endian
    float64 payload; a trailing u64 step. Round-trips bit-exactly.
    """
    items = [(k, v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64))
             for k, v in params.items()]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        f.write(struct.pack("<Q", step))


def load_checkpoint(path):
    """Read a checkpoint; returns (OrderedDict[name, float64 array], step)."""
    path = str(path)
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_elems = int(np.prod(dims)) if ndim else 1
        payload = take(8 * n_elems)
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    (step,) = struct.unpack("<Q", take(8))
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes after checkpoint")
    return out, step
