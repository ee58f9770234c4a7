"""V2V payloads, quantization, byte codecs and bandwidth accounting.

Wire layout (little-endian), shared header::

    magic     8s   b"HEADMSG1"
    version   u16
    kind      u8   1 = head maps, 2 = boxes
    reserved  u8
    sender    u32
    frame     u32
    pose      3 x f64 (x, y, yaw)

Head message body: grid extent (5 x f64), anchors A (u16), H (u32), W (u32),
classification quantization block, regression quantization block, validity
bitmap (ceil(H*W/8) bytes, MSB first), classification payload, regression
payload.  A quantization block is a mode byte (0 float32, 1 uint8-linear)
followed, in uint8 mode, by per-channel (scale f32, zero f32) pairs.

Box message body: threshold (f32), count (u32), then count x 8 x f32
(x, y, z, l, w, h, yaw, score).
"""

from __future__ import annotations

import csv
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .errors import ConfigError, WireFormatError
from .geometry import BEVGridSpec, Box3D, Pose2D

__all__ = [
    "CODECS",
    "MAGIC",
    "VERSION",
    "BandwidthReport",
    "BandwidthRow",
    "BoxMessage",
    "HeadMessage",
    "QuantizationSpec",
    "bandwidth",
    "box_payload_bytes",
    "compress",
    "decompress",
    "deserialize",
    "head_payload_bytes",
    "intermediate_payload_bytes",
    "load_preset",
    "mbps",
    "preset_names",
    "preset_report",
    "serialize",
]

MAGIC = b"HEADMSG1"
VERSION = 1
KIND_HEAD = 1
KIND_BOX = 2

_HEADER = struct.Struct("<8sHBBII3d")
_HEAD_BODY = struct.Struct("<5dHII")
_BOX_BODY = struct.Struct("<fI")
_BOX = struct.Struct("<8f")
_QPAIR = struct.Struct("<ff")


# -- quantization --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantizationSpec:
    """``float32`` is lossless; ``uint8`` stores round((v - zero) / scale)."""

    mode: str = "float32"
    scale: np.ndarray | None = None
    zero: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("float32", "uint8"):
            raise ValueError(f"unknown quantization mode {self.mode!r}")
        if self.mode == "uint8":
            scale = np.asarray(self.scale, dtype=np.float32)
            zero = np.asarray(self.zero, dtype=np.float32)
            if scale.ndim != 1 or scale.shape != zero.shape:
                raise ValueError("uint8 mode needs per-channel scale and zero arrays of equal length")
            if np.any(scale <= 0):
                raise ValueError("uint8 scales must be positive")
            object.__setattr__(self, "scale", scale)
            object.__setattr__(self, "zero", zero)

    @classmethod
    def uint8_for(cls, values):
        """Per-channel min/max linear quantizer for a (C, H, W) array."""
        v = np.asarray(values, dtype=np.float64).reshape(values.shape[0], -1)
        lo, hi = v.min(axis=1), v.max(axis=1)
        scale = np.where(hi > lo, (hi - lo) / 255.0, 1.0)
        return cls("uint8", scale, lo)

    def channel_count(self):
        return 0 if self.mode == "float32" else self.scale.shape[0]

    def encode(self, values):
        if self.mode == "float32":
            return np.ascontiguousarray(values, dtype="<f4").tobytes()
        scale = self.scale.astype(np.float64)[:, None, None]
        zero = self.zero.astype(np.float64)[:, None, None]
        q = np.clip(np.rint((np.asarray(values, dtype=np.float64) - zero) / scale), 0, 255)
        return q.astype(np.uint8).tobytes()

    def decode(self, buf, shape):
        if self.mode == "float32":
            return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
        q = np.frombuffer(buf, dtype=np.uint8).reshape(shape).astype(np.float64)
        out = q * self.scale.astype(np.float64)[:, None, None] + self.zero.astype(np.float64)[:, None, None]
        return out.astype(np.float32)

    def bytes_per_value(self):
        return 4 if self.mode == "float32" else 1

    def pack(self):
        if self.mode == "float32":
            return b"\x00"
        return b"\x01" + b"".join(_QPAIR.pack(s, z) for s, z in zip(self.scale.tolist(), self.zero.tolist()))

    def same_as(self, other):
        if self.mode != other.mode:
            return False
        return self.mode == "float32" or (
            np.array_equal(self.scale, other.scale) and np.array_equal(self.zero, other.zero)
        )


# -- messages --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HeadMessage:
    sender_id: int
    frame_id: int
    pose: Pose2D
    grid: BEVGridSpec
    cls: np.ndarray
    reg: np.ndarray
    validity: np.ndarray
    cls_quant: QuantizationSpec = field(default_factory=QuantizationSpec)
    reg_quant: QuantizationSpec = field(default_factory=QuantizationSpec)

    def __post_init__(self):
        cls = np.asarray(self.cls, dtype=np.float32)
        reg = np.asarray(self.reg, dtype=np.float32)
        validity = np.asarray(self.validity, dtype=bool)
        H, W = self.grid.shape
        A = cls.shape[0]
        if cls.shape != (A, H, W) or reg.shape != (7 * A, H, W) or validity.shape != (H, W):
            raise ValueError(f"payload shapes {cls.shape}, {reg.shape}, {validity.shape} inconsistent with A={A}, grid {H}x{W}")
        for q, c in ((self.cls_quant, A), (self.reg_quant, 7 * A)):
            if q.mode == "uint8" and q.channel_count() != c:
                raise ValueError(f"quantization spec has {q.channel_count()} channels, payload has {c}")
        object.__setattr__(self, "cls", cls)
        object.__setattr__(self, "reg", reg)
        object.__setattr__(self, "validity", validity)

    @classmethod
    def from_maps(cls, sender_id, frame_id, pose, grid, cls_map, reg_map, quantize=False):
        if quantize:
            cq, rq = QuantizationSpec.uint8_for(cls_map.values), QuantizationSpec.uint8_for(reg_map.values)
        else:
            cq = rq = QuantizationSpec()
        return cls(sender_id, frame_id, pose, grid, cls_map.values, reg_map.values, cls_map.validity & reg_map.validity, cq, rq)

    @property
    def num_anchors(self):
        return self.cls.shape[0]

    @property
    def channels(self):
        return self.cls.shape[0] + self.reg.shape[0]

    def equals(self, other):
        return (
            isinstance(other, HeadMessage)
            and (self.sender_id, self.frame_id, self.pose, self.grid) == (other.sender_id, other.frame_id, other.pose, other.grid)
            and np.array_equal(self.cls, other.cls)
            and np.array_equal(self.reg, other.reg)
            and np.array_equal(self.validity, other.validity)
            and self.cls_quant.same_as(other.cls_quant)
            and self.reg_quant.same_as(other.reg_quant)
        )


@dataclass(frozen=True)
class BoxMessage:
    sender_id: int
    frame_id: int
    pose: Pose2D
    boxes: tuple = ()
    threshold: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        low = [b.score for b in self.boxes if b.score < self.threshold]
        if low:
            raise ValueError(f"box scores {low} below sender threshold {self.threshold}")

    @classmethod
    def from_detections(cls, sender_id, frame_id, pose, boxes, threshold):
        """Keep only boxes scoring at least ``threshold``."""
        return cls(sender_id, frame_id, pose, tuple(b for b in boxes if b.score >= threshold), threshold)


def _header(kind, msg):
    return _HEADER.pack(MAGIC, VERSION, kind, 0, msg.sender_id, msg.frame_id, msg.pose.x, msg.pose.y, msg.pose.yaw)


def serialize(msg):
    """Deterministic byte encoding of a :class:`HeadMessage` or :class:`BoxMessage`."""
    if isinstance(msg, BoxMessage):
        body = _BOX_BODY.pack(msg.threshold, len(msg.boxes))
        body += b"".join(_BOX.pack(*b.as_tuple()) for b in msg.boxes)
        return _header(KIND_BOX, msg) + body
    if isinstance(msg, HeadMessage):
        g = msg.grid
        H, W = g.shape
        parts = [
            _header(KIND_HEAD, msg),
            _HEAD_BODY.pack(g.x_min, g.x_max, g.y_min, g.y_max, g.cell, msg.num_anchors, H, W),
            msg.cls_quant.pack(),
            msg.reg_quant.pack(),
            np.packbits(msg.validity.ravel()).tobytes(),
            msg.cls_quant.encode(msg.cls),
            msg.reg_quant.encode(msg.reg),
        ]
        return b"".join(parts)
    raise TypeError(f"cannot serialize {type(msg).__name__}")


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise WireFormatError(f"truncated {what}: need {n} bytes, have {len(self.buf) - self.pos}", self.pos)
        out = self.buf[self.pos : self.pos + n].tobytes()
        self.pos += n
        return out

    def unpack(self, st, what):
        return st.unpack(self.take(st.size, what))

    def quant(self, channels, what):
        start = self.pos
        mode = self.take(1, what)[0]
        if mode == 0:
            return QuantizationSpec()
        if mode != 1:
            raise WireFormatError(f"unknown quantization mode {mode} in {what}", start)
        pairs = [self.unpack(_QPAIR, what) for _ in range(channels)]
        try:
            return QuantizationSpec("uint8", [p[0] for p in pairs], [p[1] for p in pairs])
        except ValueError as exc:
            raise WireFormatError(f"invalid {what}: {exc}", start) from None


def deserialize(buf):
    """Inverse of :func:`serialize`.  Raises :class:`WireFormatError` with a byte offset."""
    r = _Reader(buf)
    magic, version, kind, _, sender, frame, px, py, pyaw = r.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise WireFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise WireFormatError(f"unsupported version {version}", 8)
    pose = Pose2D(px, py, pyaw)
    if kind == KIND_BOX:
        threshold, count = r.unpack(_BOX_BODY, "box header")
        boxes = []
        for i in range(count):
            at = r.pos
            vals = r.unpack(_BOX, f"box {i}")
            try:
                boxes.append(Box3D(*vals))
            except ValueError as exc:
                raise WireFormatError(f"invalid box {i}: {exc}", at) from None
        msg = BoxMessage(sender, frame, pose, tuple(boxes), threshold)
    elif kind == KIND_HEAD:
        at = r.pos
        x_min, x_max, y_min, y_max, cell, A, H, W = r.unpack(_HEAD_BODY, "grid block")
        try:
            grid = BEVGridSpec(x_min, x_max, y_min, y_max, cell)
        except ValueError as exc:
            raise WireFormatError(f"invalid grid: {exc}", at) from None
        if grid.shape != (H, W):
            raise WireFormatError(f"grid extent gives {grid.shape}, header says {(H, W)}", at)
        cq = r.quant(A, "classification quantization")
        rq = r.quant(7 * A, "regression quantization")
        n = H * W
        bits = np.frombuffer(r.take((n + 7) // 8, "validity bitmap"), dtype=np.uint8)
        validity = np.unpackbits(bits)[:n].astype(bool).reshape(H, W)
        cls = cq.decode(r.take(A * n * cq.bytes_per_value(), "classification payload"), (A, H, W))
        reg = rq.decode(r.take(7 * A * n * rq.bytes_per_value(), "regression payload"), (7 * A, H, W))
        msg = HeadMessage(sender, frame, pose, grid, cls, reg, validity, cq, rq)
    else:
        raise WireFormatError(f"unknown message kind {kind}", 10)
    if r.pos != len(r.buf):
        raise WireFormatError(f"{len(r.buf) - r.pos} trailing bytes", r.pos)
    return msg


# -- codecs ----------------------------------------------------------------------


def _zlib_decompress(data):
    try:
        return zlib.decompress(data)
    except zlib.error as exc:
        raise WireFormatError(f"corrupt zlib stream: {exc}", 0) from None


CODECS = {
    "none": (bytes, bytes),
    "zlib": (lambda b: zlib.compress(b, 6), _zlib_decompress),
}


def _codec(name):
    try:
        return CODECS[name]
    except KeyError:
        raise ConfigError(f"unknown codec {name!r}; available: {sorted(CODECS)}") from None


def compress(data, codec="none"):
    return _codec(codec)[0](bytes(data))


def decompress(data, codec="none"):
    return _codec(codec)[1](bytes(data))


# -- bandwidth -------------------------------------------------------------------------


def mbps(bytes_per_frame, fps):
    """Payload megabits per second."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    return bytes_per_frame * 8.0 * fps / 1e6


def head_payload_bytes(height, width, anchors=2, bytes_per_value=4):
    return (anchors + 7 * anchors) * height * width * bytes_per_value


def intermediate_payload_bytes(height, width, channels=256, bytes_per_value=4):
    return channels * height * width * bytes_per_value


def box_payload_bytes(count):
    return count * _BOX.size


@dataclass(frozen=True)
class BandwidthRow:
    strategy: str
    channels: int | None
    bytes_per_frame: float
    compressed_bytes_per_frame: float
    mbps: float
    ratio_vs_intermediate: float | None


@dataclass(frozen=True)
class BandwidthReport:
    fps: float
    rows: tuple

    COLUMNS = ("strategy", "channels", "bytes_per_frame", "mbps", "ratio_vs_intermediate", "compressed_bytes_per_frame")

    def row(self, strategy):
        for r in self.rows:
            if r.strategy == strategy:
                return r
        raise KeyError(strategy)

    def as_records(self):
        return [{c: getattr(r, c) for c in self.COLUMNS} for r in self.rows]

    def to_json(self):
        return json.dumps({"fps": self.fps, "rows": self.as_records()}, indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in self.as_records():
            writer.writerow({k: "" if v is None else v for k, v in rec.items()})
        return buf.getvalue()


def bandwidth(samples, fps=10.0, reference="intermediate"):
    """Build a report from per-strategy message sizes.

    ``samples`` maps strategy name -> ``(channels, sizes)`` where ``sizes`` is
    a sequence of per-frame byte counts, or of ``(raw, compressed)`` pairs.
    The ratio column is relative to the ``reference`` strategy when present.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    rows = []
    for name, (channels, sizes) in samples.items():
        arr = np.asarray(list(sizes), dtype=np.float64)
        if arr.size == 0:
            raw = comp = 0.0
        elif arr.ndim == 2:
            raw, comp = arr[:, 0].mean(), arr[:, 1].mean()
        else:
            raw = comp = arr.mean()
        rows.append(BandwidthRow(name, channels, float(raw), float(comp), mbps(raw, fps), None))
    ref = next((r for r in rows if r.strategy == reference), None)
    if ref is not None and ref.bytes_per_frame > 0:
        rows = [
            BandwidthRow(r.strategy, r.channels, r.bytes_per_frame, r.compressed_bytes_per_frame, r.mbps,
                         r.bytes_per_frame / ref.bytes_per_frame)
            for r in rows
        ]
    return BandwidthReport(float(fps), tuple(rows))


# -- presets --------------------------------------------------------------------------


def preset_names():
    root = resources.files("headfuse") / "presets"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_preset(name):
    path = resources.files("headfuse") / "presets" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown bandwidth preset {name!r}; available: {preset_names()}")
    return yaml.safe_load(path.read_text())


def preset_report(name, fps=None, anchors=2):
    """Payload-only comparison of late, head and intermediate fusion for a preset."""
    p = load_preset(name)
    fps = float(fps if fps is not None else p.get("fps", 10))
    H, W = int(p["grid_height"]), int(p["grid_width"])
    bpv = int(p.get("bytes_per_value", 4))
    inter_ch = int(p.get("intermediate_channels", 256))
    head = head_payload_bytes(H, W, anchors, bpv)
    inter = intermediate_payload_bytes(H, W, inter_ch, bpv)
    late = box_payload_bytes(int(p["late_boxes_per_frame"]))
    return bandwidth(
        {
            "late_fusion": (None, [late]),
            "head": (8 * anchors, [head]),
            "intermediate": (inter_ch, [inter]),
        },
        fps,
    )
