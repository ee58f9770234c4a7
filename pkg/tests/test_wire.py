import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headfuse import wire
from headfuse.errors import ConfigError, WireFormatError
from headfuse.geometry import BEVGridSpec, Box3D, Pose2D
from headfuse.grid import GridMap

GRID = BEVGridSpec(-4.0, 4.0, -3.2, 3.2, 0.8)  # 8 x 10
HEADER = struct.calcsize("<8sHBBII3d")


def head_message(rng, quantize=False):
    H, W = GRID.shape
    cls = GridMap(rng.random((2, H, W)), rng.random((H, W)) < 0.7)
    reg = GridMap(rng.normal(size=(14, H, W)), cls.validity)
    return wire.HeadMessage.from_maps(3, 17, Pose2D(1.5, -2.0, 0.3), GRID, cls, reg, quantize)


class TestHeadMessage:
    def test_float32_round_trip_bit_exact(self, rng):
        msg = head_message(rng)
        raw = wire.serialize(msg)
        back = wire.deserialize(raw)
        assert back.equals(msg)
        assert back.cls.tobytes() == msg.cls.tobytes() and back.reg.tobytes() == msg.reg.tobytes()
        assert wire.serialize(back) == raw

    def test_header(self, rng):
        raw = wire.serialize(head_message(rng))
        magic, version, kind, _, sender, frame, x, y, yaw = struct.unpack_from("<8sHBBII3d", raw)
        assert (magic, version, kind, sender, frame) == (b"HEADMSG1", 1, 1, 3, 17)
        assert (x, y, yaw) == (1.5, -2.0, 0.3)

    def test_deterministic(self, rng):
        msg = head_message(rng)
        assert wire.serialize(msg) == wire.serialize(msg)

    def test_payload_size(self, rng):
        H, W = GRID.shape
        raw = wire.serialize(head_message(rng))
        assert len(raw) >= wire.head_payload_bytes(H, W)
        # header + body + two mode bytes + bitmap on top of the float payload
        overhead = HEADER + struct.calcsize("<5dHII") + 2 + math.ceil(H * W / 8)
        assert len(raw) == wire.head_payload_bytes(H, W) + overhead

    def test_uint8_within_one_step(self, rng):
        msg = head_message(rng, quantize=True)
        back = wire.deserialize(wire.serialize(msg))
        for q, src, out in ((msg.cls_quant, msg.cls, back.cls), (msg.reg_quant, msg.reg, back.reg)):
            step = q.scale.astype(np.float64)[:, None, None]
            assert np.all(np.abs(out.astype(np.float64) - src) <= step * (0.5 + 1e-5))

    def test_uint8_unit_range_bound(self):
        values = np.linspace(-1.0, 1.0, 2 * 8 * 10 * 7).reshape(14, 8, 10)
        q = wire.QuantizationSpec("uint8", np.full(14, 2 / 255), np.full(14, -1.0))
        out = q.decode(q.encode(values), values.shape).astype(np.float64)
        assert np.max(np.abs(out - values)) <= 1 / 255

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            wire.HeadMessage(0, 0, Pose2D(), GRID, np.zeros((2, 8, 10)), np.zeros((13, 8, 10)), np.ones((8, 10)))

    def test_bad_quant_spec(self):
        with pytest.raises(ValueError):
            wire.QuantizationSpec("uint8", np.array([0.0]), np.array([0.0]))
        with pytest.raises(ValueError):
            wire.QuantizationSpec("int4")


class TestBoxMessage:
    def test_empty_round_trip(self):
        msg = wire.BoxMessage(1, 2, Pose2D(0.5, 0.25, -1.0), (), 0.75)
        raw = wire.serialize(msg)
        assert wire.serialize(wire.deserialize(raw)) == raw
        assert wire.deserialize(raw) == msg

    def test_boxes_round_trip_as_float32(self):
        # float32-representable values come back exactly
        boxes = (Box3D(1.25, -2.5, 0.75, 4.5, 2.0, 1.5, 0.5, 0.875), Box3D(3, 4, 1, 4, 2, 1.5, -0.25, 0.8125))
        msg = wire.BoxMessage(1, 2, Pose2D(), boxes, 0.75)
        back = wire.deserialize(wire.serialize(msg))
        assert back == msg
        assert len(wire.serialize(msg)) == HEADER + 8 + 2 * 32

    def test_boxes_rounded_to_float32(self):
        box = Box3D(0.1, 0.2, 0.3, 4.1, 2.1, 1.1, 0.7, 0.8)
        back = wire.deserialize(wire.serialize(wire.BoxMessage(0, 0, Pose2D(), (box,), 0.75))).boxes[0]
        assert back.as_tuple() == tuple(float(np.float32(v)) for v in box.as_tuple())

    def test_from_detections_filters(self):
        dets = [Box3D(0, 0, 0, 4, 2, 1, 0, s) for s in (0.74, 0.75, 0.9)]
        msg = wire.BoxMessage.from_detections(0, 0, Pose2D(), dets, 0.75)
        assert [b.score for b in msg.boxes] == [0.75, 0.9]

    def test_rejects_low_scores(self):
        with pytest.raises(ValueError):
            wire.BoxMessage(0, 0, Pose2D(), (Box3D(0, 0, 0, 4, 2, 1, 0, 0.5),), 0.75)


class TestParseErrors:
    def test_bad_magic(self, rng):
        raw = bytearray(wire.serialize(head_message(rng)))
        raw[0:8] = b"BADMAGIC"
        with pytest.raises(WireFormatError) as e:
            wire.deserialize(bytes(raw))
        assert e.value.offset == 0

    def test_bad_version(self, rng):
        raw = bytearray(wire.serialize(head_message(rng)))
        raw[8:10] = struct.pack("<H", 99)
        with pytest.raises(WireFormatError):
            wire.deserialize(bytes(raw))

    def test_unknown_kind(self):
        raw = bytearray(wire.serialize(wire.BoxMessage(0, 0, Pose2D())))
        raw[10] = 9
        with pytest.raises(WireFormatError):
            wire.deserialize(bytes(raw))

    @pytest.mark.parametrize("cut", [0, 5, 39, 60, 200, -1])
    def test_truncation_reports_offset(self, rng, cut):
        raw = wire.serialize(head_message(rng))
        with pytest.raises(WireFormatError) as e:
            wire.deserialize(raw[:cut])
        assert 0 <= e.value.offset <= len(raw)

    def test_trailing_bytes(self):
        raw = wire.serialize(wire.BoxMessage(0, 0, Pose2D()))
        with pytest.raises(WireFormatError):
            wire.deserialize(raw + b"\x00")


class TestCodecs:
    def test_pass_through(self):
        assert wire.compress(b"abc") == b"abc" and wire.decompress(b"abc") == b"abc"

    def test_zeros_compress_well(self):
        data = bytes(1 << 20)
        assert len(wire.compress(data, "zlib")) < 0.01 * len(data)

    @settings(max_examples=50)
    @given(st.binary(max_size=4096), st.sampled_from(sorted(wire.CODECS)))
    def test_lossless(self, data, codec):
        assert wire.decompress(wire.compress(data, codec), codec) == data

    def test_corrupt_stream(self):
        with pytest.raises(WireFormatError):
            wire.decompress(b"not zlib", "zlib")

    def test_unknown_codec(self):
        with pytest.raises(ConfigError):
            wire.compress(b"", "lz77000")


class TestBandwidth:
    def test_unit_case(self):
        assert wire.mbps(1, 1) == 8e-6

    def test_ratio_exact(self):
        H, W = 100, 352
        rep = wire.bandwidth({"head": (16, [wire.head_payload_bytes(H, W)]),
                              "intermediate": (256, [wire.intermediate_payload_bytes(H, W)])}, fps=10)
        assert rep.row("head").ratio_vs_intermediate == 0.0625

    def test_mean_over_frames_and_compressed(self):
        rep = wire.bandwidth({"x": (None, [(100, 10), (300, 30)])}, fps=10)
        r = rep.row("x")
        assert r.bytes_per_frame == 200 and r.compressed_bytes_per_frame == 20
        assert r.mbps == pytest.approx(200 * 8 * 10 / 1e6, abs=1e-9)

    def test_fps_validation(self):
        with pytest.raises(ValueError):
            wire.bandwidth({}, fps=0)

    def test_csv_columns(self):
        rep = wire.preset_report("v2v4real_like")
        header = rep.to_csv().splitlines()[0].split(",")
        assert header[:5] == ["strategy", "channels", "bytes_per_frame", "mbps", "ratio_vs_intermediate"]

    @pytest.mark.parametrize("name, inter, head", [("v2v4real_like", 660.0, 41.6), ("opv2v_like", 2749.6, 172.0)])
    def test_presets(self, name, inter, head):
        rep = wire.preset_report(name)
        assert rep.row("head").ratio_vs_intermediate == 0.0625
        assert rep.row("intermediate").mbps == pytest.approx(inter, rel=0.02)
        assert rep.row("head").mbps == pytest.approx(head, rel=0.02)
        late, hd, im = (rep.row(n).mbps for n in ("late_fusion", "head", "intermediate"))
        assert late * 100 < hd < im / 10

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            wire.load_preset("kitti_like")
