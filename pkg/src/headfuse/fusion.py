"""Head-level fusion operators, late fusion and the complementary fusion net.

Strategies
----------
``NoFusion``     ego maps only.
``LateFusion``   sender ships boxes scoring >= its threshold; ego pools + NMS.
``HeteroHead``   elementwise max on classification, mean on regression.
``HomoHead``     per-cell self-attention on classification, learned
                 complementary weighting on regression.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, TrainingError, UsageError, WireFormatError
from .geometry import nms
from .grid import BNParams, ConvParams, GridMap, attention_weights

__all__ = [
    "ComplementaryParams",
    "HeteroHead",
    "HomoHead",
    "LateFusion",
    "NoFusion",
    "TrainResult",
    "complementary_loss",
    "fuse_cls_attention",
    "fuse_cls_max",
    "fuse_reg_complementary",
    "fuse_reg_mean",
    "late_fuse",
    "load_checkpoint",
    "save_checkpoint",
    "train_complementary",
]

log = logging.getLogger(__name__)


# -- strategies --------------------------------------------------------------


@dataclass(frozen=True)
class NoFusion:
    name: str = field(default="no_fusion", init=False)


@dataclass(frozen=True)
class LateFusion:
    sender_threshold: float = 0.75
    name: str = field(default="late_fusion", init=False)

    def __post_init__(self):
        if not 0.0 <= self.sender_threshold <= 1.0:
            raise ValueError(f"sender_threshold {self.sender_threshold} outside [0, 1]")


@dataclass(frozen=True)
class HeteroHead:
    name: str = field(default="hetero_head", init=False)


@dataclass(frozen=True)
class HomoHead:
    params: ComplementaryParams | None = None
    d_k: float | None = None
    name: str = field(default="homo_head", init=False)


# -- parameter-free fusion ---------------------------------------------------


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"map shapes differ: {a.shape} vs {b.shape}")


def _union_select(a, b, both):
    va, vb = a.validity, b.validity
    out = np.where((va & vb)[None], both, np.where(va[None], a.values, np.where(vb[None], b.values, 0.0)))
    return GridMap(out, va | vb)


def fuse_cls_max(cls_ego, cls_j):
    """Elementwise max where both maps are valid, passthrough where one is."""
    _check_pair(cls_ego, cls_j)
    return _union_select(cls_ego, cls_j, np.maximum(cls_ego.values, cls_j.values))


def fuse_reg_mean(reg_ego, reg_j):
    """Elementwise mean where both maps are valid, passthrough where one is."""
    _check_pair(reg_ego, reg_j)
    return _union_select(reg_ego, reg_j, 0.5 * (reg_ego.values + reg_j.values))


def fuse_cls_attention(cls_maps, ego_index=0, d_k=None):
    """Per-cell scaled dot-product self-attention across agents.

    At each cell the agents' A-dim score vectors form X (N x A) with
    Q = K = V = X; the ego row of the attention output is returned.  Agents
    invalid at a cell are masked out of the softmax, so cells where only the
    ego is valid pass through unchanged.
    """
    maps = list(cls_maps)
    if not maps:
        raise UsageError("fuse_cls_attention needs at least one map")
    for m in maps[1:]:
        _check_pair(maps[0], m)
    if len(maps) == 1:
        return maps[0]
    A = maps[0].channels
    if d_k is None:
        d_k = A
    x = np.stack([m.values for m in maps])  # N, A, H, W
    valid = np.stack([m.validity for m in maps])  # N, H, W
    x = np.where(valid[:, None], x, 0.0)
    cells = np.moveaxis(x, (0, 1), (2, 3)).reshape(-1, len(maps), A)  # (HW, N, A)
    cell_valid = np.moveaxis(valid, 0, 2).reshape(-1, len(maps))

    # query row: ego where valid, else the first valid agent
    q_idx = np.where(cell_valid[:, ego_index], ego_index, np.argmax(cell_valid, axis=1))
    q = cells[np.arange(cells.shape[0]), q_idx]  # (HW, A)
    logits = np.einsum("ca,cna->cn", q, cells) / np.sqrt(d_k)
    logits = np.where(cell_valid, logits, -np.inf)
    any_valid = cell_valid.any(axis=1)
    logits[~any_valid] = 0.0
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    out = np.einsum("cn,cna->ca", w, cells)
    out[~any_valid] = 0.0
    H, W = maps[0].height, maps[0].width
    out = np.moveaxis(out.reshape(H, W, A), 2, 0)
    return GridMap(out, valid.any(axis=0))


def attention_cell(x, d_k=None):
    """Ego-row attention output for a single cell's (N, A) score matrix."""
    return (attention_weights(x, d_k) @ np.asarray(x, dtype=float))[0]


# -- complementary regression fusion ------------------------------------------


@dataclass(frozen=True, eq=False)
class ComplementaryParams:
    """All learnable operators of the complementary regression fusion."""

    conv_delta: ConvParams
    conv_a: ConvParams
    bn_a: BNParams
    conv_b: ConvParams
    bn_b: BNParams
    conv_out: ConvParams

    def __post_init__(self):
        c2 = self.conv_delta.in_channels
        checks = [
            (self.conv_delta.kernel_size == 1 and self.conv_delta.out_channels == 1, "conv_delta must be 1x1, 2C -> 1"),
            (c2 % 2 == 0, "conv_delta input must be an even channel count"),
            (self.conv_a.weight.shape == (1, 1, 3, 3), "conv_a must be 3x3, 1 -> 1"),
            (self.conv_b.weight.shape == (1, 1, 3, 3), "conv_b must be 3x3, 1 -> 1"),
            (self.bn_a.channels == 1 and self.bn_b.channels == 1, "batch norms must have one channel"),
            (self.conv_out.weight.shape == (c2 // 2, c2, 1, 1), "conv_out must be 1x1, 2C -> C"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ShapeError(msg)

    @property
    def reg_channels(self):
        return self.conv_out.out_channels

    @classmethod
    def init(cls, reg_channels, seed=0):
        """Uniform(+-1/sqrt(fan_in)) conv weights, zero biases, identity BN."""
        rng = np.random.default_rng(seed)
        c2 = 2 * reg_channels
        return cls(
            conv_delta=ConvParams.init(c2, 1, 1, rng),
            conv_a=ConvParams.init(1, 1, 3, rng),
            bn_a=BNParams.identity(1),
            conv_b=ConvParams.init(1, 1, 3, rng),
            bn_b=BNParams.identity(1),
            conv_out=ConvParams.init(c2, reg_channels, 1, rng),
        )

    def arrays(self):
        """(name, array) pairs in declaration order."""
        out = []
        for name in ("conv_delta", "conv_a", "bn_a", "conv_b", "bn_b", "conv_out"):
            part = getattr(self, name)
            keys = ("weight", "bias") if isinstance(part, ConvParams) else ("gamma", "beta", "mean", "var")
            out.extend((f"{name}.{k}", getattr(part, k)) for k in keys)
        return out

    def replace_arrays(self, new):
        """Copy with arrays from the ``{name: array}`` mapping substituted."""
        current = dict(self.arrays())
        current.update(new)

        def conv(n):
            return ConvParams(current[f"{n}.weight"], current[f"{n}.bias"])

        def bn(n, eps):
            return BNParams(current[f"{n}.gamma"], current[f"{n}.beta"], current[f"{n}.mean"], current[f"{n}.var"], eps)

        return ComplementaryParams(
            conv("conv_delta"), conv("conv_a"), bn("bn_a", self.bn_a.eps),
            conv("conv_b"), bn("bn_b", self.bn_b.eps), conv("conv_out"),
        )


class ComplementaryResult(NamedTuple):
    fused: GridMap
    weight: np.ndarray  # M, shape (H, W), zero outside the overlap
    overlap: np.ndarray


def _complementary_graph(reg_ego, reg_j, overlap, p, force_weight=None):
    """Record the fusion forward pass on the tape.  ``p`` maps names to tensors."""
    ego = ad.constant(reg_ego)
    recv = ad.constant(reg_j)
    delta = ad.conv2d(ad.concat([ego, recv]), p["conv_delta.weight"], p["conv_delta.bias"])
    t = ad.conv2d(delta, p["conv_a.weight"], p["conv_a.bias"])
    t = ad.relu(ad.batchnorm(t, p["bn_a.gamma"], p["bn_a.beta"], p["bn_a.mean"], p["bn_a.var"], p["bn_a.eps"]))
    t = ad.conv2d(t, p["conv_b.weight"], p["conv_b.bias"])
    t = ad.sigmoid(ad.batchnorm(t, p["bn_b.gamma"], p["bn_b.beta"], p["bn_b.mean"], p["bn_b.var"], p["bn_b.eps"]))
    m_raw = delta + t
    if force_weight is None:
        m = ad.minmax_normalize(m_raw, overlap[None])
    else:
        m = ad.constant(np.where(overlap, float(force_weight), 0.0)[None])
    blended = ad.concat([m * ego, (1.0 - m) * recv])
    fused = ad.conv2d(blended, p["conv_out.weight"], p["conv_out.bias"])
    return ad.where(overlap[None], fused, ego), m


def _param_tensors(params, trainable=True):
    make = ad.leaf if trainable else ad.constant
    tensors = {name: make(arr) for name, arr in params.arrays()}
    if trainable:
        for name, t in tensors.items():
            t.name = name
    tensors["bn_a.eps"] = params.bn_a.eps
    tensors["bn_b.eps"] = params.bn_b.eps
    return tensors


def fuse_reg_complementary(reg_ego, reg_j, params, force_weight=None, return_weights=False):
    """Learned complementary fusion of two ego-frame regression maps.

    Inside the overlap (both maps valid) the output is the 1x1 conv of the
    M-weighted ego map stacked with the (1-M)-weighted received map.
    Outside the overlap the ego map is returned untouched.  ``force_weight``
    pins M to a constant on the overlap, which is useful for diagnostics.
    """
    _check_pair(reg_ego, reg_j)
    if reg_ego.channels != params.reg_channels:
        raise ShapeError(f"regression maps have {reg_ego.channels} channels, params expect {params.reg_channels}")
    overlap = reg_ego.validity & reg_j.validity
    out, m = _complementary_graph(reg_ego.values, reg_j.values, overlap, _param_tensors(params, False), force_weight)
    values = np.where(overlap[None], out.value, reg_ego.values)
    fused = GridMap(values, reg_ego.validity | reg_j.validity)
    if return_weights:
        return ComplementaryResult(fused, m.value[0].copy(), overlap)
    return fused


# -- late fusion ----------------------------------------------------------------


def late_fuse(boxes_ego, boxes_received, sender_threshold, nms_iou):
    """Pool ego boxes with received boxes scoring >= ``sender_threshold``, then NMS."""
    if not 0.0 <= nms_iou <= 1.0:
        raise ValueError(f"nms_iou {nms_iou} outside [0, 1]")
    sent = [b for b in boxes_received if b.score >= sender_threshold]
    return nms(list(boxes_ego) + sent, nms_iou)


# -- training ----------------------------------------------------------------------


def _positive_mask(reg_gt):
    """Regression entries of anchors that carry a target at a cell."""
    C, H, W = reg_gt.shape
    groups = reg_gt.reshape(C // 7, 7, H, W) if C % 7 == 0 else reg_gt.reshape(C, 1, H, W)
    any_target = np.any(groups != 0, axis=1, keepdims=True)
    return np.broadcast_to(any_target, groups.shape).reshape(C, H, W)


def _unpack_sample(sample):
    reg_ego, reg_j, reg_gt, *rest = sample
    gt = reg_gt.values if isinstance(reg_gt, GridMap) else np.asarray(reg_gt, dtype=float)
    mask = np.asarray(rest[0], dtype=bool) if rest else _positive_mask(gt)
    return reg_ego, reg_j, gt, mask


def complementary_loss(params, sample, trainable=False):
    """Smooth-L1 between fused and target maps on positive entries.

    Returns ``(loss_tensor, param_tensors)``.
    """
    reg_ego, reg_j, gt, mask = _unpack_sample(sample)
    tensors = _param_tensors(params, trainable)
    overlap = reg_ego.validity & reg_j.validity
    out, _ = _complementary_graph(reg_ego.values, reg_j.values, overlap, tensors)
    return ad.smooth_l1(out, gt, mask), tensors


def _dataset_loss(params, dataset):
    return float(np.mean([complementary_loss(params, s)[0].value for s in dataset]))


class TrainResult(NamedTuple):
    params: ComplementaryParams
    initial_loss: float
    final_loss: float
    history: list


def train_complementary(params, dataset, epochs=200, lr=1e-3, seed=0, betas=(0.9, 0.999), eps=1e-8, shuffle=True):
    """Adam with batch size 1 on smooth-L1 over positive-anchor entries.

    Only ``params`` are trained.  ``history`` holds the mean training loss
    measured after each epoch.  Running variances are projected back onto
    [0, inf) after every step.
    """
    dataset = list(dataset)
    if not dataset:
        raise UsageError("training dataset is empty")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    rng = np.random.default_rng(seed)
    names = [n for n, _ in params.arrays()]
    state = {n: np.array(a, dtype=float) for n, a in params.arrays()}
    m1 = {n: np.zeros_like(a) for n, a in state.items()}
    m2 = {n: np.zeros_like(a) for n, a in state.items()}
    b1, b2 = betas
    step = 0
    initial = _dataset_loss(params, dataset)
    if not np.isfinite(initial):
        raise TrainingError("initial loss is not finite")
    history = []
    current = params
    for epoch in range(epochs):
        order = rng.permutation(len(dataset)) if shuffle else range(len(dataset))
        for i in order:
            loss, tensors = complementary_loss(current, dataset[i], trainable=True)
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, sample {i}")
            grads = ad.backward(loss) if loss.requires_grad else {}
            step += 1
            for n in names:
                g = tensors[n].grad
                if g is None:
                    g = np.zeros_like(state[n])
                m1[n] = b1 * m1[n] + (1 - b1) * g
                m2[n] = b2 * m2[n] + (1 - b2) * g * g
                m_hat = m1[n] / (1 - b1**step)
                v_hat = m2[n] / (1 - b2**step)
                state[n] = state[n] - lr * m_hat / (np.sqrt(v_hat) + eps)
                if n.endswith(".var"):
                    np.maximum(state[n], 0.0, out=state[n])
            del grads
            current = current.replace_arrays(state)
        epoch_loss = _dataset_loss(current, dataset)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"non-finite training loss after epoch {epoch}")
        history.append(epoch_loss)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    final = history[-1] if history else initial
    return TrainResult(current, initial, final, history)


# -- checkpoint file ---------------------------------------------------------------

CKPT_MAGIC = b"HEADCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sHHIdd")


def save_checkpoint(params, path=None):
    """Serialize to the little-endian checkpoint format; write to ``path`` if given."""
    arrays = [np.ascontiguousarray(a, dtype="<f8") for _, a in params.arrays()]
    count = sum(a.size for a in arrays)
    blob = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, params.reg_channels, count, params.bn_a.eps, params.bn_b.eps)
    blob += b"".join(a.tobytes() for a in arrays)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(blob)
    return blob


def load_checkpoint(source):
    """Parse a checkpoint from bytes or a file path."""
    blob = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise WireFormatError("checkpoint truncated in header", len(blob))
    magic, version, c_reg, count, eps_a, eps_b = _CKPT_HEADER.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise WireFormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != CKPT_VERSION:
        raise WireFormatError(f"unsupported checkpoint version {version}", 8)
    template = ComplementaryParams.init(c_reg)
    shapes = [(n, a.shape) for n, a in template.arrays()]
    expected = sum(int(np.prod(s)) for _, s in shapes)
    if count != expected:
        raise WireFormatError(f"parameter count {count} does not match {expected} for C={c_reg}", 12)
    offset = _CKPT_HEADER.size
    if len(blob) - offset < 8 * count:
        raise WireFormatError("checkpoint truncated in parameter data", len(blob))
    values = {}
    for name, shape in shapes:
        n = int(np.prod(shape))
        values[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).astype(float)
        offset += 8 * n
    params = template.replace_arrays(values)
    return ComplementaryParams(
        params.conv_delta, params.conv_a, BNParams(params.bn_a.gamma, params.bn_a.beta, params.bn_a.mean, params.bn_a.var, eps_a),
        params.conv_b, BNParams(params.bn_b.gamma, params.bn_b.beta, params.bn_b.mean, params.bn_b.var, eps_b),
        params.conv_out,
    )
