"""Average precision, false-positive threshold sweeps and strategy tables."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import wire
from .fusion import (
    ComplementaryParams,
    HeteroHead,
    HomoHead,
    LateFusion,
    NoFusion,
    train_complementary,
)
from .geometry import Box3D, Pose2D, rotated_iou
from .simulator import (
    BENCHMARK_SEED,
    Agent,
    BackboneProfile,
    Occluder,
    Scenario,
    ScenarioConfig,
    Thresholds,
    benchmark_scenarios,
    homogeneous,
    run_episode,
    toy_training_set,
)

__all__ = [
    "BenchmarkResult",
    "EvalConfig",
    "StrategyRow",
    "StrategyTable",
    "SweepResult",
    "average_precision",
    "compare_strategies",
    "fp_threshold_sweep",
    "match_detections",
    "occluded_object_fixture",
    "occlusion_benchmark",
    "run_episodes",
    "sender_labels",
    "sender_suite_sweep",
    "train_reference_params",
]


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = (0.5, 0.7)
    score_grid: tuple = tuple(np.round(np.arange(0.0, 1.0001, 0.05), 2).tolist())
    interpolation: str = "all_point"

    def __post_init__(self):
        if not all(0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if self.interpolation not in ("all_point", "11_point"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")


def _det_order(box):
    return (-box.score, box.x, box.y, box.yaw)


def match_detections(dets, gts, iou_threshold):
    """Greedy one-to-one matching; returns a TP flag per detection (input order).

    Detections are visited by descending score (ties by ascending x, y, yaw);
    each takes the unmatched ground truth of highest IoU if that IoU reaches
    the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: _det_order(dets[i]))
    taken = [False] * len(gts)
    flags = [False] * len(dets)
    for i in order:
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            iou = rotated_iou(dets[i], g)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            flags[i] = True
    return flags


def _pr_records(dets_per_frame, gts_per_frame, iou_threshold):
    records = []
    for f, (dets, gts) in enumerate(zip(dets_per_frame, gts_per_frame)):
        for d, tp in zip(dets, match_detections(dets, gts, iou_threshold)):
            records.append((-d.score, f, d.x, d.y, d.yaw, tp))
    records.sort(key=lambda r: r[:5])
    return np.array([r[5] for r in records], dtype=bool)


def average_precision(dets_per_frame, gts_per_frame, iou_threshold=0.5, interpolation="all_point"):
    """Area under the precision envelope of the pooled PR curve."""
    dets_per_frame, gts_per_frame = list(dets_per_frame), list(gts_per_frame)
    if len(dets_per_frame) != len(gts_per_frame):
        raise ValueError("need one detection list per ground-truth frame")
    n_gt = sum(len(g) for g in gts_per_frame)
    if n_gt == 0:
        warnings.warn("average_precision: no ground-truth boxes; AP defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    tp = _pr_records(dets_per_frame, gts_per_frame, iou_threshold)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    if interpolation == "11_point":
        return float(np.mean([precision[recall >= t].max() if np.any(recall >= t) else 0.0 for t in np.linspace(0, 1, 11)]))
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


# -- threshold sweep ----------------------------------------------------------------


@dataclass(frozen=True)
class SweepResult:
    thresholds: tuple
    fp_counts: tuple
    tp_counts: tuple
    zero_fp_threshold: float

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fp_count", "tp_count"])
        for t, fp, tp in zip(self.thresholds, self.fp_counts, self.tp_counts):
            w.writerow([t, fp, tp])
        return buf.getvalue()

    def to_dict(self):
        return {
            "thresholds": list(self.thresholds),
            "fp_counts": list(self.fp_counts),
            "tp_counts": list(self.tp_counts),
            "zero_fp_threshold": self.zero_fp_threshold,
        }


def fp_threshold_sweep(labelled, thresholds):
    """Count transmitted false positives (score >= threshold) per threshold.

    ``labelled`` is an iterable of ``(score, is_true_positive)``.  The
    reported zero-FP threshold is the smallest swept threshold with no false
    positive; if none qualifies it is the next float above the highest FP
    score, which exceeds 1 only when some FP scored exactly 1.
    """
    labelled = [(float(s), bool(tp)) for s, tp in labelled]
    thresholds = sorted(float(t) for t in thresholds)
    fp_scores = np.array([s for s, tp in labelled if not tp])
    tp_scores = np.array([s for s, tp in labelled if tp])
    fps = tuple(int(np.sum(fp_scores >= t)) for t in thresholds)
    tps = tuple(int(np.sum(tp_scores >= t)) for t in thresholds)
    zero = next((t for t, n in zip(thresholds, fps) if n == 0), None)
    if zero is None:
        zero = float(np.nextafter(fp_scores.max(), math.inf)) if fp_scores.size else 0.0
    return SweepResult(tuple(thresholds), fps, tps, float(zero))


def sender_labels(episodes, iou_threshold=0.5):
    """(score, is_tp) for every sender detection against sender-frame truth."""
    out = []
    for ep in episodes:
        for fr in ep.frames:
            flags = match_detections(fr.sender_detections, fr.sender_ground_truth, iou_threshold)
            out.extend((d.score, tp) for d, tp in zip(fr.sender_detections, flags))
    return out


# -- strategy comparison ---------------------------------------------------------


@dataclass(frozen=True)
class StrategyRow:
    strategy: str
    ap50: float | None
    ap70: float | None
    mbps: float
    bytes_per_frame: float


@dataclass
class StrategyTable:
    rows: list = field(default_factory=list)
    fps: float = 10.0

    COLUMNS = ("strategy", "ap50", "ap70", "mbps", "bytes_per_frame")

    def row(self, name):
        return next(r for r in self.rows if r.strategy == name)

    def as_records(self):
        return [{c: getattr(r, c) for c in self.COLUMNS} for r in self.rows]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n")
        w.writeheader()
        for rec in self.as_records():
            w.writerow({k: "" if v is None else v for k, v in rec.items()})
        return buf.getvalue()

    def to_json(self):
        return json.dumps({"fps": self.fps, "rows": self.as_records()}, indent=2, sort_keys=True)


def _label(strategy):
    if hasattr(strategy, "sender_threshold"):
        return f"{strategy.name}@{strategy.sender_threshold:g}"
    return strategy.name


def _episode_job(args):
    return run_episode(*args)


def run_episodes(scenarios, strategy, anchors=None, thresholds=Thresholds(), jobs=1):
    """``run_episode`` over a scenario list, on up to ``jobs`` worker processes."""
    tasks = [(sc, strategy, anchors, thresholds) for sc in scenarios]
    if jobs <= 1 or len(tasks) <= 1:
        return [_episode_job(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_episode_job, tasks))


def compare_strategies(scenarios, strategies, anchors=None, thresholds=Thresholds(), config=EvalConfig(),
                       fps=10.0, include_reference=True, scenario_for=None, jobs=1):
    """AP50/AP70 and payload bandwidth per strategy over a scenario set.

    ``scenario_for(strategy, scenario)`` may substitute a variant of each
    scenario per strategy (e.g. homogeneous profiles for ``HomoHead``).
    An ``intermediate_reference`` row gives the bandwidth of a 256-channel
    float32 feature map over the same grid; it has no AP.
    """
    scenarios = list(scenarios)
    table = StrategyTable(fps=fps)
    for strategy in strategies:
        variants = [scenario_for(strategy, sc) for sc in scenarios] if scenario_for else scenarios
        episodes = run_episodes(variants, strategy, anchors, thresholds, jobs)
        dets = [f.detections for ep in episodes for f in ep.frames]
        gts = [f.ground_truth for ep in episodes for f in ep.frames]
        aps = [average_precision(dets, gts, t, config.interpolation) for t in config.iou_thresholds[:2]]
        sizes = [f.message_bytes for ep in episodes for f in ep.frames]
        mean_bytes = float(np.mean(sizes)) if sizes else 0.0
        table.rows.append(StrategyRow(_label(strategy), aps[0], aps[1] if len(aps) > 1 else None,
                                      wire.mbps(mean_bytes, fps), mean_bytes))
    if include_reference and scenarios:
        H, W = scenarios[0].grid.shape
        ref = wire.intermediate_payload_bytes(H, W)
        table.rows.append(StrategyRow("intermediate_reference", None, None, wire.mbps(ref, fps), float(ref)))
    return table


# -- fixtures and benchmark ----------------------------------------------------------


def sender_suite_sweep(n_scenes=20, seed=2000, thresholds=None, iou_threshold=0.5, jobs=1):
    """Transmitted-FP curve of the default sender backbone over generated scenes."""
    if thresholds is None:
        thresholds = EvalConfig().score_grid
    episodes = run_episodes(benchmark_scenarios(n_scenes, seed), NoFusion(), jobs=jobs)
    return fp_threshold_sweep(sender_labels(episodes, iou_threshold), thresholds)


def occluded_object_fixture(sender_score=0.6, frames=1):
    """Ego, one sender and one car that only the sender can see.

    The sender's backbone peaks at ``sender_score``; with a score between
    the decode threshold and the late-fusion threshold the car survives head
    fusion but is never transmitted as a box.
    """
    ego_profile = BackboneProfile("fixture_ego")
    sender_profile = BackboneProfile("fixture_sender", calibration=((0.0, 0.0), (1.0, sender_score)))
    target = Box3D(10.0, 12.0, 0.8, 4.5, 2.0, 1.6, 0.3)
    bearing = math.atan2(target.y, target.x)
    wall = Occluder(0.5 * target.x, 0.5 * target.y, 5.0, 0.5, bearing + math.pi / 2)
    cfg = ScenarioConfig()
    return Scenario(
        seed=0,
        grid=cfg.grid(),
        agents=(Agent(0, Pose2D(0.0, 0.0, 0.0), ego_profile), Agent(1, Pose2D(16.0, 0.0, math.pi), sender_profile)),
        objects=(target,),
        occluders=(wall,),
        frames=frames,
        ray_count=cfg.ray_count,
        comm_range=cfg.comm_range,
    )


def train_reference_params(n_scenes=30, epochs=40, seed=0, lr=1e-3):
    """Complementary-fusion weights used by the benchmark's HomoHead row."""
    data = toy_training_set(n_scenes)
    params = ComplementaryParams.init(data[0][0].channels, seed=seed)
    return train_complementary(params, data, epochs=epochs, lr=lr, seed=seed)


@dataclass
class BenchmarkResult:
    heterogeneous: StrategyTable
    homogeneous: StrategyTable

    def hetero_gain(self):
        return self.heterogeneous.row("hetero_head").ap50 - self.heterogeneous.row("no_fusion").ap50

    def homo_margin(self):
        return self.homogeneous.row("homo_head").ap50 - self.homogeneous.row("late_fusion@0.75").ap50

    def to_json(self):
        return json.dumps(
            {
                "heterogeneous": json.loads(self.heterogeneous.to_json()),
                "homogeneous": json.loads(self.homogeneous.to_json()),
            },
            indent=2,
            sort_keys=True,
        )


def occlusion_benchmark(params, n_scenes=50, seed=None, thresholds=Thresholds(), config=EvalConfig(), jobs=1):
    """NoFusion/HeteroHead/LateFusion on mixed backbones; LateFusion/HomoHead on homogeneous copies."""
    scenes = benchmark_scenarios(n_scenes, BENCHMARK_SEED if seed is None else seed)
    hetero = compare_strategies(scenes, [NoFusion(), HeteroHead(), LateFusion(0.75)], None, thresholds, config,
                                jobs=jobs)
    homo = compare_strategies(scenes, [LateFusion(0.75), HomoHead(params)], None, thresholds, config,
                              scenario_for=lambda _s, sc: homogeneous(sc), jobs=jobs)
    return BenchmarkResult(hetero, homo)
