"""Seeded synthetic BEV worlds, per-agent head-map rendering and episodes.

A scenario is static across its frames; per-frame variation comes from
noise streams keyed by (seed, agent, frame, stream) so any frame can be
rendered on its own and in any order.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import yaml

from . import wire
from .errors import ConfigError
from .fusion import (
    HeteroHead,
    HomoHead,
    LateFusion,
    NoFusion,
    fuse_cls_attention,
    fuse_cls_max,
    fuse_reg_complementary,
    fuse_reg_mean,
    late_fuse,
)
from .geometry import BEVGridSpec, Box3D, Pose2D, box_corners, rotated_iou
from .grid import GridMap
from .heads import (
    AnchorGrid,
    align_head_maps,
    box_targets,
    decode,
    encode_gt,
    footprint_cells,
)

__all__ = [
    "BENCHMARK_SEED",
    "PROFILES",
    "TOY_TRAINING_SEED",
    "Agent",
    "BackboneProfile",
    "EpisodeResult",
    "FrameResult",
    "Occluder",
    "Scenario",
    "ScenarioConfig",
    "Thresholds",
    "VisibilityModel",
    "benchmark_scenarios",
    "dump_scenario",
    "generate_scenario",
    "homogeneous",
    "load_scenario",
    "render_head_maps",
    "run_episode",
    "scenario_from_dict",
    "scenario_to_dict",
    "toy_training_set",
    "training_samples",
    "visible_objects",
]

log = logging.getLogger(__name__)

STREAM_SCORE, STREAM_REG, STREAM_CLUTTER, STREAM_BG = range(4)


# -- profiles ------------------------------------------------------------------


@dataclass(frozen=True)
class BackboneProfile:
    """Stand-in for a detector backbone: how an agent's head maps degrade.

    ``calibration`` is a monotone piecewise-linear curve given as (x, y)
    knots on [0, 1]; it maps the raw detectability of an object (range
    falloff) to its peak classification score.  ``clutter_rate`` spurious
    blobs per frame, with scores uniform in ``clutter_scores``, supply false
    positives.
    """

    name: str = "ideal"
    score_noise: float = 0.0
    reg_noise: float = 0.0
    blur_radius: int = 0
    calibration: tuple = ((0.0, 0.0), (1.0, 1.0))
    full_range: float = math.inf
    max_range: float = math.inf
    clutter_rate: float = 0.0
    clutter_scores: tuple = (0.2, 0.6)

    def __post_init__(self):
        if self.score_noise < 0 or self.reg_noise < 0 or self.blur_radius < 0 or self.clutter_rate < 0:
            raise ConfigError(f"profile {self.name!r}: noise, blur and clutter must be non-negative")
        knots = tuple((float(x), float(y)) for x, y in self.calibration)
        xs, ys = zip(*knots)
        if (
            len(knots) < 2
            or xs[0] != 0.0
            or xs[-1] != 1.0
            or any(b <= a for a, b in itertools.pairwise(xs))
            or any(b < a for a, b in itertools.pairwise(ys))
            or min(ys) < 0
            or max(ys) > 1
        ):
            raise ConfigError(f"profile {self.name!r}: calibration must map [0,1] to [0,1] monotonically")
        if self.max_range < self.full_range:
            raise ConfigError(f"profile {self.name!r}: max_range must be >= full_range")
        object.__setattr__(self, "calibration", knots)
        object.__setattr__(self, "clutter_scores", tuple(float(s) for s in self.clutter_scores))

    def calibrate(self, raw):
        xs, ys = zip(*self.calibration)
        return float(np.interp(raw, xs, ys))

    def falloff(self, distance):
        if distance <= self.full_range:
            return 1.0
        if distance >= self.max_range:
            return 0.0
        return 1.0 - (distance - self.full_range) / (self.max_range - self.full_range)

    def to_dict(self):
        d = asdict(self)
        d["calibration"] = [list(k) for k in self.calibration]
        d["clutter_scores"] = list(self.clutter_scores)
        for k in ("full_range", "max_range"):
            if math.isinf(d[k]):
                d[k] = None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("full_range", "max_range"):
            if d.get(k) is None:
                d.pop(k, None)
        if "calibration" in d:
            d["calibration"] = tuple(tuple(k) for k in d["calibration"])
        if "clutter_scores" in d:
            d["clutter_scores"] = tuple(d["clutter_scores"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad profile: {exc}") from None


PROFILES = {
    "ideal": BackboneProfile("ideal"),
    # confident near range, soft falloff
    "pointpillars_like": BackboneProfile(
        "pointpillars_like",
        score_noise=0.03,
        reg_noise=0.08,
        blur_radius=1,
        calibration=((0.0, 0.0), (1.0, 0.95)),
        full_range=22.0,
        max_range=45.0,
        clutter_rate=1.5,
        clutter_scores=(0.25, 0.7),
    ),
    # more conservative scores: many true objects land below 0.75
    "second_like": BackboneProfile(
        "second_like",
        score_noise=0.03,
        reg_noise=0.10,
        blur_radius=1,
        calibration=((0.0, 0.0), (0.5, 0.45), (1.0, 0.9)),
        full_range=18.0,
        max_range=45.0,
        clutter_rate=2.0,
        clutter_scores=(0.25, 0.72),
    ),
}


def profile_named(name_or_dict):
    if isinstance(name_or_dict, BackboneProfile):
        return name_or_dict
    if isinstance(name_or_dict, dict):
        return BackboneProfile.from_dict(name_or_dict)
    try:
        return PROFILES[name_or_dict]
    except KeyError:
        raise ConfigError(f"unknown backbone profile {name_or_dict!r}; known: {sorted(PROFILES)}") from None


# -- world objects ------------------------------------------------------------------


@dataclass(frozen=True)
class Occluder:
    x: float
    y: float
    l: float
    w: float
    yaw: float = 0.0

    def as_box(self):
        return Box3D(self.x, self.y, 1.5, self.l, self.w, 3.0, self.yaw)


@dataclass(frozen=True)
class Agent:
    id: int
    pose: Pose2D
    profile: BackboneProfile = field(default_factory=BackboneProfile)


@dataclass(frozen=True)
class VisibilityModel:
    """Ray-cast occlusion test.

    An object is visible when at least one of ``ray_count`` BEV rays from
    the agent to sample points on it (center first, then corners, then edge
    midpoints) crosses no occluder and no other object's footprint.
    """

    ray_count: int = 1

    def __post_init__(self):
        if self.ray_count < 1:
            raise ConfigError("ray_count must be >= 1")

    def targets(self, box):
        pts = [(box.x, box.y)]
        corners = box_corners(box)
        pts.extend(map(tuple, corners))
        pts.extend(tuple((corners[i] + corners[(i + 1) % 4]) / 2) for i in range(4))
        return pts[: self.ray_count]


def _segment_hits_rect(p0, p1, box):
    """Liang-Barsky test of segment p0->p1 against an oriented rectangle."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)

    def local(p):
        dx, dy = p[0] - box.x, p[1] - box.y
        return c * dx + s * dy, -s * dx + c * dy

    (x0, y0), (x1, y1) = local(p0), local(p1)
    dx, dy = x1 - x0, y1 - y0
    t0, t1 = 0.0, 1.0
    hl, hw = box.l / 2, box.w / 2
    for p, q in ((-dx, x0 + hl), (dx, hl - x0), (-dy, y0 + hw), (dy, hw - y0)):
        if p == 0:
            if q < 0:
                return False
            continue
        t = q / p
        if p < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
        if t0 > t1:
            return False
    return True


def visible_objects(agent_pose, objects, occluders, model=VisibilityModel()):
    """Indices of ``objects`` visible from ``agent_pose`` (world frame)."""
    origin = (agent_pose.x, agent_pose.y)
    blockers = [o.as_box() for o in occluders]
    visible = []
    for i, obj in enumerate(objects):
        others = blockers + [o for j, o in enumerate(objects) if j != i]
        for target in model.targets(obj):
            if not any(_segment_hits_rect(origin, target, b) for b in others):
                visible.append(i)
                break
    return visible


# -- scenario ------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    extent: float = 32.0
    cell: float = 0.8
    n_objects: int = 14
    n_occluders: int = 4
    n_agents: int = 2
    frames: int = 2
    sender_distance: tuple = (14.0, 26.0)
    ego_profile: str | dict = "pointpillars_like"
    sender_profile: str | dict = "second_like"
    ray_count: int = 1
    comm_range: float = 100.0
    max_tries: int = 200

    def grid(self):
        return BEVGridSpec(-self.extent, self.extent, -self.extent, self.extent, self.cell)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "sender_distance" in d:
            d["sender_distance"] = tuple(d["sender_distance"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad scenario config: {exc}") from None


@dataclass(frozen=True)
class Scenario:
    seed: int
    grid: BEVGridSpec
    agents: tuple
    objects: tuple
    occluders: tuple
    frames: int = 1
    ray_count: int = 1
    comm_range: float = 100.0

    def __post_init__(self):
        if not self.agents:
            raise ConfigError("scenario needs at least one agent")
        object.__setattr__(self, "agents", tuple(sorted(self.agents, key=lambda a: a.id)))
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "occluders", tuple(self.occluders))

    @property
    def ego(self):
        return self.agents[0]

    def agent(self, agent_id):
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)

    @property
    def visibility(self):
        return VisibilityModel(self.ray_count)

    def objects_in_frame(self, pose):
        """Objects re-expressed in ``pose``'s frame."""
        world = Pose2D()
        return [o.transformed(world, pose) for o in self.objects]


def _clear_of(box, others, margin=0.0):
    grown = replace(box, l=box.l + margin, w=box.w + margin)
    return all(rotated_iou(grown, o) == 0.0 for o in others)


def generate_scenario(seed, config=ScenarioConfig()):
    """Deterministic random world for ``(seed, config)``; ego at the origin."""
    if isinstance(config, dict):
        config = ScenarioConfig.from_dict(config)
    rng = np.random.default_rng(seed)
    grid = config.grid()
    ego_profile = profile_named(config.ego_profile)
    sender_profile = profile_named(config.sender_profile)
    agents = [Agent(0, Pose2D(0.0, 0.0, 0.0), ego_profile)]
    for k in range(1, config.n_agents):
        d = rng.uniform(*config.sender_distance)
        bearing = rng.uniform(-math.pi, math.pi)
        yaw = rng.uniform(-math.pi, math.pi)
        agents.append(Agent(k, Pose2D(d * math.cos(bearing), d * math.sin(bearing), yaw), sender_profile))
    agent_boxes = [Box3D(a.pose.x, a.pose.y, 0.8, 4.5, 2.0, 1.6, a.pose.yaw) for a in agents]

    occluders = []
    budget = config.max_tries * max(config.n_occluders, 1)
    while len(occluders) < config.n_occluders:
        budget -= 1
        if budget < 0:
            raise ConfigError(f"could not place {config.n_occluders} occluders after bounded retries")
        ag = agents[1 + len(occluders) % (len(agents) - 1)] if len(agents) > 1 else agents[0]
        # park occluders between the ego and a sender's side of the world
        t = rng.uniform(0.3, 0.7)
        cx = t * ag.pose.x + rng.normal(0, 8.0)
        cy = t * ag.pose.y + rng.normal(0, 8.0)
        occ = Occluder(float(cx), float(cy), float(rng.uniform(5.0, 10.0)), float(rng.uniform(2.0, 4.0)), float(rng.uniform(-math.pi, math.pi)))
        ob = occ.as_box()
        if not grid.contains(cx, cy) or not _clear_of(ob, agent_boxes, 3.0) or not _clear_of(ob, [o.as_box() for o in occluders], 1.0):
            continue
        occluders.append(occ)

    objects = []
    budget = config.max_tries * max(config.n_objects, 1)
    margin = 3.0
    occ_boxes = [o.as_box() for o in occluders]
    while len(objects) < config.n_objects:
        budget -= 1
        if budget < 0:
            raise ConfigError(f"infeasible density: placed {len(objects)} of {config.n_objects} objects")
        l, w, h = rng.uniform(3.9, 4.8), rng.uniform(1.7, 2.1), rng.uniform(1.4, 1.8)
        x = rng.uniform(grid.x_min + margin, grid.x_max - margin)
        y = rng.uniform(grid.y_min + margin, grid.y_max - margin)
        box = Box3D(float(x), float(y), float(h / 2), float(l), float(w), float(h), float(rng.uniform(-math.pi, math.pi)))
        if not _clear_of(box, objects, 1.0) or not _clear_of(box, occ_boxes, 0.5) or not _clear_of(box, agent_boxes, 1.5):
            continue
        objects.append(box)
    return Scenario(int(seed), grid, tuple(agents), tuple(objects), tuple(occluders), config.frames, config.ray_count, config.comm_range)


# -- rendering -------------------------------------------------------------------------


def _rng(seed, agent_id, frame, stream):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(agent_id), int(frame), int(stream)])


def _detected_objects(agent, scenario):
    """(local box, detectability) for objects this agent can see."""
    vis = visible_objects(agent.pose, scenario.objects, scenario.occluders, scenario.visibility)
    out = []
    for i in vis:
        obj = scenario.objects[i]
        dist = math.hypot(obj.x - agent.pose.x, obj.y - agent.pose.y)
        peak = agent.profile.calibrate(agent.profile.falloff(dist))
        if peak <= 0.0:
            continue
        local = obj.transformed(Pose2D(), agent.pose)
        if scenario.grid.contains(local.x, local.y):
            out.append((i, local, peak))
    return out


def _sensor_validity(grid, profile):
    if math.isinf(profile.max_range):
        return np.ones(grid.shape, dtype=bool)
    xs, ys = grid.cell_centers()
    return np.hypot(xs, ys) <= profile.max_range


def render_head_maps(agent, scenario, anchors, frame=0):
    """Classification and regression maps one agent's detector would emit.

    Starts from :func:`encode_gt` of the objects this agent can see, then
    scales each object's score by range falloff and calibration, perturbs
    its box, blurs the score peak, adds clutter blobs and per-cell score
    noise.  With the ideal profile, no occluders and unlimited range the
    result equals ``encode_gt`` of every object.
    """
    profile = agent.profile
    grid = anchors.grid
    seed = scenario.seed
    detected = _detected_objects(agent, scenario)

    reg_rng = _rng(seed, agent.id, frame, STREAM_REG)
    boxes, peaks = [], []
    for _, box, peak in detected:
        if profile.reg_noise > 0:
            e = reg_rng.normal(0.0, profile.reg_noise, size=4)
            box = replace(box, x=box.x + e[0], y=box.y + e[1], yaw=box.yaw + e[2] / 2.0, l=box.l * math.exp(e[3] / 10.0))
        boxes.append(box)
        peaks.append(peak)

    # clutter: spurious detections at random positions
    clutter_rng = _rng(seed, agent.id, frame, STREAM_CLUTTER)
    n_clutter = int(clutter_rng.poisson(profile.clutter_rate)) if profile.clutter_rate > 0 else 0
    clutter = []
    for _ in range(n_clutter):
        x = clutter_rng.uniform(grid.x_min, grid.x_max)
        y = clutter_rng.uniform(grid.y_min, grid.y_max)
        t = anchors.templates[int(clutter_rng.integers(anchors.num_anchors))]
        yaw = t.yaw + clutter_rng.uniform(-0.3, 0.3)
        score = clutter_rng.uniform(*profile.clutter_scores)
        clutter.append((Box3D(x, y, t.z, t.l, t.w, t.h, yaw), score))

    enc = encode_gt(boxes + [b for b, _ in clutter], anchors)
    cls = enc.cls.values.copy()
    reg = enc.reg.values.copy()

    all_peaks = peaks + [s for _, s in clutter]
    all_boxes = boxes + [b for b, _ in clutter]
    if all_peaks != [1.0] * len(all_peaks) or profile.blur_radius > 0:
        cls[:] = 0.0
        r_max = profile.blur_radius
        for box, peak in zip(all_boxes, all_peaks):
            if not grid.contains(box.x, box.y):
                continue
            a = anchors.best_anchor(box)
            r0, c0 = (int(v) for v in grid.cell_of(box.x, box.y))
            for dr in range(-r_max, r_max + 1):
                for dc in range(-r_max, r_max + 1):
                    r, c = r0 + dr, c0 + dc
                    if not (0 <= r < grid.height and 0 <= c < grid.width):
                        continue
                    ring = max(abs(dr), abs(dc))
                    val = peak * (1.0 - 0.4 * ring / max(r_max, 1))
                    cls[a, r, c] = max(cls[a, r, c], val)
            # blurred neighbours must still decode to this box
            if r_max > 0:
                rows, cols = footprint_cells(box, grid)
                fp = set(zip(rows.tolist(), cols.tolist()))
                for dr in range(-r_max, r_max + 1):
                    for dc in range(-r_max, r_max + 1):
                        r, c = r0 + dr, c0 + dc
                        if (r, c) not in fp and 0 <= r < grid.height and 0 <= c < grid.width and (dr or dc):
                            cx = grid.x_min + (c + 0.5) * grid.cell
                            cy = grid.y_min + (r + 0.5) * grid.cell
                            reg[7 * a : 7 * a + 7, r, c] = box_targets(box, anchors.templates[a], cx, cy, anchors.wrap_yaw)

    if profile.score_noise > 0:
        noise = _rng(seed, agent.id, frame, STREAM_SCORE).normal(0.0, profile.score_noise, size=cls.shape)
        cls = np.clip(cls + noise, 0.0, 1.0)
    validity = _sensor_validity(grid, profile)
    cls = np.where(validity[None], cls, 0.0)
    reg = np.where(validity[None], reg, 0.0)
    return GridMap(cls, validity), GridMap(reg, validity)


def default_anchors(grid):
    """Anchors used by simulations: two yaw templates, half-turn-folded yaw targets."""
    return AnchorGrid.default(grid, wrap_yaw=True)


# -- episodes ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Thresholds:
    score: float = 0.25
    nms_iou: float = 0.15
    late_sender: float = 0.75


@dataclass
class FrameResult:
    frame: int
    sender_id: int | None
    detections: list
    ground_truth: list
    sender_detections: list = field(default_factory=list)
    sender_ground_truth: list = field(default_factory=list)
    message_bytes: int = 0
    compressed_bytes: int = 0

    def to_dict(self):
        return {
            "frame": self.frame,
            "sender_id": self.sender_id,
            "detections": [list(b.as_tuple()) for b in self.detections],
            "ground_truth": [list(b.as_tuple()) for b in self.ground_truth],
            "sender_detections": [list(b.as_tuple()) for b in self.sender_detections],
            "sender_ground_truth": [list(b.as_tuple()) for b in self.sender_ground_truth],
            "message_bytes": self.message_bytes,
            "compressed_bytes": self.compressed_bytes,
        }

    @classmethod
    def from_dict(cls, d):
        def boxes(key):
            return [Box3D(*v) for v in d.get(key, [])]

        return cls(
            d["frame"], d["sender_id"], boxes("detections"), boxes("ground_truth"),
            boxes("sender_detections"), boxes("sender_ground_truth"), d.get("message_bytes", 0), d.get("compressed_bytes", 0),
        )


@dataclass
class EpisodeResult:
    scenario_seed: int
    strategy: str
    frames: list

    def to_dict(self):
        return {"scenario_seed": self.scenario_seed, "strategy": self.strategy, "frames": [f.to_dict() for f in self.frames]}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["scenario_seed"], d["strategy"], [FrameResult.from_dict(f) for f in d["frames"]])

    def bandwidth_samples(self):
        return [(f.message_bytes, f.compressed_bytes) for f in self.frames]


def _first_sender(scenario):
    """First-come-first-serve: lowest-id sender within communication range."""
    ego = scenario.ego
    for a in scenario.agents[1:]:
        if math.hypot(a.pose.x - ego.pose.x, a.pose.y - ego.pose.y) <= scenario.comm_range:
            return a
    return None


def _ground_truth(scenario, pose):
    return [b for b in scenario.objects_in_frame(pose) if scenario.grid.contains(b.x, b.y)]


def run_episode(scenario, strategy, anchors=None, thresholds=Thresholds(), codec="none", quantize=False):
    """Run every frame of ``scenario`` under ``strategy``.

    The ego fuses only the first-arriving sender (lowest agent id within
    communication range); with no sender the frame falls back to the ego's
    own detections.  Head maps and boxes travel through the wire encoding so
    message sizes are real.
    """
    if isinstance(strategy, HomoHead) and strategy.params is None:
        raise ConfigError("HomoHead strategy needs trained ComplementaryParams")
    if anchors is None:
        anchors = default_anchors(scenario.grid)
    ego = scenario.ego
    sender = _first_sender(scenario)
    frames = []
    for frame in range(scenario.frames):
        cls_e, reg_e = render_head_maps(ego, scenario, anchors, frame)
        gt = _ground_truth(scenario, ego.pose)
        sender_dets, sender_gt = [], []
        nbytes = cbytes = 0
        s_cls = s_reg = None
        if sender is not None:
            s_cls, s_reg = render_head_maps(sender, scenario, anchors, frame)
            sender_dets = decode(s_cls, s_reg, anchors, thresholds.score, thresholds.nms_iou)
            sender_gt = _ground_truth(scenario, sender.pose)

        if isinstance(strategy, NoFusion) or sender is None:
            dets = decode(cls_e, reg_e, anchors, thresholds.score, thresholds.nms_iou)
        elif isinstance(strategy, LateFusion):
            msg = wire.BoxMessage.from_detections(sender.id, frame, sender.pose, sender_dets, strategy.sender_threshold)
            raw = wire.serialize(msg)
            nbytes, cbytes = len(raw), len(wire.compress(raw, codec))
            received = wire.deserialize(wire.decompress(wire.compress(raw, codec), codec))
            boxes_in_ego = [b.transformed(received.pose, ego.pose) for b in received.boxes]
            own = decode(cls_e, reg_e, anchors, thresholds.score, thresholds.nms_iou)
            dets = late_fuse(own, boxes_in_ego, strategy.sender_threshold, thresholds.nms_iou)
        elif isinstance(strategy, (HeteroHead, HomoHead)):
            msg = wire.HeadMessage.from_maps(sender.id, frame, sender.pose, scenario.grid, s_cls, s_reg, quantize)
            raw = wire.serialize(msg)
            packed = wire.compress(raw, codec)
            nbytes, cbytes = len(raw), len(packed)
            received = wire.deserialize(wire.decompress(packed, codec))
            validity = received.validity
            r_cls = GridMap(received.cls.astype(np.float64), validity)
            r_reg = GridMap(received.reg.astype(np.float64), validity)
            a_cls, a_reg = align_head_maps(r_cls, r_reg, received.pose, ego.pose, anchors)
            if isinstance(strategy, HeteroHead):
                f_cls, f_reg = fuse_cls_max(cls_e, a_cls), fuse_reg_mean(reg_e, a_reg)
            else:
                f_cls = fuse_cls_attention([cls_e, a_cls], 0, strategy.d_k)
                f_reg = fuse_reg_complementary(reg_e, a_reg, strategy.params)
            dets = decode(f_cls, f_reg, anchors, thresholds.score, thresholds.nms_iou)
        else:
            raise ConfigError(f"unknown strategy {strategy!r}")
        frames.append(
            FrameResult(frame, sender.id if sender else None, dets, gt, sender_dets, sender_gt, nbytes, cbytes)
        )
    return EpisodeResult(scenario.seed, strategy.name, frames)


def training_samples(scenario, anchors=None, frames=None):
    """(reg_ego, aligned reg_sender, reg_gt, positive mask) per frame."""
    if anchors is None:
        anchors = default_anchors(scenario.grid)
    sender = _first_sender(scenario)
    if sender is None:
        return []
    ego = scenario.ego
    enc = encode_gt(_ground_truth(scenario, ego.pose), anchors)
    out = []
    for frame in range(scenario.frames if frames is None else frames):
        _, reg_e = render_head_maps(ego, scenario, anchors, frame)
        s_cls, s_reg = render_head_maps(sender, scenario, anchors, frame)
        _, a_reg = align_head_maps(s_cls, s_reg, sender.pose, ego.pose, anchors)
        out.append((reg_e, a_reg, enc.reg, enc.reg_mask))
    return out


def homogeneous(scenario):
    """Copy of ``scenario`` in which every agent uses the ego's backbone profile."""
    profile = scenario.ego.profile
    return replace(scenario, agents=tuple(replace(a, profile=profile) for a in scenario.agents))


BENCHMARK_SEED = 1000
TOY_TRAINING_SEED = 50000


def benchmark_scenarios(n=50, seed=BENCHMARK_SEED, config=ScenarioConfig()):
    """The occlusion benchmark: scenes ``seed .. seed + n - 1``."""
    return [generate_scenario(seed + i, config) for i in range(n)]


def toy_training_set(n_scenes=6, seed=TOY_TRAINING_SEED, config=ScenarioConfig()):
    """Bundled training samples for the complementary fusion network.

    Homogeneous scenes drawn from a seed range disjoint from the benchmark.
    """
    return [s for i in range(n_scenes) for s in training_samples(homogeneous(generate_scenario(seed + i, config)))]


# -- scenario files -------------------------------------------------------------------------


def scenario_to_dict(s):
    return {
        "seed": s.seed,
        "frames": s.frames,
        "ray_count": s.ray_count,
        "comm_range": s.comm_range,
        "grid": s.grid.as_dict(),
        "agents": [
            {"id": a.id, "pose": [a.pose.x, a.pose.y, a.pose.yaw], "profile": a.profile.to_dict()} for a in s.agents
        ],
        "objects": [list(b.as_tuple()[:7]) for b in s.objects],
        "occluders": [[o.x, o.y, o.l, o.w, o.yaw] for o in s.occluders],
    }


def scenario_from_dict(d):
    """Explicit scenario (has ``objects``) or a generator config plus ``seed``."""
    if "objects" not in d:
        cfg = {k: v for k, v in d.items() if k != "seed"}
        if "seed" not in d:
            raise ConfigError("generator scenario file needs a 'seed'")
        return generate_scenario(int(d["seed"]), ScenarioConfig.from_dict(cfg))
    try:
        grid = BEVGridSpec(**d["grid"])
        agents = [Agent(int(a["id"]), Pose2D(*a["pose"]), profile_named(a.get("profile", "ideal"))) for a in d["agents"]]
        objects = [Box3D(*o) for o in d["objects"]]
        occluders = [Occluder(*o) for o in d.get("occluders", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario file: {exc}") from None
    return Scenario(int(d.get("seed", 0)), grid, tuple(agents), tuple(objects), tuple(occluders),
                    int(d.get("frames", 1)), int(d.get("ray_count", 1)), float(d.get("comm_range", 100.0)))


def dump_scenario(s):
    return yaml.safe_dump(scenario_to_dict(s), sort_keys=False, default_flow_style=None)


def load_scenario(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse scenario file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"scenario file {path} must contain a mapping")
    return scenario_from_dict(data)
