import itertools
import math

import numpy as np
import pytest

from headfuse.errors import ConfigError
from headfuse.evaluation import occluded_object_fixture
from headfuse.fusion import (
    HeteroHead,
    HomoHead,
    LateFusion,
    NoFusion,
    fuse_cls_max,
    fuse_reg_mean,
)
from headfuse.geometry import BEVGridSpec, Box3D, Pose2D, rotated_iou
from headfuse.heads import decode, encode_gt
from headfuse.simulator import (
    PROFILES,
    Agent,
    BackboneProfile,
    Occluder,
    Scenario,
    ScenarioConfig,
    Thresholds,
    default_anchors,
    dump_scenario,
    generate_scenario,
    homogeneous,
    load_scenario,
    render_head_maps,
    run_episode,
    scenario_from_dict,
    scenario_to_dict,
    training_samples,
    visible_objects,
)

GRID = BEVGridSpec(-32.0, 32.0, -32.0, 32.0, 0.8)
IDEAL = PROFILES["ideal"]


def car(x, y, yaw=0.0):
    return Box3D(x, y, 0.8, 4.5, 2.0, 1.6, yaw)


def wall_scene(profile=IDEAL):
    """Ego at x=-15, sender at x=+15, a long wall along x=0 between them.

    Object 0 is ego-only, object 1 sender-only, object 2 seen by both.
    """
    agents = (Agent(0, Pose2D(-15.0, 0.0, 0.0), profile), Agent(1, Pose2D(15.0, 0.0, math.pi), profile))
    objects = (car(-8.0, 0.0), car(8.0, 0.0), car(0.0, 20.0, math.pi / 2))
    return Scenario(3, GRID, agents, objects, (Occluder(0.0, 0.0, 1.0, 24.0),))


class TestProfiles:
    def test_builtin_profiles_valid(self):
        assert {"ideal", "pointpillars_like", "second_like"} <= set(PROFILES)

    @pytest.mark.parametrize("kwargs", [
        {"score_noise": -0.1},
        {"blur_radius": -1},
        {"calibration": ((0.0, 0.5), (1.0, 0.2))},
        {"calibration": ((0.2, 0.0), (1.0, 1.0))},
        {"full_range": 30.0, "max_range": 10.0},
    ])
    def test_rejects_bad_profiles(self, kwargs):
        with pytest.raises(ConfigError):
            BackboneProfile("bad", **kwargs)

    def test_dict_round_trip(self):
        for p in PROFILES.values():
            assert BackboneProfile.from_dict(p.to_dict()) == p

    def test_falloff(self):
        p = PROFILES["second_like"]
        assert p.falloff(0.0) == 1.0 and p.falloff(p.max_range) == 0.0
        mid = (p.full_range + p.max_range) / 2
        assert p.falloff(mid) == pytest.approx(0.5)


class TestGeneration:
    def test_zero_objects(self):
        assert generate_scenario(1, ScenarioConfig(n_objects=0)).objects == ()

    def test_same_seed_identical(self):
        assert dump_scenario(generate_scenario(42)) == dump_scenario(generate_scenario(42))
        assert dump_scenario(generate_scenario(42)) != dump_scenario(generate_scenario(43))

    def test_twenty_objects_do_not_overlap(self):
        s = generate_scenario(7, ScenarioConfig(n_objects=20))
        assert len(s.objects) == 20
        assert all(rotated_iou(a, b) < 0.01 for a, b in itertools.combinations(s.objects, 2))

    def test_objects_inside_grid(self):
        s = generate_scenario(9)
        assert all(s.grid.contains(o.x, o.y) for o in s.objects)

    def test_ego_first_at_origin(self):
        s = generate_scenario(5, ScenarioConfig(n_agents=3))
        assert [a.id for a in s.agents] == [0, 1, 2]
        assert (s.ego.pose.x, s.ego.pose.y, s.ego.pose.yaw) == (0.0, 0.0, 0.0)

    def test_infeasible_density(self):
        with pytest.raises(ConfigError):
            generate_scenario(0, ScenarioConfig(extent=8.0, n_objects=200, max_tries=5))

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            generate_scenario(0, ScenarioConfig(ego_profile="lidar9000"))

    def test_unknown_config_key(self):
        with pytest.raises(ConfigError):
            ScenarioConfig.from_dict({"n_objectz": 3})

    def test_homogeneous_copy(self):
        s = generate_scenario(3)
        h = homogeneous(s)
        assert all(a.profile == s.ego.profile for a in h.agents)
        assert h.objects == s.objects and s.agents[1].profile != s.ego.profile


class TestVisibility:
    def test_wall_splits_visible_sets(self):
        s = wall_scene()
        ego, sender = (set(visible_objects(a.pose, s.objects, s.occluders)) for a in s.agents)
        assert ego == {0, 2} and sender == {1, 2}
        assert ego | sender == {0, 1, 2} and ego & sender == {2}

    def test_objects_shadow_each_other(self):
        objs = [car(6.0, 0.0), car(14.0, 0.0)]
        assert visible_objects(Pose2D(), objs, ()) == [0]

    def test_more_rays_see_partial_objects(self):
        # the wall hides the center of the car but not its far corners
        objs = [car(10.0, 0.0)]
        occ = (Occluder(5.0, 0.0, 0.5, 1.0),)
        assert visible_objects(Pose2D(), objs, occ) == []
        from headfuse.simulator import VisibilityModel

        assert visible_objects(Pose2D(), objs, occ, VisibilityModel(5)) == [0]


class TestRendering:
    def test_noiseless_limit_equals_encoding(self):
        objects = tuple(car(r * math.cos(t), r * math.sin(t), t) for r, t in ((8, 0.3), (15, 2.0), (20, -1.5), (25, 3.0)))
        s = Scenario(0, GRID, (Agent(0, Pose2D(), IDEAL),), objects, ())
        anchors = default_anchors(GRID)
        cls, reg = render_head_maps(s.ego, s, anchors)
        enc = encode_gt(list(objects), anchors)
        assert np.array_equal(cls.values, enc.cls.values)
        assert np.array_equal(reg.values, enc.reg.values)
        assert cls.validity.all()

    def test_occluded_object_scores_zero(self):
        s = Scenario(0, GRID, (Agent(0, Pose2D(), IDEAL),), (car(12.0, 0.0),), (Occluder(6.0, 0.0, 1.0, 8.0),))
        cls, _ = render_head_maps(s.ego, s, default_anchors(GRID))
        assert not cls.values.any()

    def test_out_of_range_cells_invalid(self):
        short = BackboneProfile("short", full_range=10.0, max_range=20.0)
        s = generate_scenario(4, ScenarioConfig(ego_profile=short.to_dict()))
        cls, reg = render_head_maps(s.ego, s, default_anchors(s.grid))
        xs, ys = s.grid.cell_centers()
        far = np.hypot(xs, ys) > 20.0
        assert far.any() and not cls.validity[far].any()
        assert not cls.values[:, far].any() and not reg.values[:, far].any()

    def test_frames_render_independently(self):
        s = generate_scenario(6)
        anchors = default_anchors(s.grid)
        late = render_head_maps(s.ego, s, anchors, frame=1)
        render_head_maps(s.ego, s, anchors, frame=0)
        again = render_head_maps(s.ego, s, anchors, frame=1)
        assert late[0].equals(again[0]) and late[1].equals(again[1])
        assert not late[0].equals(render_head_maps(s.ego, s, anchors, frame=0)[0])

    def test_scores_in_unit_interval(self):
        s = generate_scenario(8)
        for a in s.agents:
            cls, _ = render_head_maps(a, s, default_anchors(s.grid))
            assert cls.values.min() >= 0.0 and cls.values.max() <= 1.0


class TestEpisodes:
    def test_no_fusion_is_ego_decode(self):
        s = generate_scenario(11)
        anchors = default_anchors(s.grid)
        th = Thresholds()
        res = run_episode(s, NoFusion(), anchors, th)
        for fr in res.frames:
            cls, reg = render_head_maps(s.ego, s, anchors, fr.frame)
            assert fr.detections == decode(cls, reg, anchors, th.score, th.nms_iou)
            assert fr.message_bytes == 0

    def test_hetero_with_identical_maps_is_no_fusion(self):
        # two ideal agents sharing a pose render identical maps
        objects = (car(8.0, 3.0), car(-12.0, -6.0, 1.0))
        agents = (Agent(0, Pose2D(), IDEAL), Agent(1, Pose2D(), IDEAL))
        s = Scenario(0, GRID, agents, objects, ())
        a = run_episode(s, NoFusion()).frames[0].detections
        b = run_episode(s, HeteroHead()).frames[0].detections
        # the sender maps cross the wire as float32
        assert len(a) == len(b) == 2
        for x, y in zip(a, b):
            assert y.as_tuple() == pytest.approx(x.as_tuple(), abs=1e-6)
        # without the wire the fused maps decode to exactly the same boxes
        anchors = default_anchors(GRID)
        cls, reg = render_head_maps(s.ego, s, anchors)
        th = Thresholds()
        fused = decode(fuse_cls_max(cls, cls), fuse_reg_mean(reg, reg), anchors, th.score, th.nms_iou)
        assert fused == decode(cls, reg, anchors, th.score, th.nms_iou)

    def test_wall_scene_union(self):
        s = wall_scene()
        alone = run_episode(s, NoFusion()).frames[0]
        fused = run_episode(s, HeteroHead()).frames[0]
        assert len(alone.ground_truth) == 3
        assert len(alone.detections) == 2 and len(fused.detections) == 3
        for gt in fused.ground_truth:
            assert max(rotated_iou(gt, d) for d in fused.detections) > 0.7

    def test_sender_only_object(self):
        s = occluded_object_fixture()
        assert run_episode(s, NoFusion()).frames[0].detections == []
        assert run_episode(s, LateFusion(0.75)).frames[0].detections == []
        (det,) = run_episode(s, HeteroHead()).frames[0].detections
        (gt,) = run_episode(s, HeteroHead()).frames[0].ground_truth
        assert rotated_iou(det, gt) > 0.5

    def test_homo_head_needs_params(self):
        with pytest.raises(ConfigError):
            run_episode(generate_scenario(0), HomoHead())

    def test_deterministic(self):
        s = generate_scenario(12)
        assert run_episode(s, HeteroHead()).to_json() == run_episode(s, HeteroHead()).to_json()

    def test_first_come_first_serve(self):
        s = generate_scenario(13, ScenarioConfig(n_agents=3))
        assert all(f.sender_id == 1 for f in run_episode(s, HeteroHead()).frames)

    def test_no_sender_in_range_falls_back(self):
        from dataclasses import replace

        s = replace(generate_scenario(14), comm_range=1.0)
        fused = run_episode(s, HeteroHead())
        alone = run_episode(s, NoFusion())
        assert all(f.sender_id is None and f.message_bytes == 0 for f in fused.frames)
        assert [f.detections for f in fused.frames] == [f.detections for f in alone.frames]
        assert training_samples(s) == []

    def test_message_sizes(self):
        s = generate_scenario(15)
        head = run_episode(s, HeteroHead()).frames[0]
        late = run_episode(s, LateFusion(0.75)).frames[0]
        assert head.message_bytes > 100 * late.message_bytes > 0
        zipped = run_episode(s, HeteroHead(), codec="zlib").frames[0]
        assert zipped.message_bytes == head.message_bytes and zipped.compressed_bytes < head.message_bytes

    def test_result_json_round_trip(self):
        from headfuse.simulator import EpisodeResult

        res = run_episode(generate_scenario(16), LateFusion(0.75))
        assert EpisodeResult.from_dict(res.to_dict()).to_json() == res.to_json()


class TestScenarioFiles:
    def test_round_trip(self, tmp_path):
        s = generate_scenario(21)
        path = tmp_path / "s.yaml"
        path.write_text(dump_scenario(s))
        back = load_scenario(path)
        assert back == s
        assert scenario_from_dict(scenario_to_dict(s)) == s

    def test_generator_form(self, tmp_path):
        path = tmp_path / "g.yaml"
        path.write_text("seed: 5\nn_objects: 3\n")
        assert load_scenario(path) == generate_scenario(5, ScenarioConfig(n_objects=3))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_scenario(tmp_path / "nope.yaml")

    @pytest.mark.parametrize("text", ["[1, 2]", "n_objects: 3\n", "objects: [[1, 2]]\nagents: []\n", "a: [\n"])
    def test_malformed(self, tmp_path, text):
        path = tmp_path / "bad.yaml"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_scenario(path)
