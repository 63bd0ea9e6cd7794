import json
import math

import numpy as np
import pytest

from conftest import make_layout
from vorintent.floorplan import parse_layout
from vorintent.messages import parse_robot_messages
from vorintent.sim import (
    Lattice,
    NoiseModel,
    RobotFleet,
    RobotState,
    Scenario,
    ScenarioError,
    Simulation,
    WorkerScript,
    fixture_path,
)
from vorintent.validation import WorkerPose


def ring_lattice(n=6, r=1.0):
    nodes = {}
    for k in range(n):
        a = 2 * math.pi * k / n
        nodes[f"N{k}"] = (5.0 + r * math.cos(a), 5.0 + r * math.sin(a))
    return Lattice(nodes)


def line_lattice(n=8):
    return Lattice({f"N{k}": (float(k), 0.0) for k in range(n)})


class TestLattice:
    def test_pitch_and_adjacency(self):
        lat = line_lattice()
        assert lat.pitch == 1.0
        assert lat.adjacency["N3"] == ["N2", "N4"]
        assert lat.adjacency["N0"] == ["N1"]

    def test_lab_lattice_s_nodes_isolated(self, lab_layout):
        lat = Lattice.from_layout(lab_layout)
        assert lat.pitch == 1.0
        assert lat.adjacency["S1"] == []
        assert "R100" in lat.adjacency["P"]

    def test_distance(self):
        lat = line_lattice()
        assert lat.distance("N0", "N3") == 3.0


class TestRobotFleet:
    def test_corridor_no_backtrack(self):
        lat = line_lattice()
        rng = np.random.default_rng(0)
        fleet = RobotFleet([RobotState(id="r1", node="N3", prev="N2")], lat, rng)
        fleet.step(0.0)
        assert fleet.robots[0].target == "N4"

    def test_dead_end_turnaround(self):
        lat = line_lattice()
        rng = np.random.default_rng(0)
        fleet = RobotFleet([RobotState(id="r1", node="N7", prev="N6")], lat, rng)
        fleet.step(0.0)
        assert fleet.robots[0].target == "N6"  # previous is the only option

    def test_reservation_lower_id_wins(self):
        lat = Lattice({"A": (0.0, 0.0), "B": (1.0, 0.0), "C": (2.0, 0.0)})
        rng = np.random.default_rng(0)
        fleet = RobotFleet([
            RobotState(id="r1", node="A", model="deterministic"),
            RobotState(id="r2", node="C", model="deterministic"),
        ], lat, rng)
        fleet.step(0.0)
        r1, r2 = fleet.robots
        assert r1.target == "B"
        assert r2.target is None  # contested node: stops and waits

    def test_deterministic_ring_cycles(self):
        lat = ring_lattice()
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(0)
            fleet = RobotFleet([RobotState(id="r1", node="N0",
                                           model="deterministic")], lat, rng)
            visited = []
            for k in range(1, 800):
                fleet.step(k * 0.1)
                visited.append(fleet.robots[0].node)
            outs.append(visited)
        assert outs[0] == outs[1]
        # cyclic: the node sequence repeats with a fixed period
        uniq = [n for i, n in enumerate(outs[0]) if i == 0 or outs[0][i - 1] != n]
        assert len(set(uniq)) == 6
        assert uniq[1:7] == uniq[7:13]

    def test_isolated_robot_warns_once(self):
        lat = Lattice({"A": (0.0, 0.0), "B": (5.0, 5.0)})  # beyond pitch? no: pitch is their distance
        lat = Lattice({"A": (0.0, 0.0), "B": (1.0, 0.0), "S": (7.0, 7.0)})
        rng = np.random.default_rng(0)
        fleet = RobotFleet([RobotState(id="r1", node="S")], lat, rng)
        fleet.step(0.0)
        fleet.step(0.1)
        assert len(fleet.warnings) == 1

    def test_thousand_ticks_no_shared_nodes(self, lab_layout):
        lat = Lattice.from_layout(lab_layout)
        rng = np.random.default_rng(12)
        starts = ["P", "R100", "R32", "R1", "R103", "R3", "R104", "R4"]
        fleet = RobotFleet([RobotState(id=f"r{i:02d}", node=s)
                            for i, s in enumerate(starts)], lat, rng)
        for k in range(1, 1000):
            fleet.step(k * 0.1)
            nodes = [r.node for r in fleet.robots] + \
                    [r.target for r in fleet.robots if r.target]
            occupied = [r.node for r in fleet.robots]
            assert len(set(occupied)) == len(occupied), f"tick {k}"


class TestWorkerScript:
    def layout(self):
        return parse_layout(make_layout(nodes=[("A", 1.0, 1.0), ("B", 9.0, 1.0)],
                                        goals=["B"]))

    def test_single_segment_poses(self):
        ws = WorkerScript((0.0, 1.0), 0.0, [{"goto": [1.0, 1.0]}],
                          self.layout(), speed=1.0)
        poses = [ws.pose(k * 0.1) for k in range(11)]
        for k, p in enumerate(poses):
            assert p.x == pytest.approx(0.1 * k, abs=1e-12)
            assert p.theta == 0.0

    def test_dwell_produces_identical_poses(self):
        ws = WorkerScript((1.0, 1.0), 0.0, [{"dwell": 1.0}], self.layout())
        assert ws.pose(0.2) == WorkerPose(1.0, 1.0, 0.0, 0.2)
        assert ws.pose(0.7).x == ws.pose(0.2).x

    def test_turn_event(self):
        ws = WorkerScript((1.0, 1.0), 0.0, [{"turn_to": math.pi / 2}],
                          self.layout())
        assert ws.end_t == pytest.approx(0.5)   # default rate pi rad/s
        assert ws.pose(10.0).theta == pytest.approx(math.pi / 2)

    def test_marks_between(self):
        ws = WorkerScript((1.0, 1.0), 0.0,
                          [{"goto": [2.0, 1.0]}, {"mark": "here"},
                           {"goto": [3.0, 1.0]}], self.layout(), speed=1.0)
        assert ws.marks_between(0.9, 1.1) == ["here"]
        assert ws.marks_between(1.1, 2.0) == []

    def test_unknown_node_rejected(self):
        with pytest.raises(ScenarioError, match="unknown node"):
            WorkerScript((0.0, 0.0), 0.0, [{"goto": "NOPE"}], self.layout())


class TestNoise:
    def test_zero_noise_is_identity(self):
        nm = NoiseModel(0.0, 0.0, seed=1)
        p = WorkerPose(1.234, 5.678, 0.9, 3.0)
        assert nm.apply(p) is p

    def test_noise_is_seeded(self):
        a = NoiseModel(0.01, 0.01, seed=5)
        b = NoiseModel(0.01, 0.01, seed=5)
        p = WorkerPose(1.0, 1.0, 0.0, 0.0)
        pa, pb = a.apply(p), b.apply(p)
        assert pa == pb
        assert pa != p


class TestSimulation:
    def test_stationary_worker_no_updates(self, lab_text, tmp_path):
        raw = {
            "layout": json.loads(lab_text),
            "goals": ["R117"],
            "dt": 0.1, "duration_s": 2.0,
            "worker": {"start": "R32", "script": [{"dwell": 5.0}]},
        }
        sim = Simulation(Scenario.from_dict(raw))
        outcomes = sim.run()
        assert all(o.update is None for o in outcomes)
        assert sim.estimator.argmax_label() == "G?"

    def test_one_update_per_trigger_cell(self, lab_text):
        raw = {
            "layout": json.loads(lab_text),
            "goals": ["R117"],
            "dt": 0.1, "duration_s": 2.0,
            "validation": {"trigger_cell": 0.1},
            "worker": {"start": [3.03, 1.0], "speed": 1.0,
                       "script": [{"goto": [5.03, 1.0]}]},
        }
        sim = Simulation(Scenario.from_dict(raw))
        outcomes = sim.run()
        # 1.0 m/s with dt 0.1 crosses one 0.1 m trigger cell per tick
        updates = [o for o in outcomes if o.update is not None]
        assert len(updates) == len(outcomes)

    def test_scenario_events_goal_lifecycle(self, lab_text):
        raw = {
            "layout": json.loads(lab_text),
            "goals": ["R117", "R109"],
            "dt": 0.1, "duration_s": 1.0,
            "events": [{"t": 0.3, "add_goal": {"node": "R17"}},
                       {"t": 0.6, "remove_goal": 2}],
            "worker": {"start": "R32", "script": [{"dwell": 2.0}]},
        }
        sim = Simulation(Scenario.from_dict(raw))
        outcomes = sim.run()
        events = [e for o in outcomes for e in o.events]
        assert "goal_added:R17" in events
        assert "goal_removed:R17" in events
        assert sim.estimator.goal_labels() == ["R117", "R109"]

    def test_deterministic_traces(self):
        sc1 = Scenario.load(fixture_path("scenario_lab1.json"))
        sc2 = Scenario.load(fixture_path("scenario_lab1.json"))
        o1 = Simulation(sc1).run()
        o2 = Simulation(sc2).run()
        assert len(o1) == len(o2)
        for a, b in zip(o1, o2):
            assert a.t == b.t
            assert a.true_pose == b.true_pose
            assert (a.P == b.P).all()
            assert a.events == b.events
            assert [(r.id, r.x, r.y) for r in a.robots] == \
                   [(r.id, r.x, r.y) for r in b.robots]

    def test_goal_reached_event(self, lab_text):
        raw = {
            "layout": json.loads(lab_text),
            "goals": ["R17"],
            "dt": 0.1, "duration_s": 6.0,
            "worker": {"start": "R13", "speed": 1.0,
                       "script": [{"goto": "R17"}, {"dwell": 3.0}]},
        }
        sim = Simulation(Scenario.from_dict(raw))
        events = [e for o in sim.run() for e in o.events]
        assert any(e.startswith("goal_reached:R17") for e in events)

    def test_trapped_event_when_enclosed(self, lab_text):
        # four scripted robots park around the bottom crossroad
        raw = {
            "layout": json.loads(lab_text),
            "goals": ["R117"],
            "dt": 0.1, "duration_s": 1.0,
            "robots": [
                {"id": "ra", "start": "R2", "model": "scripted"},
                {"id": "rb", "start": "R4", "model": "scripted"},
                {"id": "rc", "start": "R17", "model": "scripted"},
            ],
            "worker": {"start": "R3", "script": [{"goto": [7.0, 1.4], "speed": 0.5}]},
        }
        sc = Scenario.from_dict(raw)
        sim = Simulation(sc)
        # park the scripted robots by giving them single-waypoint scripts
        events = [e for o in sim.run() for e in o.events]
        assert "trapped" in events

    def test_scripted_robot_follows_waypoints(self, lab_layout):
        lat = Lattice.from_layout(lab_layout)
        msgs = parse_robot_messages(
            fixture_path("lab1_robots.jsonl").read_text(), lat)
        r2 = next(m for m in msgs if m.robot == "r2")
        state = RobotState(id="r2", node=r2.waypoints[0][1], model="scripted",
                           waypoints=r2.waypoints)
        assert state.pose(lat, 0.0) == lab_layout.node_position("R107")
        assert state.pose(lat, 5.5) == pytest.approx(
            ((5.0 + 4.0) / 2.0, 9.0))  # halfway R107 -> R110
        assert state.pose(lat, 99.0) == lab_layout.node_position("R105")
