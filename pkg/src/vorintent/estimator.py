"""The intention estimation pipeline: on every significant worker motion,
associate the pose with visible graph nodes, modulate goal distances,
validate against counterfactual poses, low-pass the result and advance the
intention decoder. Also owns the bookkeeping for adding and removing goals
mid-run across the graph, planner, filter and decoder."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .floorplan import OccupancyGrid
from .hmm import HmmParams, OnlineViterbi, emission_row, max_goals
from .planner import GoalDistancePlanner, RobotDisk
from .validation import (
    AssociationContext,
    LowPass,
    ValidationConfig,
    WorkerPose,
    alternative_points,
    associate,
    associate_counterfactuals,
    modulated_goal_distance,
    update_trigger,
    validate_motion,
)
from .voronoi import VoronoiGraph

log = logging.getLogger("vorintent.estimator")


@dataclass
class UpdateResult:
    t: float
    v: np.ndarray
    v_hat: np.ndarray
    P: np.ndarray
    argmax: int
    label: str
    branch: str
    d: np.ndarray


class EstimatorError(ValueError):
    pass


class IntentionEstimator:
    """Single-owner pipeline state; the tick loop is the only writer."""

    def __init__(self, grid: OccupancyGrid, graph: VoronoiGraph,
                 config: ValidationConfig | None = None,
                 params: HmmParams | None = None,
                 algorithm: str = "viterbi"):
        self.grid = grid
        self.graph = graph
        self.config = config or ValidationConfig()
        self.params = params or HmmParams()
        self.planner = GoalDistancePlanner(graph)
        self.ctx = AssociationContext(graph, grid)
        self.lowpass = LowPass(self.config.lowpass_coeff)
        self.history: deque[np.ndarray] = deque(maxlen=self.params.m_window)
        self.decoder = OnlineViterbi(graph.goal_count, self.params, algorithm)
        self.prev_pose: WorkerPose | None = None
        self.updates = 0
        if graph.goal_count > self.params.soft_goal_limit:
            log.warning("estimating over %d goals; estimates tend to stay on G_? "
                        "beyond %d", graph.goal_count, self.params.soft_goal_limit)

    # -- labels ----------------------------------------------------------

    @property
    def goal_count(self) -> int:
        return self.graph.goal_count

    def goal_labels(self) -> list[str]:
        labels = []
        for j, nid in enumerate(self.graph.goal_ids):
            labels.append(self.graph.nodes[nid].name or f"G{j + 1}")
        return labels

    def state_labels(self) -> list[str]:
        return self.goal_labels() + ["G?", "Gx"]

    def argmax_label(self) -> str:
        return self.state_labels()[self.decoder.argmax_index()]

    @property
    def probabilities(self) -> np.ndarray:
        return self.decoder.probabilities

    # -- the update ------------------------------------------------------

    def observe(self, pose: WorkerPose, robots: list[RobotDisk]) -> UpdateResult | None:
        """Run one estimation update if the pose moved or turned
        significantly since the last update; otherwise None."""
        if self.prev_pose is None:
            self.prev_pose = pose
            return None
        if not update_trigger(self.prev_pose, pose, self.config):
            return None
        points = alternative_points((self.prev_pose.x, self.prev_pose.y),
                                    (pose.x, pose.y), self.config)
        if points is None:
            return None  # no significant motion; a pure turn carries no d
        c = associate(pose, self.ctx, robots, self.config)
        F = self.planner.distance_matrix()
        d = modulated_goal_distance(c, F)
        C = associate_counterfactuals(points, self.ctx, robots, self.config)
        D = C @ F
        v = validate_motion(d, D)
        v_hat = self.lowpass.update(v)
        self.history.append(v_hat)
        row, branch = emission_row(v_hat, self.history, self.params)
        P = self.decoder.step(row)
        self.prev_pose = pose
        self.updates += 1
        idx = self.decoder.argmax_index()
        return UpdateResult(t=pose.t, v=v, v_hat=v_hat, P=P, argmax=idx,
                            label=self.state_labels()[idx], branch=branch, d=d)

    # -- dynamic goals ----------------------------------------------------

    def add_goal(self, x: float | None = None, y: float | None = None,
                 node_name: str | None = None, name: str | None = None) -> int:
        """Add a goal mid-run, either at a world position (inserted into the
        graph) or at an existing named node. Returns the new goal index."""
        budget = max_goals(self.params)
        if self.goal_count + 1 > budget:
            raise EstimatorError(f"goal budget exceeded: limit is {budget} goals")
        if node_name is not None:
            nid = self._node_by_name(node_name)
        else:
            if x is None or y is None:
                raise EstimatorError("add_goal needs a position or a node name")
            nid = self.graph.insert_node(x, y, name=name)
            self.planner.node_structure_changed()
        if nid in self.graph.goal_ids:
            raise EstimatorError("node is already a goal")
        if name and self.graph.nodes[nid].name is None:
            self.graph.nodes[nid].name = name
        self.planner.add_goal(nid)
        self.decoder.add_goal()
        self.lowpass.extend(0.0)
        self._extend_history()
        self.ctx = AssociationContext(self.graph, self.grid)
        return self.goal_count - 1

    def remove_goal(self, index: int) -> None:
        """Remove a goal; its probability mass folds into G_?. The graph
        node itself stays (erasing nodes would hurt connectivity)."""
        if not (0 <= index < self.goal_count):
            raise EstimatorError(f"goal index {index} out of range")
        if self.goal_count <= 1:
            raise EstimatorError("cannot remove the last goal")
        nid = self.graph.goal_ids[index]
        self.decoder.remove_goal(index)
        self.planner.remove_goal(nid)
        self.lowpass.drop(index)
        self._drop_history(index)
        self.ctx = AssociationContext(self.graph, self.grid)

    def _node_by_name(self, name: str) -> int:
        for nid, node in self.graph.nodes.items():
            if node.name == name:
                return nid
        raise EstimatorError(f"no graph node named {name!r}")

    def _extend_history(self) -> None:
        old = list(self.history)
        self.history = deque(maxlen=self.params.m_window)
        for h in old:
            self.history.append(np.append(h, 0.0))

    def _drop_history(self, index: int) -> None:
        old = list(self.history)
        self.history = deque(maxlen=self.params.m_window)
        for h in old:
            self.history.append(np.delete(h, index))
