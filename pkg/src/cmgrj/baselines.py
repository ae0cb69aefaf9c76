"""Reference selection policies over an enumerated movement plan space.

Three selectors each pick one candidate from a :class:`~cmgrj.explorer.PlanSpace`:
a row-count threshold rule, a rule that moves tables joining the labels the
graph plan scans first, and a latency regressor built on the comparator
network (same weights, scalar output trained against log latency).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cmlero
from .cmlero import ModelError, ModelWeights, TrainHyper, zero_grads
from .datamodel import Catalog
from .engines import GraphPlanNode
from .explorer import PlanSpace
from .featurizer import FeatureConfig, PlanFeatures
from .frontend import CandidatePlan, Query


@dataclass
class BaselineConfig:
    """Threshold for the row-count rule plus the regressor's training knobs."""

    ts_threshold: int
    rlm_hyper: TrainHyper = field(default_factory=TrainHyper)

    def __post_init__(self) -> None:
        if self.ts_threshold <= 0:
            raise ValueError(f"ts_threshold must be positive, got {self.ts_threshold}")


def _component_tables(q: Query, name: str) -> list[str]:
    return [q.alias_tables[a] for a in q.components[name].aliases]


def select_ts(space: PlanSpace, cat: Catalog, t: int) -> CandidatePlan:
    """Move every component whose member tables all hold fewer than ``t`` rows.

    Components move as a unit, so one oversized member table keeps the whole
    group local.  Enlarging ``t`` only ever adds components to the movement.
    """
    if t <= 0:
        raise ValueError(f"threshold must be positive, got {t}")
    movement = frozenset(
        name for name in space.joinable
        if all(cat.table_rowcounts[tab] < t
               for tab in _component_tables(space.query, name)))
    return space.candidates[space.index_of(movement)]


def scan_labels(plan: GraphPlanNode) -> set[str | None]:
    """Labels of every leaf scan in ``plan`` (``None`` for unlabeled scans)."""
    labels: set[str | None] = set()
    stack = [plan]
    while stack:
        node = stack.pop()
        if node.op == "NodeByLabelScan":
            labels.add(node.label)
        stack.extend(node.children)
    return labels


def _join_vars(q: Query, component: str) -> set[str]:
    """Pattern variables a component equi-joins with."""
    out: set[str] = set()
    for cond in q.components[component].cross:
        if cond.op == "=" and cond.graph_column in q.return_aliases:
            out.add(q.return_aliases[cond.graph_column][0])
    return out


def select_fvn(space: PlanSpace, estimated: GraphPlanNode) -> CandidatePlan:
    """Move components that join a variable whose label the plan scans.

    ``estimated`` is the raw candidate's graph plan; its leaf scans mark the
    traversal entry points.  A component whose equi-join variable carries one
    of those labels can seed the scan, so it ships out; everything else stays.
    """
    labels = scan_labels(estimated)
    q = space.query
    movement = frozenset(
        name for name in space.joinable
        if any(q.var_label(v) in labels for v in _join_vars(q, name)))
    return space.candidates[space.index_of(movement)]


@dataclass(frozen=True)
class RegressionSample:
    """One (plan features, measured latency) example for the regressor."""

    features: PlanFeatures
    latency: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.latency) and self.latency > 0):
            raise ValueError(f"latency must be positive and finite, got {self.latency}")


def regression_loss_and_gradients(w: ModelWeights, batch) -> tuple[float, dict]:
    """Mean squared error of the scalar embedding against log latency."""
    grads = zero_grads(w)
    total = 0.0
    n = len(batch)
    for sample in batch:
        emb, cache = cmlero._forward(sample.features, w)
        err = emb - math.log(sample.latency)
        total += err * err
        cmlero._backward(cache, 2.0 * err / n, w, grads)
    return total / n, grads


def train_rlm(samples, hyper: TrainHyper, feature_config: FeatureConfig,
              callback=None, init: ModelWeights | None = None) -> ModelWeights:
    """Fit the regressor with the comparator's SGD loop and a swapped loss."""
    return cmlero.train(samples, hyper, feature_config, callback, init,
                        loss_fn=regression_loss_and_gradients)


def predict_log_latency(features: PlanFeatures, w: ModelWeights) -> float:
    return cmlero.embed(features, w)


def select_rlm(space: PlanSpace, features, w_reg: ModelWeights) -> CandidatePlan:
    """Pick the candidate with the smallest predicted latency.

    ``features`` must hold one :class:`PlanFeatures` per candidate, in the
    space's enumeration order; ties break toward the earlier candidate.
    """
    if len(features) != len(space.candidates):
        raise ModelError(
            f"{len(features)} feature rows for {len(space.candidates)} candidates")
    scores = [predict_log_latency(f, w_reg) for f in features]
    best = min(range(len(scores)), key=lambda i: (scores[i], i))
    return space.candidates[best]
