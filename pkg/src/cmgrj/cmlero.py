"""Learned pairwise plan comparator: tree + graph embeddings over numpy.

One embedding network scores a plan from its two feature structures:

* three tree-convolution layers — each node mixes its own vector with its
  left and right children through separate kernels — then element-wise max
  pooling and a linear read-out;
* two graph-convolution layers over the symmetric-normalized join graph
  (self-loops added), pooled and read out the same way;
* a two-weight linear mix of the two read-outs.

``compare(P_i, P_j)`` = sigmoid(embed(P_j) − embed(P_i)) is the probability
that P_i is the better (lower-latency) plan; both plans pass through the
same weights, so ranking needs only one model. Training minimizes mean
negative log-likelihood with plain SGD; all gradients are hand-derived and
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .featurizer import PlanFeatures

WEIGHTS_VERSION = "cmlero-weights-v1"
HIDDEN = 16


class ModelError(Exception):
    """Shape/version mismatches and other inference-time failures."""


class TrainingError(Exception):
    """Aborted training (non-finite loss); carries diagnostics."""

    def __init__(self, message: str, epoch: int | None = None,
                 batch: int | None = None, loss: float | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


@dataclass
class ModelWeights:
    """All parameters plus the encoding metadata inference must agree on."""

    width: int
    params: dict[str, np.ndarray]
    bounds: tuple[float, float]
    tables: tuple[str, ...]
    labels: tuple[str, ...]
    hidden: int = HIDDEN
    threshold: float = 0.5
    version: str = WEIGHTS_VERSION


@dataclass(frozen=True)
class TrainingPair:
    features_i: PlanFeatures
    features_j: PlanFeatures
    label: int  # 1 iff plan i has the lower latency
    latency_i: float | None = None
    latency_j: float | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"pair label must be 0 or 1, got {self.label!r}")
        if self.latency_i is not None and self.latency_j is not None:
            if self.label != int(self.latency_i < self.latency_j):
                raise ValueError("pair label contradicts its recorded latencies")


@dataclass
class TrainHyper:
    lr: float = 0.01
    epochs: int = 100
    batch: int = 64
    seed: int = 0


def _sigmoid(x: float) -> float:
    return float(np.exp(-np.logaddexp(0.0, -x)))


def init_weights(width: int, bounds: tuple[float, float],
                 tables: tuple[str, ...] = (), labels: tuple[str, ...] = (),
                 seed: int = 0, hidden: int = HIDDEN,
                 threshold: float = 0.5) -> ModelWeights:
    """Seeded uniform init in ±1/sqrt(fan_in) per parameter tensor."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def uni(name: str, shape: tuple, fan_in: int):
        lim = 1.0 / math.sqrt(max(fan_in, 1))
        params[name] = rng.uniform(-lim, lim, size=shape)

    in_w = width
    for layer in range(3):
        for kernel in ("Wp", "Wl", "Wr"):
            uni(f"tb{layer}_{kernel}", (hidden, in_w), in_w)
        uni(f"tb{layer}_b", (hidden,), in_w)
        in_w = hidden
    uni("tree_fc_w", (hidden,), hidden)
    uni("tree_fc_b", (1,), hidden)

    in_w = width
    for layer in range(2):
        uni(f"g{layer}_W", (in_w, hidden), in_w)
        uni(f"g{layer}_b", (hidden,), in_w)
        in_w = hidden
    uni("graph_fc_w", (hidden,), hidden)
    uni("graph_fc_b", (1,), hidden)

    uni("mix_w", (2,), 2)
    uni("mix_b", (1,), 2)
    return ModelWeights(width=width, params=params, bounds=bounds,
                        tables=tuple(tables), labels=tuple(labels),
                        hidden=hidden, threshold=threshold)


def _check_shapes(pf: PlanFeatures, w: ModelWeights) -> None:
    if pf.tree.ndim != 2 or pf.tree.shape[1] != w.width:
        raise ModelError(
            f"tree feature width {pf.tree.shape} does not match model width {w.width}")
    if pf.graph.ndim != 2 or pf.graph.shape[1] != w.width:
        raise ModelError(
            f"graph feature width {pf.graph.shape} does not match model width {w.width}")


def _child_matrix(h: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Rows of ``h`` selected by ``idx``; index −1 yields a zero row."""
    padded = np.vstack([h, np.zeros((1, h.shape[1]))])
    fixed = np.where(idx < 0, h.shape[0], idx)
    return padded[fixed], fixed


def _norm_adjacency(m: int, edges: np.ndarray) -> np.ndarray:
    a = np.eye(m)
    for r, c in edges:
        a[r, c] = 1.0
        a[c, r] = 1.0
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * np.outer(dinv, dinv)


def _forward(pf: PlanFeatures, w: ModelWeights) -> tuple[float, dict]:
    _check_shapes(pf, w)
    p = w.params
    cache: dict = {"pf": pf}

    h = pf.tree
    left = pf.tree_children[:, 0]
    right = pf.tree_children[:, 1]
    cache["tree_layers"] = []
    for layer in range(3):
        hl, lidx = _child_matrix(h, left)
        hr, ridx = _child_matrix(h, right)
        z = (h @ p[f"tb{layer}_Wp"].T + hl @ p[f"tb{layer}_Wl"].T
             + hr @ p[f"tb{layer}_Wr"].T + p[f"tb{layer}_b"])
        cache["tree_layers"].append({"h_in": h, "hl": hl, "hr": hr,
                                     "lidx": lidx, "ridx": ridx, "z": z})
        h = np.maximum(z, 0.0)
    tree_pool = h.max(axis=0)
    cache["tree_h"] = h
    cache["tree_argmax"] = h.argmax(axis=0)
    s_tree = float(p["tree_fc_w"] @ tree_pool + p["tree_fc_b"][0])
    cache["tree_pool"] = tree_pool

    x = pf.graph
    a_hat = _norm_adjacency(x.shape[0], pf.graph_edges)
    cache["a_hat"] = a_hat
    cache["graph_layers"] = []
    h = x
    for layer in range(2):
        ah = a_hat @ h
        z = ah @ p[f"g{layer}_W"] + p[f"g{layer}_b"]
        cache["graph_layers"].append({"ah": ah, "z": z})
        h = np.maximum(z, 0.0)
    graph_pool = h.max(axis=0)
    cache["graph_h"] = h
    cache["graph_argmax"] = h.argmax(axis=0)
    s_graph = float(p["graph_fc_w"] @ graph_pool + p["graph_fc_b"][0])
    cache["graph_pool"] = graph_pool

    cache["s_tree"] = s_tree
    cache["s_graph"] = s_graph
    emb = float(p["mix_w"][0] * s_tree + p["mix_w"][1] * s_graph + p["mix_b"][0])
    return emb, cache


def _backward(cache: dict, demb: float, w: ModelWeights,
              grads: dict[str, np.ndarray]) -> None:
    p = w.params
    s_tree, s_graph = cache["s_tree"], cache["s_graph"]
    grads["mix_w"][0] += demb * s_tree
    grads["mix_w"][1] += demb * s_graph
    grads["mix_b"][0] += demb
    ds_tree = demb * p["mix_w"][0]
    ds_graph = demb * p["mix_w"][1]

    # tree read-out
    grads["tree_fc_w"] += ds_tree * cache["tree_pool"]
    grads["tree_fc_b"][0] += ds_tree
    dpool = ds_tree * p["tree_fc_w"]
    dh = np.zeros_like(cache["tree_h"])
    cols = np.arange(dh.shape[1])
    np.add.at(dh, (cache["tree_argmax"], cols), dpool)
    for layer in range(2, -1, -1):
        lay = cache["tree_layers"][layer]
        dz = dh * (lay["z"] > 0.0)
        grads[f"tb{layer}_Wp"] += dz.T @ lay["h_in"]
        grads[f"tb{layer}_Wl"] += dz.T @ lay["hl"]
        grads[f"tb{layer}_Wr"] += dz.T @ lay["hr"]
        grads[f"tb{layer}_b"] += dz.sum(axis=0)
        if layer == 0:
            break
        n = lay["h_in"].shape[0]
        acc = np.zeros((n + 1, lay["h_in"].shape[1]))
        acc[:n] += dz @ p[f"tb{layer}_Wp"]
        np.add.at(acc, lay["lidx"], dz @ p[f"tb{layer}_Wl"])
        np.add.at(acc, lay["ridx"], dz @ p[f"tb{layer}_Wr"])
        dh = acc[:n]

    # graph read-out
    grads["graph_fc_w"] += ds_graph * cache["graph_pool"]
    grads["graph_fc_b"][0] += ds_graph
    dpool = ds_graph * p["graph_fc_w"]
    dh = np.zeros_like(cache["graph_h"])
    cols = np.arange(dh.shape[1])
    np.add.at(dh, (cache["graph_argmax"], cols), dpool)
    a_hat = cache["a_hat"]
    for layer in (1, 0):
        lay = cache["graph_layers"][layer]
        dz = dh * (lay["z"] > 0.0)
        grads[f"g{layer}_W"] += lay["ah"].T @ dz
        grads[f"g{layer}_b"] += dz.sum(axis=0)
        if layer == 0:
            break
        dh = a_hat @ (dz @ p[f"g{layer}_W"].T)


def embed(pf: PlanFeatures, w: ModelWeights) -> float:
    """Scalar plan score; lower should mean faster once trained."""
    emb, _ = _forward(pf, w)
    return emb


def compare(f_i: PlanFeatures, f_j: PlanFeatures, w: ModelWeights) -> float:
    """Probability that plan i beats plan j (same weights embed both sides)."""
    return _sigmoid(embed(f_j, w) - embed(f_i, w))


def zero_grads(w: ModelWeights) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in w.params.items()}


def loss_and_gradients(w: ModelWeights, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative log-likelihood over ``batch`` plus its parameter gradients."""
    if not batch:
        raise TrainingError("empty batch")
    # embed each distinct plan once; gradients accumulate linearly
    plans: dict[int, tuple[float, dict, float]] = {}  # id -> (emb, cache, demb)

    def fetch(pf: PlanFeatures) -> int:
        key = id(pf)
        if key not in plans:
            emb, cache = _forward(pf, w)
            plans[key] = [emb, cache, 0.0]
        return key

    total = 0.0
    scale = 1.0 / len(batch)
    for pair in batch:
        ki = fetch(pair.features_i)
        kj = fetch(pair.features_j)
        d = plans[kj][0] - plans[ki][0]
        total += float(np.logaddexp(0.0, d) - pair.label * d)
        g = (_sigmoid(d) - pair.label) * scale
        plans[kj][2] += g
        plans[ki][2] -= g

    grads = zero_grads(w)
    for emb_, cache, demb in plans.values():
        if demb != 0.0:
            _backward(cache, demb, w, grads)
    return total * scale, grads


def sgd_step(w: ModelWeights, grads: dict[str, np.ndarray], lr: float) -> None:
    for name, arr in w.params.items():
        arr -= lr * grads[name]


def train(pairs, hyper: TrainHyper, feature_config, callback=None,
          init: ModelWeights | None = None, *,
          loss_fn=None) -> ModelWeights:
    """SGD over shuffled mini-batches; deterministic under a fixed seed.

    ``feature_config`` supplies width/bounds/bitmap vocabularies so the
    weights file can refuse mismatched features at inference time.
    ``loss_fn(w, batch) -> (loss, grads)`` defaults to the pairwise
    comparison loss; the latency regressor swaps in a squared-error one.
    """
    if not pairs:
        raise TrainingError("no training pairs")
    compute = loss_fn if loss_fn is not None else loss_and_gradients
    w = init if init is not None else init_weights(
        feature_config.width, feature_config.bounds,
        tables=feature_config.tables, labels=feature_config.labels,
        seed=hyper.seed)
    rng = np.random.default_rng(hyper.seed + 1)
    n = len(pairs)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for bi, start in enumerate(range(0, n, hyper.batch)):
            batch = [pairs[k] for k in order[start:start + hyper.batch]]
            loss, grads = compute(w, batch)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss!r} at epoch {epoch}, batch {bi}",
                    epoch=epoch, batch=bi, loss=loss)
            sgd_step(w, grads, hyper.lr)
            epoch_loss += loss * len(batch)
        if callback is not None:
            callback(epoch, epoch_loss / n)
    return w


def mean_loss(w: ModelWeights, pairs) -> float:
    loss, _ = loss_and_gradients(w, list(pairs))
    return loss


def pairwise_accuracy(w: ModelWeights, pairs) -> float:
    """Fraction of pairs whose preferred side matches the label."""
    if not pairs:
        return 0.0
    hits = 0
    for pair in pairs:
        y_hat = compare(pair.features_i, pair.features_j, w)
        hits += int((y_hat > w.threshold) == bool(pair.label))
    return hits / len(pairs)


def rank_plans(features, w: ModelWeights) -> list[int]:
    """Candidate indices sorted by embedding score, ties by index."""
    scored = [(embed(pf, w), i) for i, pf in enumerate(features)]
    return [i for _, i in sorted(scored)]


def rank_and_select(space, features, w: ModelWeights):
    """The candidate with the lowest embedding score (ties -> lowest index)."""
    if len(space.candidates) != len(features):
        raise ModelError("one feature record per candidate required")
    best = rank_plans(features, w)[0]
    return space.candidates[best]


def gradient_check(w: ModelWeights, pairs, samples_per_param: int = 25,
                   eps: float = 1e-6, seed: int = 0, *,
                   loss_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients."""
    compute = loss_fn if loss_fn is not None else loss_and_gradients
    rng = np.random.default_rng(seed)
    _, grads = compute(w, pairs)
    worst = 0.0
    for name in sorted(w.params):
        arr = w.params[name]
        flat = arr.reshape(-1)
        k = min(samples_per_param, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        for idx in picks:
            original = flat[idx]
            flat[idx] = original + eps
            up, _ = compute(w, pairs)
            flat[idx] = original - eps
            down, _ = compute(w, pairs)
            flat[idx] = original
            fd = (up - down) / (2 * eps)
            g = grads[name].reshape(-1)[idx]
            scale = max(abs(fd), abs(g), 1e-8)
            worst = max(worst, abs(fd - g) / scale)
    return worst


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_weights(path: str, w: ModelWeights) -> None:
    doc = {
        "version": w.version, "width": w.width, "hidden": w.hidden,
        "threshold": w.threshold, "bounds": list(w.bounds),
        "tables": list(w.tables), "labels": list(w.labels),
        "params": {name: arr.tolist() for name, arr in sorted(w.params.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_weights(path: str, expect_width: int | None = None) -> ModelWeights:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != WEIGHTS_VERSION:
        raise ModelError(
            f"weights version {doc.get('version')!r} unsupported (want {WEIGHTS_VERSION})")
    width = int(doc["width"])
    if expect_width is not None and width != expect_width:
        raise ModelError(f"weights were trained for width {width}, need {expect_width}")
    params = {name: np.asarray(value, dtype=np.float64)
              for name, value in doc["params"].items()}
    w = ModelWeights(width=width, params=params,
                     bounds=(doc["bounds"][0], doc["bounds"][1]),
                     tables=tuple(doc["tables"]), labels=tuple(doc["labels"]),
                     hidden=int(doc["hidden"]), threshold=float(doc["threshold"]))
    hidden = w.hidden
    expected = {"tb0_Wp": (hidden, width), "tree_fc_w": (hidden,),
                "g0_W": (width, hidden), "mix_w": (2,)}
    for name, shape in expected.items():
        if name not in params or params[name].shape != shape:
            raise ModelError(f"weights file is inconsistent: {name} shape "
                             f"{params.get(name, np.zeros(0)).shape} != {shape}")
    for name, arr in params.items():
        if not np.isfinite(arr).all():
            raise ModelError(f"weights file holds non-finite values in {name}")
    return w
