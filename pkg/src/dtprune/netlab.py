"""Dense networks with mask sites, losses, score conventions and toy data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diffcalc as dc

SITE_KINDS = ("none", "structured", "unstructured")
DATASET_KINDS = ("two-gaussians", "concentric-rings", "xor-grid")


class DataError(ValueError):
    pass


@dataclass
class DenseLayer:
    """``y = W x + b`` with ``W`` of shape (out, in).

    ``site`` says where a learned mask attaches: one entry per output unit
    (structured), one per weight (unstructured), or nowhere. ``fixed_mask``
    is a permanent 0/1 weight pattern left behind by unstructured pruning.
    """

    weights: np.ndarray
    bias: np.ndarray
    site: str = "none"
    fixed_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float)
        self.bias = np.array(self.bias, dtype=float)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes {self.weights.shape} / {self.bias.shape}"
            )
        if self.site not in SITE_KINDS:
            raise ValueError(f"unknown mask site kind {self.site!r}")
        if self.fixed_mask is not None:
            self.fixed_mask = np.array(self.fixed_mask, dtype=float)
            if self.fixed_mask.shape != self.weights.shape:
                raise ValueError("fixed mask does not match weights")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def site_size(self) -> int:
        if self.site == "structured":
            return self.n_out
        if self.site == "unstructured":
            return self.weights.size
        return 0

    def copy(self) -> "DenseLayer":
        return DenseLayer(
            self.weights.copy(),
            self.bias.copy(),
            self.site,
            None if self.fixed_mask is None else self.fixed_mask.copy(),
        )


@dataclass
class Network:
    """A ReLU MLP. ``scores`` maps a structured site's layer index to its scores."""

    layers: List[DenseLayer]
    scores: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ValueError(f"layer shapes do not compose: {prev.n_out} -> {nxt.n_in}")
        for idx, s in self.scores.items():
            layer = self.layers[idx]
            if layer.site != "structured" or np.shape(s) != (layer.n_out,):
                raise ValueError(f"score vector for layer {idx} does not match its site")

    @property
    def sites(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.site != "none"]

    def copy(self) -> "Network":
        return Network([l.copy() for l in self.layers],
                       {i: s.copy() for i, s in self.scores.items()})

    def parameter_count(self) -> int:
        total = 0
        for layer in self.layers:
            weights = layer.weights.size
            if layer.fixed_mask is not None:
                weights = int(np.count_nonzero(layer.fixed_mask))
            total += weights + layer.bias.size
        return total


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.array(self.features, dtype=float)
        self.labels = np.array(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DataError("features and labels disagree on row count")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be non-negative class ids")

    def __len__(self):
        return self.labels.size

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index])


# --- construction -----------------------------------------------------------


def mlp(sizes: Sequence[int], seed: int = 0, mode: str = "structured",
        mask_first: bool = False) -> Network:
    """He-initialised MLP with mask sites attached per ``mode``.

    Structured sites go on hidden layers only (never the logit layer, and
    the first layer only with ``mask_first``); unstructured sites go on every
    layer. Structured scores start at the row L2 norms.
    """
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    layers = []
    n_layers = len(sizes) - 1
    for j, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_out, n_in))
        site = "none"
        if mode == "unstructured":
            site = "unstructured"
        elif mode == "structured" and j < n_layers - 1 and (j > 0 or mask_first):
            site = "structured"
        elif mode not in ("structured", "none"):
            raise ValueError(f"unknown pruning mode {mode!r}")
        layers.append(DenseLayer(w, np.zeros(n_out), site))
    net = Network(layers)
    reset_scores(net)
    return net


def reset_scores(net: Network) -> None:
    """(Re)initialise structured scores from the current weights."""
    net.scores = {
        i: init_scores_structured(layer)
        for i, layer in enumerate(net.layers)
        if layer.site == "structured"
    }


def init_scores_structured(layer: DenseLayer) -> np.ndarray:
    return np.sqrt(np.sum(layer.weights**2, axis=1))


def scores_unstructured(weights):
    """Weight magnitudes, flattened row-major. Tied to ``weights`` on the tape."""
    return dc.absolute(dc.reshape(weights, (-1,)))


# --- forward ----------------------------------------------------------------


def forward_masked(net: Network, features, masks: Optional[Dict[int, object]] = None,
                   params: Optional[Sequence[tuple]] = None):
    """Logits of ``net`` on ``features`` with soft or hard masks applied.

    ``masks`` maps a site's layer index to its mask vector (array or node);
    sites without an entry run unmasked. ``params`` optionally overrides the
    (weights, bias) pairs, e.g. with tape variables.
    """
    masks = masks or {}
    if params is None:
        params = [(l.weights, l.bias) for l in net.layers]
    h = features
    last = len(net.layers) - 1
    for j, (layer, (w, b)) in enumerate(zip(net.layers, params)):
        if layer.fixed_mask is not None:
            w = w * layer.fixed_mask
        mask = masks.get(j)
        if mask is not None and layer.site == "unstructured":
            if np.shape(dc.value_of(mask)) != (layer.weights.size,):
                raise ValueError(f"mask for layer {j} has wrong length")
            w = w * dc.reshape(mask, layer.weights.shape)
        z = dc.matmul(h, dc.transpose(w)) + b
        if mask is not None and layer.site == "structured":
            if np.shape(dc.value_of(mask)) != (layer.n_out,):
                raise ValueError(f"mask for layer {j} has wrong length")
            z = z * mask
        elif mask is not None and layer.site == "none":
            raise ValueError(f"layer {j} has no mask site")
        h = dc.relu(z) if j < last else z
    return h


def cross_entropy_loss(logits, labels):
    return dc.softmax_cross_entropy(logits, labels)


def predict(net: Network, features, masks=None) -> np.ndarray:
    return np.argmax(dc.value_of(forward_masked(net, features, masks)), axis=1)


def accuracy(net: Network, data: Dataset, masks=None) -> float:
    return float(np.mean(predict(net, data.features, masks) == data.labels))


def remove_units(net: Network, layer_index: int, keep: Sequence[int]) -> Network:
    """Physically drop output units of one layer and the matching next-layer inputs."""
    keep = np.asarray(sorted(keep), dtype=int)
    out = net.copy()
    layer = out.layers[layer_index]
    layer.weights = layer.weights[keep]
    layer.bias = layer.bias[keep]
    if layer.fixed_mask is not None:
        layer.fixed_mask = layer.fixed_mask[keep]
    if layer_index + 1 < len(out.layers):
        nxt = out.layers[layer_index + 1]
        nxt.weights = nxt.weights[:, keep]
        if nxt.fixed_mask is not None:
            nxt.fixed_mask = nxt.fixed_mask[:, keep]
    if layer_index in out.scores:
        out.scores[layer_index] = out.scores[layer_index][keep]
    return out


# --- toy data ---------------------------------------------------------------


def make_toy_dataset(kind: str, n_samples: int, seed: int = 0,
                     noise: float = 0.1, classes: int = 2) -> Dataset:
    """Two-dimensional classification problems.

    ``concentric-rings`` and ``xor-grid`` are not linearly separable.
    ``noise`` scales the radial jitter of the rings and the spread of the
    gaussians; xor-grid labels are exact. ``classes`` sets the number of
    rings (class ``c`` has radius ``c + 1``); the other kinds are binary.
    """
    if n_samples < 4:
        raise ValueError("n_samples must be >= 4")
    if classes < 2 or (classes != 2 and kind != "concentric-rings"):
        raise ValueError(f"{kind} supports only two classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % classes
    rng.shuffle(labels)
    if kind == "two-gaussians":
        centers = np.array([[-1.0, 0.0], [1.0, 0.0]])
        x = centers[labels] + rng.normal(0.0, 0.5 + noise, size=(n_samples, 2))
    elif kind == "concentric-rings":
        radius = labels + 1.0 + rng.normal(0.0, noise, n_samples)
        angle = rng.uniform(0.0, 2.0 * math.pi, n_samples)
        x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    elif kind == "xor-grid":
        x = rng.uniform(-1.0, 1.0, size=(n_samples, 2))
        labels = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(np.int64)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return Dataset(x, labels)


def load_csv(path) -> Dataset:
    """Read a dataset whose last column is an integer ``label``."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if not rows or rows[0][-1].strip() != "label":
        raise DataError(f"{path}: header must end with a 'label' column")
    body = [r for r in rows[1:] if r]
    if not body:
        raise DataError(f"{path}: no data rows")
    try:
        features = np.array([[float(v) for v in r[:-1]] for r in body])
        labels = np.array([int(r[-1]) for r in body])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if features.shape[1] != len(rows[0]) - 1:
        raise DataError(f"{path}: ragged rows")
    return Dataset(features, labels)


def save_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(data.features.shape[1])] + ["label"])
        for row, label in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


# --- checkpoints ------------------------------------------------------------


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).reshape(-1)]


def network_to_dict(net: Network) -> dict:
    layers = []
    for i, layer in enumerate(net.layers):
        entry = {
            "shape": list(layer.weights.shape),
            "site": layer.site,
            "weights": _floats(layer.weights),
            "bias": _floats(layer.bias),
        }
        if layer.fixed_mask is not None:
            entry["fixed_mask"] = _floats(layer.fixed_mask)
        if i in net.scores:
            entry["scores"] = _floats(net.scores[i])
        layers.append(entry)
    return {"layers": layers}


def network_from_dict(blob: dict) -> Network:
    layers, scores = [], {}
    for i, entry in enumerate(blob["layers"]):
        shape = tuple(entry["shape"])
        fixed = entry.get("fixed_mask")
        layers.append(DenseLayer(
            np.array(entry["weights"]).reshape(shape),
            np.array(entry["bias"]),
            entry["site"],
            None if fixed is None else np.array(fixed).reshape(shape),
        ))
        if "scores" in entry:
            scores[i] = np.array(entry["scores"])
    return Network(layers, scores)


def save_checkpoint(path, net: Network, states: Optional[list] = None,
                    extra: Optional[dict] = None) -> None:
    """Write network and pruner state as JSON (floats round-trip exactly)."""
    blob = {"network": network_to_dict(net)}
    if states is not None:
        blob["pruner_states"] = [
            {
                "epsilon": st.epsilon,
                "step": st.step,
                "n": st.marginals.n,
                "k": st.marginals.k,
                "g": _floats(st.g),
                "log_plan": _floats(dc.value_of(st.plan.log_mass)),
            }
            for st in states
        ]
    if extra:
        blob["extra"] = extra
    Path(path).write_text(json.dumps(blob, indent=1))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(network, states, extra)``."""
    from .ot_core import MarginalPair, PrunerState, TransportPlan

    blob = json.loads(Path(path).read_text())
    net = network_from_dict(blob["network"])
    states = None
    if "pruner_states" in blob:
        states = [
            PrunerState(
                epsilon=s["epsilon"],
                marginals=MarginalPair(s["n"], s["k"]),
                plan=TransportPlan(np.array(s["log_plan"]).reshape(s["n"], 2)),
                g=np.array(s["g"]),
                step=s["step"],
            )
            for s in blob["pruner_states"]
        ]
    return net, states, blob.get("extra", {})
