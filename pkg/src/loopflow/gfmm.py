"""General fuzzy min-max classifier over hyperboxes in the unit cube.

Patterns are boxes ``[lower, upper]`` (points are degenerate boxes) with a
class label, 0 meaning unlabelled.  Training is online: each pattern either
expands the best compatible hyperbox within the size bound ``theta`` or seeds
a new one, and any overlap with a box of another class is removed by
contraction along a single dimension.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

UNLABELED = 0

# day periods (inclusive, 1-based hours) used by the two-level arrangement
DAY_PERIODS = ((1, 5), (6, 8), (9, 12), (13, 17), (18, 20), (21, 24))


class GFMMError(ValueError):
    pass


@dataclass(frozen=True)
class Pattern:
    lower: np.ndarray
    upper: np.ndarray
    label: int = UNLABELED

    def __post_init__(self) -> None:
        lo = np.asarray(self.lower, dtype=float)
        up = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)
        if lo.shape != up.shape:
            raise GFMMError("lower and upper have different sizes")
        if np.any(lo > up):
            raise GFMMError("lower exceeds upper")
        if np.any(lo < 0) or np.any(up > 1):
            raise GFMMError("pattern components must lie in [0, 1]")

    @classmethod
    def point(cls, x, label: int = UNLABELED) -> "Pattern":
        x = np.asarray(x, dtype=float)
        return cls(x, x.copy(), label)


@dataclass
class Hyperbox:
    V: np.ndarray
    W: np.ndarray
    label: int = UNLABELED

    @classmethod
    def empty(cls, dim: int, label: int = UNLABELED) -> "Hyperbox":
        return cls(np.ones(dim), np.zeros(dim), label)


def ramp(r, gamma):
    """Two-parameter ramp: 0 below 0, slope ``gamma``, saturating at 1."""
    return np.clip(np.asarray(r, dtype=float) * gamma, 0.0, 1.0)


def membership(box: Hyperbox, pattern: Pattern, gamma=4.0) -> float:
    """Degree to which ``pattern`` lies in ``box``; 1 iff contained."""
    if box.V.shape != pattern.lower.shape:
        raise GFMMError("dimension mismatch")
    g = np.broadcast_to(np.asarray(gamma, dtype=float), box.V.shape)
    above = 1.0 - ramp(pattern.upper - box.W, g)
    below = 1.0 - ramp(box.V - pattern.lower, g)
    return float(np.min(np.minimum(above, below)))


def memberships(V: np.ndarray, W: np.ndarray, lower: np.ndarray, upper: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Membership of one pattern in every box (rows of V, W)."""
    above = 1.0 - np.clip((upper - W) * gamma, 0.0, 1.0)
    below = 1.0 - np.clip((V - lower) * gamma, 0.0, 1.0)
    return np.min(np.minimum(above, below), axis=1)


# ---------------------------------------------------------------------------
# overlap and contraction


def _dim_overlap(vj, wj, vk, wk) -> np.ndarray:
    """Per-dimension overlap flags.

    Intervals overlap when their intersection has positive length, or when a
    degenerate one lies strictly inside the other.
    """
    lo = np.maximum(vj, vk)
    hi = np.minimum(wj, wk)
    j_in_k = (vj == wj) & (vk < vj) & (vj < wk)
    k_in_j = (vk == wk) & (vj < vk) & (vk < wj)
    return (lo < hi) | j_in_k | k_in_j


def overlaps(a: Hyperbox, b: Hyperbox) -> bool:
    return bool(np.all(_dim_overlap(a.V, a.W, b.V, b.W)))


def contract(j: Hyperbox, k: Hyperbox) -> int | None:
    """Remove the overlap of ``j`` (just expanded) and ``k`` along one dimension.

    Four interval configurations are distinguished per dimension; the
    dimension with the smallest overlap is adjusted.  Returns that dimension,
    or None when the boxes do not overlap.
    """
    if not overlaps(j, k):
        return None
    vj, wj, vk, wk = j.V, j.W, k.V, k.W
    N = len(vj)
    delta = np.full(N, np.inf)
    case = np.zeros(N, dtype=int)
    for i in range(N):
        if vj[i] <= vk[i] < wj[i] <= wk[i] and not (vj[i] == vk[i] and wj[i] == wk[i]):
            delta[i], case[i] = wj[i] - vk[i], 1
        elif vk[i] <= vj[i] < wk[i] <= wj[i] and not (vj[i] == vk[i] and wj[i] == wk[i]):
            delta[i], case[i] = wk[i] - vj[i], 2
        elif vj[i] <= vk[i] <= wk[i] <= wj[i]:
            delta[i], case[i] = min(wk[i] - vj[i], wj[i] - vk[i]), 3
        elif vk[i] <= vj[i] <= wj[i] <= wk[i]:
            delta[i], case[i] = min(wj[i] - vk[i], wk[i] - vj[i]), 4
    i = int(np.argmin(delta))
    c = case[i]
    if c == 1:
        mid = 0.5 * (wj[i] + vk[i])
        wj[i] = vk[i] = mid
    elif c == 2:
        mid = 0.5 * (vj[i] + wk[i])
        vj[i] = wk[i] = mid
    elif c == 3:
        if wk[i] - vj[i] < wj[i] - vk[i]:
            vj[i] = wk[i]
        else:
            wj[i] = vk[i]
    elif c == 4:
        if wk[i] - vj[i] < wj[i] - vk[i]:
            wk[i] = vj[i]
        else:
            vk[i] = wj[i]
    return i


# ---------------------------------------------------------------------------
# model


@dataclass
class TrainReport:
    epochs: int
    theta: float
    misclassified: int
    converged: bool
    theta_history: list = field(default_factory=list)

    @property
    def message(self) -> str:
        if self.converged:
            return f"no training misclassifications after {self.epochs} epoch(s), theta={self.theta:.4g}"
        return f"theta_min reached with {self.misclassified} training misclassifications (theta={self.theta:.4g})"


@dataclass
class GFMMModel:
    dim: int
    gamma: np.ndarray
    theta: float = 0.3
    theta_min: float = 0.01
    V: np.ndarray = None
    W: np.ndarray = None
    labels: np.ndarray = None
    class_names: dict = field(default_factory=dict)
    theta_history: list = field(default_factory=list)
    report: TrainReport | None = None

    def __post_init__(self) -> None:
        self.gamma = np.broadcast_to(np.asarray(self.gamma, dtype=float), (self.dim,)).copy()
        if self.V is None:
            self.V = np.zeros((0, self.dim))
            self.W = np.zeros((0, self.dim))
            self.labels = np.zeros(0, dtype=int)
        if not 0 < self.theta <= 1:
            raise GFMMError("theta must be in (0, 1]")

    @classmethod
    def create(cls, dim: int, gamma=4.0, theta: float = 0.3, theta_min: float = 0.01, class_names=None) -> "GFMMModel":
        return cls(dim, gamma, theta, theta_min, class_names=dict(class_names or {}))

    @property
    def n_boxes(self) -> int:
        return len(self.labels)

    @property
    def boxes(self) -> list[Hyperbox]:
        return [Hyperbox(self.V[i].copy(), self.W[i].copy(), int(self.labels[i])) for i in range(self.n_boxes)]

    @property
    def classes(self) -> list[int]:
        return sorted(set(int(c) for c in self.labels))

    @property
    def U(self) -> np.ndarray:
        """Box-to-class incidence, columns in ascending class order."""
        cls = self.classes
        U = np.zeros((self.n_boxes, len(cls)), dtype=int)
        for i, c in enumerate(self.labels):
            U[i, cls.index(int(c))] = 1
        return U

    def _check(self, p: Pattern) -> None:
        if p.lower.shape != (self.dim,):
            raise GFMMError(f"pattern has {p.lower.size} dimensions, model expects {self.dim}")

    # -- online learning ----------------------------------------------------

    def learn(self, p: Pattern, theta: float | None = None) -> int:
        """Present one pattern; returns the index of the box that took it."""
        self._check(p)
        theta = self.theta if theta is None else theta
        d = p.label
        if self.n_boxes:
            b = memberships(self.V, self.W, p.lower, p.upper, self.gamma)
            ok = np.ones(self.n_boxes, dtype=bool) if d == UNLABELED else (self.labels == d) | (self.labels == UNLABELED)
            # already inside a box of its class: nothing to do
            inside = ok & (b >= 1.0)
            if np.any(inside) and not self._inside_other(p, d):
                return int(np.flatnonzero(inside)[0])
            for j in sorted(np.flatnonzero(ok), key=lambda i: (-b[i], i)):
                size = np.max(np.maximum(self.W[j], p.upper) - np.minimum(self.V[j], p.lower))
                if size <= theta + 1e-12:
                    self.V[j] = np.minimum(self.V[j], p.lower)
                    self.W[j] = np.maximum(self.W[j], p.upper)
                    if self.labels[j] == UNLABELED:
                        self.labels[j] = d
                    self._resolve(j)
                    return j
        self.V = np.vstack([self.V, p.lower])
        self.W = np.vstack([self.W, p.upper])
        self.labels = np.append(self.labels, d)
        j = self.n_boxes - 1
        self._resolve(j)
        return j

    def _inside_other(self, p: Pattern, d: int) -> bool:
        other = (self.labels != d) & (self.labels != UNLABELED)
        if not np.any(other):
            return False
        b = memberships(self.V[other], self.W[other], p.lower, p.upper, self.gamma)
        return bool(np.any(b >= 1.0))

    def _resolve(self, j: int) -> None:
        if self.labels[j] == UNLABELED:
            return
        other = (self.labels != UNLABELED) & (self.labels != self.labels[j])
        hit = other & np.all(_dim_overlap(self.V[j], self.W[j], self.V, self.W), axis=1)
        for k in np.flatnonzero(hit):
            a = Hyperbox(self.V[j], self.W[j], self.labels[j])
            b = Hyperbox(self.V[k], self.W[k], self.labels[k])
            contract(a, b)  # edits the row views in place

    # -- classification -----------------------------------------------------

    def scores(self, lower, upper=None) -> dict[int, float]:
        if not self.n_boxes:
            raise GFMMError("model has no hyperboxes")
        lower = np.asarray(lower, dtype=float)
        upper = lower if upper is None else np.asarray(upper, dtype=float)
        if lower.shape != (self.dim,):
            raise GFMMError(f"pattern has {lower.size} dimensions, model expects {self.dim}")
        b = memberships(self.V, self.W, lower, upper, self.gamma)
        out: dict[int, float] = {}
        for c, v in zip(self.labels, b):
            c = int(c)
            if v > out.get(c, -1.0):
                out[c] = float(v)
        return out

    def classify(self, lower, upper=None, top_k: int | None = None) -> list[tuple[int, float]]:
        """Classes ranked by membership, ties by ascending class id."""
        ranked = sorted(self.scores(lower, upper).items(), key=lambda cv: (-cv[1], cv[0]))
        return ranked if top_k is None else ranked[:top_k]

    def predict(self, lower, upper=None) -> int:
        return self.classify(lower, upper, 1)[0][0]

    def is_ambiguous(self, lower, upper=None) -> bool:
        r = self.classify(lower, upper, 2)
        return len(r) > 1 and r[0][1] == r[1][1]

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "gamma": self.gamma.tolist(),
            "theta": self.theta,
            "theta_min": self.theta_min,
            "theta_history": list(self.theta_history),
            "V": self.V.tolist(),
            "W": self.W.tolist(),
            "labels": [int(c) for c in self.labels],
            "U": self.U.tolist(),
            "class_names": {str(k): v for k, v in self.class_names.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "GFMMModel":
        dim = int(data["dim"])
        m = cls(
            dim,
            data["gamma"],
            float(data["theta"]),
            float(data.get("theta_min", 0.01)),
            np.array(data["V"], dtype=float).reshape(-1, dim),
            np.array(data["W"], dtype=float).reshape(-1, dim),
            np.array(data["labels"], dtype=int),
            {int(k): v for k, v in data.get("class_names", {}).items()},
            list(data.get("theta_history", [])),
        )
        return m

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "GFMMModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def training_errors(model: GFMMModel, patterns: Sequence[Pattern]) -> int:
    return sum(1 for p in patterns if p.label != UNLABELED and model.predict(p.lower, p.upper) != p.label)


def train(
    model: GFMMModel,
    patterns: Sequence[Pattern],
    theta_start: float | None = None,
    theta_min: float | None = None,
    decay: float = 0.9,
    max_epochs: int = 100,
) -> GFMMModel:
    """Fit hyperboxes, shrinking theta until the training set is classified.

    Each epoch rebuilds the boxes from scratch with the current theta and
    presents the patterns in the given order.  The model returned carries a
    :class:`TrainReport`; if ``theta_min`` is reached with errors left it
    says so instead of raising.
    """
    for p in patterns:
        model._check(p)
    theta = model.theta if theta_start is None else theta_start
    theta_min = model.theta_min if theta_min is None else theta_min
    history = []
    errors = 0
    epoch = 0
    while True:
        epoch += 1
        model.V = np.zeros((0, model.dim))
        model.W = np.zeros((0, model.dim))
        model.labels = np.zeros(0, dtype=int)
        model.theta = theta
        for p in patterns:
            model.learn(p, theta)
        history.append(theta)
        errors = training_errors(model, patterns)
        if errors == 0 or epoch >= max_epochs or theta * decay < theta_min:
            break
        theta *= decay
    model.theta_history = history
    model.report = TrainReport(epoch, theta, errors, errors == 0, history)
    return model


# ---------------------------------------------------------------------------
# two-level arrangement


def period_of(hour: int, periods=DAY_PERIODS) -> int:
    """1-based index of the day period containing ``hour`` (1..24)."""
    for i, (a, b) in enumerate(periods, start=1):
        if a <= hour <= b:
            return i
    raise GFMMError(f"hour {hour} outside every period")


@dataclass
class TwoLevelResult:
    expert: int
    ranking: list
    ambiguous_routing: bool

    @property
    def label(self) -> int:
        return self.ranking[0][0]


def two_level_classify(
    level1: GFMMModel,
    experts: Mapping[int, GFMMModel],
    lower: np.ndarray,
    upper: np.ndarray,
    level1_dims: Sequence[int],
    level2_dims: Sequence[int],
) -> TwoLevelResult:
    """Route the pattern to one expert with ``level1`` and let it classify.

    Level 1 sees only ``level1_dims`` and its classes are expert ids; the
    chosen expert sees ``level2_dims``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    i1, i2 = list(level1_dims), list(level2_dims)
    if len(experts) == 1:
        eid = next(iter(experts))
        amb = False
    else:
        ranked = level1.classify(lower[i1], upper[i1])
        eid = ranked[0][0]
        amb = len(ranked) > 1 and ranked[0][1] == ranked[1][1]
    if eid not in experts:
        raise GFMMError(f"level 1 chose expert {eid}, which is not configured")
    return TwoLevelResult(eid, experts[eid].classify(lower[i2], upper[i2]), amb)


# ---------------------------------------------------------------------------
# synthetic sets


def synthetic_set(name: str, n: int = 200, seed: int = 0, width: float = 0.0) -> list[Pattern]:
    """Labelled 2-D sets: ``blobs`` (two Gaussian clusters), ``xor`` (four
    quadrant clusters, two classes), ``stripes`` (three vertical bands)."""
    rng = np.random.default_rng(seed)
    if name == "blobs":
        lab = rng.integers(1, 3, size=n)
        centres = {1: (0.3, 0.3), 2: (0.7, 0.65)}
        X = np.array([rng.normal(centres[c], 0.08) for c in lab])
    elif name == "xor":
        X = rng.uniform(0.05, 0.95, size=(n, 2))
        X = X[(np.abs(X[:, 0] - 0.5) > 0.05) & (np.abs(X[:, 1] - 0.5) > 0.05)]
        lab = np.where((X[:, 0] > 0.5) ^ (X[:, 1] > 0.5), 2, 1)
    elif name == "stripes":
        X = rng.uniform(0, 1, size=(n, 2))
        lab = np.minimum((X[:, 0] * 3).astype(int), 2) + 1
    else:
        raise GFMMError(f"unknown synthetic set {name!r}")
    X = np.clip(X, 0.0, 1.0)
    lo = np.clip(X - width, 0.0, 1.0)
    up = np.clip(X + width, 0.0, 1.0)
    return [Pattern(a, b, int(c)) for a, b, c in zip(lo, up, lab)]


SYNTHETIC_SETS = ("blobs", "xor", "stripes")
