"""Bite-acquisition learning: the 26-dim action schema, a synthetic expert
dataset, PAM k-medoids action library, and a linear-UCB bandit that selects on
visual context and updates with haptic features observable only after the
attempt (zero-padded at selection time, real at update time).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# name, lower, upper, unit. Grouped approach(8) / in-food(10) / extraction(8).
SCHEMA_FIELDS = [
    ("approach_offset_x", -0.05, 0.05, "m"),
    ("approach_offset_y", -0.05, 0.05, "m"),
    ("approach_offset_z", 0.02, 0.15, "m"),
    ("approach_pitch", -1.2, 1.2, "rad"),
    ("approach_roll", -1.2, 1.2, "rad"),
    ("approach_speed", 0.01, 0.15, "m/s"),
    ("fork_pitch_rate", -0.5, 0.5, "rad/s"),
    ("pre_contact_pause", 0.0, 1.0, "s"),
    ("penetration_depth", 0.0, 0.04, "m"),
    ("wiggle_amplitude", 0.0, 0.05, "rad"),
    ("wiggle_frequency", 0.0, 8.0, "Hz"),
    ("twirl_angle", 0.0, 6.2831853, "rad"),
    ("twirl_rate", 0.0, 3.0, "rad/s"),
    ("scoop_radius", 0.0, 0.06, "m"),
    ("scoop_arc", 0.0, 1.5707963, "rad"),
    ("in_food_duration", 0.1, 2.0, "s"),
    ("lateral_push_x", -0.03, 0.03, "m"),
    ("lateral_push_y", -0.03, 0.03, "m"),
    ("tilt_back_angle", 0.0, 1.0, "rad"),
    ("tilt_rate", 0.1, 2.0, "rad/s"),
    ("lift_height", 0.03, 0.15, "m"),
    ("lift_speed", 0.02, 0.2, "m/s"),
    ("exit_angle_x", -0.5, 0.5, "rad"),
    ("exit_angle_y", -0.5, 0.5, "rad"),
    ("post_exit_pause", 0.0, 0.5, "s"),
    ("retract_speed", 0.02, 0.2, "m/s"),
]
SCHEMA_DIM = len(SCHEMA_FIELDS)
SCHEMA_LO = np.array([f[1] for f in SCHEMA_FIELDS])
SCHEMA_HI = np.array([f[2] for f in SCHEMA_FIELDS])
_FIELD_INDEX = {f[0]: i for i, f in enumerate(SCHEMA_FIELDS)}

APPROACH_SLICE = slice(0, 8)
IN_FOOD_SLICE = slice(8, 18)
EXTRACTION_SLICE = slice(18, 26)

HAPTIC_DIM = 5
# z-scored haptic block scaled to unit expected norm so it cannot drown the
# visual features in the bandit's design matrix
HAPTIC_FEATURE_SCALE = 1.0 / np.sqrt(HAPTIC_DIM)
FT_SAMPLE_DT = 0.01
CONTACT_FORCE_EPS = 0.2  # N, same floor the interaction classifier uses


class KTooLarge(ValueError):
    pass


class EmptySeries(ValueError):
    pass


@dataclass
class SchemaAction:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(SCHEMA_DIM)
        if np.any(self.values < SCHEMA_LO - 1e-9) or np.any(self.values > SCHEMA_HI + 1e-9):
            bad = [SCHEMA_FIELDS[i][0] for i in range(SCHEMA_DIM)
                   if not SCHEMA_LO[i] - 1e-9 <= self.values[i] <= SCHEMA_HI[i] + 1e-9]
            raise ValueError(f"schema values out of bounds: {bad}")

    def __getitem__(self, name: str) -> float:
        return float(self.values[_FIELD_INDEX[name]])

    def approach(self) -> np.ndarray:
        return self.values[APPROACH_SLICE]

    def in_food(self) -> np.ndarray:
        return self.values[IN_FOOD_SLICE]

    def extraction(self) -> np.ndarray:
        return self.values[EXTRACTION_SLICE]


def normalize_schema(points: np.ndarray) -> np.ndarray:
    """Box-normalize schema vectors to [0,1] per dimension."""
    return (np.asarray(points, dtype=float) - SCHEMA_LO) / (SCHEMA_HI - SCHEMA_LO)


@dataclass
class TrajectoryDataset:
    points: np.ndarray            # (n, 26), all within schema bounds
    labels: list                  # food-class label per point

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != SCHEMA_DIM:
            raise ValueError("dataset must be (n, 26)")
        if np.any(self.points < SCHEMA_LO - 1e-9) or np.any(self.points > SCHEMA_HI + 1e-9):
            raise ValueError("dataset points must lie within schema bounds")
        if len(self.labels) != len(self.points):
            raise ValueError("one label per point")

    def __len__(self):
        return len(self.points)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.round(self.points, 9).tobytes())
        h.update("|".join(self.labels).encode())
        return h.hexdigest()[:16]

    def to_json(self) -> dict:
        return {"points": self.points.tolist(), "labels": list(self.labels)}

    @staticmethod
    def from_json(d: dict) -> "TrajectoryDataset":
        return TrajectoryDataset(np.asarray(d["points"]), list(d["labels"]))


# Technique modes for the synthetic expert distribution: mean in normalized
# box coordinates + per-dim spread. Three modes cover skewer / scoop / twirl.
_TECHNIQUE_MODES = {
    "skewer": {"mean": {"approach_offset_z": 0.7, "approach_pitch": 0.5, "approach_speed": 0.6,
                        "penetration_depth": 0.8, "wiggle_amplitude": 0.5, "wiggle_frequency": 0.5,
                        "tilt_back_angle": 0.3, "lift_height": 0.5, "lift_speed": 0.5},
               "label": "banana-slice"},
    "scoop": {"mean": {"approach_offset_z": 0.4, "approach_pitch": 0.8, "scoop_radius": 0.7,
                       "scoop_arc": 0.7, "penetration_depth": 0.4, "tilt_back_angle": 0.8,
                       "lift_height": 0.4, "in_food_duration": 0.6},
              "label": "mashed-potato"},
    "twirl": {"mean": {"approach_offset_z": 0.5, "twirl_angle": 0.8, "twirl_rate": 0.7,
                       "penetration_depth": 0.6, "in_food_duration": 0.8, "wiggle_frequency": 0.3},
              "label": "noodles"},
}


def generate_expert_dataset(n: int = 500, seed: int = 7) -> TrajectoryDataset:
    """Mixture of per-technique Gaussians in normalized schema space, clipped
    to the box. Stands in for the human demonstration corpus."""
    rng = np.random.default_rng(seed)
    modes = list(_TECHNIQUE_MODES.items())
    points, labels = [], []
    for i in range(n):
        name, mode = modes[i % len(modes)]
        center = np.full(SCHEMA_DIM, 0.5)
        for fname, v in mode["mean"].items():
            center[_FIELD_INDEX[fname]] = v
        u = np.clip(rng.normal(center, 0.12), 0.0, 1.0)
        points.append(SCHEMA_LO + u * (SCHEMA_HI - SCHEMA_LO))
        labels.append(mode["label"])
    return TrajectoryDataset(np.array(points), labels)


# -- k-medoids (PAM) ---------------------------------------------------------

@dataclass
class PamResult:
    medoid_indices: list
    total_cost: float
    cost_trace: list              # cost after build, then after each swap


def _greedy_build(D: np.ndarray, k: int) -> list:
    """First medoid minimizes total distance; the rest maximize marginal gain."""
    medoids = [int(np.argmin(D.sum(axis=0)))]
    nearest = D[:, medoids[0]].copy()
    while len(medoids) < k:
        gains = np.maximum(0.0, nearest[:, None] - D).sum(axis=0)
        gains[medoids] = -1.0
        c = int(np.argmax(gains))
        medoids.append(c)
        nearest = np.minimum(nearest, D[:, c])
    return medoids


def _swap_until_local_optimum(D: np.ndarray, medoids: list) -> tuple:
    """Apply the single best cost-reducing (medoid, candidate) exchange until
    none remains. Returns (medoids, cost, per-iteration cost trace)."""
    n = D.shape[0]

    def total_cost(meds):
        return float(D[:, meds].min(axis=1).sum())

    medoids = list(medoids)
    cost = total_cost(medoids)
    trace = [cost]
    while True:
        med_cols = D[:, medoids]                       # (n, k)
        order = np.argsort(med_cols, axis=1, kind="stable")
        nearest_dist = med_cols[np.arange(n), order[:, 0]]
        second_dist = (med_cols[np.arange(n), order[:, 1]]
                       if len(medoids) > 1 else np.full(n, np.inf))
        nearest_med = np.array(medoids)[order[:, 0]]

        best = (0.0, None, None)                       # (improvement, m_pos, candidate)
        others = np.array([j for j in range(n) if j not in medoids])
        if len(others) == 0:
            break
        D_others = D[:, others]                        # (n, |others|)
        for pos, m in enumerate(medoids):
            base = np.where(nearest_med == m, second_dist, nearest_dist)
            new_costs = np.minimum(base[:, None], D_others).sum(axis=0)
            ci = int(np.argmin(new_costs))
            improvement = cost - float(new_costs[ci])
            if improvement > best[0] + 1e-12:
                best = (improvement, pos, int(others[ci]))
        if best[1] is None:
            break
        medoids[best[1]] = best[2]
        cost = total_cost(medoids)
        trace.append(cost)
    return medoids, cost, trace


def pam(points: np.ndarray, k: int, seed: int = 0, restarts: int = 4) -> PamResult:
    """Greedy BUILD then best-improvement SWAP on Euclidean distances, with a
    few seeded random-init restarts to escape shallow local optima. The greedy
    run wins ties; all other ties break toward the lowest index."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if n == 0:
        raise ValueError("dataset is empty")
    if k > n:
        raise KTooLarge(f"k={k} exceeds dataset size {n}")

    diff = points[:, None, :] - points[None, :, :]
    D = np.sqrt((diff ** 2).sum(axis=2))

    meds, cost, trace = _swap_until_local_optimum(D, _greedy_build(D, k))
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        init = rng.choice(n, size=k, replace=False).tolist()
        m2, c2, t2 = _swap_until_local_optimum(D, init)
        if c2 < cost - 1e-12:
            meds, cost, trace = m2, c2, t2

    ordered = sorted(meds)
    return PamResult(ordered, float(D[:, ordered].min(axis=1).sum()), trace)


@dataclass
class ActionLibrary:
    medoids: list                  # SchemaAction entries
    medoid_indices: list           # row indices into the source dataset
    provenance: dict               # dataset hash, k, seed

    def __post_init__(self):
        if len(self.medoids) != len(self.medoid_indices):
            raise ValueError("medoid/index length mismatch")

    def __len__(self):
        return len(self.medoids)

    def as_array(self) -> np.ndarray:
        return np.array([m.values for m in self.medoids])

    def nearest_index(self, action: SchemaAction) -> int:
        if not hasattr(self, "_normalized"):
            self._normalized = normalize_schema(self.as_array())
        x = normalize_schema(action.values[None, :])[0]
        return int(np.argmin(np.linalg.norm(self._normalized - x, axis=1)))

    def to_json(self) -> dict:
        return {"medoids": [m.values.tolist() for m in self.medoids],
                "medoid_indices": self.medoid_indices,
                "provenance": self.provenance}

    @staticmethod
    def from_json(d: dict) -> "ActionLibrary":
        return ActionLibrary([SchemaAction(np.asarray(v)) for v in d["medoids"]],
                             list(d["medoid_indices"]), dict(d["provenance"]))


def k_medoids(data: TrajectoryDataset, k: int = 11, seed: int = 0) -> ActionLibrary:
    """Cluster the expert dataset into k representative actions. The seed is
    recorded for provenance; the algorithm itself is deterministic."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if k > len(data):
        raise KTooLarge(f"k={k} exceeds dataset size {len(data)}")
    result = pam(normalize_schema(data.points), k, seed=seed)
    medoids = [SchemaAction(data.points[i].copy()) for i in result.medoid_indices]
    return ActionLibrary(
        medoids=medoids,
        medoid_indices=result.medoid_indices,
        provenance={"dataset_hash": data.content_hash(), "k": k, "seed": seed,
                    "total_cost": result.total_cost},
    )


# -- contexts ------------------------------------------------------------------

@dataclass
class VisualContext:
    """Pre-attempt features: food-class one-hot ++ extents ++ resistance ++ bias."""
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("visual context must be finite")

    @staticmethod
    def build(food_classes: list, food_class: str, size: np.ndarray, resistance: float) -> "VisualContext":
        onehot = np.zeros(len(food_classes))
        if food_class in food_classes:
            onehot[food_classes.index(food_class)] = 1.0
        extents = np.asarray(size, dtype=float) / 0.05
        raw = np.concatenate([onehot, extents, [resistance / 500.0], [1.0]])
        return VisualContext(raw / np.linalg.norm(raw))


class RunningMoments:
    """Welford accumulator for z-scoring haptic features across attempts."""

    def __init__(self, dim: int = HAPTIC_DIM):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.sqrt(np.maximum(self.m2 / (self.count - 1), 1e-12))

    def zscore(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std()

    def to_json(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @staticmethod
    def from_json(d: dict) -> "RunningMoments":
        m = RunningMoments(len(d["mean"]))
        m.count = d["count"]
        m.mean = np.asarray(d["mean"])
        m.m2 = np.asarray(d["m2"])
        return m


@dataclass
class HapticContext:
    vector: np.ndarray            # z-scored (peak_f, mean_f, peak_tau, impulse, duration)
    raw: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float).reshape(HAPTIC_DIM)
        self.raw = np.asarray(self.raw, dtype=float).reshape(HAPTIC_DIM)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("haptic context must be finite")


def haptic_features(ft_series: list) -> np.ndarray:
    """Raw post-attempt statistics from an F/T series."""
    if not ft_series:
        raise EmptySeries("need at least one reading")
    f_norms = np.array([r.force_norm() for r in ft_series])
    tau_norms = np.array([r.torque_norm() for r in ft_series])
    times = np.sort(np.array([r.timestamp for r in ft_series]))
    if len(times) > 1:
        diffs = np.diff(times)
        positive = diffs[diffs > 1e-12]
        dt = float(np.median(positive)) if len(positive) else FT_SAMPLE_DT
    else:
        dt = FT_SAMPLE_DT
    return np.array([
        float(f_norms.max()),
        float(f_norms.mean()),
        float(tau_norms.max()),
        float(f_norms.sum() * dt),
        float((f_norms > CONTACT_FORCE_EPS).sum() * dt),
    ])


def compute_posthoc_context(ft_series: list, moments: Optional[RunningMoments] = None,
                            update: bool = True) -> HapticContext:
    """Post-hoc haptic context, z-scored by the running dataset moments."""
    raw = haptic_features(ft_series)
    if moments is None:
        return HapticContext(raw.copy(), raw)
    if update:
        moments.update(raw)
    return HapticContext(moments.zscore(raw), raw)


# -- bandit --------------------------------------------------------------------

class BanditState:
    """Per-arm linear reward model over [visual ; haptic] features. Selection
    zero-pads the haptic slots (they are unobservable before acting); updates
    use the realized haptic vector."""

    def __init__(self, n_arms: int, visual_dim: int, alpha: float = 0.5):
        self.n_arms = n_arms
        self.visual_dim = visual_dim
        self.dim = visual_dim + HAPTIC_DIM
        self.alpha = alpha
        self.A = np.stack([np.eye(self.dim) for _ in range(n_arms)])
        self.b = np.zeros((n_arms, self.dim))
        self.attempts = 0
        self.pulls = np.zeros(n_arms, dtype=int)

    def _scores(self, x: np.ndarray) -> np.ndarray:
        scores = np.empty(self.n_arms)
        for a in range(self.n_arms):
            theta = np.linalg.solve(self.A[a], self.b[a])
            spread = float(x @ np.linalg.solve(self.A[a], x))
            scores[a] = float(theta @ x) + self.alpha * np.sqrt(max(spread, 0.0))
        return scores

    def padded(self, visual: VisualContext) -> np.ndarray:
        return np.concatenate([visual.vector, np.zeros(HAPTIC_DIM)])


def select_action(bandit: BanditState, ctx: VisualContext) -> int:
    """UCB argmax over arms; ties go to the lowest index."""
    x = bandit.padded(ctx)
    if len(x) != bandit.dim:
        raise ValueError(f"context dim {len(x)} != bandit dim {bandit.dim}")
    return int(np.argmax(bandit._scores(x)))


def update_bandit(bandit: BanditState, arm: int, visual: VisualContext,
                  haptic: HapticContext, reward: float) -> BanditState:
    if not 0 <= arm < bandit.n_arms:
        raise ValueError(f"arm {arm} out of range")
    if reward not in (0, 1, 0.0, 1.0):
        raise ValueError("reward must be binary")
    x = np.concatenate([visual.vector, HAPTIC_FEATURE_SCALE * haptic.vector])
    if len(x) != bandit.dim:
        raise ValueError("update context dimension mismatch")
    bandit.A[arm] += np.outer(x, x)
    bandit.b[arm] += reward * x
    bandit.attempts += 1
    bandit.pulls[arm] += 1
    return bandit


def bandit_to_json(bandit: BanditState) -> dict:
    return {"n_arms": bandit.n_arms, "visual_dim": bandit.visual_dim,
            "alpha": bandit.alpha, "A": bandit.A.tolist(), "b": bandit.b.tolist(),
            "attempts": bandit.attempts, "pulls": bandit.pulls.tolist()}


def bandit_from_json(d: dict) -> BanditState:
    bandit = BanditState(d["n_arms"], d["visual_dim"], d["alpha"])
    bandit.A = np.asarray(d["A"])
    bandit.b = np.asarray(d["b"])
    bandit.attempts = d["attempts"]
    bandit.pulls = np.asarray(d["pulls"], dtype=int)
    return bandit


# -- fast attempt oracle ---------------------------------------------------------

def synthetic_ft_series(action: SchemaAction, resistance: float, seed: int) -> list:
    """F/T trace consistent with the in-food parameters: force rises to
    resistance * depth, ripples with the wiggle, then releases."""
    from .sensors import ForceTorqueReading

    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 17]))
    duration = max(action["in_food_duration"], 0.1)
    n = min(max(int(duration / FT_SAMPLE_DT), 3), 50)
    dt = duration / n
    peak = resistance * action["penetration_depth"]
    ripple = 0.15 * peak * (action["wiggle_amplitude"] / 0.05)
    noise = rng.normal(0.0, 0.02, n)
    series = []
    for i in range(n):
        t = i * dt
        envelope = np.sin(np.pi * min(1.0, t / duration))
        mag = peak * envelope + ripple * np.sin(2 * np.pi * action["wiggle_frequency"] * t)
        mag = max(0.0, mag + noise[i])
        f = np.array([0.1 * mag, 0.0, -mag])
        series.append(ForceTorqueReading(f, np.cross([0, 0, 0.12], f), t, i + 1))
    return series


def simulate_acquisition(action: SchemaAction, food, seed: int,
                         library: ActionLibrary):
    """Fast attempt oracle: Bernoulli success from the food's hidden per-arm
    probability at the nearest library action, plus a synthetic F/T trace."""
    arm = library.nearest_index(action)
    p = float(food.ground_truth_success.get(arm, 0.5))
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 23]))
    reward = int(rng.random() < p)
    series = synthetic_ft_series(action, food.resistance, seed)
    return reward, series


def bandit_rollout(library: ActionLibrary, food, food_classes: list, alpha: float,
                   attempts: int, seed: int):
    """Closed-loop select/attempt/update episode against the fast oracle.
    Returns the per-attempt (arm, reward) trace."""
    visual = VisualContext.build(food_classes, food.food_class, food.size, food.resistance)
    bandit = BanditState(len(library), len(visual.vector), alpha)
    moments = RunningMoments()
    trace = []
    for t in range(attempts):
        arm = select_action(bandit, visual)
        reward, series = simulate_acquisition(library.medoids[arm], food,
                                              seed * 100003 + t, library)
        haptic = compute_posthoc_context(series, moments)
        update_bandit(bandit, arm, visual, haptic, reward)
        trace.append((arm, reward))
    return trace, bandit
