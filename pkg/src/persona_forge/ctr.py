"""Per-item L1 logistic CTR models over persona feature modes c/s/h/-."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .features import CharacterizationMatrix
from .ingest import RecordSet
from .mixture import KMeansModel, MixtureModel, hard_labels, soft_features

log = logging.getLogger(__name__)

CTR_CHARACTERIZATIONS = ("CR", "DG", "ME")  # order mirrors the tradeoff table
MODES = ("c", "s", "h", "-")


class CtrError(Exception):
    pass


@dataclass(frozen=True)
class FeatureModeRecipe:
    """Per-characterization feature mode: counts, soft distances, hard split,
    or omitted."""
    modes: dict[str, str]

    def __post_init__(self):
        unknown = set(self.modes) - set(CTR_CHARACTERIZATIONS)
        if unknown:
            raise CtrError(f"unknown characterizations {sorted(unknown)}")
        bad = {ch: m for ch, m in self.modes.items() if m not in MODES}
        if bad:
            raise CtrError(f"unknown modes {bad}")
        if sum(1 for m in self.modes.values() if m == "h") > 1:
            raise CtrError("at most one characterization may use mode 'h'")

    def mode(self, ch: str) -> str:
        return self.modes.get(ch, "-")

    @property
    def hard_characterization(self) -> str | None:
        for ch, m in self.modes.items():
            if m == "h":
                return ch
        return None

    def name(self) -> str:
        return ",".join(self.mode(ch) for ch in CTR_CHARACTERIZATIONS)


@dataclass
class UserPersonaFeatures:
    """Per-user pooled characterization vectors plus fitted-model summaries."""
    users: list[str]
    raw: dict[str, np.ndarray]    # ch -> (n_users, d) pooled counts/amounts
    soft: dict[str, np.ndarray]   # ch -> (n_users, K) center distances
    hard: dict[str, np.ndarray]   # ch -> (n_users,) hard labels
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {u: i for i, u in enumerate(self.users)}


def persona_features(matrices: dict[str, CharacterizationMatrix],
                     models: dict[str, MixtureModel | KMeansModel]
                     ) -> UserPersonaFeatures:
    """Pool each user's months and compute soft/hard persona summaries."""
    users: list[str] | None = None
    raw: dict[str, np.ndarray] = {}
    soft: dict[str, np.ndarray] = {}
    hard: dict[str, np.ndarray] = {}
    for ch in CTR_CHARACTERIZATIONS:
        cm = matrices[ch]
        pooled: dict[str, np.ndarray] = {}
        for (user, _), row in zip(cm.keys, cm.values):
            acc = pooled.get(user)
            if acc is None:
                pooled[user] = row.copy()
            else:
                acc += row
        ch_users = sorted(pooled)
        if users is None:
            users = ch_users
        elif users != ch_users:
            raise CtrError("characterization matrices cover different users")
        X = np.stack([pooled[u] for u in ch_users])
        raw[ch] = X
        model = models[ch]
        soft[ch] = soft_features(model, X)
        hard[ch] = hard_labels(model, X)
    return UserPersonaFeatures(users or [], raw, soft, hard)


def feature_layout(recipe: FeatureModeRecipe,
                   features: UserPersonaFeatures) -> list[tuple[str, str, int]]:
    """(characterization, mode, width) blocks in table column order."""
    layout = []
    for ch in CTR_CHARACTERIZATIONS:
        mode = recipe.mode(ch)
        if mode == "c":
            width = features.raw[ch].shape[1]
        elif mode == "s":
            width = features.soft[ch].shape[1]
        else:  # "h" partitions rows, "-" omits: neither adds columns
            width = 0
        layout.append((ch, mode, width))
    return layout


def _assemble(features: UserPersonaFeatures, recipe: FeatureModeRecipe,
              user_rows: np.ndarray) -> np.ndarray:
    blocks = []
    for ch in CTR_CHARACTERIZATIONS:
        mode = recipe.mode(ch)
        if mode == "c":
            blocks.append(features.raw[ch][user_rows])
        elif mode == "s":
            blocks.append(features.soft[ch][user_rows])
    if not blocks:
        return np.zeros((len(user_rows), 0))
    return np.concatenate(blocks, axis=1)


@dataclass
class CtrDataset:
    item_id: str
    X: np.ndarray
    y: np.ndarray
    users: list[str]
    hard: np.ndarray | None         # partition labels when recipe uses 'h'
    negatives_short: bool = False   # fewer eligible negatives than requested


def item_user_sets(rs: RecordSet) -> dict[str, set[str]]:
    table: dict[str, set[str]] = {}
    for r in rs.records:
        table.setdefault(r.content_id, set()).add(r.user_id)
    return table


def build_dataset(rs: RecordSet | dict[str, set[str]],
                  features: UserPersonaFeatures, recipe: FeatureModeRecipe,
                  item_id: str, neg_ratio: int = 5, seed: int = 0,
                  eligible_users: list[str] | None = None) -> CtrDataset:
    """Labeled per-item rows: transacting users plus sampled non-transactors.

    `eligible_users` restricts both classes (e.g. to a train or test split);
    negatives are sampled uniformly without replacement.
    """
    if neg_ratio < 1:
        raise CtrError("neg_ratio must be at least 1")
    items = rs if isinstance(rs, dict) else item_user_sets(rs)
    if item_id not in items:
        raise CtrError(f"item {item_id!r} has no transactions")
    universe = eligible_users if eligible_users is not None else features.users
    universe = [u for u in universe if u in features.index]
    positives = sorted(u for u in universe if u in items[item_id])
    candidates = sorted(u for u in universe if u not in items[item_id])
    wanted = neg_ratio * len(positives)
    rng = np.random.default_rng(seed)
    short = wanted > len(candidates)
    if short:
        negatives = candidates
        log.debug("item %s: only %d of %d requested negatives", item_id,
                  len(candidates), wanted)
    else:
        pick = rng.choice(len(candidates), size=wanted, replace=False)
        negatives = [candidates[i] for i in sorted(pick)]
    users = positives + negatives
    rows = np.array([features.index[u] for u in users], dtype=np.int64)
    X = _assemble(features, recipe, rows)
    y = np.zeros(len(users))
    y[:len(positives)] = 1.0
    hard_ch = recipe.hard_characterization
    hard = features.hard[hard_ch][rows] if hard_ch else None
    return CtrDataset(item_id, X, y, users, hard, short)


# ---------------------------------------------------------------------------
# L1-penalized logistic regression via monotone proximal gradient

@dataclass
class SolverConfig:
    max_iter: int = 2000
    kkt_tol: float = 1e-5    # subgradient optimality tolerance
    step0: float = 1.0


@dataclass
class CtrItemModel:
    item_id: str
    weights: np.ndarray      # in standardized feature space
    intercept: float
    lam: float
    feature_means: np.ndarray
    feature_scales: np.ndarray
    n_rows: int
    n_pos: int
    kkt_violation: float
    converged: bool


def _loss(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def smooth_gradient(w: np.ndarray, b: float, X: np.ndarray,
                    y: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradient of the mean logistic loss (the smooth part of the objective)."""
    z = X @ w + b
    r = expit(z) - y
    return X.T @ r / len(y), float(r.mean())


def kkt_violation(w: np.ndarray, grad: np.ndarray, grad_b: float,
                  lam: float) -> float:
    """Max violation of the L1 subgradient optimality conditions."""
    viol = abs(grad_b)
    zero = w == 0
    if np.any(zero):
        viol = max(viol, float(np.maximum(np.abs(grad[zero]) - lam, 0.0).max()))
    if np.any(~zero):
        viol = max(viol, float(
            np.abs(grad[~zero] + lam * np.sign(w[~zero])).max()))
    return viol


def _soft(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def fit_item_model(X: np.ndarray, y: np.ndarray, lam: float,
                   config: SolverConfig | None = None,
                   item_id: str = "") -> CtrItemModel:
    """Minimize mean logistic loss + lam*||w||_1 by backtracking ISTA.

    Features are z-scored with the training statistics (constant columns get
    unit scale); the intercept is unpenalized. The objective is non-increasing
    across iterations.
    """
    config = config or SolverConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise CtrError("training rows must contain both classes")

    mu = X.mean(axis=0) if X.shape[1] else np.zeros(0)
    sd = X.std(axis=0) if X.shape[1] else np.zeros(0)
    sd = np.where(sd == 0, 1.0, sd)
    Xs = (X - mu) / sd

    w = np.zeros(X.shape[1])
    b = float(np.log(n_pos / (len(y) - n_pos)))
    step = config.step0
    obj = _loss(Xs @ w + b, y) + lam * np.abs(w).sum()
    viol = np.inf
    converged = False
    for _ in range(config.max_iter):
        g, gb = smooth_gradient(w, b, Xs, y)
        viol = kkt_violation(w, g, gb, lam)
        if viol <= config.kkt_tol:
            converged = True
            break
        f0 = _loss(Xs @ w + b, y)
        while True:
            w_new = _soft(w - step * g, step * lam)
            b_new = b - step * gb
            dw = w_new - w
            db = b_new - b
            f_new = _loss(Xs @ w_new + b_new, y)
            quad = (f0 + g @ dw + gb * db
                    + ((dw @ dw) + db * db) / (2.0 * step))
            if f_new <= quad + 1e-12:
                break
            step *= 0.5
            if step < 1e-12:
                break
        w, b = w_new, b_new
        obj_new = f_new + lam * np.abs(w).sum()
        obj = min(obj, obj_new)
        step = min(step * 1.5, 1e4)
    return CtrItemModel(item_id, w, b, lam, mu, sd, len(y), n_pos, viol,
                        converged)


def predict_scores(model: CtrItemModel, X: np.ndarray) -> np.ndarray:
    Xs = (np.asarray(X, dtype=np.float64) - model.feature_means) / model.feature_scales
    return Xs @ model.weights + model.intercept


@dataclass
class HardModeModel:
    item_id: str
    submodels: dict[int, CtrItemModel]
    fallback_intercept: float
    single_class: list[int] = field(default_factory=list)


def fit_mode_h(X: np.ndarray, y: np.ndarray, hard: np.ndarray, lam: float,
               config: SolverConfig | None = None,
               item_id: str = "") -> HardModeModel:
    """One model per hard cluster; single-class clusters fall back to an
    intercept-only prior."""
    hard = np.asarray(hard)
    pooled_pos = max(1, int(y.sum()))
    pooled_neg = max(1, int(len(y) - y.sum()))
    fallback = float(np.log(pooled_pos / pooled_neg))
    submodels: dict[int, CtrItemModel] = {}
    single: list[int] = []
    for c in sorted(set(int(v) for v in hard)):
        mask = hard == c
        yc = y[mask]
        if yc.sum() == 0 or yc.sum() == len(yc):
            single.append(c)
            log.debug("item %s cluster %d is single-class, intercept fallback",
                      item_id, c)
            continue
        submodels[c] = fit_item_model(X[mask], yc, lam, config,
                                      item_id=f"{item_id}:{c}")
    return HardModeModel(item_id, submodels, fallback, single)


def predict_scores_h(model: HardModeModel, X: np.ndarray,
                     hard: np.ndarray) -> np.ndarray:
    scores = np.full(len(X), model.fallback_intercept)
    for c, sub in model.submodels.items():
        mask = np.asarray(hard) == c
        if np.any(mask):
            scores[mask] = predict_scores(sub, X[mask])
    return scores


# ---------------------------------------------------------------------------
# Evaluation

def auc_score(y: np.ndarray, scores: np.ndarray) -> float:
    """ROC AUC via the rank statistic, ties handled by average ranks."""
    y = np.asarray(y)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise CtrError("AUC needs both classes")
    ranks = rankdata(scores)
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class CtrEvaluation:
    recipe: str
    mean_auc: float
    per_item: dict[str, float]
    p: int
    mean_n: float
    complexity_proxy: float  # mean_n * p^2
    wall_time: float
    skipped: list[str] = field(default_factory=list)


@dataclass
class CtrExperimentConfig:
    lam: float = 2e-3
    neg_ratio: int = 5
    top_n: int = 100
    test_fraction: float = 0.2
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)


def split_users(users: list[str], test_fraction: float,
                seed: int) -> tuple[list[str], list[str]]:
    rng = np.random.default_rng(seed)
    order = list(users)
    rng.shuffle(order)
    n_test = int(round(test_fraction * len(order)))
    test = sorted(order[:n_test])
    train = sorted(order[n_test:])
    return train, test


def top_items(items: dict[str, set[str]], top_n: int) -> list[str]:
    ranked = sorted(items, key=lambda i: (-len(items[i]), i))
    return ranked[:top_n]


def run_ctr_experiment(rs: RecordSet | dict[str, set[str]],
                       features: UserPersonaFeatures,
                       recipe: FeatureModeRecipe,
                       config: CtrExperimentConfig | None = None
                       ) -> CtrEvaluation:
    """Train per-item models on a user-disjoint split and report mean AUC
    over the most popular items."""
    config = config or CtrExperimentConfig()
    t0 = time.perf_counter()
    items = rs if isinstance(rs, dict) else item_user_sets(rs)
    train_users, test_users = split_users(features.users,
                                          config.test_fraction, config.seed)
    chosen = top_items(items, config.top_n)
    p = sum(w for _, _, w in feature_layout(recipe, features))
    hard_ch = recipe.hard_characterization

    per_item: dict[str, float] = {}
    skipped: list[str] = []
    n_rows = []
    for j, item in enumerate(chosen):
        train = build_dataset(items, features, recipe, item,
                              neg_ratio=config.neg_ratio,
                              seed=config.seed * 100003 + j,
                              eligible_users=train_users)
        test = build_dataset(items, features, recipe, item,
                             neg_ratio=config.neg_ratio,
                             seed=config.seed * 100003 + j + 1,
                             eligible_users=test_users)
        if test.y.sum() == 0 or test.y.sum() == len(test.y):
            skipped.append(item)
            continue
        if train.y.sum() == 0 or train.y.sum() == len(train.y):
            skipped.append(item)
            continue
        n_rows.append(len(train.y))
        if hard_ch:
            model = fit_mode_h(train.X, train.y, train.hard, config.lam,
                               config.solver, item_id=item)
            scores = predict_scores_h(model, test.X, test.hard)
        else:
            model = fit_item_model(train.X, train.y, config.lam,
                                   config.solver, item_id=item)
            scores = predict_scores(model, test.X)
        per_item[item] = auc_score(test.y, scores)

    mean_auc = float(np.mean(list(per_item.values()))) if per_item else float("nan")
    mean_n = float(np.mean(n_rows)) if n_rows else 0.0
    return CtrEvaluation(recipe.name(), mean_auc, per_item, p, mean_n,
                         mean_n * p * p, time.perf_counter() - t0, skipped)


def model_to_json(model: CtrItemModel) -> str:
    payload = {
        "item_id": model.item_id,
        "lambda": model.lam,
        "intercept": repr(model.intercept),
        "weights": {str(i): repr(float(v))
                    for i, v in enumerate(model.weights) if v != 0.0},
        "feature_means": [repr(float(v)) for v in model.feature_means],
        "feature_scales": [repr(float(v)) for v in model.feature_scales],
        "n_rows": model.n_rows,
        "n_pos": model.n_pos,
        "kkt_violation": repr(model.kkt_violation),
        "converged": model.converged,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
