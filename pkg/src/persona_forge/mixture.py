"""Latent cluster models: multinomial mixtures via EM, K-means for amounts."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-12


@dataclass
class EMConfig:
    max_iter: int = 500
    tol: float = 1e-8        # relative objective change
    restarts: int = 10
    smoothing: float = 0.5   # Laplace smoothing on theta
    seed: int = 0


@dataclass
class MixtureModel:
    """Mixed multinomial model: mixing weights pi and per-cluster theta rows.

    `loglik_trace` records the smoothed (Dirichlet-penalized) log-likelihood
    maximized by the EM iterations; it is non-decreasing per iteration.
    """
    k: int
    d: int
    pi: np.ndarray
    theta: np.ndarray
    loglik_trace: list[float] = field(default_factory=list)
    smoothing: float = 0.5
    seed: int = 0
    characterization: str = ""
    reseed_iters: list[int] = field(default_factory=list)  # empty-cluster events

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.pi.shape != (self.k,) or self.theta.shape != (self.k, self.d):
            raise ValueError("model parameter shapes disagree")


@dataclass
class AssignmentSet:
    tau: np.ndarray            # (n, K) row-stochastic responsibilities
    hard: np.ndarray           # (n,) argmax labels, lowest-index tie-break
    keys: list[tuple[str, int]] | None = None


@dataclass
class KMeansConfig:
    max_iter: int = 300
    tol: float = 1e-10
    restarts: int = 10
    seed: int = 0


@dataclass
class KMeansModel:
    k: int
    centers: np.ndarray
    inertia: float
    seed: int = 0
    characterization: str = ""


def _proportions(X: np.ndarray) -> np.ndarray:
    """Row-normalized X; all-zero rows become uniform."""
    totals = X.sum(axis=1, keepdims=True)
    zero = totals[:, 0] == 0
    if np.any(zero):
        log.warning("%d all-zero rows mapped to uniform proportions",
                    int(zero.sum()))
    safe = np.where(totals == 0, 1.0, totals)
    P = X / safe
    P[zero] = 1.0 / X.shape[1]
    return P


def _log_weights(model: MixtureModel, X: np.ndarray) -> np.ndarray:
    return X @ np.log(model.theta).T + np.log(model.pi)[None, :]


def e_step(model: MixtureModel, X: np.ndarray) -> np.ndarray:
    """Posterior responsibilities tau[i, z] from Bayes' rule, in log space.

    An all-zero count row carries no evidence and degenerates to tau = pi.
    """
    X = np.asarray(X, dtype=np.float64)
    logw = _log_weights(model, X)
    tau = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    return tau


def penalized_loglik(model: MixtureModel, X: np.ndarray) -> float:
    """Observed-data log-likelihood plus the smoothing (Dirichlet) penalty."""
    ll = float(logsumexp(_log_weights(model, X), axis=1).sum())
    return ll + model.smoothing * float(np.log(model.theta).sum())


def data_loglik(model: MixtureModel, X: np.ndarray) -> float:
    return float(logsumexp(_log_weights(model, X), axis=1).sum())


def m_step(tau: np.ndarray, X: np.ndarray, smoothing: float = 0.5,
           reseed: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Weighted-MLE update of (pi, theta) with additive smoothing on theta.

    Near-empty clusters are re-seeded from the row the model currently
    explains worst and handed a 1/K mixing share so they can actually
    recapture mass on the next E-step.  Pass reseed=False to leave starved
    clusters alone (pi floored away from exact zero).
    """
    tau = np.asarray(tau, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    k = tau.shape[1]
    weights = tau.sum(axis=0)
    pi = weights / n
    num = tau.T @ X + smoothing
    den = tau.T @ X.sum(axis=1) + smoothing * d
    theta = num / den[:, None]
    empty = weights < 1e-10
    if np.any(empty):
        if reseed:
            worst = int(np.argmin(tau.max(axis=1)))
            for j in np.flatnonzero(empty):
                theta[j] = ((X[worst] + smoothing)
                            / (X[worst].sum() + smoothing * d))
                pi[j] = 1.0 / k
            log.debug("re-seeded %d empty cluster(s) from worst-fit row",
                      int(empty.sum()))
        else:
            pi[empty] = 1e-300
        pi = pi / pi.sum()
    return pi, theta


def _kmeanspp_seed(P: np.ndarray, k: int, rng) -> np.ndarray:
    n = P.shape[0]
    centers = np.empty((k, P.shape[1]))
    centers[0] = P[rng.integers(n)]
    d2 = ((P - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = P[idx]
        d2 = np.minimum(d2, ((P - centers[j]) ** 2).sum(axis=1))
    return centers


def _hard_assign(P: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((P[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def fit_em(X: np.ndarray, k: int, config: EMConfig | None = None,
           characterization: str = "") -> tuple[MixtureModel, AssignmentSet]:
    """Fit a K-cluster multinomial mixture by EM, best of several restarts."""
    config = config or EMConfig()
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of rows n={n}")

    rng = np.random.default_rng(config.seed)
    P = _proportions(X)
    best: MixtureModel | None = None
    for _ in range(max(1, config.restarts)):
        centers = _kmeanspp_seed(P, k, rng)
        labels = _hard_assign(P, centers)
        tau = np.zeros((n, k))
        tau[np.arange(n), labels] = 1.0
        pi, theta = m_step(tau, X, config.smoothing)
        model = MixtureModel(k, d, pi, theta, [], config.smoothing,
                             config.seed, characterization)
        ll = penalized_loglik(model, X)
        model.loglik_trace.append(ll)
        reseed_budget = 3 * k   # after this, starved clusters are left dead
        for it in range(config.max_iter):
            tau = e_step(model, X)
            starved = int((tau.sum(axis=0) < 1e-10).sum())
            do_reseed = starved > 0 and reseed_budget > 0
            if do_reseed:
                model.reseed_iters.append(it)
                reseed_budget -= starved
            model.pi, model.theta = m_step(tau, X, config.smoothing,
                                           reseed=do_reseed)
            ll_new = penalized_loglik(model, X)
            model.loglik_trace.append(ll_new)
            if not starved and abs(ll_new - ll) <= config.tol * (abs(ll) + 1.0):
                ll = ll_new
                break
            ll = ll_new
        if best is None or model.loglik_trace[-1] > best.loglik_trace[-1]:
            best = model

    tau = e_step(best, X)
    hard = np.argmax(tau, axis=1)
    return best, AssignmentSet(tau, hard)


def fit_kmeans(X: np.ndarray, k: int, config: KMeansConfig | None = None,
               characterization: str = "") -> tuple[KMeansModel, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding, best of several restarts."""
    config = config or KMeansConfig()
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of rows n={n}")

    rng = np.random.default_rng(config.seed)
    best_inertia = np.inf
    best_centers = None
    best_labels = None
    for _ in range(max(1, config.restarts)):
        centers = _kmeanspp_seed(X, k, rng)
        labels = _hard_assign(X, centers)
        for _ in range(config.max_iter):
            new_centers = centers.copy()
            for j in range(k):
                mask = labels == j
                if np.any(mask):
                    new_centers[j] = X[mask].mean(axis=0)
                else:
                    d2 = ((X - centers[labels]) ** 2).sum(axis=1)
                    new_centers[j] = X[int(np.argmax(d2))]
            new_labels = _hard_assign(X, new_centers)
            moved = float(((new_centers - centers) ** 2).sum())
            centers, labels = new_centers, new_labels
            if moved <= config.tol:
                break
        inertia = float(((X - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia, best_centers, best_labels = inertia, centers, labels
    model = KMeansModel(k, best_centers, best_inertia, config.seed,
                        characterization)
    return model, best_labels


def soft_features(model: MixtureModel | KMeansModel, X: np.ndarray) -> np.ndarray:
    """Distances of each row from the fitted cluster centers.

    For mixture models the row is first normalized to proportions (uniform
    when all-zero); for K-means raw vectors are used.
    """
    X = np.asarray(X, dtype=np.float64)
    if isinstance(model, MixtureModel):
        points, centers = _proportions(X), model.theta
    else:
        points, centers = X, model.centers
    diff = points[:, None, :] - centers[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


def hard_labels(model: MixtureModel | KMeansModel, X: np.ndarray) -> np.ndarray:
    """Hard cluster labels for new rows under a fitted model."""
    if isinstance(model, MixtureModel):
        return np.argmax(e_step(model, X), axis=1)
    return _hard_assign(np.asarray(X, dtype=np.float64), model.centers)


def permute_clusters(model: MixtureModel, perm) -> MixtureModel:
    """Relabel clusters; log-likelihood is invariant under this."""
    perm = np.asarray(perm)
    return replace(model, pi=model.pi[perm], theta=model.theta[perm],
                   loglik_trace=list(model.loglik_trace))


def match_clusters(centers_a: np.ndarray, centers_b: np.ndarray,
                   metric: str = "euclidean") -> tuple[np.ndarray, np.ndarray]:
    """Min-cost bipartite matching of cluster centers; returns (rows, cols)."""
    from scipy.optimize import linear_sum_assignment
    from scipy.spatial.distance import cdist

    cost = cdist(centers_a, centers_b, metric=metric)
    return linear_sum_assignment(cost)


# ---------------------------------------------------------------------------
# Serialization

def model_to_json(model: MixtureModel | KMeansModel) -> str:
    if isinstance(model, MixtureModel):
        payload = {
            "kind": "mmm",
            "characterization": model.characterization,
            "K": model.k,
            "d": model.d,
            "pi": [repr(v) for v in model.pi.tolist()],
            "theta": [[repr(v) for v in row] for row in model.theta.tolist()],
            "smoothing": model.smoothing,
            "seed": model.seed,
            "final_loglik": repr(model.loglik_trace[-1]) if model.loglik_trace else None,
        }
    else:
        payload = {
            "kind": "kmeans",
            "characterization": model.characterization,
            "K": model.k,
            "d": model.centers.shape[1],
            "centers": [[repr(v) for v in row] for row in model.centers.tolist()],
            "inertia": repr(model.inertia),
            "seed": model.seed,
        }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def model_from_json(text: str) -> MixtureModel | KMeansModel:
    payload = json.loads(text)
    if payload["kind"] == "mmm":
        pi = np.array([float(v) for v in payload["pi"]])
        theta = np.array([[float(v) for v in row] for row in payload["theta"]])
        return MixtureModel(payload["K"], payload["d"], pi, theta, [],
                            payload["smoothing"], payload["seed"],
                            payload["characterization"])
    centers = np.array([[float(v) for v in row] for row in payload["centers"]])
    return KMeansModel(payload["K"], centers, float(payload["inertia"]),
                       payload["seed"], payload["characterization"])
