"""Regression primitives and a convex-combination super learner.

Every learner handles two families: ``binomial`` (logit link, responses in
[0, 1]) and ``gaussian`` (identity link). Fits are pure numpy and
deterministic given their inputs.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit

from .data import ConfigError

KINDS = ("intercept_only", "glm", "ridge", "lasso", "boosted_stumps")
FAMILIES = ("binomial", "gaussian")

_DEFAULTS: dict[str, dict[str, Any]] = {
    "intercept_only": {},
    "glm": {"max_iter": 50, "tol": 1e-10, "interactions": 1},
    "ridge": {"lam": 0.01, "max_iter": 1000, "tol": 1e-9, "interactions": 1},
    "lasso": {"lam": 0.01, "max_iter": 1000, "tol": 1e-9, "interactions": 1},
    "boosted_stumps": {"rounds": 100, "learning_rate": 0.1, "min_leaf": 5},
}

_ETA_CAP = 30.0


@dataclass(frozen=True)
class LearnerSpec:
    family: str
    kind: str
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r}")
        unknown = set(self.hyperparameters) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ConfigError(f"unknown hyperparameters for {self.kind}: {sorted(unknown)}")
        hp = {**_DEFAULTS[self.kind], **dict(self.hyperparameters)}
        if hp.get("lam", 0.0) < 0:
            raise ConfigError("penalty lam must be >= 0")
        if hp.get("rounds", 1) < 1:
            raise ConfigError("rounds must be >= 1")
        if hp.get("tol", 1.0) <= 0:
            raise ConfigError("tolerance must be > 0")
        if hp.get("interactions", 1) < 1:
            raise ConfigError("interactions must be >= 1")
        object.__setattr__(self, "hyperparameters", hp)

    def hp(self, key: str) -> Any:
        return self.hyperparameters[key]

    def with_family(self, family: str) -> "LearnerSpec":
        return replace(self, family=family, hyperparameters=dict(self.hyperparameters))

    def label(self) -> str:
        extra = {k: v for k, v in self.hyperparameters.items() if k in ("lam", "interactions", "rounds")}
        return f"{self.kind}{extra}" if extra else self.kind


def learner_from_config(entry: Mapping[str, Any], family: str = "gaussian") -> LearnerSpec:
    """Build a spec from a config entry such as ``{"kind": "lasso", "lam": 0.05}``."""
    entry = dict(entry)
    kind = entry.pop("kind", None)
    if kind is None:
        raise ConfigError(f"learner entry {entry} has no 'kind'")
    entry.pop("family", None)
    hp = entry.pop("hyperparameters", {})
    hp = {**hp, **entry}
    return LearnerSpec(family=family, kind=kind, hyperparameters=hp)


# ---------------------------------------------------------------------------
# design helpers


def expand_interactions(X: NDArray, degree: int) -> NDArray:
    """Append products of distinct columns up to ``degree`` factors."""
    X = np.asarray(X, dtype=float)
    if degree <= 1 or X.shape[1] < 2:
        return X
    cols = [X]
    p = X.shape[1]
    for d in range(2, min(degree, p) + 1):
        for combo in itertools.combinations(range(p), d):
            cols.append(np.prod(X[:, combo], axis=1, keepdims=True))
    return np.hstack(cols)


def _clip_prob(p: NDArray, eps: float = 1e-12) -> NDArray:
    return np.clip(p, eps, 1.0 - eps)


def _loss(family: str, y: NDArray, mu: NDArray, w: NDArray) -> float:
    if family == "binomial":
        mu = _clip_prob(mu)
        ll = y * np.log(mu) + (1.0 - y) * np.log1p(-mu)
        return float(-(w * ll).sum() / w.sum())
    return float((w * (y - mu) ** 2).sum() / w.sum())


# ---------------------------------------------------------------------------
# fitted model


@dataclass(frozen=True)
class FittedModel:
    spec: LearnerSpec
    intercept: float = 0.0
    coef: NDArray | None = None
    stumps: tuple[tuple[int, float, float, float], ...] = ()
    iterations: int = 0
    converged: bool = True
    fallback: str | None = None
    constant: float | None = None

    def linear_predictor(self, X: NDArray) -> NDArray:
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        eta = np.full(n, self.intercept)
        if self.coef is not None and self.coef.size:
            Xd = expand_interactions(X, self.spec.hyperparameters.get("interactions", 1))
            eta = eta + Xd @ self.coef
        for feature, threshold, left, right in self.stumps:
            eta = eta + np.where(X[:, feature] <= threshold, left, right)
        return eta

    def predict(self, X: NDArray) -> NDArray:
        if self.constant is not None:
            # intercept-only fits return the training mean exactly
            return np.full(np.asarray(X).shape[0], self.constant)
        eta = self.linear_predictor(X)
        if self.spec.family == "binomial":
            return expit(np.clip(eta, -_ETA_CAP, _ETA_CAP))
        return eta


# ---------------------------------------------------------------------------
# individual learners


def _weighted_mean(y: NDArray, w: NDArray) -> float:
    if y.size and np.all(y == y[0]):
        return float(y[0])
    return float((w * y).sum() / w.sum())


def _fit_intercept(spec: LearnerSpec, y: NDArray, w: NDArray) -> FittedModel:
    mean = _weighted_mean(y, w)
    if spec.family == "binomial":
        return FittedModel(spec, intercept=float(logit(np.clip(mean, 1e-12, 1 - 1e-12))),
                           coef=None, constant=mean)
    return FittedModel(spec, intercept=mean, coef=None, constant=mean)


def _weighted_lstsq(X1: NDArray, z: NDArray, w: NDArray, ridge: float = 0.0):
    """Solve the weighted normal equations; ``None`` when numerically singular."""
    XtW = X1.T * w
    A = XtW @ X1
    if ridge > 0:
        pen = np.eye(A.shape[0]) * ridge * w.sum()
        pen[0, 0] = 0.0
        A = A + pen
    b = XtW @ z
    if ridge == 0.0:
        s = np.linalg.svd(A, compute_uv=False)
        if s[-1] <= s[0] * 1e-12:
            return None
    return np.linalg.solve(A, b)


def _fit_glm(spec: LearnerSpec, X: NDArray, y: NDArray, w: NDArray) -> FittedModel:
    Xd = expand_interactions(X, spec.hp("interactions"))
    X1 = np.hstack([np.ones((Xd.shape[0], 1)), Xd])
    max_iter, tol = spec.hp("max_iter"), spec.hp("tol")
    fallback = None
    ridge = 0.0

    if spec.family == "gaussian":
        beta = _weighted_lstsq(X1, y, w)
        if beta is None:
            fallback, ridge = "ridge", 1e-6
            beta = _weighted_lstsq(X1, y, w, ridge)
        return FittedModel(spec, intercept=float(beta[0]), coef=beta[1:], iterations=1,
                           converged=True, fallback=fallback)

    mean = np.clip(_weighted_mean(y, w), 1e-6, 1 - 1e-6)
    beta = np.zeros(X1.shape[1])
    beta[0] = logit(mean)
    eta = X1 @ beta
    dev = _loss("binomial", y, expit(eta), w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        var = np.maximum(mu * (1.0 - mu), 1e-10)
        z = eta + (y - mu) / var
        new = _weighted_lstsq(X1, z, w * var, ridge)
        if new is None:
            fallback, ridge = "ridge", 1e-6
            new = _weighted_lstsq(X1, z, w * var, ridge)
        step = 1.0
        while True:
            cand = beta + step * (new - beta)
            eta_c = np.clip(X1 @ cand, -_ETA_CAP, _ETA_CAP)
            dev_c = _loss("binomial", y, expit(eta_c), w)
            if dev_c <= dev + 1e-12 or step < 1e-4:
                break
            step *= 0.5
        change = abs(dev - dev_c)
        beta, eta, dev = cand, eta_c, dev_c
        if change <= tol * (abs(dev) + 0.1):
            converged = True
            break
    return FittedModel(spec, intercept=float(beta[0]), coef=beta[1:], iterations=it,
                       converged=converged, fallback=fallback)


def _soft(x: NDArray | float, t: float):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _cd_penalized_ls(X: NDArray, z: NDArray, w: NDArray, lam: float, alpha: float,
                     beta0: float, beta: NDArray, max_iter: int, tol: float):
    """Cyclic coordinate descent for
    ``(1/2) sum(w r^2)/sum(w) + lam * (alpha*|b|_1 + (1-alpha)/2*|b|_2^2)``.
    """
    wn = w / w.sum()
    xsq = (wn[:, None] * X * X).sum(axis=0)
    r = z - beta0 - X @ beta
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        max_delta = 0.0
        d0 = float((wn * r).sum())
        beta0 += d0
        r -= d0
        max_delta = abs(d0)
        for j in range(X.shape[1]):
            if xsq[j] <= 0.0:
                continue
            old = beta[j]
            rho = float((wn * X[:, j] * r).sum()) + xsq[j] * old
            new = _soft(rho, lam * alpha) / (xsq[j] + lam * (1.0 - alpha))
            if new != old:
                r -= X[:, j] * (new - old)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old) * np.sqrt(xsq[j]))
        if max_delta < tol:
            converged = True
            break
    return beta0, beta, it, converged


def _fit_penalized(spec: LearnerSpec, X: NDArray, y: NDArray, w: NDArray) -> FittedModel:
    Xd = expand_interactions(X, spec.hp("interactions"))
    lam = spec.hp("lam")
    alpha = 1.0 if spec.kind == "lasso" else 0.0
    max_iter, tol = spec.hp("max_iter"), spec.hp("tol")
    beta = np.zeros(Xd.shape[1])
    if spec.family == "gaussian":
        b0, beta, it, conv = _cd_penalized_ls(Xd, y, w, lam, alpha, _weighted_mean(y, w), beta,
                                              max_iter, tol)
        return FittedModel(spec, intercept=float(b0), coef=beta, iterations=it, converged=conv)

    # proximal Newton: quadratic approximation of the binomial deviance, CD inner loop
    b0 = float(logit(np.clip(_weighted_mean(y, w), 1e-6, 1 - 1e-6)))
    total_it = 0
    converged = False
    obj_old = np.inf
    for _ in range(100):
        eta = np.clip(b0 + Xd @ beta, -_ETA_CAP, _ETA_CAP)
        mu = expit(eta)
        var = np.maximum(mu * (1.0 - mu), 1e-5)
        z = eta + (y - mu) / var
        b0, beta, it, _ = _cd_penalized_ls(Xd, z, w * var, lam * w.sum() / (w * var).sum(),
                                           alpha, b0, beta, max_iter, tol)
        total_it += it
        eta = np.clip(b0 + Xd @ beta, -_ETA_CAP, _ETA_CAP)
        pen = lam * (alpha * np.abs(beta).sum() + 0.5 * (1 - alpha) * (beta ** 2).sum())
        obj = _loss("binomial", y, expit(eta), w) + pen
        if abs(obj_old - obj) <= tol * (abs(obj) + 0.1):
            converged = True
            break
        obj_old = obj
    return FittedModel(spec, intercept=float(b0), coef=beta, iterations=total_it,
                       converged=converged)


def _best_stump(X: NDArray, grad: NDArray, hess: NDArray, w: NDArray, min_leaf: int,
                orders: list[NDArray]):
    """Split maximising the weighted least-squares fit to the negative gradient."""
    best = None
    best_gain = 0.0
    G_tot = float((w * grad).sum())
    W_tot = float(w.sum())
    for j, order in enumerate(orders):
        xs = X[order, j]
        wg = np.cumsum((w * grad)[order])
        ww = np.cumsum(w[order])
        cnt = np.arange(1, xs.size + 1)
        valid = (xs[:-1] < xs[1:]) & (cnt[:-1] >= min_leaf) & (xs.size - cnt[:-1] >= min_leaf)
        if not valid.any():
            continue
        GL, WL = wg[:-1][valid], ww[:-1][valid]
        GR, WR = G_tot - GL, W_tot - WL
        gain = GL ** 2 / WL + GR ** 2 / WR - G_tot ** 2 / W_tot
        i = int(np.argmax(gain))
        if gain[i] > best_gain + 1e-14:
            best_gain = float(gain[i])
            pos = np.flatnonzero(valid)[i]
            best = (j, 0.5 * (xs[pos] + xs[pos + 1]))
    if best is None:
        return None
    j, thr = best
    left = X[:, j] <= thr
    leaf = []
    for mask in (left, ~left):
        num = float((w * grad)[mask].sum())
        den = float((w * hess)[mask].sum())
        leaf.append(num / den if den > 0 else 0.0)
    return j, float(thr), leaf[0], leaf[1]


def _fit_boosted(spec: LearnerSpec, X: NDArray, y: NDArray, w: NDArray) -> FittedModel:
    base = _fit_intercept(spec, y, w)
    eta = np.full(y.shape[0], base.intercept)
    lr = spec.hp("learning_rate")
    stumps = []
    orders = [np.argsort(X[:, j], kind="stable") for j in range(X.shape[1])]
    for _ in range(spec.hp("rounds")):
        if spec.family == "binomial":
            mu = expit(eta)
            grad, hess = y - mu, np.maximum(mu * (1 - mu), 1e-10)
        else:
            grad, hess = y - eta, np.ones_like(y)
        stump = _best_stump(X, grad, hess, w, spec.hp("min_leaf"), orders)
        if stump is None:
            break
        j, thr, lv, rv = stump
        lv, rv = lr * lv, lr * rv
        eta = eta + np.where(X[:, j] <= thr, lv, rv)
        eta = np.clip(eta, -_ETA_CAP, _ETA_CAP)
        stumps.append((j, thr, lv, rv))
    return FittedModel(spec, intercept=base.intercept, coef=None, stumps=tuple(stumps),
                       iterations=len(stumps), converged=True)


def fit_learner(spec: LearnerSpec, X: NDArray, y: NDArray,
                weights: NDArray | None = None) -> FittedModel:
    """Fit one candidate learner. Non-convergence is reported, not raised."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] != y.shape[0] or y.shape[0] < 1:
        raise ConfigError("design matrix and response must have the same, positive length")
    if spec.family == "binomial" and (y.min() < 0 or y.max() > 1):
        raise ConfigError("binomial response must lie in [0, 1]")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if spec.kind == "intercept_only" or X.shape[1] == 0:
        return _fit_intercept(spec, y, w)
    if spec.kind == "glm":
        return _fit_glm(spec, X, y, w)
    if spec.kind in ("ridge", "lasso"):
        return _fit_penalized(spec, X, y, w)
    return _fit_boosted(spec, X, y, w)


# ---------------------------------------------------------------------------
# super learner


@dataclass(frozen=True)
class EnsembleWeights:
    weights: NDArray
    cv_risk: float
    per_candidate_risk: NDArray


@dataclass(frozen=True)
class SuperLearnerModel:
    """Weighted combination of refitted candidates."""

    family: str
    ensemble: EnsembleWeights
    models: tuple[FittedModel, ...]
    trunc_bound: float = 0.0

    @property
    def converged(self) -> bool:
        return all(m.converged for w, m in zip(self.ensemble.weights, self.models) if w > 0)

    def predict(self, X: NDArray) -> NDArray:
        X = np.asarray(X, dtype=float)
        pred = np.zeros(X.shape[0])
        for weight, model in zip(self.ensemble.weights, self.models):
            if weight > 0:
                pred = pred + weight * model.predict(X)
        if self.family == "binomial":
            pred = np.clip(pred, self.trunc_bound, 1.0 - self.trunc_bound)
        return pred


def project_simplex(v: NDArray) -> NDArray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    cond = u - (css - 1.0) / k > 0
    rho = k[cond][-1]
    tau = (css[cond][-1] - 1.0) / rho
    return np.maximum(v - tau, 0.0)


def _meta_risk(Z: NDArray, y: NDArray, wts: NDArray, loss: str) -> float:
    pred = Z @ wts
    if loss == "neg_log_likelihood":
        pred = _clip_prob(pred)
        return float(-np.mean(y * np.log(pred) + (1 - y) * np.log1p(-pred)))
    return float(np.mean((y - pred) ** 2))


def _meta_grad(Z: NDArray, y: NDArray, wts: NDArray, loss: str) -> NDArray:
    pred = Z @ wts
    if loss == "neg_log_likelihood":
        pred = _clip_prob(pred)
        return -(Z.T @ (y / pred - (1 - y) / (1 - pred))) / y.size
    return 2.0 * (Z.T @ (pred - y)) / y.size


def solve_simplex_weights(Z: NDArray, y: NDArray, loss: str, tol: float = 1e-8,
                          max_iter: int = 5000) -> EnsembleWeights:
    """Minimise the meta risk over convex combinations by projected gradient.

    Starts at the best vertex and only accepts non-increasing steps, so the
    achieved risk never exceeds the best single candidate's.
    """
    c = Z.shape[1]
    per = np.array([_meta_risk(Z, y, np.eye(c)[j], loss) for j in range(c)])
    wts = np.eye(c)[int(np.argmin(per))]
    risk = float(per.min())
    if c == 1:
        return EnsembleWeights(wts, risk, per)
    step = 1.0
    for _ in range(max_iter):
        grad = _meta_grad(Z, y, wts, loss)
        moved = False
        while step > 1e-14:
            cand = project_simplex(wts - step * grad)
            cand_risk = _meta_risk(Z, y, cand, loss)
            if cand_risk <= risk:
                moved = True
                break
            step *= 0.5
        if not moved:
            break
        delta = float(np.abs(cand - wts).max())
        wts, risk = cand, cand_risk
        step = min(step * 2.0, 1e6)
        if delta < tol:
            break
    return EnsembleWeights(wts, risk, per)


def fit_super_learner(
    candidates: Sequence[LearnerSpec],
    X: NDArray,
    y: NDArray,
    folds: NDArray | None,
    loss: str | None = None,
    trunc_bound: float = 0.0,
) -> tuple[EnsembleWeights, SuperLearnerModel]:
    """Cross-validated convex super learner.

    ``folds`` holds an inner-fold label per row; out-of-fold predictions of
    each candidate form the meta design on which simplex weights are chosen.
    Candidates are then refit on all rows.
    """
    if not candidates:
        raise ConfigError("super learner needs at least one candidate")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    family = candidates[0].family
    if loss is None:
        loss = "neg_log_likelihood" if family == "binomial" else "squared_error"

    if np.all(y == y[0]):
        spec = LearnerSpec(family, "intercept_only")
        model = fit_learner(spec, X, y)
        ens = EnsembleWeights(np.array([1.0]), 0.0 if family == "gaussian" else _meta_risk(
            model.predict(X).reshape(-1, 1), y, np.array([1.0]), loss), np.array([0.0]))
        return ens, SuperLearnerModel(family, ens, (model,), trunc_bound)

    if len(candidates) == 1:
        model = fit_learner(candidates[0], X, y)
        ens = EnsembleWeights(np.array([1.0]), float("nan"), np.array([float("nan")]))
        return ens, SuperLearnerModel(family, ens, (model,), trunc_bound)

    folds = np.asarray(folds)
    labels = np.unique(folds)
    Z = np.zeros((y.size, len(candidates)))
    for k in labels:
        test = folds == k
        train = ~test
        if not train.any():
            continue
        y_tr = y[train]
        for j, spec in enumerate(candidates):
            if np.all(y_tr == y_tr[0]):
                model = fit_learner(LearnerSpec(family, "intercept_only"), X[train], y_tr)
            else:
                model = fit_learner(spec, X[train], y_tr)
            Z[test, j] = model.predict(X[test])
    if family == "binomial":
        Z = np.clip(Z, max(trunc_bound, 1e-12), 1 - max(trunc_bound, 1e-12))
    ens = solve_simplex_weights(Z, y, loss)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        models = tuple(fit_learner(spec, X, y) for spec in candidates)
    return ens, SuperLearnerModel(family, ens, models, trunc_bound)
