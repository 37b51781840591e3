"""Gaussian-process surrogate of the dynamics-aware robustness.

A zero-mean GP with an anisotropic squared-exponential kernel (one
length scale per feature) is fitted to exact pipeline labels by
maximizing the marginal log-likelihood with analytic gradients in
log-parameter space. Predictions go through the cached Cholesky factor:
the mean costs O(n) per query after caching the weight vector, the
variance O(n^2). Predicted means are rectified with the exact Boolean
value so the surrogate can never report the wrong sign.

Features are standardized (zero mean, unit variance on the training
set) before any kernel evaluation; the constants are stored with the
model. Cross-covariances to query points use the noise-free kernel; the
self-covariance keeps the noise term.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from rulerob import _core
from rulerob.errors import (
    CalibrationError,
    FactorizationError,
    InputError,
    ModelFileError,
    NumericalError,
)
from rulerob.mpr import (
    NormalizationConstants,
    _instance_mean_probability,
    nearest_other,
    normalized_robustness,
)
from rulerob.predicates import PredicateDef, PredicateRegistry, extract_features
from rulerob.sampler import SamplerConfig
from rulerob.scenario import LaneNetwork, Signal

MODEL_FORMAT_VERSION = 1

# adaptive jitter ladder, relative to the process variance
_JITTER_START = 1e-8
_JITTER_MAX = 1e-2
_JITTER_GROWTH = 10.0


@dataclass(frozen=True)
class GPHyperparams:
    """Kernel hyperparameters: per-feature length scales plus deviations."""

    length_scales: np.ndarray
    process_std: float
    noise_std: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        object.__setattr__(self, "length_scales", ls)
        if np.any(ls <= 0):
            raise InputError("length scales must all be > 0")
        if self.process_std <= 0:
            raise InputError(f"process deviation must be > 0, got {self.process_std}")
        if self.noise_std < 0:
            raise InputError(f"noise deviation must be >= 0, got {self.noise_std}")


def kernel_eval(z: np.ndarray, z2: np.ndarray, hyper: GPHyperparams) -> float:
    """Covariance of two feature vectors under the SE-ARD kernel.

    ``process_std**2 * exp(-0.5 * sum_j ((z_j - z2_j) / ls_j)^2)`` plus
    the noise variance when the two vectors are elementwise identical.
    """
    z = np.asarray(z, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if z.shape != z2.shape or z.shape != hyper.length_scales.shape:
        raise InputError(
            f"dimension mismatch: {z.shape} vs {z2.shape} vs {hyper.length_scales.shape}"
        )
    quad = float(np.sum(((z - z2) / hyper.length_scales) ** 2))
    value = hyper.process_std**2 * math.exp(-0.5 * quad)
    if np.array_equal(z, z2):
        value += hyper.noise_std**2
    return value


def _chol_with_jitter(gram: np.ndarray, process_var: float) -> tuple[np.ndarray, float]:
    if not np.isfinite(gram).all():
        raise NumericalError("Gram matrix contains non-finite entries")
    jitter = 0.0
    while True:
        try:
            return cholesky(gram + jitter * np.eye(len(gram)), lower=True), jitter
        except (np.linalg.LinAlgError, ValueError):
            if jitter == 0.0:
                jitter = _JITTER_START * process_var
            else:
                jitter *= _JITTER_GROWTH
            if jitter > _JITTER_MAX * process_var:
                raise FactorizationError(
                    "Gram matrix not positive definite even with maximum jitter"
                ) from None


def _standardize_stats(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = Z.mean(axis=0)
    std = Z.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def marginal_log_likelihood(
    Z: np.ndarray, y: np.ndarray, hyper: GPHyperparams, *, with_grad: bool = False
):
    """Marginal log-likelihood of the data; optionally its gradient.

    The gradient is taken with respect to the log-parameters, ordered as
    ``(log ls_1, .., log ls_nz, log process_std, log noise_std)``.
    Features are standardized internally, matching training.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    mean, std = _standardize_stats(Z)
    Zs = (Z - mean) / std
    return _mll_core(Zs, y, hyper, with_grad)


def _mll_core(Zs: np.ndarray, y: np.ndarray, hyper: GPHyperparams, with_grad: bool):
    n, nz = Zs.shape
    ls = hyper.length_scales
    s2 = hyper.process_std**2
    n2 = hyper.noise_std**2
    gram = _core.se_ard_gram(Zs, 1.0 / ls**2, s2, n2)
    L, jitter = _chol_with_jitter(gram, s2)
    weights = cho_solve((L, True), y)
    mll = float(-0.5 * y @ weights - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi))
    if not with_grad:
        return mll
    # trace identity: d mll / d theta = 0.5 tr((ww^T - K^-1) dK/dtheta)
    kinv = cho_solve((L, True), np.eye(n))
    W = np.outer(weights, weights) - kinv
    kse = gram.copy()
    np.fill_diagonal(kse, s2)  # strip noise and jitter from the diagonal
    M = W * kse
    g_proc = float(M.sum())              # dK/dlog(sp) = 2 kse
    g_noise = float(n2 * np.trace(W))    # dK/dlog(sn) = 2 n2 I
    # sum_ii' M * (z_ij - z_i'j)^2 via the expanded quadratic form
    Z2 = Zs**2
    row = M.sum(axis=1)
    col = M.sum(axis=0)
    quad = Z2.T @ row + Z2.T @ col - 2.0 * (Zs * (M @ Zs)).sum(axis=0)
    g_ls = 0.5 * quad / ls**2
    grad = np.concatenate([g_ls, [g_proc, g_noise]])
    return mll, grad


def _theta_to_hyper(theta: np.ndarray, nz: int) -> GPHyperparams:
    return GPHyperparams(
        length_scales=np.exp(theta[:nz]),
        process_std=float(np.exp(theta[nz])),
        noise_std=float(np.exp(theta[nz + 1])),
    )


def _ascend(theta0: np.ndarray, objective, max_iter: int, tol: float):
    """Backtracking gradient ascent in log-parameter space."""
    theta = np.clip(theta0, -12.0, 12.0)
    value, grad = objective(theta)
    if not np.isfinite(value):
        return None
    step = 0.1
    for _ in range(max_iter):
        gmax = float(np.max(np.abs(grad)))
        if gmax < 1e-12:
            break
        direction = grad / gmax
        accepted = False
        while step >= 1e-12:
            cand = np.clip(theta + step * direction, -12.0, 12.0)
            try:
                cand_value = objective(cand, value_only=True)
            except NumericalError:
                cand_value = -np.inf
            if np.isfinite(cand_value) and cand_value > value:
                improvement = cand_value - value
                theta = cand
                accepted = True
                step = min(step * 1.5, 1.0)
                break
            step *= 0.5
        if not accepted:
            break
        value, grad = objective(theta)
        if improvement < tol:
            break
    return theta, value


@dataclass
class GPModel:
    """A trained surrogate: data, hyperparameters, cached factorization."""

    predicate_name: str
    feature_names: tuple[str, ...]
    train_inputs: np.ndarray
    train_outputs: np.ndarray
    hyper: GPHyperparams
    feat_mean: np.ndarray
    feat_std: np.ndarray
    chol: np.ndarray
    weights: np.ndarray
    jitter: float
    norm: NormalizationConstants | None = None
    metadata: dict = None  # free-form training metadata (holdout metrics, ...)

    def __post_init__(self):
        if self.metadata is None:
            self.metadata = {}

    @classmethod
    def from_hyper(
        cls,
        Z: np.ndarray,
        y: np.ndarray,
        hyper: GPHyperparams,
        *,
        predicate_name: str = "",
        feature_names: Sequence[str] = (),
        norm: NormalizationConstants | None = None,
    ) -> "GPModel":
        """Condition on the data with fixed hyperparameters."""
        Z = np.ascontiguousarray(Z, dtype=float)
        y = np.asarray(y, dtype=float)
        if Z.ndim != 2 or len(Z) != len(y):
            raise InputError(f"training data shapes do not match: {Z.shape} vs {y.shape}")
        if len(hyper.length_scales) != Z.shape[1]:
            raise InputError(
                f"{len(hyper.length_scales)} length scales for {Z.shape[1]} features"
            )
        mean, std = _standardize_stats(Z)
        Zs = np.ascontiguousarray((Z - mean) / std)
        gram = _core.se_ard_gram(Zs, 1.0 / hyper.length_scales**2,
                                 hyper.process_std**2, hyper.noise_std**2)
        L, jitter = _chol_with_jitter(gram, hyper.process_std**2)
        weights = cho_solve((L, True), y)
        names = tuple(feature_names) if feature_names else tuple(
            f"z{j}" for j in range(Z.shape[1])
        )
        if len(names) != Z.shape[1]:
            raise InputError(f"{len(names)} feature names for {Z.shape[1]} features")
        return cls(predicate_name, names, Z, y, hyper, mean, std, L, weights, jitter, norm)

    @property
    def n_train(self) -> int:
        return len(self.train_outputs)

    @property
    def n_features(self) -> int:
        return self.train_inputs.shape[1]

    def _standardized(self, queries: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        if q.shape[1] != self.n_features:
            raise InputError(f"query has {q.shape[1]} features, model expects {self.n_features}")
        return np.ascontiguousarray((q - self.feat_mean) / self.feat_std)

    def _train_standardized(self) -> np.ndarray:
        return np.ascontiguousarray((self.train_inputs - self.feat_mean) / self.feat_std)

    def predict(self, query: np.ndarray) -> tuple[float, float]:
        """Posterior mean and variance at one feature vector."""
        mu, var = self.predict_batch(query)
        return float(mu[0]), float(var[0])

    def predict_batch(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at a batch of feature vectors."""
        qs = self._standardized(queries)
        cross = _core.se_ard_cross(qs, self._train_standardized(),
                                   1.0 / self.hyper.length_scales**2,
                                   self.hyper.process_std**2)
        mu = cross @ self.weights
        v = solve_triangular(self.chol, cross.T, lower=True)
        k_self = self.hyper.process_std**2 + self.hyper.noise_std**2
        var = k_self - np.einsum("ij,ij->j", v, v)
        return mu, np.maximum(var, 0.0)

    def predict_mean_batch(self, queries: np.ndarray) -> np.ndarray:
        """Posterior mean only; skips the variance solve."""
        qs = self._standardized(queries)
        cross = _core.se_ard_cross(qs, self._train_standardized(),
                                   1.0 / self.hyper.length_scales**2,
                                   self.hyper.process_std**2)
        return cross @ self.weights


def train_gp(
    Z: np.ndarray,
    y: np.ndarray,
    init: GPHyperparams | None = None,
    *,
    n_starts: int = 5,
    max_iter: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
    predicate_name: str = "",
    feature_names: Sequence[str] = (),
    norm: NormalizationConstants | None = None,
) -> GPModel:
    """Fit hyperparameters by multi-start gradient ascent on the
    marginal log-likelihood, then condition on the data.

    Raises :class:`NumericalError` if the likelihood is non-finite at
    every start.
    """
    Z = np.ascontiguousarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    if Z.ndim != 2 or len(Z) != len(y):
        raise InputError(f"training data shapes do not match: {Z.shape} vs {y.shape}")
    if len(Z) < 2:
        raise InputError(f"need at least 2 training points, got {len(Z)}")
    if not (np.isfinite(Z).all() and np.isfinite(y).all()):
        raise NumericalError("training data contain non-finite values; likelihood undefined")
    n, nz = Z.shape
    mean, std = _standardize_stats(Z)
    Zs = np.ascontiguousarray((Z - mean) / std)
    y_scale = float(np.std(y))
    if init is None:
        init = GPHyperparams(
            length_scales=np.ones(nz),
            process_std=max(y_scale, 1e-3),
            noise_std=max(0.1 * y_scale, 1e-4),
        )

    cache: dict = {}

    def objective(theta: np.ndarray, value_only: bool = False):
        hyper = _theta_to_hyper(theta, nz)
        if value_only:
            return _mll_core(Zs, y, hyper, with_grad=False)
        key = theta.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = _mll_core(Zs, y, hyper, with_grad=True)
        return cache[key]

    theta0 = np.concatenate([
        np.log(init.length_scales), [math.log(init.process_std), math.log(init.noise_std)]
    ])
    rng = np.random.default_rng(seed)
    best = None
    for start in range(max(n_starts, 1)):
        theta_init = theta0 if start == 0 else theta0 + rng.normal(0.0, 0.7, size=len(theta0))
        try:
            result = _ascend(theta_init, objective, max_iter, tol)
        except FactorizationError:
            result = None
        if result is None:
            continue
        theta, value = result
        if best is None or value > best[1]:
            best = (theta, value)
    if best is None:
        raise NumericalError("marginal log-likelihood non-finite at every optimizer start")
    hyper = _theta_to_hyper(best[0], nz)
    return GPModel.from_hyper(
        Z, y, hyper, predicate_name=predicate_name, feature_names=feature_names, norm=norm
    )


# ---------------------------------------------------------------------------
# Robustness prediction


def rectify_prediction(mu: float, characteristic: int) -> float:
    """Clamp the predicted mean to the sign of the exact Boolean value."""
    if characteristic == 1:
        return max(mu, 0.0)
    if characteristic == -1:
        return min(mu, 0.0)
    raise InputError(f"characteristic value must be +1 or -1, got {characteristic}")


def predict_robustness(
    model: GPModel,
    registry: PredicateRegistry,
    net: LaneNetwork,
    signal: Signal,
    k: int,
    b: str | None = None,
) -> tuple[float, float]:
    """Surrogate robustness and its predictive deviation at step ``k``.

    Extracts features, queries the GP, and rectifies the mean with the
    exact Boolean value of the predicate, so the returned sign is always
    0 or the true one.
    """
    pred = registry[model.predicate_name]
    if tuple(model.feature_names) != tuple(pred.feature_names):
        raise InputError(
            f"model for {model.predicate_name!r} does not match the registered feature schema"
        )
    joint = signal.states[k]
    z = extract_features(pred, joint, net, b)
    mu, var = model.predict(z)
    c = 1 if pred.boolean(joint, net, b) else -1
    return rectify_prediction(mu, c), math.sqrt(var)


def feature_relevance(model: GPModel) -> np.ndarray:
    """Per-feature relevance scores, scaled so the maximum is one.

    Uses the ARD structure: the training variance of each standardized
    feature weighted by its inverse squared length scale. Features that
    are constant in the training data score zero.
    """
    Zs = model._train_standardized()
    scores = Zs.var(axis=0) / model.hyper.length_scales**2
    top = scores.max()
    return scores / top if top > 0 else scores


# ---------------------------------------------------------------------------
# Serialization


def save_model(model: GPModel, path) -> None:
    """Write the model as a versioned JSON container (lossless floats)."""
    payload = {
        "format": "rulerob-gp",
        "version": MODEL_FORMAT_VERSION,
        "predicate": model.predicate_name,
        "n_z": model.n_features,
        "feature_names": list(model.feature_names),
        "standardization": {
            "mean": model.feat_mean.tolist(),
            "std": model.feat_std.tolist(),
        },
        "Z": model.train_inputs.tolist(),
        "y": model.train_outputs.tolist(),
        "hyper": {
            "length_scales": model.hyper.length_scales.tolist(),
            "process_std": model.hyper.process_std,
            "noise_std": model.hyper.noise_std,
        },
        "norm": model.norm.to_dict() if model.norm is not None else None,
        "metadata": model.metadata,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_model(path) -> GPModel:
    """Read a model container; the factor is recomputed and verified."""
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFileError(f"corrupted model file {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != "rulerob-gp":
        raise ModelFileError(f"{path} is not a surrogate model file")
    if payload.get("version") != MODEL_FORMAT_VERSION:
        raise ModelFileError(
            f"unsupported model version {payload.get('version')} (expected {MODEL_FORMAT_VERSION})"
        )
    try:
        Z = np.asarray(payload["Z"], dtype=float)
        y = np.asarray(payload["y"], dtype=float)
        hyper = GPHyperparams(
            length_scales=np.asarray(payload["hyper"]["length_scales"], dtype=float),
            process_std=float(payload["hyper"]["process_std"]),
            noise_std=float(payload["hyper"]["noise_std"]),
        )
        norm = (NormalizationConstants.from_dict(payload["norm"])
                if payload.get("norm") is not None else None)
        names = tuple(payload["feature_names"])
        n_z = int(payload["n_z"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"corrupted model file {path}: {exc}") from exc
    if Z.ndim != 2 or Z.shape[1] != n_z or len(names) != n_z:
        raise ModelFileError(f"{path}: inconsistent feature dimension")
    model = GPModel.from_hyper(
        Z, y, hyper, predicate_name=payload["predicate"], feature_names=names, norm=norm
    )
    model.metadata = dict(payload.get("metadata") or {})
    stored_mean = np.asarray(payload["standardization"]["mean"], dtype=float)
    stored_std = np.asarray(payload["standardization"]["std"], dtype=float)
    if not (np.allclose(stored_mean, model.feat_mean) and np.allclose(stored_std, model.feat_std)):
        raise ModelFileError(f"{path}: standardization constants do not match the data")
    _verify_factor(model)
    return model


def _verify_factor(model: GPModel) -> None:
    Zs = model._train_standardized()
    gram = _core.se_ard_gram(Zs, 1.0 / model.hyper.length_scales**2,
                             model.hyper.process_std**2, model.hyper.noise_std**2)
    gram += model.jitter * np.eye(len(gram))
    recon = model.chol @ model.chol.T
    rel = np.linalg.norm(recon - gram) / max(np.linalg.norm(gram), 1e-30)
    if rel > 1e-8:
        raise ModelFileError(f"factor verification failed (relative error {rel:.2e})")


# ---------------------------------------------------------------------------
# Dataset generation


@dataclass(frozen=True)
class Dataset:
    """Labeled training data for one predicate's surrogate."""

    predicate_name: str
    feature_names: tuple[str, ...]
    inputs: np.ndarray
    outputs: np.ndarray
    characteristics: np.ndarray
    norm: NormalizationConstants

    def __len__(self) -> int:
        return len(self.outputs)


def generate_dataset(
    scenarios: Sequence[tuple[LaneNetwork, Signal]],
    pred: PredicateDef,
    cfg: SamplerConfig,
    n_p: int,
    *,
    seed: int = 0,
    margin: float = 1e-3,
) -> Dataset:
    """Label ``n_p`` scenario steps with exact pipeline robustness.

    Draws (scenario, step) pairs without replacement, stratified so both
    Boolean sign classes appear whenever the pool contains them; the
    normalization constants are calibrated from the drawn instances
    themselves. For two-vehicle predicates the nearest other vehicle is
    used as the argument.
    """
    pool = []
    for idx, (net, signal) in enumerate(scenarios):
        for k in range(0, len(signal) - cfg.horizon):
            joint = signal.states[k]
            b = nearest_other(joint) if pred.arity == 2 else None
            if pred.arity == 2 and b is None:
                continue
            pool.append((idx, k, b))
    if len(pool) < n_p:
        raise InputError(
            f"scenario pool provides {len(pool)} usable instances, need {n_p}"
        )
    signs = np.array([
        1 if pred.boolean(scenarios[idx][1].states[k], scenarios[idx][0], b) else -1
        for idx, k, b in pool
    ])
    if not ((signs == 1).any() and (signs == -1).any()):
        missing = "violated" if (signs == 1).any() else "satisfied"
        raise CalibrationError(
            f"scenario pool has no {missing} instances of {pred.name!r}; cannot stratify"
        )
    rng = np.random.default_rng(seed)
    chosen = list(rng.choice(len(pool), size=n_p, replace=False))
    for sign in (1, -1):
        if not any(signs[i] == sign for i in chosen):
            candidates = np.flatnonzero(signs == sign)
            swap_in = int(rng.choice(candidates))
            chosen[int(rng.integers(len(chosen)))] = swap_in

    feats, p_bars, cs = [], [], []
    for i in chosen:
        idx, k, b = pool[i]
        net, signal = scenarios[idx]
        c_ref, p_bar, _, _ = _instance_mean_probability(pred, net, signal, k, cfg, b)
        feats.append(extract_features(pred, signal.states[k], net, b))
        p_bars.append(p_bar)
        cs.append(c_ref)
    cs_arr = np.asarray(cs)
    plus = [p for p, c in zip(p_bars, cs) if c == 1]
    minus = [p for p, c in zip(p_bars, cs) if c == -1]
    norm = NormalizationConstants(
        p_plus_min=min(plus) - margin, p_plus_max=max(plus) + margin,
        p_minus_min=min(minus) - margin, p_minus_max=max(minus) + margin,
    )
    y = np.array([normalized_robustness(p, int(c), norm) for p, c in zip(p_bars, cs)])
    return Dataset(pred.name, tuple(pred.feature_names), np.asarray(feats), y, cs_arr, norm)


def save_dataset(dataset: Dataset, path) -> None:
    meta = {
        "predicate": dataset.predicate_name,
        "feature_names": list(dataset.feature_names),
        "norm": dataset.norm.to_dict(),
    }
    np.savez(
        path,
        inputs=dataset.inputs,
        outputs=dataset.outputs,
        characteristics=dataset.characteristics,
        meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
    )


def load_dataset(path) -> Dataset:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            return Dataset(
                predicate_name=meta["predicate"],
                feature_names=tuple(meta["feature_names"]),
                inputs=data["inputs"],
                outputs=data["outputs"],
                characteristics=data["characteristics"],
                norm=NormalizationConstants.from_dict(meta["norm"]),
            )
    except (KeyError, ValueError, OSError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"cannot read dataset {path}: {exc}") from exc
