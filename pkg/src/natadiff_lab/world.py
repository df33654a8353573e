"""Labelled Gaussian-mixture data world with exact noised scores and Bayes posteriors.

Each component ``(m_k, S_k, w_k, labels_k)`` pushed through the forward
process becomes ``N(alpha m_k, alpha^2 S_k + beta^2 I)``, so every quantity a
trained denoiser or classifier would approximate has a closed form here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConditioningError, UndefinedScoreError
from .schedule import ScheduleTable

__all__ = [
    "Component",
    "MixtureWorld",
    "ConditioningSet",
    "UNCONDITIONAL",
    "sample_data",
    "noised_log_density",
    "noised_score",
    "noised_score_hessian",
    "oracle_epsilon",
    "bayes_posterior",
    "OracleNoisePredictor",
]

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class Component:
    mean: np.ndarray
    cov: np.ndarray
    weight: float
    labels: frozenset

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        cov = np.array(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean dimension {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("component covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise ValueError("component covariance must be positive definite")
        labels = frozenset(int(c) for c in self.labels)
        if not labels:
            raise ValueError("component needs at least one label")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class ConditioningSet:
    """Label predicate choosing which components the data is conditioned on.

    ``unconditional`` keeps every component, ``single`` keeps components whose
    label set contains ``y`` and ``intersection`` keeps those containing both
    ``y`` and ``y_tilde``.
    """

    mode: str = "unconditional"
    y: int | None = None
    y_tilde: int | None = None

    def __post_init__(self):
        if self.mode not in ("unconditional", "single", "intersection"):
            raise ConditioningError(f"unknown conditioning mode {self.mode!r}")
        if self.mode != "unconditional" and self.y is None:
            raise ConditioningError(f"{self.mode} conditioning needs a class y")
        if self.mode == "intersection":
            if self.y_tilde is None:
                raise ConditioningError("intersection conditioning needs y_tilde")
            if self.y == self.y_tilde:
                raise ConditioningError("intersection conditioning requires y != y_tilde")

    @classmethod
    def single(cls, y):
        return cls("single", int(y))

    @classmethod
    def intersection(cls, y, y_tilde):
        return cls("intersection", int(y), int(y_tilde))

    def admits(self, labels) -> bool:
        if self.mode == "unconditional":
            return True
        if self.mode == "single":
            return self.y in labels
        return self.y in labels and self.y_tilde in labels

    def __str__(self):
        if self.mode == "unconditional":
            return "uncond"
        if self.mode == "single":
            return f"y={self.y}"
        return f"y={self.y}&{self.y_tilde}"


UNCONDITIONAL = ConditioningSet()


class MixtureWorld:
    """Immutable labelled Gaussian mixture in ``R^dim``."""

    def __init__(self, components: Sequence[Component], num_classes: int, name: str = "world"):
        components = tuple(components)
        if not components:
            raise ValueError("world needs at least one component")
        dims = {c.mean.size for c in components}
        if len(dims) != 1:
            raise ValueError(f"components disagree on dimension: {sorted(dims)}")
        weights = np.array([c.weight for c in components])
        if np.any(weights <= 0.0):
            raise ValueError("component weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"world.weights must sum to 1 (got {weights.sum():.12g})")
        num_classes = int(num_classes)
        seen = set().union(*(c.labels for c in components))
        if not seen <= set(range(num_classes)):
            raise ValueError(f"labels {sorted(seen - set(range(num_classes)))} outside [0, {num_classes})")
        missing = set(range(num_classes)) - seen
        if missing:
            raise ValueError(f"classes {sorted(missing)} appear in no component")
        self.components = components
        self.num_classes = num_classes
        self.dim = dims.pop()
        self.name = name
        self.means = np.stack([c.mean for c in components])
        self.covs = np.stack([c.cov for c in components])
        self.weights = weights
        self.log_weights = np.log(weights)
        # (K, C) membership matrix; a component counts fully toward every label it carries
        self.label_matrix = np.zeros((len(components), num_classes))
        for k, c in enumerate(components):
            self.label_matrix[k, sorted(c.labels)] = 1.0
        for arr in (self.means, self.covs, self.weights, self.log_weights, self.label_matrix):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.components)

    def __repr__(self):
        return f"MixtureWorld({self.name!r}, K={len(self)}, classes={self.num_classes}, dim={self.dim})"

    def select(self, cond: ConditioningSet) -> np.ndarray:
        """Indices of components admitted by ``cond``; raises if none are."""
        for y in (cond.y, cond.y_tilde):
            if y is not None and not 0 <= y < self.num_classes:
                raise ConditioningError(f"class {y} outside [0, {self.num_classes})")
        idx = np.array([k for k, c in enumerate(self.components) if cond.admits(c.labels)], dtype=np.int64)
        if idx.size == 0:
            raise ConditioningError(f"conditioning {cond} selects no component of {self.name}")
        return idx

    def has_intersection(self, y, y_tilde) -> bool:
        return any({y, y_tilde} <= c.labels for c in self.components)

    def conditional_moments(self, cond: ConditioningSet = UNCONDITIONAL):
        """Mean and covariance of ``p(x0 | cond)``."""
        idx = self.select(cond)
        w = self.weights[idx] / self.weights[idx].sum()
        m = self.means[idx]
        mean = w @ m
        dev = m - mean
        cov = np.einsum("k,kij->ij", w, self.covs[idx]) + np.einsum("k,ki,kj->ij", w, dev, dev)
        return mean, cov

    def class_means(self) -> np.ndarray:
        """``E[x0 | y]`` for every class; used as the default label embedding table."""
        return np.stack([self.conditional_moments(ConditioningSet.single(c))[0] for c in range(self.num_classes)])

    def noised_components(self, t, table: ScheduleTable, idx=None):
        """Means, covariances, and log-weights of the mixture at time ``t``."""
        alpha, beta = table.alpha[table.check_time(t)], table.beta[table.check_time(t)]
        idx = np.arange(len(self)) if idx is None else idx
        means = alpha * self.means[idx]
        covs = alpha**2 * self.covs[idx] + beta**2 * np.eye(self.dim)
        return means, covs, self.log_weights[idx]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "dim": self.dim,
            "components": [
                {"mean": c.mean.tolist(), "cov": c.cov.tolist(), "weight": c.weight, "labels": sorted(c.labels)}
                for c in self.components
            ],
        }


def _component_terms(world, x, t, table, idx):
    """Per-component log joint ``log w_k + log N_k(x)`` and precision-weighted residuals."""
    means, covs, logw = world.noised_components(t, table, idx)
    prec = np.linalg.inv(covs)
    _, logdet = np.linalg.slogdet(covs)
    diff = x[:, None, :] - means[None, :, :]
    pdiff = np.einsum("kij,nkj->nki", prec, diff)
    maha = np.einsum("nki,nki->nk", diff, pdiff)
    logjoint = logw[None, :] - 0.5 * (maha + logdet[None, :] + world.dim * _LOG_2PI)
    return logjoint, pdiff, prec


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise ValueError(f"point dimension {x.shape[-1]} does not match world dimension {dim}")
    return x, single


def _check_score_time(world, t, table, idx):
    ti = table.check_time(t)
    if ti == 0 and np.linalg.eigvalsh(world.covs[idx]).min() < 1e-12:
        raise UndefinedScoreError("score at t = 0 undefined for (near-)Dirac components")
    return ti


def sample_data(world: MixtureWorld, cond: ConditioningSet, rng: np.random.Generator, size=None):
    """Draw from ``p(x0 | cond)``; returns ``(points, label_sets)``.

    With ``size=None`` a single point and its frozenset of labels is returned.
    """
    idx = world.select(cond)
    w = world.weights[idx] / world.weights[idx].sum()
    n = 1 if size is None else int(size)
    ks = idx[rng.choice(idx.size, size=n, p=w)]
    chol = np.linalg.cholesky(world.covs)
    z = rng.standard_normal((n, world.dim))
    x = world.means[ks] + np.einsum("nij,nj->ni", chol[ks], z)
    labels = [world.components[k].labels for k in ks]
    if size is None:
        return x[0], labels[0]
    return x, labels


def noised_log_density(world, cond, x, t, table):
    """``log p(x_t | cond)`` (normalised over the selected components)."""
    idx = world.select(cond)
    xb, single = _as_batch(x, world.dim)
    logjoint, _, _ = _component_terms(world, xb, t, table, idx)
    out = logsumexp(logjoint, axis=1) - logsumexp(world.log_weights[idx])
    return out[0] if single else out


def noised_score(world: MixtureWorld, cond: ConditioningSet, x, t, table: ScheduleTable):
    """Exact ``grad_x log p(x_t | cond)`` with log-sum-exp stabilised responsibilities."""
    idx = world.select(cond)
    _check_score_time(world, t, table, idx)
    xb, single = _as_batch(x, world.dim)
    logjoint, pdiff, _ = _component_terms(world, xb, t, table, idx)
    resp = np.exp(logjoint - logsumexp(logjoint, axis=1, keepdims=True))
    score = -np.einsum("nk,nki->ni", resp, pdiff)
    return score[0] if single else score


def noised_score_hessian(world, cond, x, t, table):
    """Score and its Jacobian (the Hessian of the log density), batched."""
    idx = world.select(cond)
    _check_score_time(world, t, table, idx)
    xb, single = _as_batch(x, world.dim)
    logjoint, pdiff, prec = _component_terms(world, xb, t, table, idx)
    resp = np.exp(logjoint - logsumexp(logjoint, axis=1, keepdims=True))
    comp_score = -pdiff
    score = np.einsum("nk,nki->ni", resp, comp_score)
    second = np.einsum("nk,nki,nkj->nij", resp, comp_score, comp_score)
    hess = -np.einsum("nk,kij->nij", resp, prec) + second - np.einsum("ni,nj->nij", score, score)
    if single:
        return score[0], hess[0]
    return score, hess


def oracle_epsilon(world, cond, x, t, table):
    """Noise prediction of the optimal denoiser: ``-beta(t) * score``."""
    return -table.beta[table.check_time(t)] * noised_score(world, cond, x, t, table)


def bayes_posterior(world: MixtureWorld, x, t, table: ScheduleTable):
    """Class posterior ``p(y | x_t)``; dual-labelled components feed every label they carry."""
    xb, single = _as_batch(x, world.dim)
    logjoint, _, _ = _component_terms(world, xb, t, table, np.arange(len(world)))
    resp = np.exp(logjoint - logsumexp(logjoint, axis=1, keepdims=True))
    mass = resp @ world.label_matrix
    post = mass / mass.sum(axis=1, keepdims=True)
    return post[0] if single else post


def _group_rows(conds, n):
    if isinstance(conds, ConditioningSet):
        return {conds: np.arange(n)}
    conds = list(conds)
    if len(conds) != n:
        raise ValueError(f"{len(conds)} conditioning sets for {n} points")
    groups: dict = {}
    for i, c in enumerate(conds):
        groups.setdefault(c, []).append(i)
    return {c: np.asarray(rows) for c, rows in groups.items()}


class OracleNoisePredictor:
    """Exact optimal noise predictor of a world; drop-in for a trained denoiser.

    ``predict(x, t, conds)`` takes a batch of points and either one
    conditioning set or one per row. With ``jacobian=True`` it also returns
    ``d eps / d x`` per row, which the adversarial gradient chains through.
    """

    def __init__(self, world: MixtureWorld, table: ScheduleTable):
        self.world = world
        self.table = table

    @property
    def dim(self):
        return self.world.dim

    def supports(self, cond: ConditioningSet) -> bool:
        try:
            self.world.select(cond)
        except ConditioningError:
            return False
        return True

    def predict(self, x, t, conds: ConditioningSet | Iterable[ConditioningSet], jacobian=False):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        beta = self.table.beta[self.table.check_time(t)]
        eps = np.empty_like(x)
        jac = np.empty((n, self.dim, self.dim)) if jacobian else None
        for cond, rows in _group_rows(conds, n).items():
            if jacobian:
                s, h = noised_score_hessian(self.world, cond, x[rows], t, self.table)
                jac[rows] = -beta * h
            else:
                s = noised_score(self.world, cond, x[rows], t, self.table)
            eps[rows] = -beta * s
        return (eps, jac) if jacobian else eps
