"""Guided noise predictions and the adversarial classifier gradient.

All functions accept single points or ``(n, d)`` batches. Weights in the
guidance combinations are applied as ``w_y eps_y + w_u eps_u (+ w_i eps_i)``
so that the reductions (omega = 1, omega = 0, mu = 0) hold bit-for-bit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import DegenerateGradientError, ScheduleError
from .schedule import ScheduleTable

__all__ = [
    "GuidanceParams",
    "EpsilonBundle",
    "Decoder",
    "AffineTransform",
    "TransformSet",
    "cfg_epsilon",
    "boundary_epsilon",
    "boundary_weights",
    "predict_x0",
    "adv_gradient",
    "adv_gradient_batch",
    "adv_log_prob",
    "apply_adversarial",
]


@dataclass(frozen=True)
class GuidanceParams:
    omega: float = 7.5
    rho: float = 7.5
    mu: float = 0.2
    s: float = 50.0
    c_l: int = 0
    c_u: int = 700

    def __post_init__(self):
        vals = (self.omega, self.rho, self.mu, self.s, self.c_l, self.c_u)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("guidance parameters must be finite")
        if self.omega < 0 or self.rho < 0 or self.s < 0:
            raise ValueError("omega, rho and s must be non-negative")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if self.c_l > self.c_u:
            raise ValueError("classifier window needs c_l <= c_u")

    def in_window(self, t) -> bool:
        return self.c_l <= t <= self.c_u

    def to_dict(self):
        return asdict(self)


@dataclass
class EpsilonBundle:
    """The three noise predictions one guided step needs."""

    eps_uncond: np.ndarray
    eps_cond_y: np.ndarray
    eps_intersection: np.ndarray

    def __post_init__(self):
        self.eps_uncond = np.asarray(self.eps_uncond, dtype=np.float64)
        self.eps_cond_y = np.asarray(self.eps_cond_y, dtype=np.float64)
        self.eps_intersection = np.asarray(self.eps_intersection, dtype=np.float64)
        if not (self.eps_uncond.shape == self.eps_cond_y.shape == self.eps_intersection.shape):
            raise ValueError("bundle members must share a shape")

    @property
    def v_y(self):
        return self.eps_cond_y - self.eps_uncond

    @property
    def v_intersection(self):
        return self.eps_intersection - self.eps_uncond


def cfg_epsilon(bundle: EpsilonBundle, omega):
    """``omega eps_y + (1 - omega) eps_u``, i.e. ``eps_u + omega v_y``."""
    return omega * bundle.eps_cond_y + (1.0 - omega) * bundle.eps_uncond


def boundary_weights(omega, rho, mu):
    """Weights on ``(eps_y, eps_u, eps_intersection)``; ``mu`` may be a per-row array."""
    mu = np.asarray(mu, dtype=np.float64)
    w_y = omega * (1.0 - mu)
    w_i = mu * rho
    w_u = 1.0 - w_y - w_i
    return w_y, w_u, w_i


def boundary_epsilon(bundle: EpsilonBundle, params: GuidanceParams, mu=None):
    """``eps_u + (omega - mu omega) v_y + mu rho v_intersection``.

    ``mu`` overrides ``params.mu`` and may hold one value per batch row.
    """
    mu = params.mu if mu is None else mu
    w_y, w_u, w_i = boundary_weights(params.omega, params.rho, mu)
    if np.ndim(w_y):
        w_y, w_u, w_i = (w[..., None] for w in (w_y, w_u, w_i))
    return w_y * bundle.eps_cond_y + w_u * bundle.eps_uncond + w_i * bundle.eps_intersection


def predict_x0(x_t, eps_hat, t, table: ScheduleTable):
    ti = table.check_time(t)
    alpha = table.alpha[ti]
    if alpha == 0.0:
        raise ScheduleError("alpha(t) = 0: cannot predict x0")
    return (np.asarray(x_t, dtype=np.float64) - table.beta[ti] * np.asarray(eps_hat, dtype=np.float64)) / alpha


def apply_adversarial(eps_hat, g_unit, s, t, table: ScheduleTable):
    """``eps_hat - s beta(t) g``; ``s`` may be a per-row array."""
    beta = table.beta[table.check_time(t)]
    s = np.asarray(s, dtype=np.float64)
    if s.ndim:
        s = s[:, None]
    return np.asarray(eps_hat) - s * beta * np.asarray(g_unit)


@dataclass(frozen=True, eq=False)
class Decoder:
    """Map from diffusion space to classifier space: identity or ``A u + bias``."""

    A: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.A is not None:
            A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
            if A.shape[0] < A.shape[1] or np.linalg.matrix_rank(A) < A.shape[1]:
                raise ValueError("linear decoder must have full column rank")
            bias = np.zeros(A.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
            object.__setattr__(self, "A", A)
            object.__setattr__(self, "bias", bias)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def linear(cls, A, bias=None):
        return cls(A, bias)

    @property
    def variant(self):
        return "identity" if self.A is None else "linear"

    def out_dim(self, dim):
        return dim if self.A is None else self.A.shape[0]

    def __call__(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.A is None:
            return u
        return u @ self.A.T + self.bias

    def jacobian(self, dim):
        return np.eye(dim) if self.A is None else self.A


@dataclass(frozen=True, eq=False)
class AffineTransform:
    matrix: np.ndarray
    offset: np.ndarray
    name: str = "affine"

    def __call__(self, u):
        return np.asarray(u) @ self.matrix.T + self.offset


def _rotation(dim, degrees):
    M = np.eye(dim)
    th = np.deg2rad(degrees)
    M[:2, :2] = [[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]
    return M


@dataclass(frozen=True, eq=False)
class TransformSet:
    """Affine maps applied to the decoded point before the victim sees it."""

    transforms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.transforms:
            raise ValueError("transform set must be nonempty")
        object.__setattr__(self, "transforms", tuple(self.transforms))

    def __len__(self):
        return len(self.transforms)

    def __iter__(self):
        return iter(self.transforms)

    @classmethod
    def preset(cls, name, dim, shift=0.1, degrees=10.0, reflect=False):
        """``none``: identity only. ``default5``: identity, rotations by +/-degrees
        in the first two coordinates, and shifts by +/-shift along every axis.
        ``reflect`` appends a sign flip of coordinate 0.
        """
        eye = AffineTransform(np.eye(dim), np.zeros(dim), "identity")
        if name == "none":
            ts = [eye]
        elif name == "default5":
            if dim < 2:
                raise ValueError("rotation transforms need dim >= 2")
            ts = [
                eye,
                AffineTransform(_rotation(dim, degrees), np.zeros(dim), f"rot+{degrees:g}"),
                AffineTransform(_rotation(dim, -degrees), np.zeros(dim), f"rot-{degrees:g}"),
                AffineTransform(np.eye(dim), np.full(dim, shift), f"shift+{shift:g}"),
                AffineTransform(np.eye(dim), np.full(dim, -shift), f"shift-{shift:g}"),
            ]
        else:
            raise ValueError(f"unknown transform preset {name!r}")
        if reflect:
            flip = np.eye(dim)
            flip[0, 0] = -1.0
            ts.append(AffineTransform(flip, np.zeros(dim), "reflect0"))
        return cls(tuple(ts))


# eps_provider(x_t) -> (eps_hat, d eps_hat / d x_t), both batched
EpsProvider = Callable[[np.ndarray], tuple]


def _chain(x_t, t, table, eps_provider, decoder, transforms, victim, target):
    ti = table.check_time(t)
    alpha, beta = table.alpha[ti], table.beta[ti]
    if alpha == 0.0:
        raise ScheduleError("alpha(t) = 0: cannot predict x0")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    n, d = x_t.shape
    eps, J_eps = eps_provider(x_t)
    x0 = (x_t - beta * eps) / alpha
    dx0 = (np.eye(d)[None] - beta * J_eps) / alpha
    u = decoder(x0)
    A = decoder.jacobian(d)
    C = victim.num_classes
    logits = np.zeros((n, C))
    dlogits_du = np.zeros((n, C, A.shape[0]))
    for tr in transforms:
        v = tr(u)
        logits += victim.logits(v)
        dlogits_du += victim.logit_jacobian(v) @ tr.matrix
    logits /= len(transforms)
    dlogits_du /= len(transforms)
    target = np.broadcast_to(np.asarray(target), (n,))
    p = softmax(logits, axis=1)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), target] = 1.0
    g_u = np.einsum("nc,ncj->nj", onehot - p, dlogits_du)
    g = np.einsum("nj,jk,nkl->nl", g_u, A, dx0)
    log_p = log_softmax(logits, axis=1)[np.arange(n), target]
    return g, log_p


def adv_log_prob(x_t, t, table, eps_provider, decoder, transforms, victim, target):
    """``log softmax_target(mean_j h(T_j(dec(x0_hat(x_t)))))`` per row."""
    return _chain(x_t, t, table, eps_provider, decoder, transforms, victim, target)[1]


def adv_gradient_batch(x_t, t, table, eps_provider, decoder, transforms, victim, target, min_norm=1e-12):
    """Unit adversarial gradients and a mask of rows whose raw norm was usable.

    Rows with a degenerate gradient come back as zeros so callers can skip them.
    """
    g, _ = _chain(x_t, t, table, eps_provider, decoder, transforms, victim, target)
    norm = np.linalg.norm(g, axis=1)
    ok = norm >= min_norm
    out = np.zeros_like(g)
    out[ok] = g[ok] / norm[ok, None]
    return out, ok


def adv_gradient(x_t, t, table, eps_provider, decoder, transforms, victim, target_class):
    """Normalised gradient in ``x_t`` of the target log-probability of transform-averaged logits."""
    single = np.ndim(x_t) == 1
    g, ok = adv_gradient_batch(x_t, t, table, eps_provider, decoder, transforms, victim, target_class)
    if not np.all(ok):
        raise DegenerateGradientError("adversarial gradient norm below 1e-12")
    return g[0] if single else g


def fixed_eps_provider(predictor, t, conds_u, conds_y, conds_i, params: GuidanceParams, mu=None):
    """Provider giving the boundary-guided eps and its Jacobian from a noise predictor."""

    def provider(x):
        eu, Ju = predictor.predict(x, t, conds_u, jacobian=True)
        ey, Jy = predictor.predict(x, t, conds_y, jacobian=True)
        ei, Ji = predictor.predict(x, t, conds_i, jacobian=True)
        m = params.mu if mu is None else mu
        eps = boundary_epsilon(EpsilonBundle(eu, ey, ei), params, m)
        w_y, w_u, w_i = boundary_weights(params.omega, params.rho, m)
        if np.ndim(w_y):
            w_y, w_u, w_i = (w[:, None, None] for w in (w_y, w_u, w_i))
        return eps, w_y * Jy + w_u * Ju + w_i * Ji

    return provider
