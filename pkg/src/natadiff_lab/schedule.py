"""Discrete variance-preserving forward process and the deterministic reverse step.

The table stores the cumulative signal fraction ``alpha_bar[t]`` for integer
times ``0..T``. Signal and noise scales are ``alpha(t) = sqrt(alpha_bar[t])``
and ``beta(t) = sqrt(1 - alpha_bar[t])``, so ``x_t = alpha(t) x_0 + beta(t) eps``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ScheduleError

__all__ = [
    "ScheduleTable",
    "ForwardBridgeParams",
    "alpha_beta",
    "bridge_params",
    "sample_forward",
    "resample_bridge",
    "ddim_reverse_step",
    "parse_alpha_bar",
    "parse_sampling_times",
]

ALPHA_BAR_FLOOR = 1e-5


@dataclass(frozen=True, eq=False)
class ScheduleTable:
    num_timesteps: int
    alpha_bar: np.ndarray
    sampling_times: np.ndarray
    _alpha: np.ndarray = field(init=False, repr=False, compare=False)
    _beta: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        T = int(self.num_timesteps)
        if T < 1:
            raise ScheduleError("num_timesteps must be a positive integer")
        ab = np.array(self.alpha_bar, dtype=np.float64)
        if ab.shape != (T + 1,):
            raise ScheduleError(f"alpha_bar must have length T+1 = {T + 1}, got {ab.shape}")
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must equal 1")
        if not np.all(np.isfinite(ab)) or np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ScheduleError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing in t")
        ts = np.array(self.sampling_times, dtype=np.int64)
        if ts.ndim != 1 or ts.size < 2:
            raise ScheduleError("sampling_times needs at least two entries")
        if ts[0] != 0 or ts[-1] != T:
            raise ScheduleError("sampling_times must start at 0 and end at T")
        if np.any(np.diff(ts) <= 0):
            raise ScheduleError("sampling_times must be unique and strictly increasing")
        alpha = np.sqrt(ab)
        beta = np.sqrt(1.0 - ab)
        if np.max(np.abs(alpha**2 + beta**2 - 1.0)) > 1e-12:
            raise ScheduleError("variance-preserving identity violated")
        for name, arr in (("alpha_bar", ab), ("sampling_times", ts), ("_alpha", alpha), ("_beta", beta)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "num_timesteps", T)

    @classmethod
    def linear(cls, num_timesteps=1000, end=ALPHA_BAR_FLOOR, num_sampling_steps=200):
        """Alpha-bar falling linearly from 1 at t=0 to ``end`` at t=T."""
        ab = np.linspace(1.0, max(end, ALPHA_BAR_FLOOR), num_timesteps + 1)
        return cls(num_timesteps, ab, uniform_sampling_times(num_timesteps, num_sampling_steps))

    @classmethod
    def ddpm_linear(cls, num_timesteps=1000, beta_start=1e-4, beta_end=0.02, num_sampling_steps=200):
        """The usual DDPM/DDIM schedule: per-step variances linear in t."""
        return cls(
            num_timesteps,
            _ddpm_alpha_bar(num_timesteps, beta_start, beta_end),
            uniform_sampling_times(num_timesteps, num_sampling_steps),
        )

    @classmethod
    def from_spec(cls, num_timesteps, alpha_bar, sampling_times):
        """Build from config values; strings use the ``linear(..)``/``uniform(N)`` shorthands."""
        T = int(num_timesteps)
        return cls(T, parse_alpha_bar(alpha_bar, T), parse_sampling_times(sampling_times, T))

    @property
    def T(self) -> int:
        return self.num_timesteps

    @property
    def alpha(self) -> np.ndarray:
        return self._alpha

    @property
    def beta(self) -> np.ndarray:
        return self._beta

    def check_time(self, t) -> int:
        ti = int(t)
        if ti != t or not 0 <= ti <= self.num_timesteps:
            raise ScheduleError(f"time index {t!r} outside [0, {self.num_timesteps}]")
        return ti

    def to_dict(self) -> dict:
        return {
            "num_timesteps": self.num_timesteps,
            "alpha_bar": self.alpha_bar.tolist(),
            "sampling_times": self.sampling_times.tolist(),
        }


@dataclass(frozen=True)
class ForwardBridgeParams:
    """Scale and variance of ``x_t | x_tau ~ N(a x_tau, b_sq I)``."""

    a: float
    b_sq: float


def uniform_sampling_times(num_timesteps, n):
    n = int(n)
    if n < 2:
        raise ScheduleError("need at least 2 sampling times")
    if n > num_timesteps + 1:
        raise ScheduleError(f"cannot place {n} distinct sampling times in [0, {num_timesteps}]")
    ts = np.round(np.linspace(0, num_timesteps, n)).astype(np.int64)
    if np.any(np.diff(ts) <= 0):
        raise ScheduleError("uniform sampling times collided after rounding")
    return ts


def _ddpm_alpha_bar(num_timesteps, beta_start, beta_end):
    betas = np.linspace(beta_start, beta_end, num_timesteps)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


_CALL = re.compile(r"^\s*(\w+)\s*\((.*)\)\s*$")


def _call_args(text):
    m = _CALL.match(text)
    if not m:
        return None, None
    args = [a.strip() for a in m.group(2).split(",") if a.strip()]
    return m.group(1), args


def parse_alpha_bar(value, num_timesteps):
    """Accept an explicit array or number list, ``linear(start, end)`` or ``ddpm_linear(b0, b1)``."""
    if isinstance(value, str):
        name, args = _call_args(value)
        if name is None:
            try:
                return np.array([float(v) for v in re.split(r"[,\s]+", value.strip()) if v])
            except ValueError:
                raise ScheduleError(f"unrecognised alpha_bar value {value!r}") from None
        if name == "linear" and len(args) == 2:
            start, end = float(args[0]), float(args[1])
            return np.linspace(start, end, num_timesteps + 1)
        if name == "ddpm_linear" and len(args) == 2:
            return _ddpm_alpha_bar(num_timesteps, float(args[0]), float(args[1]))
        raise ScheduleError(f"unrecognised alpha_bar shorthand {value!r}")
    return np.asarray(value, dtype=np.float64)


def parse_sampling_times(value, num_timesteps):
    """Accept an explicit integer list or ``uniform(n)``."""
    if isinstance(value, str):
        name, args = _call_args(value)
        if name is None:
            try:
                return np.array([int(v) for v in re.split(r"[,\s]+", value.strip()) if v], dtype=np.int64)
            except ValueError:
                raise ScheduleError(f"unrecognised sampling_times value {value!r}") from None
        if name == "uniform" and len(args) == 1:
            return uniform_sampling_times(num_timesteps, int(args[0]))
        raise ScheduleError(f"unrecognised sampling_times shorthand {value!r}")
    return np.asarray(value, dtype=np.int64)


def alpha_beta(table: ScheduleTable, t) -> tuple[float, float]:
    ti = table.check_time(t)
    return float(table.alpha[ti]), float(table.beta[ti])


def bridge_params(table: ScheduleTable, tau, t) -> ForwardBridgeParams:
    tau_i, t_i = table.check_time(tau), table.check_time(t)
    if tau_i > t_i:
        raise ScheduleError(f"bridge requires tau <= t, got tau={tau_i}, t={t_i}")
    a_tau, b_tau = table.alpha[tau_i], table.beta[tau_i]
    a_t, b_t = table.alpha[t_i], table.beta[t_i]
    a = a_t / a_tau
    b_sq = b_t**2 - (a * b_tau) ** 2
    if tau_i == t_i:
        a, b_sq = 1.0, 0.0
    # rounding can leave a tiny negative variance for near-equal times
    return ForwardBridgeParams(float(a), float(max(b_sq, 0.0)))


def sample_forward(table: ScheduleTable, x0, t, rng: np.random.Generator):
    """Draw ``x_t ~ N(alpha(t) x0, beta(t)^2 I)``; ``x0`` may carry leading batch axes."""
    alpha, beta = alpha_beta(table, t)
    x0 = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    return alpha * x0 + beta * rng.standard_normal(x0.shape)


def resample_bridge(table: ScheduleTable, x_prev, tau, t, rng: np.random.Generator):
    """Re-noise a state at ``tau`` forward to ``t > tau``."""
    if int(tau) >= int(t):
        raise ScheduleError(f"resample_bridge requires tau < t, got tau={tau}, t={t}")
    p = bridge_params(table, tau, t)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    return p.a * x_prev + np.sqrt(p.b_sq) * rng.standard_normal(x_prev.shape)


def ddim_reverse_step(table: ScheduleTable, x_t, eps_hat, t, t_prev):
    """Deterministic (eta = 0) DDIM update from ``t`` down to ``t_prev``."""
    ti, tp = table.check_time(t), table.check_time(t_prev)
    if tp >= ti:
        raise ScheduleError(f"reverse step requires t_prev < t, got {tp} >= {ti}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"eps_hat shape {eps_hat.shape} does not match x_t {x_t.shape}")
    a_t = table.alpha[ti]
    if a_t == 0.0:
        raise ScheduleError("alpha(t) = 0: singular schedule")
    x0_hat = (x_t - table.beta[ti] * eps_hat) / a_t
    return table.alpha[tp] * x0_hat + table.beta[tp] * eps_hat
