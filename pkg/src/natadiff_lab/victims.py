"""Victim classifiers, the PGD baseline, and adversarial training.

Every victim exposes ``logits(x)`` and ``logit_jacobian(x)`` on batches of
points. The shortcut victim sees the input only through a fixed projection,
which is how a cue-reliant classifier is modelled at this scale.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from . import checkpoint
from .errors import TrainingError
from .nn import MLP, Adam
from .rng import make_rng
from .schedule import ScheduleTable
from .world import UNCONDITIONAL, MixtureWorld, _component_terms, sample_data

__all__ = [
    "Victim",
    "BayesVictim",
    "LinearVictim",
    "ShortcutVictim",
    "MLPVictim",
    "VictimTrainConfig",
    "PgdConfig",
    "pgd_attack",
    "fit_victim",
    "adversarial_train",
    "finite_diff_check",
    "labelled_dataset",
    "load_victim",
]


class Victim:
    """Base class. Subclasses implement ``logits`` and ``logit_jacobian`` for ``(n, d)`` input."""

    name = "victim"
    num_classes: int
    dim: int

    def logits(self, x):
        raise NotImplementedError

    def logit_jacobian(self, x):
        """``d logits / d x`` with shape ``(n, C, d)``."""
        raise NotImplementedError

    def logit_grad(self, x, cls):
        x = np.atleast_2d(x)
        cls = np.broadcast_to(np.asarray(cls), (x.shape[0],))
        return self.logit_jacobian(x)[np.arange(x.shape[0]), cls]

    def probs(self, x):
        return softmax(self.logits(np.atleast_2d(x)), axis=1)

    def predict(self, x):
        return np.argmax(self.logits(np.atleast_2d(x)), axis=1)

    def log_prob_grad(self, x, cls):
        """Gradient of ``log softmax(logits)[cls]`` in ``x``."""
        x = np.atleast_2d(x)
        cls = np.broadcast_to(np.asarray(cls), (x.shape[0],))
        p = softmax(self.logits(x), axis=1)
        onehot = np.zeros_like(p)
        onehot[np.arange(x.shape[0]), cls] = 1.0
        return np.einsum("nc,ncd->nd", onehot - p, self.logit_jacobian(x))

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class BayesVictim(Victim):
    """Exact Bayes classifier of the clean world: logits are ``log p(y | x)``."""

    def __init__(self, world: MixtureWorld, table: ScheduleTable | None = None, name="bayes"):
        self.world = world
        self.num_classes = world.num_classes
        self.dim = world.dim
        self.name = name
        # t = 0 only needs alpha = 1, beta = 0
        self._table = table or ScheduleTable(1, np.array([1.0, 0.5]), np.array([0, 1]))

    def _terms(self, x):
        logjoint, pdiff, _ = _component_terms(self.world, x, 0, self._table, np.arange(len(self.world)))
        logr = logjoint - logsumexp(logjoint, axis=1, keepdims=True)
        return logr, -pdiff

    def logits(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        logr, _ = self._terms(x)
        L = self.world.label_matrix
        with np.errstate(divide="ignore"):
            log_mass = logsumexp(logr[:, :, None] + np.log(L)[None], axis=1)
            log_total = logsumexp(logr + np.log(L.sum(axis=1))[None], axis=1)
        return log_mass - log_total[:, None]

    def logit_jacobian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        logr, comp_score = self._terms(x)
        L = self.world.label_matrix
        with np.errstate(divide="ignore"):
            wc = softmax(logr[:, :, None] + np.log(L)[None], axis=1)
            wt = softmax(logr + np.log(L.sum(axis=1))[None], axis=1)
        per_class = np.einsum("nkc,nkd->ncd", wc, comp_score)
        total = np.einsum("nk,nkd->nd", wt, comp_score)
        return per_class - total[:, None, :]


class LinearVictim(Victim):
    """``logits = x W^T + b`` with ``W`` of shape ``(C, d)``."""

    def __init__(self, W, b=None, name="linear"):
        self.W = np.asarray(W, dtype=np.float64)
        self.num_classes, self.dim = self.W.shape
        self.b = np.zeros(self.num_classes) if b is None else np.asarray(b, dtype=np.float64)
        self.name = name

    def logits(self, x):
        return np.atleast_2d(x) @ self.W.T + self.b

    def logit_jacobian(self, x):
        x = np.atleast_2d(x)
        return np.broadcast_to(self.W, (x.shape[0], *self.W.shape)).copy()


class ShortcutVictim(Victim):
    """Multinomial logistic model on a projection of the input.

    ``projection`` has shape ``(d', d)``; the default keeps coordinate 0.
    Directions in the projection's kernel never change the logits.
    """

    def __init__(self, num_classes, dim, projection=None, name="shortcut0"):
        self.num_classes = int(num_classes)
        self.dim = int(dim)
        if projection is None:
            projection = np.eye(dim)[:1]
        self.projection = np.atleast_2d(np.asarray(projection, dtype=np.float64))
        if self.projection.shape[1] != self.dim:
            raise ValueError("projection must have d columns")
        self.coef = np.zeros((self.num_classes, self.projection.shape[0]))
        self.intercept = np.zeros(self.num_classes)
        self.name = name

    @classmethod
    def on_coordinate(cls, num_classes, dim, coord, name=None):
        return cls(num_classes, dim, np.eye(dim)[[coord]], name=name or f"shortcut{coord}")

    def features(self, x):
        return np.atleast_2d(x) @ self.projection.T

    def logits(self, x):
        return self.features(x) @ self.coef.T + self.intercept

    def logit_jacobian(self, x):
        x = np.atleast_2d(x)
        J = self.coef @ self.projection
        return np.broadcast_to(J, (x.shape[0], *J.shape)).copy()

    def fit(self, x, y, steps=2000, lr=0.05, l2=1e-3):
        """Full-batch gradient descent on cross-entropy; deterministic."""
        f = self.features(x)
        mu, sd = f.mean(axis=0), f.std(axis=0) + 1e-12
        z = (f - mu) / sd
        n = z.shape[0]
        onehot = np.eye(self.num_classes)[y]
        A = np.zeros((self.num_classes, z.shape[1]))
        c = np.zeros(self.num_classes)
        opt = Adam([A, c], lr=lr)
        for _ in range(steps):
            p = softmax(z @ A.T + c, axis=1)
            g = (p - onehot) / n
            opt.step([A, c], [g.T @ z + l2 * A, g.sum(axis=0)])
        # fold standardisation back into the raw-feature coefficients
        self.coef = A / sd
        self.intercept = c - self.coef @ mu
        return self

    def state(self):
        arrays = {"projection": self.projection, "coef": self.coef, "intercept": self.intercept}
        return arrays, {"victim_kind": "shortcut", "name": self.name, "num_classes": self.num_classes, "dim": self.dim}

    @classmethod
    def from_state(cls, arrays, meta):
        v = cls(meta["num_classes"], meta["dim"], arrays["projection"], name=meta["name"])
        v.coef, v.intercept = arrays["coef"], arrays["intercept"]
        return v


class MLPVictim(Victim):
    """Small tanh MLP classifier; standard or adversarially trained."""

    def __init__(self, num_classes, dim, hidden=(32, 32), rng=None, name="trained_mlp", init="xavier"):
        self.num_classes = int(num_classes)
        self.dim = int(dim)
        self.name = name
        self.mlp = MLP([self.dim, *hidden, self.num_classes], rng=rng, init=init)

    def copy(self, name=None):
        other = MLPVictim.__new__(MLPVictim)
        other.num_classes, other.dim = self.num_classes, self.dim
        other.name = name or self.name
        other.mlp = self.mlp.copy()
        return other

    def logits(self, x):
        return self.mlp.forward(np.atleast_2d(x), record=False)

    def logit_jacobian(self, x):
        return self.mlp.input_jacobian(np.atleast_2d(x))

    def state(self):
        arrays = {f"p{i}": p for i, p in enumerate(self.mlp.params)}
        meta = {"victim_kind": "mlp", "name": self.name, "num_classes": self.num_classes, "dim": self.dim,
                "widths": self.mlp.widths}
        return arrays, meta

    @classmethod
    def from_state(cls, arrays, meta):
        v = cls(meta["num_classes"], meta["dim"], hidden=tuple(meta["widths"][1:-1]), name=meta["name"], init="zero")
        v.mlp.params = [arrays[f"p{i}"] for i in range(len(v.mlp.params))]
        return v


def save_victim(victim, path):
    arrays, meta = victim.state()
    return checkpoint.save(path, "victim", arrays, meta)


def load_victim(path):
    _, arrays, meta = checkpoint.load(path, "victim")
    kinds = {"shortcut": ShortcutVictim, "mlp": MLPVictim}
    return kinds[meta["victim_kind"]].from_state(arrays, meta)


def labelled_dataset(world: MixtureWorld, n, rng):
    """World samples with one label each; dual-labelled points get a uniformly chosen label."""
    x, label_sets = sample_data(world, UNCONDITIONAL, rng, size=n)
    y = np.array([sorted(ls)[rng.integers(len(ls))] for ls in label_sets], dtype=np.int64)
    return x, y, label_sets


@dataclass
class PgdConfig:
    epsilon: float = 0.5
    step_size: float = 0.1
    steps: int = 20
    targeted: bool = False
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("PGD epsilon must be positive")
        if self.steps < 0:
            raise ValueError("PGD steps must be >= 0")


def pgd_attack(victim: Victim, x, label, cfg: PgdConfig, rng=None):
    """L-infinity PGD with a sign step and projection after every iterate.

    ``label`` is the target class when ``cfg.targeted`` (ascend its
    log-probability) and the true class otherwise (descend it).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    label = np.broadcast_to(np.asarray(label), (x.shape[0],))
    if cfg.steps == 0:
        return x.copy()
    L = cfg.epsilon
    delta = np.zeros_like(x)
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        delta = rng.uniform(-L, L, size=x.shape)
    sign = 1.0 if cfg.targeted else -1.0
    for _ in range(cfg.steps):
        g = victim.log_prob_grad(x + delta, label)
        delta = np.clip(delta + sign * cfg.step_size * np.sign(g), -L, L)
    return x + delta


@dataclass
class VictimTrainConfig:
    steps: int = 3000
    batch_size: int = 128
    learning_rate: float = 1e-2
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def _train_mlp(victim: MLPVictim, world, cfg: VictimTrainConfig, pgd_cfg: PgdConfig | None):
    data_rng = make_rng(cfg.seed, 0xC1)
    attack_rng = make_rng(cfg.seed, 0xC2)
    opt = Adam(victim.mlp.params, lr=cfg.learning_rate)
    for step in range(cfg.steps):
        x, y, _ = labelled_dataset(world, cfg.batch_size, data_rng)
        if pgd_cfg is not None:
            x = pgd_attack(victim, x, y, PgdConfig(**{**asdict(pgd_cfg), "targeted": False}), attack_rng)
        out = victim.mlp.forward(x)
        logp = log_softmax(out, axis=1)
        loss = -logp[np.arange(y.size), y].mean()
        if not np.isfinite(loss):
            raise TrainingError(f"victim training diverged at step {step}")
        p = np.exp(logp)
        p[np.arange(y.size), y] -= 1.0
        grads, _ = victim.mlp.backward(p / y.size)
        lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / max(cfg.steps, 1)))
        opt.step(victim.mlp.params, grads, lr=lr)
    return victim


def fit_victim(victim, world: MixtureWorld, cfg: VictimTrainConfig, shortcut_samples=20000):
    """Standard training of a shortcut or MLP victim on labelled world samples.

    Shortcut victims are fit full-batch on ``shortcut_samples`` draws.
    """
    if isinstance(victim, ShortcutVictim):
        rng = make_rng(cfg.seed, 0xC0)
        x, y, _ = labelled_dataset(world, shortcut_samples, rng)
        return victim.fit(x, y)
    if isinstance(victim, MLPVictim):
        return _train_mlp(victim, world, cfg, None)
    raise TypeError(f"cannot train {type(victim).__name__}")


def adversarial_train(victim_template: MLPVictim, world, pgd_cfg: PgdConfig, train_cfg: VictimTrainConfig,
                      rng=None, name="adv_trained"):
    """Min-max training: each batch is replaced by its untargeted PGD counterpart.

    ``rng`` is accepted for interface symmetry; all randomness derives from
    ``train_cfg.seed`` so a zero-step inner loop reproduces standard training.
    """
    victim = victim_template.copy(name=name)
    return _train_mlp(victim, world, train_cfg, pgd_cfg)


def finite_diff_check(victim: Victim, x, cls, step=1e-5):
    """Max relative error between ``logit_grad`` and central differences."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    g = victim.logit_grad(x, cls)[0]
    fd = np.empty_like(g)
    for i in range(x.shape[1]):
        e = np.zeros_like(x)
        e[0, i] = step
        fd[i] = (victim.logits(x + e)[0, cls] - victim.logits(x - e)[0, cls]) / (2 * step)
    scale = max(np.max(np.abs(fd)), np.max(np.abs(g)), 1e-12)
    return float(np.max(np.abs(g - fd)) / scale)
