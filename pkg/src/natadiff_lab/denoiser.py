"""Conditional noise-prediction network trained with classifier-free label dropout."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .errors import BackwardStateError, LookupTokenError, TrainingError
from .nn import MLP, Adam
from .rng import make_rng
from .schedule import ScheduleTable
from .world import UNCONDITIONAL, ConditioningSet, MixtureWorld, _group_rows, sample_data

__all__ = ["DenoiserNet", "TrainConfig", "TrainResult", "train", "LearnedNoisePredictor", "time_features", "score_link_error"]


def time_features(t, num_timesteps, dim=8):
    """Sinusoidal features of ``t / T`` at octave-spaced frequencies."""
    s = np.asarray(t, dtype=np.float64).reshape(-1, 1) / num_timesteps
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    ang = s * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def default_tokens(world: MixtureWorld):
    """Unconditional token, one per class, one per ordered class pair with an intersection component."""
    tokens = [UNCONDITIONAL] + [ConditioningSet.single(c) for c in range(world.num_classes)]
    for y in range(world.num_classes):
        for yt in range(world.num_classes):
            if y != yt and world.has_intersection(y, yt):
                tokens.append(ConditioningSet.intersection(y, yt))
    return tokens


class DenoiserNet:
    """``eps_theta(x, t, cond)``: an MLP over ``[x, time features, condition embedding]``."""

    def __init__(self, dim, num_timesteps, tokens, hidden=(64, 64), t_embed=8, c_embed=8,
                 activation="tanh", init="xavier", rng=None):
        self.dim = int(dim)
        self.num_timesteps = int(num_timesteps)
        self.t_embed = int(t_embed)
        self.c_embed = int(c_embed)
        self.tokens = list(tokens)
        self.token_index = {tok: i for i, tok in enumerate(self.tokens)}
        if UNCONDITIONAL not in self.token_index:
            raise ValueError("token table must contain the unconditional token")
        widths = [self.dim + self.t_embed + self.c_embed, *hidden, self.dim]
        self.mlp = MLP(widths, rng=rng, activation=activation, init=init)
        if init == "zero":
            self.embedding = np.zeros((len(self.tokens), self.c_embed))
        else:
            self.embedding = rng.standard_normal((len(self.tokens), self.c_embed)) * 0.5
            for i, tok in enumerate(self.tokens):
                if tok.mode == "intersection":
                    pair = [self.token_index[ConditioningSet.single(c)] for c in (tok.y, tok.y_tilde)]
                    self.embedding[i] = self.embedding[pair].mean(axis=0)
        self._last_ids = None

    @classmethod
    def for_world(cls, world, table, rng=None, **kwargs):
        return cls(world.dim, table.num_timesteps, default_tokens(world), rng=rng, **kwargs)

    @property
    def params(self):
        return self.mlp.params + [self.embedding]

    def supports(self, cond) -> bool:
        return cond in self.token_index

    def token_ids(self, conds, n):
        if isinstance(conds, ConditioningSet):
            conds = [conds] * n
        ids = []
        for c in conds:
            try:
                ids.append(self.token_index[c])
            except KeyError:
                raise LookupTokenError(f"no conditioning token for {c}") from None
        if len(ids) != n:
            raise ValueError(f"{len(ids)} conditioning sets for {n} points")
        return np.asarray(ids, dtype=np.int64)

    def _inputs(self, x, t, ids):
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        return np.concatenate([x, time_features(t, self.num_timesteps, self.t_embed), self.embedding[ids]], axis=1)

    def forward(self, x, t, conds=UNCONDITIONAL, ids=None, record=True):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ids = self.token_ids(conds, x.shape[0]) if ids is None else ids
        if record:
            self._last_ids = ids
        return self.mlp.forward(self._inputs(x, t, ids), record=record)

    __call__ = forward

    def backward(self, dY):
        """Returns ``(param_grads, dx)``; ``param_grads`` aligns with ``self.params``."""
        if self._last_ids is None:
            raise BackwardStateError("backward() called before forward()")
        grads, dX = self.mlp.backward(dY)
        d_emb = np.zeros_like(self.embedding)
        np.add.at(d_emb, self._last_ids, dX[:, self.dim + self.t_embed:])
        return grads + [d_emb], dX[:, : self.dim]

    def input_jacobian(self, x, t, conds=UNCONDITIONAL):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ids = self.token_ids(conds, x.shape[0])
        J = self.mlp.input_jacobian(self._inputs(x, t, ids))
        return J[:, :, : self.dim]

    def state(self):
        arrays = {f"p{i}": p for i, p in enumerate(self.mlp.params)}
        arrays["embedding"] = self.embedding
        meta = {
            "dim": self.dim,
            "num_timesteps": self.num_timesteps,
            "widths": self.mlp.widths,
            "activation": self.mlp.activation,
            "t_embed": self.t_embed,
            "c_embed": self.c_embed,
            "tokens": [[tok.mode, tok.y, tok.y_tilde] for tok in self.tokens],
        }
        return arrays, meta

    def save(self, path, extra_meta=None):
        arrays, meta = self.state()
        meta.update(extra_meta or {})
        return checkpoint.save(path, "denoiser", arrays, meta)

    @classmethod
    def from_state(cls, arrays, meta):
        tokens = [ConditioningSet(mode, y, yt) for mode, y, yt in meta["tokens"]]
        widths = meta["widths"]
        net = cls(meta["dim"], meta["num_timesteps"], tokens, hidden=tuple(widths[1:-1]),
                  t_embed=meta["t_embed"], c_embed=meta["c_embed"], activation=meta["activation"], init="zero")
        net.mlp.params = [arrays[f"p{i}"] for i in range(len(net.mlp.params))]
        net.embedding = arrays["embedding"]
        return net

    @classmethod
    def load(cls, path):
        _, arrays, meta = checkpoint.load(path, "denoiser")
        return cls.from_state(arrays, meta)


@dataclass
class TrainConfig:
    steps: int = 6000
    batch_size: int = 256
    learning_rate: float = 3e-3
    drop_prob: float = 0.1
    seed: int = 0
    loss_weighting: str = "eps"
    lr_decay: bool = True

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must lie in [0, 1)")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.loss_weighting not in ("eps", "x0"):
            raise ValueError("loss_weighting must be 'eps' or 'x0'")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    net: DenoiserNet
    losses: np.ndarray = field(repr=False)


def _draw_batch(world, net, table, cfg, rng):
    """Token per row (uncond with prob ``drop_prob``) and matching clean data."""
    n = cfg.batch_size
    cond_tokens = [tok for tok in net.tokens if tok.mode != "unconditional"]
    drop = rng.random(n) < cfg.drop_prob
    picks = rng.integers(0, len(cond_tokens), size=n)
    conds = [UNCONDITIONAL if d else cond_tokens[p] for d, p in zip(drop, picks)]
    x0 = np.empty((n, world.dim))
    for cond, rows in _group_rows(conds, n).items():
        x0[rows], _ = sample_data(world, cond, rng, size=rows.size)
    t = rng.integers(1, table.num_timesteps + 1, size=n)
    eps = rng.standard_normal((n, world.dim))
    xt = table.alpha[t, None] * x0 + table.beta[t, None] * eps
    return xt, t, net.token_ids(conds, n), eps


def train(net: DenoiserNet, world: MixtureWorld, table: ScheduleTable, cfg: TrainConfig) -> TrainResult:
    """Fit ``net`` to predict the forward noise; returns the net and the per-step loss.

    ``loss_weighting="x0"`` minimises ``|x0 - (x_t - beta eps_theta)/alpha|^2``;
    ``"eps"`` drops the ``(beta/alpha)^2`` factor. Both share the same minimiser.
    """
    rng = make_rng(cfg.seed, 0xD3)
    opt = Adam(net.params, lr=cfg.learning_rate)
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        xt, t, ids, eps = _draw_batch(world, net, table, cfg, rng)
        pred = net.forward(xt, t, ids=ids)
        resid = pred - eps
        if cfg.loss_weighting == "x0":
            w = (table.beta[t] / table.alpha[t]) ** 2
        else:
            w = np.ones(t.shape)
        loss = float(np.mean(w * np.sum(resid**2, axis=1)))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        losses[step] = loss
        grads, _ = net.backward(2.0 * w[:, None] * resid / cfg.batch_size)
        lr = cfg.learning_rate
        if cfg.lr_decay:
            lr *= 0.5 * (1.0 + np.cos(np.pi * step / max(cfg.steps, 1)))
        opt.step(net.params, grads, lr=lr)
    return TrainResult(net, losses)


class LearnedNoisePredictor:
    """Noise-predictor adapter with the same interface as ``OracleNoisePredictor``."""

    def __init__(self, net: DenoiserNet):
        self.net = net

    @property
    def dim(self):
        return self.net.dim

    def supports(self, cond) -> bool:
        return self.net.supports(cond)

    def predict(self, x, t, conds, jacobian=False):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        eps = self.net.forward(x, t, conds, record=False)
        if jacobian:
            return eps, self.net.input_jacobian(x, t, conds)
        return eps


def score_link_error(predictor, world: MixtureWorld, table: ScheduleTable, rng, conds=None, num_times=20,
                     per_time=2000, density_floor=0.01):
    """Relative L2 between a predictor's implied score ``-eps/beta`` and the exact score.

    Probe times are evenly spread over ``[1, T]`` (the training distribution of
    ``t``). At each time, points are drawn from the noised conditional and kept
    when their density is at least ``density_floor`` times the largest density
    among the draws. The error is pooled as ``sqrt(sum |d eps|^2 / sum |eps|^2)``,
    which equals the ``beta``-weighted relative L2 of the score. Returns the
    pooled value and a ``{t: value}`` map of per-time errors.
    """
    from .world import noised_log_density, oracle_epsilon

    conds = [UNCONDITIONAL] if conds is None else list(conds)
    times = np.unique(np.round(np.linspace(1, table.T, num_times)).astype(int))
    num = den = 0.0
    per_t = {}
    for t in times:
        tn = td = 0.0
        for cond in conds:
            x0, _ = sample_data(world, cond, rng, size=per_time)
            xt = table.alpha[t] * x0 + table.beta[t] * rng.standard_normal(x0.shape)
            logp = noised_log_density(world, cond, xt, t, table)
            keep = logp >= logp.max() + np.log(density_floor)
            exact = oracle_epsilon(world, cond, xt[keep], t, table)
            approx = predictor.predict(xt[keep], t, cond)
            tn += float(np.sum((approx - exact) ** 2))
            td += float(np.sum(exact**2))
        per_t[int(t)] = float(np.sqrt(tn / td))
        num += tn
        den += td
    return float(np.sqrt(num / den)), per_t
