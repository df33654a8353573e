"""Adversarial sampling loops: targeted and similarity-targeted runs, and purification.

The loop is vectorised over a batch of independent runs. Each run owns its
own generator (``make_rng(seed, run_id)``) so its random stream does not
depend on which other runs share its batch.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ScheduleError, TargetError
from .guidance import (
    Decoder,
    EpsilonBundle,
    GuidanceParams,
    TransformSet,
    adv_gradient_batch,
    apply_adversarial,
    boundary_epsilon,
    boundary_weights,
)
from .rng import make_rng
from .schedule import ScheduleTable, bridge_params, ddim_reverse_step, sample_forward
from .world import UNCONDITIONAL, ConditioningSet

__all__ = [
    "AttackConfig",
    "SampleRecord",
    "natadiff_run",
    "natadiff_batch",
    "natadiff_similarity_run",
    "similarity_target",
    "run_attacks",
    "purify",
    "write_records",
    "read_records",
]

MODES = ("targeted", "similarity")
CHUNK = 64


@dataclass(frozen=True)
class AttackConfig:
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    R: int = 5
    k: int = 1
    r_l: int = 500
    r_u: int = 800
    S: int = 5
    delta_mu: float = 0.0
    delta_s: float = 15.0
    y: int | None = None
    mode: str = "targeted"
    target_class: int | None = None
    similarity_sense: str = "most"
    num_samples: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.R < 1 or self.k < 1 or self.S < 1:
            raise ValueError("R, k and S must be >= 1")
        if self.r_l > self.r_u:
            raise ValueError("time-travel window needs r_l <= r_u")
        if self.delta_mu < 0 or self.delta_s < 0:
            raise ValueError("escalation increments must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.similarity_sense not in ("most", "least"):
            raise ValueError("similarity_sense must be 'most' or 'least'")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")

    def with_guidance(self, **kw):
        return replace(self, guidance=replace(self.guidance, **kw))

    def check_schedule(self, table: ScheduleTable):
        g = self.guidance
        for name, t in (("c_l", g.c_l), ("c_u", g.c_u), ("r_l", self.r_l), ("r_u", self.r_u)):
            if not 0 <= t <= table.T:
                raise ScheduleError(f"{name} = {t} outside [0, {table.T}]")

    def to_dict(self):
        d = asdict(self)
        d["guidance"] = self.guidance.to_dict()
        return d


@dataclass
class SampleRecord:
    id: int
    x: list
    y: int
    y_tilde: int
    mode: str
    attempts: int
    mu_final: float
    s_final: float
    success: bool
    verdicts: dict
    digest: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_json(cls, line: str):
        d = json.loads(line)
        return cls(**d)

    @property
    def point(self):
        return np.asarray(self.x, dtype=np.float64)


def write_records(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path):
    with open(path) as fh:
        return [SampleRecord.from_json(line) for line in fh if line.strip()]


def similarity_target(y, candidates, embeddings, sense="most"):
    """Candidate whose embedding has the largest (``most``) or smallest
    (``least``) cosine similarity to that of ``y``; ties go to the smallest id.
    """
    candidates = sorted(int(c) for c in candidates)
    if not candidates:
        raise TargetError("no candidate classes")
    if y in candidates:
        raise TargetError("candidates must exclude the true class")
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0.0):
        raise TargetError("zero-norm class embedding")
    unit = emb / norms[:, None]
    cos = unit[candidates] @ unit[y]
    score = cos if sense == "most" else -cos
    return candidates[int(np.argmax(score))]


def _step_eps(predictor, victim, table, params, decoder, transforms, z, t, conds_u, conds_y, conds_i,
              has_i, mu, s, yt, log, attempt, repeat):
    """Boundary-guided eps at ``(z, t)``, with the adversarial term inside the window.

    Rows without an intersection component (``has_i`` false) use the
    unconditional prediction in its place, so their ``v_intersection`` is zero.
    """
    adversarial = params.in_window(t) and bool(np.any(s > 0))
    eu = predictor.predict(z, t, conds_u, jacobian=adversarial)
    ey = predictor.predict(z, t, conds_y, jacobian=adversarial)
    use_i = (mu > 0) & has_i
    if np.any(use_i):
        idx = np.flatnonzero(use_i)
        ei_part = predictor.predict(z[idx], t, [conds_i[j] for j in idx], jacobian=adversarial)
    if adversarial:
        (eu, Ju), (ey, Jy) = eu, ey
        ei, Ji = eu.copy(), Ju.copy()
        if np.any(use_i):
            ei[idx], Ji[idx] = ei_part
    else:
        ei = eu.copy()
        if np.any(use_i):
            ei[idx] = ei_part
    eps = boundary_epsilon(EpsilonBundle(eu, ey, ei), params, mu)
    if log is not None:
        log.append({"attempt": attempt, "t": int(t), "repeat": repeat, "adversarial": adversarial})
    if not adversarial:
        return eps
    w_y, w_u, w_i = (w[:, None, None] for w in boundary_weights(params.omega, params.rho, mu))
    J = w_y * Jy + w_u * Ju + w_i * Ji
    g, ok = adv_gradient_batch(z, t, table, lambda _x: (eps, J), decoder, transforms, victim, yt)
    return apply_adversarial(eps, g, np.where(ok, s, 0.0), t, table)


def _noise(rngs, d):
    return np.stack([r.standard_normal(d) for r in rngs])


def natadiff_batch(predictor, victim, cfg: AttackConfig, table: ScheduleTable, ys, y_tildes, rngs,
                   decoder: Decoder | None = None, transforms: TransformSet | None = None,
                   ids=None, mode=None, verdict_victims=None, step_log=None):
    """Run the attempt loop for a batch of independent runs.

    ``rngs`` holds one generator per run. ``step_log``, if a list, receives one
    entry per guided evaluation and one per re-noising (of the first run's
    trajectory schedule, which is shared by all runs in the batch).
    """
    cfg.check_schedule(table)
    decoder = decoder or Decoder.identity()
    d = predictor.dim
    transforms = transforms or TransformSet.preset("none", decoder.out_dim(d))
    ys = np.asarray(ys, dtype=np.int64)
    yts = np.asarray(y_tildes, dtype=np.int64)
    n = ys.size
    if np.any(ys == yts):
        raise TargetError("adversarial target must differ from the true class")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    params = cfg.guidance
    ts = table.sampling_times
    N = ts.size - 1

    z_T = _noise(rngs, d)
    mu = np.full(n, params.mu)
    s = np.full(n, params.s)
    done = np.zeros(n, dtype=bool)
    final = np.zeros((n, decoder.out_dim(d)))
    attempts = np.zeros(n, dtype=np.int64)
    mu_used = mu.copy()
    s_used = s.copy()
    hashes = [hashlib.sha256() for _ in range(n)]

    conds_u_all = [UNCONDITIONAL] * n
    conds_y_all = [ConditioningSet.single(int(y)) for y in ys]
    conds_i_all = [ConditioningSet.intersection(int(y), int(yt)) for y, yt in zip(ys, yts)]
    has_i_all = np.array([predictor.supports(c) for c in conds_i_all])

    for attempt in range(1, cfg.S + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        sub_rngs = [rngs[j] for j in act]
        cu = [conds_u_all[j] for j in act]
        cy = [conds_y_all[j] for j in act]
        ci = [conds_i_all[j] for j in act]
        hi_mask = has_i_all[act]
        m, sv, yt = mu[act], s[act], yts[act]
        log = step_log if step_log is not None else None

        def guided(z, t, repeat):
            return _step_eps(predictor, victim, table, params, decoder, transforms, z, t, cu, cy, ci,
                             hi_mask, m, sv, yt, log, attempt, repeat)

        z = z_T[act].copy()
        traj = [z.copy()]
        for i in range(N, 0, -1):
            t, tp = int(ts[i]), int(ts[i - 1])
            reps = cfg.R if cfg.r_l <= t <= cfg.r_u else 1
            for r in range(reps):
                z_prev = ddim_reverse_step(table, z, guided(z, t, r), t, tp)
                if r < reps - 1:
                    hi = min(i - 1 + cfg.k, N)
                    noise = _noise(sub_rngs, d)
                    bp = bridge_params(table, tp, int(ts[hi]))
                    z = bp.a * z_prev + np.sqrt(bp.b_sq) * noise
                    if log is not None:
                        log.append({"attempt": attempt, "t": t, "repeat": r, "renoise": [tp, int(ts[hi])]})
                    for j in range(hi, i, -1):
                        z = ddim_reverse_step(table, z, guided(z, int(ts[j]), r), int(ts[j]), int(ts[j - 1]))
            z = z_prev
            traj.append(z.copy())
        x_final = decoder(z)
        pred = victim.predict(x_final)
        stack = np.stack(traj, axis=1)
        for row, j in enumerate(act):
            hashes[j].update(np.ascontiguousarray(stack[row]).tobytes())
        final[act] = x_final
        attempts[act] = attempt
        mu_used[act] = m
        s_used[act] = sv
        hit = pred == yt
        done[act[hit]] = True
        miss = act[~hit]
        mu[miss] = np.minimum(mu[miss] + cfg.delta_mu, 1.0)
        s[miss] = s[miss] + cfg.delta_s

    verdict_victims = verdict_victims or {}
    verdicts = {name: v.predict(final) for name, v in verdict_victims.items()}
    return [
        SampleRecord(
            id=int(ids[j]),
            x=[float(v) for v in final[j]],
            y=int(ys[j]),
            y_tilde=int(yts[j]),
            mode=mode or cfg.mode,
            attempts=int(attempts[j]),
            mu_final=float(mu_used[j]),
            s_final=float(s_used[j]),
            success=bool(done[j]),
            verdicts={name: int(v[j]) for name, v in verdicts.items()},
            digest=hashes[j].hexdigest(),
        )
        for j in range(n)
    ]


def natadiff_run(predictor, victim, cfg: AttackConfig, table, decoder=None, transforms=None, rng=None,
                 verdict_victims=None, step_log=None, run_id=0):
    """One targeted run for ``cfg.y`` against ``cfg.target_class``."""
    if cfg.y is None or cfg.target_class is None:
        raise TargetError("targeted run needs both y and target_class")
    rng = rng if rng is not None else make_rng(cfg.seed, run_id)
    return natadiff_batch(predictor, victim, cfg, table, [cfg.y], [cfg.target_class], [rng], decoder,
                          transforms, ids=[run_id], mode="targeted", verdict_victims=verdict_victims,
                          step_log=step_log)[0]


def natadiff_similarity_run(predictor, victim, cfg: AttackConfig, table, embeddings, decoder=None,
                            transforms=None, rng=None, verdict_victims=None, step_log=None, run_id=0):
    if cfg.y is None:
        raise TargetError("similarity run needs a true class y")
    C = len(embeddings)
    yt = similarity_target(cfg.y, [c for c in range(C) if c != cfg.y], embeddings, cfg.similarity_sense)
    rng = rng if rng is not None else make_rng(cfg.seed, run_id)
    return natadiff_batch(predictor, victim, cfg, table, [cfg.y], [yt], [rng], decoder, transforms,
                          ids=[run_id], mode="similarity", verdict_victims=verdict_victims,
                          step_log=step_log)[0]


def assign_targets(cfg: AttackConfig, num_classes, embeddings=None):
    """True classes cycle through the classes; targets per mode.

    Targeted mode uses ``cfg.target_class`` when set (true classes then cycle
    over the remaining classes unless ``cfg.y`` is given) and otherwise a random
    class other than ``y`` drawn from the run's own stream.
    """
    n = cfg.num_samples
    if cfg.y is not None:
        ys = np.full(n, cfg.y)
    elif cfg.mode == "targeted" and cfg.target_class is not None:
        pool = np.array([c for c in range(num_classes) if c != cfg.target_class])
        ys = pool[np.arange(n) % pool.size]
    else:
        ys = np.arange(n) % num_classes
    if cfg.mode == "similarity":
        if embeddings is None:
            raise TargetError("similarity mode needs class embeddings")
        table = {y: similarity_target(y, [c for c in range(num_classes) if c != y], embeddings,
                                      cfg.similarity_sense) for y in set(ys.tolist())}
        yts = np.array([table[y] for y in ys])
    elif cfg.target_class is not None:
        yts = np.full(n, cfg.target_class)
        if np.any(ys == yts):
            raise TargetError("target_class equals the true class")
    else:
        yts = np.empty(n, dtype=np.int64)
        for i, y in enumerate(ys):
            others = [c for c in range(num_classes) if c != y]
            yts[i] = others[make_rng(cfg.seed, i, 1).integers(len(others))]
    return ys, yts


def _threads():
    try:
        return max(1, int(os.environ.get("NATADIFF_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def run_attacks(predictor, victim, cfg: AttackConfig, table, num_classes, embeddings=None, decoder=None,
                transforms=None, verdict_victims=None):
    """``cfg.num_samples`` runs in fixed-size chunks; run ``i`` uses ``make_rng(cfg.seed, i)``."""
    ys, yts = assign_targets(cfg, num_classes, embeddings)
    n = ys.size
    chunks = [np.arange(lo, min(lo + CHUNK, n)) for lo in range(0, n, CHUNK)]

    def work(idx):
        rngs = [make_rng(cfg.seed, int(i)) for i in idx]
        return natadiff_batch(predictor, victim, cfg, table, ys[idx], yts[idx], rngs, decoder, transforms,
                              ids=idx, verdict_victims=verdict_victims)

    workers = min(_threads(), len(chunks))
    if workers <= 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(work, chunks))
    return [r for part in parts for r in part]


def purify(x_adv, t_star, predictor, table: ScheduleTable, rng):
    """Noise to ``t_star`` then run the unconditional deterministic sweep back to 0."""
    x = np.asarray(x_adv, dtype=np.float64)
    t_star = int(t_star)
    if not 0 <= t_star <= table.T:
        raise ScheduleError(f"t* = {t_star} outside [0, {table.T}]")
    if t_star == 0:
        return x.copy()
    single = x.ndim == 1
    z = sample_forward(table, np.atleast_2d(x), t_star, rng)
    times = [t_star] + [int(t) for t in table.sampling_times[::-1] if t < t_star]
    for t, tp in zip(times[:-1], times[1:]):
        z = ddim_reverse_step(table, z, predictor.predict(z, t, UNCONDITIONAL), t, tp)
    return z[0] if single else z
