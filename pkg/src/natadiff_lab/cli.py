"""Command-line entry point: ``natadiff-lab <command> [options]``.

Exit status: 0 success, 1 runtime or validation failure, 2 usage or
configuration error. Every command writes into a fresh run directory under
``--out`` and leaves a ``manifest.json`` there describing how to replay it.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import SampleRecord, assign_targets, read_records, run_attacks, write_records
from .config import DATA_DIR, LabConfig, load_config
from .denoiser import DenoiserNet, LearnedNoisePredictor, TrainConfig, train
from .errors import ConfigError, NatadiffError, TargetError, UndefinedRateError
from .eval import MetricReport, mu_ablation, write_csv, write_json
from .guidance import Decoder, EpsilonBundle, GuidanceParams, TransformSet, adv_log_prob, adv_gradient_batch
from .guidance import boundary_epsilon, cfg_epsilon, fixed_eps_provider
from .rng import make_rng
from .schedule import bridge_params
from .victims import (
    BayesVictim,
    MLPVictim,
    PgdConfig,
    ShortcutVictim,
    VictimTrainConfig,
    adversarial_train,
    finite_diff_check,
    fit_victim,
    load_victim,
    pgd_attack,
    save_victim,
)
from .world import UNCONDITIONAL, ConditioningSet, OracleNoisePredictor, noised_log_density, noised_score
from .world import sample_data

DEFAULT_CONFIG = DATA_DIR / "demo.cfg"
TOOL = "natadiff-lab"


class UsageError(Exception):
    """Bad flag combination or reference; exit status 2."""


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="microseconds")


class RunDir:
    """A fresh output directory plus the bookkeeping for its manifest."""

    def __init__(self, base, command):
        base = Path(base)
        base.mkdir(parents=True, exist_ok=True)
        stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        path = base / f"{command}-{stamp}"
        n = 0
        while True:
            try:
                path.mkdir()
                break
            except FileExistsError:
                n += 1
                path = base / f"{command}-{stamp}-{n}"
        self.path = path
        self.command = command
        self.started = _now()
        self.inputs = {}
        self.outputs = []

    def file(self, name) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return p

    def add_input(self, path):
        if path is not None and Path(path).is_file():
            self.inputs[str(path)] = sha256_file(path)

    def finish(self, argv, cfg: LabConfig | None, seed, status, extra=None):
        manifest = {
            "tool": TOOL,
            "version": __version__,
            "command": self.command,
            "argv": list(argv),
            "config": cfg.source if cfg else None,
            "config_digest": cfg.digest if cfg else None,
            "seed": seed,
            "started": self.started,
            "finished": _now(),
            "status": status,
            "inputs": self.inputs,
            "outputs": {name: sha256_file(self.path / name) for name in self.outputs if (self.path / name).exists()},
        }
        manifest.update(extra or {})
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


# fitted victims are deterministic in the config text, so one process fits each once
_FITTED = {}


class Lab:
    """Objects built from one configuration, created lazily and cached."""

    def __init__(self, cfg: LabConfig, victim_dir=None):
        self.cfg = cfg
        self.table = cfg.build_schedule()
        self.world = cfg.build_world()
        self.victim_dir = Path(victim_dir) if victim_dir else None
        self._victims = {}

    @property
    def num_classes(self):
        return self.world.num_classes

    @property
    def dim(self):
        return self.world.dim

    def transforms(self):
        g = self.cfg.section("guidance")
        return TransformSet.preset(g["transforms"], self.dim, g["shift"], g["degrees"], g["reflect"])

    def victim_train_config(self):
        v = self.cfg.section("victims")
        return VictimTrainConfig(v["train_steps"], v["train_batch_size"], v["train_learning_rate"], v["seed"])

    def pgd_config(self, targeted):
        v = self.cfg.section("victims")
        return PgdConfig(v["pgd_epsilon"], v["pgd_step_size"], v["pgd_steps"], targeted=targeted)

    def victim(self, name):
        """Registry: ``bayes``, ``shortcut<k>``, ``trained_mlp``, ``adv_trained``."""
        if name in self._victims:
            return self._victims[name]
        saved = self.victim_dir / f"{name}.ckpt" if self.victim_dir else None
        key = (self.cfg.digest, name)
        if (saved is None or not saved.exists()) and key in _FITTED:
            self._victims[name] = _FITTED[key]
            return _FITTED[key]
        m = re.fullmatch(r"shortcut(\d+)", name)
        if name == "bayes":
            v = BayesVictim(self.world)
        elif saved is not None and saved.exists():
            v = load_victim(saved)
        elif m:
            k = int(m.group(1))
            if k >= self.dim:
                raise UsageError(f"victim {name}: coordinate {k} outside a {self.dim}-D world")
            v = ShortcutVictim.on_coordinate(self.num_classes, self.dim, k, name)
            fit_victim(v, self.world, self.victim_train_config(), self.cfg.section("victims")["shortcut_samples"])
        elif name in ("trained_mlp", "adv_trained"):
            vs = self.cfg.section("victims")
            base = MLPVictim(self.num_classes, self.dim, vs["mlp_hidden"], rng=make_rng(vs["seed"], 0xB0), name=name)
            if name == "trained_mlp":
                v = fit_victim(base, self.world, self.victim_train_config())
            else:
                pgd = PgdConfig(vs["adv_epsilon"], vs["adv_step_size"], vs["adv_steps"])
                tcfg = replace(self.victim_train_config(), steps=vs["adv_train_steps"])
                v = adversarial_train(base, self.world, pgd, tcfg, name=name)
        else:
            raise UsageError(f"unknown victim {name!r} (known: bayes, shortcut<k>, trained_mlp, adv_trained)")
        if saved is None or not saved.exists():
            _FITTED[key] = v
        self._victims[name] = v
        return v

    def verdict_victims(self, names=None):
        names = names or self.cfg.section("eval")["victims"]
        return {n: self.victim(n) for n in names}


def _predictor(lab: Lab, args, run: RunDir):
    if getattr(args, "learned", False):
        if not args.checkpoint:
            raise UsageError("--learned needs --checkpoint")
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint {args.checkpoint} not found")
        run.add_input(args.checkpoint)
        net = DenoiserNet.load(args.checkpoint)
        if net.dim != lab.dim or net.num_timesteps != lab.table.T:
            raise UsageError("checkpoint does not match the configured world and schedule")
        return LearnedNoisePredictor(net)
    return OracleNoisePredictor(lab.world, lab.table)


# ---------------------------------------------------------------- validate


def _validate_checks(lab: Lab, seed):
    """Yield ``(name, message or None)`` for each self-check."""
    rng = make_rng(seed, 0x5A)
    table, world = lab.table, lab.world

    def vp():
        err = np.max(np.abs(table.alpha**2 + table.beta**2 - 1.0))
        return None if err <= 1e-12 else f"alpha^2 + beta^2 deviates by {err:.3g}"

    def bridge():
        pairs = np.sort(rng.integers(0, table.T + 1, size=(100, 2)), axis=1)
        worst = 0.0
        for tau, t in pairs:
            bp = bridge_params(table, int(tau), int(t))
            worst = max(worst, abs(bp.a**2 * table.beta[tau] ** 2 + bp.b_sq - table.beta[t] ** 2))
        return None if worst <= 1e-10 else f"bridge consistency off by {worst:.3g}"

    def score():
        worst = 0.0
        h = 1e-5
        for t in (table.T // 10 or 1, table.T // 2, table.T):
            x = sample_data(world, UNCONDITIONAL, rng, size=10)[0] * table.alpha[t]
            s = noised_score(world, UNCONDITIONAL, x, t, table)
            for i in range(lab.dim):
                e = np.zeros(lab.dim)
                e[i] = h
                fd = (noised_log_density(world, UNCONDITIONAL, x + e, t, table)
                      - noised_log_density(world, UNCONDITIONAL, x - e, t, table)) / (2 * h)
                worst = max(worst, float(np.max(np.abs(fd - s[:, i]))))
        return None if worst <= 1e-5 else f"score differs from finite differences by {worst:.3g}"

    def reductions():
        e = rng.standard_normal((3, 200, lab.dim))
        b = EpsilonBundle(*e)
        g = GuidanceParams(omega=7.5, rho=7.5, mu=0.0)
        if not np.array_equal(cfg_epsilon(b, 1.0), b.eps_cond_y):
            return "cfg_epsilon(omega=1) differs from the conditional prediction"
        if not np.array_equal(boundary_epsilon(b, g), cfg_epsilon(b, 7.5)):
            return "boundary_epsilon(mu=0) differs from cfg_epsilon"
        return None

    def adv_gradient():
        victim = BayesVictim(world)
        pred = OracleNoisePredictor(world, table)
        t = int(table.sampling_times[len(table.sampling_times) // 2])
        y, yt = 0, 1 % lab.num_classes
        params = GuidanceParams(mu=0.0)
        cy, ci = ConditioningSet.single(y), ConditioningSet.single(y)
        prov = fixed_eps_provider(pred, t, UNCONDITIONAL, cy, ci, params)
        x = sample_data(world, cy, rng, size=4)[0] * table.alpha[t]
        ts = lab.transforms()
        g, ok = adv_gradient_batch(x, t, table, prov, Decoder.identity(), ts, victim, yt)
        h = 1e-5
        for row in np.flatnonzero(ok):
            fd = np.empty(lab.dim)
            for i in range(lab.dim):
                e = np.zeros((1, lab.dim))
                e[0, i] = h
                lp = [adv_log_prob(x[row] + sgn * e, t, table, prov, Decoder.identity(), ts, victim, yt)[0]
                      for sgn in (1.0, -1.0)]
                fd[i] = (lp[0] - lp[1]) / (2 * h)
            cos = float(g[row] @ fd / max(np.linalg.norm(fd), 1e-300))
            if cos < 0.999:
                return f"adversarial gradient cosine with finite differences is {cos:.6f}"
        return None

    def victims():
        x = sample_data(world, UNCONDITIONAL, rng, size=5)[0]
        worst = max(finite_diff_check(BayesVictim(world), xi, c) for xi in x for c in range(lab.num_classes))
        return None if worst <= 1e-4 else f"Bayes logit gradient error {worst:.3g}"

    def windows():
        lab.cfg.build_attack().check_schedule(table)
        return None

    for name, fn in (("schedule.vp_identity", vp), ("schedule.bridge_consistency", bridge),
                     ("world.score_gradient", score), ("victims.bayes_gradient", victims),
                     ("guidance.reductions", reductions), ("guidance.adv_gradient", adv_gradient),
                     ("attack.windows", windows)):
        try:
            yield name, fn()
        except (NatadiffError, ValueError) as e:
            yield name, str(e)


def cmd_validate(args, argv):
    cfg = load_config(args.config)
    run = RunDir(args.out, "validate")
    run.add_input(args.config)
    for inc in cfg.includes:
        run.add_input(inc)
    lines, failed = [], False
    lab = None
    try:
        cfg.build_schedule()
        lines.append("ok    schedule")
    except (NatadiffError, ValueError) as e:
        lines.append(f"FAIL  schedule: {e}")
        failed = True
    try:
        cfg.build_world()
        lines.append("ok    world")
    except (NatadiffError, ValueError) as e:
        lines.append(f"FAIL  world: {e}")
        failed = True
    if not failed:
        lab = Lab(cfg)
        for name, problem in _validate_checks(lab, args.seed):
            lines.append(f"ok    {name}" if problem is None else f"FAIL  {name}: {problem}")
            failed |= problem is not None
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    run.file("report.txt").write_text(report)
    status = 1 if failed else 0
    run.finish(argv, cfg, args.seed, status)
    return status


# ---------------------------------------------------------------- train


def cmd_train(args, argv):
    cfg = load_config(args.config)
    lab = Lab(cfg)
    run = RunDir(args.out, "train")
    run.add_input(args.config)
    d = cfg.section("denoiser")
    seed = d["seed"] if args.seed is None else args.seed
    steps = d["steps"] if args.steps is None else args.steps
    if steps < 0:
        raise UsageError("--steps must be >= 0")
    net = DenoiserNet.for_world(lab.world, lab.table, rng=make_rng(seed, 0xD0), hidden=tuple(d["hidden"]),
                                t_embed=d["t_embed"], c_embed=d["c_embed"], activation=d["activation"])
    tcfg = TrainConfig(steps=steps, batch_size=d["batch_size"], learning_rate=d["learning_rate"],
                       drop_prob=d["drop_prob"], seed=seed, loss_weighting=d["loss_weighting"], lr_decay=d["lr_decay"])
    result = train(net, lab.world, lab.table, tcfg)
    digest = result.net.save(run.file("denoiser.ckpt"), {"train": tcfg.to_dict()})
    with open(run.file("loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i, repr(float(v))) for i, v in enumerate(result.losses))
    v = cfg.section("victims")
    names = args.victims.split(",") if args.victims else [v["white_box"], v["transfer"]]
    for name in (n.strip() for n in names if n.strip()):
        victim = lab.victim(name)
        if not isinstance(victim, BayesVictim):
            save_victim(victim, run.file(f"victims/{name}.ckpt"))
    print(f"denoiser checkpoint {digest}")
    if steps:
        print(f"final loss {result.losses[-1]:.6f}")
    print(f"wrote {run.path}")
    run.finish(argv, cfg, seed, 0, {"checkpoint_digest": digest})
    return 0


# ---------------------------------------------------------------- attack


def _resolve_attack(lab: Lab, args) -> AttackConfig:
    a = lab.cfg.section("attack")
    C = lab.num_classes
    for flag in ("target_class", "y"):
        val = getattr(args, flag)
        if val is not None and not 0 <= val < C:
            raise UsageError(f"--{flag.replace('_', '-')} {val} outside [0, {C})")
    mode = args.mode or a["mode"]
    overrides = {"mode": mode, "seed": args.seed, "num_samples": args.num_samples, "y": args.y,
                 "target_class": args.target_class}
    try:
        acfg = lab.cfg.build_attack(**overrides)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if mode == "targeted" and acfg.target_class is not None and acfg.y is not None and acfg.target_class == acfg.y:
        raise UsageError("target class equals the true class")
    if mode == "similarity" and args.target_class is not None:
        raise UsageError("--target-class applies to targeted mode only")
    return acfg


def _pgd_records(lab: Lab, victim, acfg, verdicts):
    ys, yts = assign_targets(acfg, lab.num_classes, lab.world.class_means())
    x0 = np.stack([sample_data(lab.world, ConditioningSet.single(int(y)), make_rng(acfg.seed, i, 2))[0]
                   for i, y in enumerate(ys)])
    xa = pgd_attack(victim, x0, yts, lab.pgd_config(True))
    pred = victim.predict(xa)
    vv = {n: v.predict(xa) for n, v in verdicts.items()}
    records = [
        SampleRecord(id=i, x=[float(c) for c in xa[i]], y=int(ys[i]), y_tilde=int(yts[i]), mode=acfg.mode,
                     attempts=1, mu_final=0.0, s_final=0.0, success=bool(pred[i] == yts[i]),
                     verdicts={n: int(p[i]) for n, p in vv.items()},
                     digest=hashlib.sha256(np.ascontiguousarray(xa[i]).tobytes()).hexdigest())
        for i in range(ys.size)
    ]
    return records, x0, ys


def _write_points(path, ids, x, y):
    with open(path, "w") as fh:
        for i, xi, yi in zip(ids, x, y):
            fh.write(json.dumps({"id": int(i), "x": [float(c) for c in xi], "y": int(yi)}) + "\n")


def cmd_attack(args, argv):
    cfg = load_config(args.config)
    lab = Lab(cfg, args.victim_dir)
    acfg = _resolve_attack(lab, args)
    run = RunDir(args.out, "attack")
    run.add_input(args.config)
    victim = lab.victim(args.victim or cfg.section("victims")["white_box"])
    verdicts = lab.verdict_victims()
    if args.method == "pgd":
        records, x0, ys = _pgd_records(lab, victim, acfg, verdicts)
        _write_points(run.file("clean.jsonl"), range(len(records)), x0, ys)
    else:
        pred = _predictor(lab, args, run)
        acfg.check_schedule(lab.table)
        common = dict(embeddings=lab.world.class_means(), transforms=lab.transforms(), verdict_victims=verdicts)
        records = run_attacks(pred, victim, acfg, lab.table, lab.num_classes, **common)
        if args.with_clean:
            plain = replace(acfg.with_guidance(s=0.0, mu=0.0), R=1, S=1)
            clean = run_attacks(pred, victim, plain, lab.table, lab.num_classes, **common)
            _write_points(run.file("clean.jsonl"), [r.id for r in clean], [r.x for r in clean], [r.y for r in clean])
    write_records(run.file("samples.jsonl"), records)
    rate = np.mean([r.success for r in records])
    print(f"{len(records)} samples, white-box success {rate:.3f} ({victim.name})")
    print(f"wrote {run.path}")
    run.finish(argv, cfg, acfg.seed, 0, {"attack": acfg.to_dict(), "method": args.method})
    return 0


# ---------------------------------------------------------------- eval


def _read_points(path):
    ids, xs, ys = [], [], []
    with open(path) as fh:
        for n, line in enumerate(fh):
            if not line.strip():
                continue
            d = json.loads(line)
            ids.append(int(d.get("id", n)))
            xs.append(d["x"])
            ys.append(int(d["y"]))
    return ids, np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64)


def _reference_points(lab: Lab, n, seed):
    return sample_data(lab.world, UNCONDITIONAL, make_rng(seed, 0xE0), size=n)[0]


def cmd_eval(args, argv):
    if args.adjusted and not args.clean:
        raise UsageError("--adjusted needs --clean")
    cfg = load_config(args.config)
    lab = Lab(cfg, args.victim_dir)
    e = cfg.section("eval")
    seed = e["seed"] if args.seed is None else args.seed
    names = [n.strip() for n in args.victims.split(",")] if args.victims else e["victims"]
    victims = [lab.victim(n) for n in names]
    reference = lab.victim(e["reference"])
    ref_points = _reference_points(lab, e["reference_samples"], seed)
    run = RunDir(args.out, "eval")
    run.add_input(args.config)
    clean = None
    if args.clean:
        run.add_input(args.clean)
        clean = _read_points(args.clean)
    rows, summary = [], {}
    for path in args.samples:
        run.add_input(path)
        records = read_records(path)
        if not records:
            print(f"no samples in {path}", file=sys.stderr)
            run.finish(argv, cfg, seed, 1)
            return 1
        clean_pair = None
        if clean is not None and args.adjusted:
            index = {i: k for k, i in enumerate(clean[0])}
            try:
                order = [index[r.id] for r in records]
            except KeyError as err:
                raise UsageError(f"clean file has no point with id {err.args[0]}") from None
            clean_pair = (clean[1][order], clean[2][order])
        rep = MetricReport.build(records, victims, clean_pair, reference, ref_points)
        summary[path] = rep.to_dict()
        for row in rep.rows():
            rows.append({"samples": path, **row})
    write_csv(run.file("metrics.csv"), rows)
    write_json(run.file("metrics.json"), summary)
    for row in rows:
        adj = ""
        if row["asr_adjusted_targeted"] is not None:
            adj = f"  adjusted targeted {row['asr_adjusted_targeted']:.3f} untargeted {row['asr_adjusted_untargeted']:.3f}"
        print(f"{row['victim']:>14}  asr (unadjusted) {row['asr_unadjusted']:.3f}{adj}")
    print(f"wrote {run.path}")
    run.finish(argv, cfg, seed, 0)
    return 0


# ---------------------------------------------------------------- ablate-mu


def cmd_ablate_mu(args, argv):
    cfg = load_config(args.config)
    lab = Lab(cfg, args.victim_dir)
    e = cfg.section("eval")
    try:
        mu_list = [float(v) for v in args.mu_list.split(",")] if args.mu_list else e["mu_list"]
    except ValueError:
        raise UsageError(f"cannot parse --mu-list {args.mu_list!r}") from None
    if not mu_list or any(not 0.0 <= m <= 1.0 for m in mu_list):
        raise UsageError("--mu-list values must lie in [0, 1]")
    args.target_class = args.y = None
    acfg = _resolve_attack(lab, args)
    run = RunDir(args.out, "ablate-mu")
    run.add_input(args.config)
    pred = _predictor(lab, args, run)
    victim = lab.victim(args.victim or cfg.section("victims")["white_box"])
    victims = [lab.victim(n) for n in e["victims"]]

    def run_fn(c):
        return run_attacks(pred, victim, c, lab.table, lab.num_classes, embeddings=lab.world.class_means(),
                           transforms=lab.transforms())

    ref = _reference_points(lab, e["reference_samples"], e["seed"])
    rows = mu_ablation(run_fn, acfg, mu_list, victims, ref)
    write_csv(run.file("ablation.csv"), rows)
    write_json(run.file("ablation.json"), rows)
    for row in rows:
        print("  ".join(f"{k} {v:.3f}" if isinstance(v, float) else f"{k} {v}" for k, v in row.items()))
    print(f"wrote {run.path}")
    run.finish(argv, cfg, acfg.seed, 0, {"mu_list": mu_list})
    return 0


# ---------------------------------------------------------------- purify


def cmd_purify(args, argv):
    cfg = load_config(args.config)
    lab = Lab(cfg, args.victim_dir)
    e = cfg.section("eval")
    t_star = e["t_star"] if args.t_star is None else args.t_star
    seed = e["seed"] if args.seed is None else args.seed
    if not 0 <= t_star <= lab.table.T:
        raise UsageError(f"--t-star {t_star} outside [0, {lab.table.T}]")
    from .attack import purify

    run = RunDir(args.out, "purify")
    run.add_input(args.config)
    run.add_input(args.input)
    pred = _predictor(lab, args, run)
    with open(args.input) as fh:
        docs = [json.loads(line) for line in fh if line.strip()]
    if not docs:
        print(f"no samples in {args.input}", file=sys.stderr)
        run.finish(argv, cfg, seed, 1)
        return 1
    x = np.asarray([d["x"] for d in docs], dtype=np.float64)
    xp = purify(x, t_star, pred, lab.table, make_rng(seed, 0xF0))
    out = []
    if "y_tilde" in docs[0]:
        verdicts = lab.verdict_victims()
        white = lab.victim(cfg.section("victims")["white_box"])
        vv = {n: v.predict(xp) for n, v in verdicts.items()}
        hit = white.predict(xp)
        for i, d in enumerate(docs):
            d = dict(d, x=[float(c) for c in xp[i]], verdicts={n: int(p[i]) for n, p in vv.items()},
                     success=bool(hit[i] == d["y_tilde"]))
            d["digest"] = hashlib.sha256(np.ascontiguousarray(xp[i]).tobytes()).hexdigest()
            out.append(SampleRecord(**d).to_json())
    else:
        out = [json.dumps(dict(d, x=[float(c) for c in xp[i]])) for i, d in enumerate(docs)]
    run.file("purified.jsonl").write_text("".join(line + "\n" for line in out))
    print(f"purified {len(docs)} points at t* = {t_star}")
    print(f"wrote {run.path}")
    run.finish(argv, cfg, seed, 0, {"t_star": t_star})
    return 0


# ---------------------------------------------------------------- replay


def replay(manifest_path, out=None):
    """Rerun the command recorded in a manifest; returns ``(status, mismatched output names)``."""
    manifest = json.loads(Path(manifest_path).read_text())
    base = Path(out) if out else Path(manifest_path).parent.parent
    argv = list(manifest["argv"]) + ["--out", str(base)]
    before = set(base.glob(f"{manifest['command']}-*")) if base.exists() else set()
    status = main(argv)
    new = sorted(set(base.glob(f"{manifest['command']}-*")) - before)
    if status != manifest["status"] or not new:
        return (status or 1), sorted(manifest["outputs"])
    fresh = json.loads((new[-1] / "manifest.json").read_text())["outputs"]
    bad = sorted(k for k in set(manifest["outputs"]) | set(fresh) if manifest["outputs"].get(k) != fresh.get(k))
    return (1 if bad else 0), bad


def cmd_replay(args, argv):
    status, bad = replay(args.manifest, args.replay_out)
    if bad:
        print("outputs differ: " + ", ".join(bad), file=sys.stderr)
    else:
        print("replay matches the manifest")
    return status


# ---------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(DEFAULT_CONFIG), help="configuration file (default: bundled demo)")
    common.add_argument("--out", default="runs", help="base directory for run directories")

    predictor = argparse.ArgumentParser(add_help=False)
    g = predictor.add_mutually_exclusive_group()
    g.add_argument("--oracle", action="store_true", help="use the exact mixture noise predictor (default)")
    g.add_argument("--learned", action="store_true", help="use a trained denoiser checkpoint")
    predictor.add_argument("--checkpoint", help="denoiser checkpoint for --learned")
    predictor.add_argument("--victim-dir", help="directory of victim checkpoints written by train")

    p = argparse.ArgumentParser(prog=TOOL, description="Natural adversarial sampling on a Gaussian-mixture world.")
    p.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", parents=[common], help="run self-checks on a configuration")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train", parents=[common], help="train the denoiser and victims")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--victims", help="comma-separated victims to train (default: white-box and transfer)")

    s = sub.add_parser("attack", parents=[common, predictor], help="generate adversarial samples")
    s.add_argument("--mode", choices=("targeted", "similarity"))
    s.add_argument("--method", choices=("natadiff", "pgd"), default="natadiff")
    s.add_argument("--seed", type=int)
    s.add_argument("--num-samples", type=int)
    s.add_argument("--target-class", type=int)
    s.add_argument("--y", type=int)
    s.add_argument("--victim", help="white-box victim (default: [victims] white_box)")
    s.add_argument("--with-clean", action="store_true", help="also write unguided counterparts to clean.jsonl")

    s = sub.add_parser("eval", parents=[common], help="compute metrics for sample files")
    s.add_argument("samples", nargs="+")
    s.add_argument("--victims", help="comma-separated victim names")
    s.add_argument("--adjusted", action="store_true", help="also report adjusted ASR (needs --clean)")
    s.add_argument("--clean", help="JSONL of clean counterparts with x, y and id")
    s.add_argument("--victim-dir")
    s.add_argument("--seed", type=int)

    s = sub.add_parser("ablate-mu", parents=[common, predictor], help="sweep mu with paired seeds")
    s.add_argument("--mu-list")
    s.add_argument("--mode", choices=("targeted", "similarity"))
    s.add_argument("--seed", type=int)
    s.add_argument("--num-samples", type=int)
    s.add_argument("--victim")

    s = sub.add_parser("purify", parents=[common, predictor], help="noise to t* and denoise unconditionally")
    s.add_argument("--input", required=True)
    s.add_argument("--t-star", type=int)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("replay", help="rerun a manifest and compare output digests")
    s.add_argument("manifest")
    s.add_argument("--out", dest="replay_out", help="base directory for the replayed run")
    return p


COMMANDS = {
    "validate": cmd_validate,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "ablate-mu": cmd_ablate_mu,
    "purify": cmd_purify,
    "replay": cmd_replay,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args, argv)
    except (ConfigError, UsageError, TargetError) as e:
        print(f"{TOOL}: error: {e}", file=sys.stderr)
        return 2
    except UndefinedRateError as e:
        print(f"{TOOL}: {e}", file=sys.stderr)
        return 1
    except (NatadiffError, ValueError, OSError, KeyError) as e:
        print(f"{TOOL}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
