"""Untargeted white-box attacks on a differentiable scorer: PGD, APGD, CW-L2.

A scorer maps an image tensor to a logit vector and carries the gold index.
PGD and APGD ascend the softmax cross-entropy inside an L-inf ball around the
clean image; CW descends ``||delta||_2^2 + c * g`` through a tanh change of
variables so the box constraint holds by construction.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import diffcore as dc
from .datagen import write_imgf32
from .seeding import rng_for

log = logging.getLogger(__name__)

METHODS = ("PGD", "APGD", "CW")
SETTINGS = ("Normal", "Strong")

# steps, step size, epsilon, c, kappa
_PRESETS = {
    ("PGD", "Normal"): dict(steps=20, step_size=2 / 255, epsilon=8 / 255),
    ("APGD", "Normal"): dict(steps=20, epsilon=8 / 255),
    ("CW", "Normal"): dict(steps=50, step_size=0.01, c=20.0, kappa=0.0),
    ("PGD", "Strong"): dict(steps=40, step_size=2 / 255, epsilon=0.2),
    ("APGD", "Strong"): dict(steps=40, epsilon=0.2),
    ("CW", "Strong"): dict(steps=75, step_size=0.05, c=100.0, kappa=0.0),
}

APGD_ALPHA = 0.75
APGD_RHO = 0.75


class AttackAborted(RuntimeError):
    def __init__(self, step, message="non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class AttackConfig:
    method: str
    steps: int
    step_size: Optional[float] = None
    epsilon: Optional[float] = None
    c: Optional[float] = None
    kappa: float = 0.0
    norm: str = ""
    setting: str = "Custom"
    seed: int = 0
    random_start: bool = False
    optimizer: str = "gd"

    def __post_init__(self):
        method = self.method.upper()
        object.__setattr__(self, "method", method)
        if method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if not self.norm:
            object.__setattr__(self, "norm", "L2" if method == "CW" else "Linf")
        if method in ("PGD", "APGD"):
            if self.epsilon is None or self.epsilon < 0:
                raise ValueError(f"{method} needs epsilon >= 0")
            if self.norm != "Linf":
                raise ValueError(f"{method} is an L-inf attack")
            if method == "PGD" and not (self.step_size and self.step_size > 0):
                raise ValueError("PGD needs a positive step size")
        else:
            if self.c is None or self.c <= 0 or self.kappa < 0:
                raise ValueError("CW needs c > 0 and kappa >= 0")
            if self.norm != "L2":
                raise ValueError("CW is an L2 attack")
            if not (self.step_size and self.step_size > 0):
                raise ValueError("CW needs a positive step size")
            if self.optimizer not in ("adam", "gd"):
                raise ValueError(f"unknown CW optimizer {self.optimizer!r}")


def preset(method, setting, seed=0, **overrides):
    """Normal/Strong parameter set for ``method``."""
    method, setting = method.upper(), setting.capitalize()
    try:
        params = dict(_PRESETS[(method, setting)])
    except KeyError:
        raise ValueError(f"no preset for {method}/{setting}") from None
    params.update(overrides)
    return AttackConfig(method=method, setting=setting, seed=seed, **params)


@dataclass
class Scorer:
    """Differentiable image -> logits map with the gold index."""

    fn: Callable
    label: int

    def logits(self, image):
        return np.asarray(self.fn(dc.Tensor(image)).data)

    def predict(self, image):
        return int(np.argmax(self.logits(image)))


@dataclass
class AttackResult:
    delta: np.ndarray
    adv_image: np.ndarray
    linf_norm: float
    l2_norm: float
    loss_trajectory: np.ndarray
    success: bool
    best_objective: float
    method: str = ""
    setting: str = ""
    diagnostics: dict = field(default_factory=dict)


def _finalize(x, adv, traj, best, scorer, cfg, **diag):
    delta = np.clip(adv, 0.0, 1.0) - x
    adv = np.clip(x + delta, 0.0, 1.0)  # exact by construction, up to 1 ulp from the iterate
    return AttackResult(
        delta=delta,
        adv_image=adv,
        linf_norm=float(np.max(np.abs(delta))) if delta.size else 0.0,
        l2_norm=float(np.sqrt(np.sum(delta * delta))),
        loss_trajectory=np.asarray(traj, dtype=np.float64),
        success=scorer.predict(adv) != scorer.label,
        best_objective=float(best),
        method=cfg.method,
        setting=cfg.setting,
        diagnostics=diag,
    )


def _ce_and_grad(scorer, image, step):
    loss, g = dc.grad(lambda t: dc.softmax_cross_entropy(scorer.fn(t), scorer.label), image)
    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
        raise AttackAborted(step)
    return loss, g


def _project_linf(x, z, eps):
    return np.clip(x + np.clip(z - x, -eps, eps), 0.0, 1.0)


def pgd_attack(scorer, x, cfg, rng=None):
    """Signed-gradient ascent on cross-entropy, projected to the eps-ball and box.

    Returns the final iterate; ``loss_trajectory[t]`` is the loss after step t+1.
    """
    if cfg.method != "PGD":
        raise ValueError("pgd_attack needs a PGD config")
    x = np.asarray(x, dtype=np.float64)
    eps = cfg.epsilon
    adv = x.copy()
    if cfg.random_start and eps > 0:
        rng = rng if rng is not None else rng_for(cfg.seed, "pgd-start")
        adv = _project_linf(x, x + rng.uniform(-eps, eps, size=x.shape), eps)
    traj = []
    _, g = _ce_and_grad(scorer, adv, 0)
    for step in range(1, cfg.steps + 1):
        adv = _project_linf(x, adv + cfg.step_size * np.sign(g), eps)
        loss, g = _ce_and_grad(scorer, adv, step)
        traj.append(loss)
    return _finalize(x, adv, traj, max(traj), scorer, cfg)


def apgd_checkpoints(steps):
    """Iteration indices at which APGD reconsiders its step size."""
    p = [0.0, 0.22]
    while p[-1] < 1.0:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    # round away float noise so e.g. 0.22 + 0.19 + 0.16 gives ceil(57.0), not 58
    ws = [math.ceil(round(q * steps, 9)) for q in p[1:]]
    marks = sorted({w for w in ws if w <= steps})
    return [0] + marks


def apgd_attack(scorer, x, cfg, rng=None):
    """Auto-PGD on cross-entropy: momentum, step halving at checkpoints, best restarts.

    Returns the best iterate seen.  ``diagnostics['step_sizes']`` holds the step
    size used at every iteration.
    """
    if cfg.method != "APGD":
        raise ValueError("apgd_attack needs an APGD config")
    x = np.asarray(x, dtype=np.float64)
    eps = cfg.epsilon
    n = cfg.steps
    eta = 2.0 * eps
    marks = set(apgd_checkpoints(n)[1:])
    last_mark = 0

    f0, g0 = _ce_and_grad(scorer, x, 0)
    prev = x.copy()
    cur = _project_linf(x, x + eta * np.sign(g0), eps)
    f_cur, g_cur = _ce_and_grad(scorer, cur, 1)
    traj, etas = [f_cur], [eta]
    best, f_best, g_best = cur.copy(), f_cur, g_cur
    increases = int(f_cur > f0)
    eta_at_mark, best_at_mark = eta, f_best

    for k in range(1, n):
        z = _project_linf(x, cur + eta * np.sign(g_cur), eps)
        nxt = _project_linf(x, cur + APGD_ALPHA * (z - cur) + (1 - APGD_ALPHA) * (cur - prev), eps)
        f_nxt, g_nxt = _ce_and_grad(scorer, nxt, k + 1)
        increases += int(f_nxt > f_cur)
        prev, cur, f_cur, g_cur = cur, nxt, f_nxt, g_nxt
        traj.append(f_cur)
        etas.append(eta)
        if f_cur > f_best:
            best, f_best, g_best = cur.copy(), f_cur, g_cur
        if k + 1 in marks:
            period = k + 1 - last_mark
            stalled = increases < APGD_RHO * period
            stuck = eta_at_mark == eta and best_at_mark == f_best
            eta_at_mark, best_at_mark = eta, f_best
            if stalled or stuck:
                eta /= 2.0
                prev, cur, f_cur, g_cur = best.copy(), best.copy(), f_best, g_best
            last_mark, increases = k + 1, 0
    return _finalize(x, best, traj, f_best, scorer, cfg, step_sizes=etas)


def cw_objective(scorer, x, kappa, c):
    """Builder for ``||adv - x||^2 + c * max(z_y - max_{i!=y} z_i, -kappa)`` in w-space."""
    y = scorer.label
    x_t = dc.Tensor(x)

    def build(w):
        adv = dc.scale(dc.add(dc.tanh(w), 1.0), 0.5)
        z = scorer.fn(adv)
        mask = np.zeros(z.shape)
        mask[y] = -1e30
        other = dc.max(dc.add(z, mask), axis=-1)
        g = dc.clamp_min(dc.sub(dc.take(z, y), other), -kappa)
        return dc.add(dc.sq_l2_norm(dc.sub(adv, x_t)), dc.scale(g, c))

    return build


def cw_attack(scorer, x, cfg, rng=None):
    """CW-L2 via ``adv = (tanh(w) + 1) / 2``.

    Among successful iterates the one with the smallest L2 perturbation is
    returned, otherwise the lowest-objective iterate.
    """
    if cfg.method != "CW":
        raise ValueError("cw_attack needs a CW config")
    x = np.asarray(x, dtype=np.float64)
    w = np.arctanh(np.clip(2.0 * x - 1.0, -1 + 1e-12, 1 - 1e-12))
    build = cw_objective(scorer, x, cfg.kappa, cfg.c)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    b1, b2 = 0.9, 0.999
    traj = []
    best_ok, best_ok_l2 = None, np.inf
    best_any, best_any_obj = None, np.inf
    obj, g = dc.grad(build, w)
    for step in range(1, cfg.steps + 1):
        if cfg.optimizer == "adam":
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - cfg.step_size * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + 1e-8)
        else:
            w = w - cfg.step_size * g
        obj, g = dc.grad(build, w)
        if not np.isfinite(obj) or not np.all(np.isfinite(g)):
            raise AttackAborted(step)
        traj.append(obj)
        adv = np.clip((np.tanh(w) + 1.0) * 0.5, 0.0, 1.0)
        l2 = float(np.sqrt(np.sum((adv - x) ** 2)))
        if scorer.predict(adv) != scorer.label and l2 < best_ok_l2:
            best_ok, best_ok_l2 = adv, l2
        if obj < best_any_obj:
            best_any, best_any_obj = adv, obj
    chosen = best_ok if best_ok is not None else best_any
    return _finalize(x, chosen, traj, min(traj), scorer, cfg)


_ATTACKS = {"PGD": pgd_attack, "APGD": apgd_attack, "CW": cw_attack}


def attack(scorer, x, cfg, rng=None):
    return _ATTACKS[cfg.method](scorer, x, cfg, rng=rng)


# -- batches ------------------------------------------------------------------

@dataclass
class BatchSummary:
    n: int = 0
    n_failed: int = 0
    pre_accuracy: float = 0.0
    post_accuracy: float = 0.0
    success_rate: float = 0.0
    mean_linf: float = 0.0
    mean_l2: float = 0.0
    errors: dict = field(default_factory=dict)


def run_attack_batch(scorer_factory, samples, cfg, parallelism=1):
    """Attack every sample; aborted samples are recorded as ``None`` results.

    Per-sample randomness comes from ``(cfg.seed, sample.id)`` so results do
    not depend on ``parallelism``.  Accuracies are fractions in [0, 1].
    """

    def one(sample):
        scorer = scorer_factory(sample)
        pre_ok = scorer.predict(sample.image) == scorer.label
        try:
            res = attack(scorer, sample.image, cfg, rng=rng_for(cfg.seed, "attack", sample.id))
        except AttackAborted as exc:
            return pre_ok, None, str(exc)
        return pre_ok, res, None

    if parallelism > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(one, samples))
    else:
        outcomes = [one(s) for s in samples]

    results = [r for _, r, _ in outcomes]
    summary = BatchSummary(n=len(samples))
    if not samples:
        return results, summary
    done = [r for r in results if r is not None]
    summary.n_failed = len(samples) - len(done)
    summary.errors = {s.id: e for s, (_, _, e) in zip(samples, outcomes) if e}
    summary.pre_accuracy = float(np.mean([ok for ok, _, _ in outcomes]))
    # an aborted attack leaves the clean image in place
    post = [(not r.success) if r is not None else ok for ok, r, _ in outcomes]
    summary.post_accuracy = float(np.mean(post))
    if done:
        summary.success_rate = float(np.mean([r.success for r in done]))
        summary.mean_linf = float(np.mean([r.linf_norm for r in done]))
        summary.mean_l2 = float(np.mean([r.l2_norm for r in done]))
    return results, summary


def write_attack_outputs(out_dir, samples, results, cfg, summary=None):
    """One ``.imgf32`` per adversarial image plus ``results.json``."""
    out = Path(out_dir)
    (out / "adv").mkdir(parents=True, exist_ok=True)
    records = []
    for s, r in zip(samples, results):
        if r is None:
            records.append({"id": s.id, "method": cfg.method, "setting": cfg.setting, "error": "aborted"})
            continue
        write_imgf32(out / "adv" / f"{s.id}.imgf32", r.adv_image)
        traj = r.loss_trajectory
        records.append(
            {
                "id": s.id,
                "method": cfg.method,
                "setting": cfg.setting,
                "file": f"adv/{s.id}.imgf32",
                "linf": r.linf_norm,
                "l2": r.l2_norm,
                "success": bool(r.success),
                "loss_first": float(traj[0]),
                "loss_last": float(traj[-1]),
                "loss_best": r.best_objective,
            }
        )
    doc = {"config": asdict(cfg), "results": records}
    if summary is not None:
        doc["summary"] = asdict(summary)
    (out / "results.json").write_text(json.dumps(doc, indent=2))
    return out / "results.json"


def with_seed(cfg, seed):
    return replace(cfg, seed=seed)
