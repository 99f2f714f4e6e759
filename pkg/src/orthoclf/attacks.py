"""Norm-bounded evaluation attacks: FGSM, PGD (linf/l2/l1), DeepFool, SLIDE.

All attacks ascend the logit-margin objective max_{j != y} z_j - z_y, which
under equal-norm head columns is the same thing as shrinking the distance
advantage of the true center, so it stays meaningful without a softmax.

Every attack returns an AttackResult whose samples provably sit inside the
epsilon ball of the configured norm (tolerance 1e-9) and inside the [0,1]
pixel box; DeepFool trajectories that only flip outside the budget are
discarded and the clean input returned for that sample.

Randomness (PGD/SLIDE random starts) is drawn per sample from
default_rng([seed, sample_id]) so results do not depend on batch chunking
or worker count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from . import kernels, models

METHOD_FGSM = "fgsm"
METHOD_PGD = "pgd"
METHOD_DEEPFOOL = "deepfool"
METHOD_SLIDE = "slide"
NORM_LINF = "linf"
NORM_L1 = "l1"
NORM_L2 = "l2"

BALL_TOL = 1e-9

# per-method defaults for the standard evaluation grid; fgsm is the one-step
# special case (full-epsilon step)
_DEFAULTS = {
    (METHOD_FGSM, NORM_LINF): dict(iters=1, rel_step=1.0),
    (METHOD_PGD, NORM_LINF): dict(iters=20, rel_step=0.1),
    (METHOD_PGD, NORM_L1): dict(iters=50, rel_step=0.05),
    (METHOD_PGD, NORM_L2): dict(iters=50, rel_step=0.1),
    (METHOD_DEEPFOOL, NORM_LINF): dict(iters=50, rel_step=0.0),  # step unused; overshoot 0.02
    (METHOD_SLIDE, NORM_L1): dict(iters=50, rel_step=0.05),
}


@dataclass(frozen=True)
class AttackConfig:
    method: str
    epsilon: float
    norm: str = None  # defaults to the method's usual norm
    iters: int = None
    rel_step: float = None
    overshoot: float = 0.02
    random_start: bool = True  # evaluation default; ignored by fgsm/deepfool
    sparsity_q: float = 0.05

    def __post_init__(self):
        methods = (METHOD_FGSM, METHOD_PGD, METHOD_DEEPFOOL, METHOD_SLIDE)
        if self.method not in methods:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.norm is None:
            usual = {METHOD_SLIDE: NORM_L1}
            object.__setattr__(self, "norm", usual.get(self.method, NORM_LINF))
        if self.norm not in (NORM_LINF, NORM_L1, NORM_L2):
            raise ValueError(f"unknown norm {self.norm!r}")
        if (self.method, self.norm) not in _DEFAULTS:
            raise ValueError(f"unsupported norm {self.norm!r} for {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon < 0")
        defaults = _DEFAULTS[(self.method, self.norm)]
        if self.iters is None:
            object.__setattr__(self, "iters", defaults["iters"])
        if self.rel_step is None:
            object.__setattr__(self, "rel_step", defaults["rel_step"])
        if int(self.iters) != self.iters or self.iters < 1:
            raise ValueError("iters < 1")
        if not 0.0 < self.sparsity_q <= 1.0:
            raise ValueError("sparsity_q outside (0,1]")


@dataclass(frozen=True)
class AttackResult:
    x_adv: np.ndarray
    labels: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    success: np.ndarray  # adv_pred != label
    pert_norm: np.ndarray  # measured in `norm`
    norm: str
    epsilon: float


def _pert_norms(delta, norm):
    d = delta.reshape(len(delta), -1)
    if norm == NORM_LINF:
        return np.abs(d).max(axis=1) if d.shape[1] else np.zeros(len(d))
    if norm == NORM_L1:
        return np.abs(d).sum(axis=1)
    return np.sqrt((d * d).sum(axis=1))


def _finish(params, spec, w, x0, x_adv, labels, clean_pred, norm, epsilon):
    labels = np.asarray(labels)
    norms = _pert_norms(x_adv - x0, norm)
    if norms.max(initial=0.0) > epsilon + BALL_TOL:
        raise AssertionError(f"ball violation: {norms.max()} > {epsilon}")
    if x_adv.min(initial=0.0) < -0.0 or x_adv.max(initial=1.0) > 1.0:
        raise AssertionError("pixel range violation")
    adv_pred = models.predict(w, models.encode(params, spec, x_adv))
    return AttackResult(
        x_adv=x_adv,
        labels=labels,
        clean_pred=np.asarray(clean_pred),
        adv_pred=adv_pred,
        success=adv_pred != labels,
        pert_norm=norms,
        norm=norm,
        epsilon=float(epsilon),
    )


def attack_loss_grad(params, spec, w, x, y):
    """d/dx of the margin objective max_{j != y} z_j - z_y."""
    return _margin_value_grad(params, spec, w, np.ascontiguousarray(x, np.float64), y)[1]


def _margin_value_grad(params, spec, w, x, y):
    y = np.asarray(y)
    tape = gc.Tape()
    xn = tape.leaf(x, "x")
    f = models.encode(params, spec, xn, tape, frozen=True)
    z = models.head_logits(w, f, tape)
    masked = z.value.copy()
    masked[np.arange(len(y)), y] = -np.inf
    j = np.argmax(masked, axis=1)  # runner-up class, ties -> lowest index
    margin = gc.sub(tape, gc.pick(tape, z, j), gc.pick(tape, z, y))
    tape.backward(gc.sum_(tape, margin))
    return margin.value, tape.leaf_grad("x")


def project(delta, norm, epsilon):
    """Euclidean projection onto the epsilon ball of the given norm.

    Accepts a single vector or a batch of rows; rows already inside the ball
    come back unchanged.
    """
    delta = np.ascontiguousarray(delta, dtype=np.float64)
    single = delta.ndim == 1
    rows = delta.reshape(1, -1) if single else delta.reshape(len(delta), -1)
    if norm == NORM_LINF:
        out = np.clip(rows, -epsilon, epsilon)
    elif norm == NORM_L2:
        nrm = np.sqrt((rows * rows).sum(axis=1))
        scale = np.where(nrm > epsilon, np.divide(epsilon, np.maximum(nrm, 1e-300)), 1.0)
        out = rows * scale[:, None]
    elif norm == NORM_L1:
        out = kernels.l1_project_rows(rows, epsilon)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return out.reshape(delta.shape)


def _random_start(shape, norm, epsilon, seed, ids):
    """Per-sample uniform draw inside the epsilon ball of the given norm."""
    b, d = shape
    delta = np.zeros((b, d))
    if epsilon == 0.0:
        return delta
    for i in range(b):
        rng = np.random.default_rng([seed, int(ids[i])])
        if norm == NORM_LINF:
            delta[i] = rng.uniform(-epsilon, epsilon, size=d)
        elif norm == NORM_L2:
            g = rng.normal(size=d)
            g /= max(np.sqrt(g @ g), 1e-300)
            delta[i] = epsilon * rng.uniform() ** (1.0 / d) * g
        else:  # L1: radius * point uniform on the cross-polytope
            mag = rng.dirichlet(np.ones(d))
            signs = rng.integers(0, 2, size=d) * 2 - 1
            delta[i] = epsilon * rng.uniform() ** (1.0 / d) * mag * signs
    return delta


def fgsm(params, spec, w, x, y, epsilon):
    """Single full-epsilon sign step on the margin gradient."""
    if epsilon < 0:
        raise ValueError("epsilon < 0")
    x0 = np.ascontiguousarray(x, dtype=np.float64)
    clean_pred = models.predict(w, models.encode(params, spec, x0))
    g = attack_loss_grad(params, spec, w, x0, y)
    x_adv = kernels.linf_step(x0, g, x0, epsilon, epsilon)
    return _finish(params, spec, w, x0, x_adv, y, clean_pred, NORM_LINF, epsilon)


def pgd(params, spec, w, x, y, cfg: AttackConfig, seed=0, ids=None):
    """Iterated steepest ascent in the configured norm geometry.

    linf: sign step; l2: normalized-gradient step; l1: single step on the
    max-|gradient| coordinate. Every iterate is projected back to the ball
    and clamped to [0,1].
    """
    if cfg.method != METHOD_PGD:
        raise ValueError(f"pgd called with method {cfg.method!r}")
    x0 = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y)
    b = len(x0)
    ids = np.arange(b) if ids is None else np.asarray(ids)
    clean_pred = models.predict(w, models.encode(params, spec, x0))
    step = cfg.rel_step * cfg.epsilon
    if cfg.random_start:
        delta = _random_start(x0.shape, cfg.norm, cfg.epsilon, seed, ids)
        xc = np.clip(x0 + delta, 0.0, 1.0)
    else:
        xc = x0.copy()
    for _ in range(cfg.iters):
        g = attack_loss_grad(params, spec, w, xc, y)
        if cfg.norm == NORM_LINF:
            xc = kernels.linf_step(xc, g, x0, step, cfg.epsilon)
            continue
        if cfg.norm == NORM_L2:
            nrm = np.sqrt((g * g).sum(axis=1))
            unit = g * np.where(nrm > 0, 1.0 / np.maximum(nrm, 1e-300), 0.0)[:, None]
            delta = (xc + step * unit) - x0
        else:  # L1: move only the steepest coordinate of each sample
            delta = xc - x0
            c = np.argmax(np.abs(g), axis=1)  # ties -> lowest index
            rows = np.arange(b)
            delta[rows, c] += step * np.sign(g[rows, c])
        delta = project(delta, cfg.norm, cfg.epsilon)
        xc = np.clip(x0 + delta, 0.0, 1.0)
    return _finish(params, spec, w, x0, xc, y, clean_pred, cfg.norm, cfg.epsilon)


def _logit_jacobian(params, spec, w, x_row):
    """Logits (K,) and their input gradients (K, d) via a replicated batch."""
    k = w.K
    rep = np.tile(x_row, (k, 1))
    tape = gc.Tape()
    xn = tape.leaf(rep, "x")
    f = models.encode(params, spec, xn, tape, frozen=True)
    z = models.head_logits(w, f, tape)
    diag = gc.pick(tape, z, np.arange(k))
    tape.backward(gc.sum_(tape, diag))
    return z.value[0].copy(), tape.leaf_grad("x")


def deepfool(params, spec, w, x, y, cfg: AttackConfig, threads=1):
    """Iterative linearization with minimal-linf steps and overshoot.

    A sample counts as a success only when the flip happens inside the
    epsilon budget; out-of-budget flips and iteration-cap exits return the
    clean input for that sample so the ball invariant stays intact.
    """
    if cfg.method != METHOD_DEEPFOOL:
        raise ValueError(f"deepfool called with method {cfg.method!r}")
    x0 = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y)
    clean_pred = models.predict(w, models.encode(params, spec, x0))
    x_adv = x0.copy()

    def solve(b):
        if clean_pred[b] != y[b]:
            return None  # already misclassified: zero iterations, zero pert
        xb = x0[b].copy()
        flipped = False
        for _ in range(cfg.iters):
            z, jac = _logit_jacobian(params, spec, w, xb)
            if int(np.argmax(z)) != y[b]:
                flipped = True
                break
            diffs = z - z[y[b]]
            grads = jac - jac[y[b]]
            denom = np.abs(grads).sum(axis=1)  # l1 norms: dual of linf
            denom[y[b]] = np.inf
            ok = denom > 0
            ok[y[b]] = False
            if not ok.any():
                break  # flat logits, nowhere to go
            ratio = np.where(ok, np.abs(diffs) / denom, np.inf)
            l = int(np.argmin(ratio))  # ties -> lowest index
            step = (np.abs(diffs[l]) / denom[l]) * np.sign(grads[l])
            xb = np.clip(xb + (1.0 + cfg.overshoot) * step, 0.0, 1.0)
        if not flipped:
            zl = models.head_logits(w, models.encode(params, spec, xb[None]))[0]
            flipped = int(np.argmax(zl)) != y[b]
        if flipped and np.abs(xb - x0[b]).max() <= cfg.epsilon + BALL_TOL:
            return xb
        return None

    indices = range(len(x0))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(solve, indices))
    else:
        rows = [solve(b) for b in indices]
    for b, row in enumerate(rows):
        if row is not None:
            x_adv[b] = row
    return _finish(params, spec, w, x0, x_adv, y, clean_pred, NORM_LINF, cfg.epsilon)


def slide(params, spec, w, x, y, cfg: AttackConfig, seed=0, ids=None):
    """l1 attack stepping on the top sparsity_q fraction of coordinates."""
    if cfg.method != METHOD_SLIDE:
        raise ValueError(f"slide called with method {cfg.method!r}")
    x0 = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y)
    ids = np.arange(len(x0)) if ids is None else np.asarray(ids)
    clean_pred = models.predict(w, models.encode(params, spec, x0))
    step = cfg.rel_step * cfg.epsilon
    if cfg.random_start:
        delta = _random_start(x0.shape, NORM_L1, cfg.epsilon, seed, ids)
        delta = np.clip(x0 + delta, 0.0, 1.0) - x0
    else:
        delta = np.zeros_like(x0)
    for _ in range(cfg.iters):
        g = attack_loss_grad(params, spec, w, np.clip(x0 + delta, 0.0, 1.0), y)
        delta = kernels.topq_sign_step(delta, g, step, cfg.sparsity_q)
        delta = kernels.l1_project_rows(delta, cfg.epsilon)
        delta = np.clip(x0 + delta, 0.0, 1.0) - x0
    x_adv = np.clip(x0 + delta, 0.0, 1.0)
    return _finish(params, spec, w, x0, x_adv, y, clean_pred, NORM_L1, cfg.epsilon)


def run_attack(params, spec, w, x, y, cfg: AttackConfig, seed=0, ids=None, threads=1):
    if cfg.method == METHOD_FGSM:
        return fgsm(params, spec, w, x, y, cfg.epsilon)
    if cfg.method == METHOD_PGD:
        return pgd(params, spec, w, x, y, cfg, seed=seed, ids=ids)
    if cfg.method == METHOD_DEEPFOOL:
        return deepfool(params, spec, w, x, y, cfg, threads=threads)
    return slide(params, spec, w, x, y, cfg, seed=seed, ids=ids)


def robust_accuracy(params, spec, w, x, y, cfg: AttackConfig, seed=0, threads=1):
    """(robust accuracy, clean accuracy, AttackResult) after the attack.

    threads > 1 fans the batch out in contiguous chunks; per-sample RNG ids
    are global positions, so the outcome is identical at any worker count.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y)
    if threads > 1 and cfg.method != METHOD_DEEPFOOL and len(x) >= threads:
        bounds = np.linspace(0, len(x), threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(
                pool.map(
                    lambda se: run_attack(
                        params, spec, w, x[se[0] : se[1]], y[se[0] : se[1]], cfg,
                        seed=seed, ids=np.arange(se[0], se[1]),
                    ),
                    zip(bounds[:-1], bounds[1:]),
                )
            )
        res = AttackResult(
            x_adv=np.concatenate([p.x_adv for p in parts]),
            labels=y,
            clean_pred=np.concatenate([p.clean_pred for p in parts]),
            adv_pred=np.concatenate([p.adv_pred for p in parts]),
            success=np.concatenate([p.success for p in parts]),
            pert_norm=np.concatenate([p.pert_norm for p in parts]),
            norm=parts[0].norm,
            epsilon=cfg.epsilon,
        )
    else:
        res = run_attack(params, spec, w, x, y, cfg, seed=seed, threads=threads)
    robust = float(np.mean(res.adv_pred == y))
    clean = float(np.mean(res.clean_pred == y))
    return robust, clean, res


def export_csv(result: AttackResult, path):
    """sample_id, label, clean_pred, adv_pred, perturbation_norm, success."""
    with open(path, "w") as fh:
        fh.write("sample_id,label,clean_pred,adv_pred,perturbation_norm,success\n")
        for i in range(len(result.labels)):
            fh.write(
                f"{i},{result.labels[i]},{result.clean_pred[i]},"
                f"{result.adv_pred[i]},{result.pert_norm[i]:.17g},"
                f"{int(result.success[i])}\n"
            )
