"""Training objectives for frozen-head classifiers.

Three modes: intra-class compactness (mean squared distance of features to
the true class center), a worst-case combination alpha*L_clean +
(1-alpha)*L_adv whose adversarial term comes from an inner PGD run on the
fly, and plain softmax cross-entropy over the head logits.

The inner maximizer ascends the compactness loss itself inside the l-inf
epsilon ball (init at the clean input, no random start, fixed step), and the
outer gradient treats its output as a fixed input: no differentiation
through the attack loop.
"""

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from . import kernels, models

MODE_CENTER_CLEAN = "center_clean"
MODE_CENTER_WORST_CASE = "center_worst_case"
MODE_SOFTMAX_CE = "softmax_ce"
_MODES = (MODE_CENTER_CLEAN, MODE_CENTER_WORST_CASE, MODE_SOFTMAX_CE)

# bumped once per inner-PGD run so tests and the trainer can observe that
# alpha=1 (and epsilon=0) training really performs zero attack calls
INNER_PGD_RUNS = 0


def reset_inner_pgd_runs():
    global INNER_PGD_RUNS
    INNER_PGD_RUNS = 0


@dataclass(frozen=True)
class LossConfig:
    mode: str = MODE_CENTER_CLEAN
    alpha: float = 1.0
    epsilon: float = 0.0
    inner_iters: int = 10
    inner_step: float = None  # defaults to 0.25 * epsilon

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha outside (0,1]")
        if self.epsilon < 0:
            raise ValueError("epsilon < 0")
        if self.inner_step is None:
            object.__setattr__(self, "inner_step", 0.25 * self.epsilon)
        if int(self.inner_iters) != self.inner_iters or self.inner_iters < 1:
            raise ValueError("inner_iters must be a positive integer")
        # a zero ball never runs the loop, so only demand a usable step when
        # the inner maximizer can actually move
        if (
            self.mode == MODE_CENTER_WORST_CASE
            and self.epsilon > 0
            and not self.inner_step > 0
        ):
            raise ValueError("inner_step must be positive")


def _centers(w, labels):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D integer array")
    if labels.min() < 0 or labels.max() >= w.K:
        raise ValueError(f"label outside 0..{w.K - 1}")
    return np.ascontiguousarray(w.matrix.T[labels])


def center_loss(w, f_batch, labels, tape=None):
    """Mean over the batch of ||f - w_y||^2."""
    centers = _centers(w, labels)
    if tape is None and not isinstance(f_batch, gc.Node):
        d = np.ascontiguousarray(f_batch, dtype=np.float64) - centers
        return float(np.mean(np.einsum("bp,bp->b", d, d)))
    return gc.mean(tape, gc.sq_dist(tape, f_batch, centers))


def ce_loss(w, f_batch, labels, tape=None):
    """Mean softmax cross-entropy over head_logits(f)."""
    logits = models.head_logits(w, f_batch, tape)
    if tape is None and not isinstance(f_batch, gc.Node):
        return float(np.mean(gc.softmax_ce(None, logits, np.asarray(labels))))
    return gc.mean(tape, gc.softmax_ce(tape, logits, np.asarray(labels)))


def inner_maximize(w, params, spec, x0, labels, cfg: LossConfig):
    """PGD ascent of the compactness loss inside the l-inf ball.

    Starts at the clean input (no random start), takes cfg.inner_iters sign
    steps of size cfg.inner_step, each projected to the epsilon box and the
    [0,1] pixel range. Encoder parameters are constants here; only d/dx is
    ever computed.
    """
    global INNER_PGD_RUNS
    INNER_PGD_RUNS += 1
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    centers = _centers(w, labels)
    x = x0.copy()
    for _ in range(cfg.inner_iters):
        tape = gc.Tape()
        xn = tape.leaf(x, "x")
        f = models.encode(params, spec, xn, tape, frozen=True)
        tape.backward(gc.sum_(tape, gc.sq_dist(tape, f, centers)))
        x = kernels.linf_step(x, tape.leaf_grad("x"), x0, cfg.inner_step, cfg.epsilon)
    return x


def combined_loss(w, params, spec, x_batch, labels, cfg: LossConfig, tape=None):
    """alpha * L_clean + (1 - alpha) * L_adv with straight-through adversary.

    alpha = 1 short-circuits to the clean compactness loss bitwise, with no
    inner PGD executed. epsilon = 0 skips the loop too (the ball is a single
    point) and both terms evaluate the same inputs.
    """
    if cfg.mode != MODE_CENTER_WORST_CASE:
        raise ValueError(f"combined_loss needs mode {MODE_CENTER_WORST_CASE!r}")
    x_batch = np.ascontiguousarray(x_batch, dtype=np.float64)
    f_clean = models.encode(params, spec, x_batch, tape)
    l_clean = center_loss(w, f_clean, labels, tape)
    if cfg.alpha == 1.0:
        return l_clean
    if cfg.epsilon == 0.0:
        x_adv = x_batch
    else:
        x_adv = inner_maximize(w, params, spec, x_batch, labels, cfg)
    f_adv = models.encode(params, spec, x_adv, tape)
    l_adv = center_loss(w, f_adv, labels, tape)
    if tape is None:
        return cfg.alpha * l_clean + (1.0 - cfg.alpha) * l_adv
    return gc.add(
        tape,
        gc.scale(tape, l_clean, cfg.alpha),
        gc.scale(tape, l_adv, 1.0 - cfg.alpha),
    )


def training_loss(w, params, spec, x_batch, labels, cfg: LossConfig, tape=None):
    """Dispatch on cfg.mode; returns the scalar objective (Node under a tape)."""
    if cfg.mode == MODE_CENTER_WORST_CASE:
        return combined_loss(w, params, spec, x_batch, labels, cfg, tape)
    f = models.encode(params, spec, np.ascontiguousarray(x_batch, np.float64), tape)
    if cfg.mode == MODE_CENTER_CLEAN:
        return center_loss(w, f, labels, tape)
    return ce_loss(w, f, labels, tape)


def loss_and_grads(w, params, spec, x_batch, labels, cfg: LossConfig):
    """One training evaluation: scalar loss plus {param name: gradient}."""
    tape = gc.Tape()
    node = training_loss(w, params, spec, x_batch, labels, cfg, tape)
    tape.backward(node)
    grads = {n: tape.leaf_grad(n) for n in params.param_names()}
    return float(node.value), grads
