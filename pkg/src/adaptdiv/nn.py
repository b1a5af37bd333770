"""One-hidden-layer ReLU discriminator with hand-written gradients.

The training loop implements the EMA-scheduled regularisation of the
adaptive-divergence estimators: dropout probability or l2 strength is
recomputed every step from the running loss, while an R1 penalty (squared
input-gradient of the output probability on P samples) is applied with a
constant weight.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from .core import LN2, as_dataset, cross_entropy_scores, sigmoid
from .divergence import DivergenceEstimate, Fit, PseudoDivergenceFamily

VARIANTS = ("dropout", "l2", "jsd")


class DivergedTraining(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step


@dataclass
class Mlp:
    w1: np.ndarray  # (hidden, d)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float = 0.0

    @classmethod
    def init(cls, d: int, hidden: int, rng: np.random.Generator) -> "Mlp":
        return cls(
            w1=rng.standard_normal((hidden, d)) * math.sqrt(2.0 / d),
            b1=np.zeros(hidden),
            w2=rng.standard_normal(hidden) / math.sqrt(hidden),
            b2=0.0,
        )

    @property
    def shapes(self):
        return [self.w1.shape, self.b1.shape, self.w2.shape, ()]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def with_flat(self, theta: np.ndarray) -> "Mlp":
        h, d = self.w1.shape
        i = h * d
        return Mlp(
            theta[:i].reshape(h, d).copy(),
            theta[i : i + h].copy(),
            theta[i + h : i + 2 * h].copy(),
            float(theta[-1]),
        )

    def copy(self) -> "Mlp":
        return self.with_flat(self.flat())

    def weight_norm(self) -> float:
        return float(np.sqrt(np.sum(self.w1**2) + np.sum(self.w2**2)))

    def logits(self, xs: np.ndarray) -> np.ndarray:
        return np.maximum(xs @ self.w1.T + self.b1, 0.0) @ self.w2 + self.b2

    def predict(self, xs) -> np.ndarray:
        """Evaluation mode: no mask, no rescaling."""
        if not sparse.issparse(xs):
            xs = np.asarray(xs, dtype=np.float64)
        return sigmoid(self.logits(xs))


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Keep-mask already scaled by 1/(1-p); all zeros when p == 1."""
    if p <= 0.0:
        return np.ones(shape)
    if p >= 1.0:
        return np.zeros(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def forward(net: Mlp, x, dropout_p: float = 0.0, rng: np.random.Generator | None = None, mask=None) -> np.ndarray:
    """Scores in [0, 1] for one row or a batch, with training-mode dropout."""
    xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not 0.0 <= dropout_p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    hidden = np.maximum(xs @ net.w1.T + net.b1, 0.0)
    if mask is None and dropout_p > 0.0:
        mask = dropout_mask(hidden.shape, dropout_p, rng)
    if mask is not None:
        hidden = hidden * mask
    out = sigmoid(hidden @ net.w2 + net.b2)
    return out if np.ndim(x) > 1 else out[0]


def _softplus(z):
    return np.logaddexp(0.0, z)


def objective(net: Mlp, xp, xq, *, zeta: float = 0.0, variant: str = "jsd", beta: float = 0.0,
              l2_scale: float = 1.0, mask_p=None, mask_q=None) -> float:
    """Unclipped training objective the gradients below differentiate."""
    zp = _hidden(net, xp, mask_p) @ net.w2 + net.b2
    zq = _hidden(net, xq, mask_q) @ net.w2 + net.b2
    val = 0.5 * np.mean(_softplus(-zp)) + 0.5 * np.mean(_softplus(zq))
    if variant == "l2":
        val += zeta * l2_scale * (np.sum(net.w1**2) + np.sum(net.w2**2))
    if beta:
        val += beta * r1_penalty(net, xp)
    return float(val)


def _hidden(net, xs, mask):
    h = np.maximum(xs @ net.w1.T + net.b1, 0.0)
    return h if mask is None else h * mask


def r1_penalty(net: Mlp, xp) -> float:
    """mean over P rows of ||d f / d x||^2, f the output probability."""
    a = xp @ net.w1.T + net.b1
    z = np.maximum(a, 0.0) @ net.w2 + net.b2
    f = sigmoid(z)
    s = f * (1.0 - f)
    v = (a > 0) * net.w2
    u = v @ net.w1
    return float(np.mean(s**2 * np.sum(u**2, axis=1)))


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])


def _stack(xp, xq):
    if sparse.issparse(xp):
        return sparse.vstack([xp, xq], format="csr")
    return np.concatenate([xp, xq])


def _xt(da: np.ndarray, xs) -> np.ndarray:
    """da.T @ xs for dense or sparse xs, always dense."""
    if sparse.issparse(xs):
        return np.asarray((xs.T @ da).T)
    return da.T @ xs


def loss_gradient(net: Mlp, xp, xq, mask_p=None, mask_q=None) -> tuple[Gradients, float]:
    """Parameter gradient of the cross-entropy, plus the loss itself."""
    xs = _stack(xp, xq)
    n_p, n_q = xp.shape[0], xq.shape[0]
    a = xs @ net.w1.T + net.b1
    relu = np.maximum(a, 0.0)
    if mask_p is not None or mask_q is not None:
        m = np.concatenate([
            np.ones((n_p, len(net.b1))) if mask_p is None else mask_p,
            np.ones((n_q, len(net.b1))) if mask_q is None else mask_q,
        ])
    else:
        m = None
    h = relu if m is None else relu * m
    z = h @ net.w2 + net.b2
    f = sigmoid(z)
    dz = np.concatenate([-0.5 * (1.0 - f[:n_p]) / n_p, 0.5 * f[n_p:] / n_q])
    dh = np.outer(dz, net.w2)
    if m is not None:
        dh = dh * m
    da = dh * (a > 0)
    loss = 0.5 * np.mean(_softplus(-z[:n_p])) + 0.5 * np.mean(_softplus(z[n_p:]))
    return Gradients(_xt(da, xs), da.sum(axis=0), h.T @ dz, float(dz.sum())), float(loss)


def r1_gradient(net: Mlp, xp) -> Gradients:
    """Parameter gradient of mean_P ||d sigmoid(z) / dx||^2 (ReLU'' = 0 a.e.).

    With v = relu'(a) * w2 the input gradient is s * v @ W1, so every
    quantity that lives in input space goes through the H x H Gram matrix
    W1 W1^T instead.
    """
    a = xp @ net.w1.T + net.b1
    r = (a > 0).astype(np.float64)
    h = np.maximum(a, 0.0)
    z = h @ net.w2 + net.b2
    f = sigmoid(z)
    s = f * (1.0 - f)
    ds = s * (1.0 - 2.0 * f)
    gram = net.w1 @ net.w1.T
    v = r * net.w2  # (n, H)
    w1u = v @ gram  # (n, H): W1 u per row, u = v @ W1
    S = np.sum(w1u * v, axis=1)  # ||u||^2
    n = xp.shape[0]
    cz = 2.0 * s * ds * S / n  # d(phi)/dz, already averaged
    cs = s**2 / n
    g_w2 = h.T @ cz + 2.0 * np.sum(cs[:, None] * w1u * r, axis=0)
    g_b2 = float(cz.sum())
    dz_h = np.outer(cz, net.w2) * r  # chain through z -> h -> a
    g_w1 = _xt(dz_h, xp) + 2.0 * ((cs[:, None] * v).T @ v) @ net.w1
    g_b1 = dz_h.sum(axis=0)
    return Gradients(g_w1, g_b1, g_w2, g_b2)


def _check(xs):
    return xs if sparse.issparse(xs) else as_dataset(xs)


def backward(net: Mlp, xp, xq, *, zeta: float = 0.0, variant: str = "jsd", beta: float = 0.0,
             l2_scale: float = 1.0, mask_p=None, mask_q=None) -> np.ndarray:
    """Flat gradient g0 + beta * g1 of :func:`objective`."""
    xp = _check(xp)
    xq = _check(xq)
    g0, _ = loss_gradient(net, xp, xq, mask_p, mask_q)
    g = g0.flat()
    if variant == "l2" and zeta:
        reg = np.concatenate([net.w1.ravel(), np.zeros_like(net.b1), net.w2, [0.0]])
        g = g + 2.0 * zeta * l2_scale * reg
    if beta:
        g = g + beta * r1_gradient(net, xp).flat()
    return g


# ---------------------------------------------------------------------------
# capacity maps and training loop


def dropout_capacity(a: float) -> float:
    return 1.0 - a


def l2_capacity(a: float, zeta_max: float = 10.0) -> float:
    if a <= 0.0:
        return zeta_max
    return min(max(-math.log(a), 0.0), zeta_max)


@dataclass(frozen=True)
class NnConfig:
    hidden: int = 32
    lr: float = 1e-2
    ema_coeff: float = 0.9
    r1_coeff: float = 10.0
    batch: int = 64
    max_steps: int = 5000
    min_steps: int = 500
    conv_window: int = 250
    conv_tol: float = 2e-3
    zeta_max: float = 10.0
    max_dropout: float = 0.95
    l2_scale: float = 1e-3
    adam_b1: float = 0.9
    adam_b2: float = 0.999


@dataclass
class Adam:
    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        mhat = self.m / (1.0 - self.b1**self.t)
        vhat = self.v / (1.0 - self.b2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class NnTrainState:
    net: Mlp
    opt: Adam
    ema_loss: float = LN2
    zeta: float = 0.0
    step: int = 0


@dataclass
class NnResult:
    estimate: DivergenceEstimate
    net: Mlp
    trace: list[tuple[int, float, float, float]] = field(default_factory=list)
    state: NnTrainState | None = None


def schedule(variant: str, ema_loss: float, cfg: NnConfig) -> float:
    """Raw regularisation strength zeta = c(1 - L_acc / ln 2)."""
    a = 1.0 - ema_loss / LN2
    if variant == "dropout":
        return dropout_capacity(a)
    if variant == "l2":
        return l2_capacity(a, cfg.zeta_max)
    return 0.0


def _compact(xs: np.ndarray):
    # wide, mostly-zero inputs (detector images) train much faster as CSR
    if xs.shape[1] >= 256 and np.count_nonzero(xs) < 0.05 * xs.size:
        return sparse.csr_matrix(xs)
    return xs


def train(xp, xq, variant: str, cfg: NnConfig, rng: np.random.Generator,
          state: NnTrainState | None = None, fixed_zeta: float | None = None) -> tuple[NnTrainState, list]:
    """Run the EMA-scheduled loop until the running loss settles or max_steps.

    ``fixed_zeta`` switches off the schedule (one member of the regularised
    family). Returns the state and a trace of (step, batch_loss, L_acc, zeta).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    xp, xq = _compact(as_dataset(xp)), _compact(as_dataset(xq))
    if state is None:
        net = Mlp.init(xp.shape[1], cfg.hidden, rng)
        state = NnTrainState(net, Adam(cfg.lr, cfg.adam_b1, cfg.adam_b2))
    theta = state.net.flat()
    net = state.net
    trace = []
    history = []
    for k in range(cfg.max_steps):
        bp = xp[rng.integers(0, xp.shape[0], cfg.batch)]
        bq = xq[rng.integers(0, xq.shape[0], cfg.batch)]
        raw = schedule(variant, state.ema_loss, cfg) if fixed_zeta is None else fixed_zeta
        zeta = raw
        mask_p = mask_q = None
        if variant == "dropout":
            zeta = min(max(raw, 0.0), 1.0)
            # the cap keeps the scheduled loop learning; fixed members are exact
            p = min(zeta, cfg.max_dropout) if fixed_zeta is None else zeta
            shape = (cfg.batch, cfg.hidden)
            mask_p, mask_q = dropout_mask(shape, p, rng), dropout_mask(shape, p, rng)
        g = backward(net, bp, bq, zeta=zeta, variant=variant, beta=cfg.r1_coeff,
                     l2_scale=cfg.l2_scale, mask_p=mask_p, mask_q=mask_q)
        batch_loss = cross_entropy_scores(net.predict(bp), net.predict(bq))
        if not (math.isfinite(batch_loss) and np.all(np.isfinite(g))):
            raise DivergedTraining(state.step)
        state.ema_loss = cfg.ema_coeff * state.ema_loss + (1.0 - cfg.ema_coeff) * batch_loss
        state.zeta = raw
        theta = state.opt.step(theta, g)
        net = net.with_flat(theta)
        trace.append((state.step, batch_loss, state.ema_loss, raw))
        history.append(state.ema_loss)
        state.step += 1
        w = cfg.conv_window
        if k + 1 >= cfg.min_steps and len(history) >= 2 * w:
            # the running loss has settled when two consecutive windows agree
            if abs(sum(history[-w:]) - sum(history[-2 * w:-w])) < cfg.conv_tol * w:
                break
    state.net = net
    return state, trace


def ad_nn_full(xp, xq, xp_valid, xq_valid, variant: str, cfg: NnConfig, rng,
               state: NnTrainState | None = None, fixed_zeta: float | None = None) -> NnResult:
    state, trace = train(xp, xq, variant, cfg, rng, state, fixed_zeta)
    net = state.net
    if variant == "dropout" and fixed_zeta is not None and fixed_zeta >= 1.0:
        # dropout 1 drops every hidden unit at inference too: constant output
        net = Mlp(net.w1, net.b1, np.zeros_like(net.w2), net.b2)
    train_loss = cross_entropy_scores(net.predict(xp), net.predict(xq))
    valid_loss = cross_entropy_scores(net.predict(xp_valid), net.predict(xq_valid))
    if variant == "dropout":
        alpha = 1.0 - min(max(state.zeta, 0.0), 1.0)
    elif variant == "l2":
        alpha = math.exp(-state.zeta)
    else:
        alpha = 1.0
    est = DivergenceEstimate(
        value=LN2 - valid_loss,
        alpha_used=alpha,
        train_loss=train_loss,
        valid_loss=valid_loss,
        samples_used=len(xp) + len(xq) + len(xp_valid) + len(xq_valid),
        n=len(xp),
        model=net,
    )
    return NnResult(est, net, trace, state)


def ad_nn(xp, xq, xp_valid, xq_valid, variant: str, cfg: NnConfig, rng) -> DivergenceEstimate:
    return ad_nn_full(xp, xq, xp_valid, xq_valid, variant, cfg, rng).estimate


def nn_trainer(variant: str, cfg: NnConfig):
    def fit(xp, xq, xpv, xqv, rng) -> Fit:
        res = ad_nn_full(xp, xq, xpv, xqv, variant, cfg, rng)
        e = res.estimate
        return Fit(e.value, e.alpha_used, e.train_loss, e.valid_loss, res.net)

    return fit


def regularized_family(variant: str, cfg: NnConfig) -> PseudoDivergenceFamily:
    """Fixed-strength members: dropout p = 1 - alpha, l2 zeta = -log(alpha)."""
    if variant not in ("dropout", "l2"):
        raise ValueError("regularised families exist for dropout and l2 only")

    def trainer_at(alpha: float):
        zeta = dropout_capacity(alpha) if variant == "dropout" else l2_capacity(alpha, cfg.zeta_max)

        def fit(xp, xq, xpv, xqv, rng) -> Fit:
            res = ad_nn_full(xp, xq, xpv, xqv, variant, cfg, rng, fixed_zeta=zeta)
            e = res.estimate
            return Fit(e.value, alpha, e.train_loss, e.valid_loss, res.net)

        return fit

    return PseudoDivergenceFamily(trainer_at, kind="regularized", name=f"nn-{variant}")


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "batch_loss", "ema_loss", "zeta"])
        for step, bl, ema, zeta in trace:
            w.writerow([step, f"{bl:.17g}", f"{ema:.17g}", f"{zeta:.17g}"])
