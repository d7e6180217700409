"""Offline Q-value iteration with per-step divergence diagnostics.

The loop alternates the two steps

    qbar_i <- r_i + gamma * max_a Q(s'_i, a)        (targets, gradient stopped)
    theta  <- theta - eta * grad (1/2) mean (Q(X) - qbar)^2

with SGD or Adam, full batch by default. The half mean-squared convention
means the effective per-sample rate is eta / M; all fitted crash constants
absorb this, the spectral sign does not depend on it.

While training, the loop records the TD-error vector norm, parameter norm,
mean Q, and (at a configurable cadence) the divergence detector: the
largest real eigenvalue of A = gamma * G(X*, X) - G(X, X) built from
tangent-kernel Gram matrices, raw and normalized by trace(G(X,X))/M, plus
kernel-direction and argmax-action cosines against the previous record.

A run crashes when any value or parameter goes non-finite or mean |Q|
exceeds the divergence threshold; the crash is recorded and the loop halts.
Crashed runs are valid outputs - they are the phenomenon under study.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg, net
from .envs import Dataset
from .net import MLPSpec, Params

OPTIMIZERS = ("sgd", "adam")

TRACE_COLUMNS = (
    "step",
    "q_mean",
    "u_norm",
    "theta_norm",
    "seem_raw",
    "seem_norm",
    "ntk_cos",
    "action_cos",
    "crashed",
)


class CrashSignal(RuntimeError):
    """A non-finite value surfaced where a finite one was required."""


@dataclass(frozen=True)
class TrainConfig:
    spec: MLPSpec
    gamma: float
    eta: float
    optimizer: str = "sgd"
    steps: int = 1000
    seed: int = 0
    weight_decay: float = 0.0
    use_ema: bool = False
    ema_tau: float = 0.005
    batch_size: int | None = None  # None = full batch
    record_every: int = 1
    diag_every: int | None = None  # None = every recorded step
    diverge_threshold: float | None = 1e6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    stop_on_stable: bool = False
    stable_u_tol: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


@dataclass(frozen=True)
class TargetVector:
    """Bootstrapped targets and the argmax state-action encodings."""

    qbar: np.ndarray  # (M,)
    astar: np.ndarray  # (M,) argmax action indices, ties -> lowest index
    xstar: np.ndarray  # (M, d0) encoded (s', a*) rows


@dataclass
class TraceRecord:
    step: int
    q_mean: float
    u_norm: float
    theta_norm: float
    seem_raw: float | None = None
    seem_norm: float | None = None
    ntk_cos: float | None = None
    action_cos: float | None = None
    crashed: bool = False
    astar: np.ndarray | None = None  # in-memory only, not serialized


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)
    crash_step: int | None = None
    stopped_stable: bool = False
    final_theta: np.ndarray | None = None  # last fully finite parameter vector
    snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return self.crash_step is not None

    def column(self, name: str, finite_only: bool = False) -> np.ndarray:
        vals = [(r.step, getattr(r, name)) for r in self.records]
        vals = [(s, v) for s, v in vals if v is not None]
        if finite_only:
            vals = [(s, v) for s, v in vals if np.isfinite(v)]
        return np.array([v for _, v in vals], dtype=np.float64)

    def steps_for(self, name: str, finite_only: bool = False) -> np.ndarray:
        vals = [(r.step, getattr(r, name)) for r in self.records]
        vals = [(s, v) for s, v in vals if v is not None]
        if finite_only:
            vals = [(s, v) for s, v in vals if np.isfinite(v)]
        return np.array([s for s, _ in vals], dtype=np.float64)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for r in self.records:
                row = [r.step]
                for name in TRACE_COLUMNS[1:-1]:
                    v = getattr(r, name)
                    row.append("" if v is None or not np.isfinite(v) else repr(float(v)))
                row.append(int(r.crashed))
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "TrainTrace":
        trace = cls()
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != TRACE_COLUMNS:
                raise ValueError(f"unexpected trace header in {path}: {header}")
            for row in reader:
                vals = [None if cell == "" else float(cell) for cell in row[1:-1]]
                rec = TraceRecord(
                    step=int(row[0]),
                    q_mean=vals[0] if vals[0] is not None else float("nan"),
                    u_norm=vals[1] if vals[1] is not None else float("nan"),
                    theta_norm=vals[2] if vals[2] is not None else float("nan"),
                    seem_raw=vals[3],
                    seem_norm=vals[4],
                    ntk_cos=vals[5],
                    action_cos=vals[6],
                    crashed=bool(int(row[-1])),
                )
                trace.records.append(rec)
                if rec.crashed and trace.crash_step is None:
                    trace.crash_step = rec.step
        return trace


def compute_targets(
    spec: MLPSpec, params_target: Params, d: Dataset, gamma: float
) -> TargetVector:
    """Exact bootstrapped targets by exhaustive scan of the action set."""
    cand = d.next_candidates()
    with np.errstate(over="ignore", invalid="ignore"):
        q_next = net.forward_batch(spec, params_target, cand).reshape(
            d.m, d.env.n_actions
        )
    if not np.all(np.isfinite(q_next)):
        raise CrashSignal("non-finite Q while computing targets")
    astar = q_next.argmax(axis=1)  # argmax takes the lowest index on ties
    qmax = q_next[np.arange(d.m), astar]
    qbar = d.rewards + gamma * qmax
    rows = np.arange(d.m) * d.env.n_actions + astar
    return TargetVector(qbar=qbar, astar=astar, xstar=cand[rows])


@dataclass
class OptState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, p: int) -> "OptState":
        return cls(m=np.zeros(p), v=np.zeros(p), t=0)


def _apply_update(theta, grad, config: TrainConfig, opt: OptState) -> np.ndarray:
    if config.weight_decay > 0.0:
        grad = grad + config.weight_decay * theta
    if config.optimizer == "sgd":
        return theta - config.eta * grad
    opt.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    opt.m = b1 * opt.m + (1.0 - b1) * grad
    opt.v = b2 * opt.v + (1.0 - b2) * grad * grad
    m_hat = opt.m / (1.0 - b1 ** opt.t)
    v_hat = opt.v / (1.0 - b2 ** opt.t)
    return theta - config.eta * m_hat / (np.sqrt(v_hat) + config.adam_eps)


class _InplaceUpdater:
    """Allocation-free optimizer updates for the hot training loop.

    Mutates theta (and the moment buffers) in place so parameter views stay
    valid across steps; matches `_apply_update` bit for bit.
    """

    def __init__(self, config: TrainConfig, p: int):
        self.config = config
        self.opt = OptState.fresh(p)
        self.s1 = np.empty(p)
        self.s2 = np.empty(p)

    def step(self, theta: np.ndarray, grad: np.ndarray):
        cfg = self.config
        if cfg.weight_decay > 0.0:
            np.multiply(theta, cfg.weight_decay, out=self.s1)
            grad = np.add(grad, self.s1, out=grad)
        if cfg.optimizer == "sgd":
            np.multiply(grad, cfg.eta, out=self.s1)
            theta -= self.s1
            return
        opt = self.opt
        opt.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        np.multiply(grad, 1.0 - b1, out=self.s1)
        opt.m *= b1
        opt.m += self.s1
        np.square(grad, out=self.s1)
        self.s1 *= 1.0 - b2
        opt.v *= b2
        opt.v += self.s1
        np.divide(opt.v, 1.0 - b2**opt.t, out=self.s1)
        np.sqrt(self.s1, out=self.s1)
        self.s1 += cfg.adam_eps
        np.divide(opt.m, self.s1, out=self.s2)
        self.s2 *= cfg.eta / (1.0 - b1**opt.t)
        theta -= self.s2


def td_step(
    spec: MLPSpec,
    params: Params,
    targets: TargetVector,
    d: Dataset,
    config: TrainConfig,
    opt: OptState | None = None,
) -> tuple[Params, OptState]:
    """One optimizer step on the half mean-squared TD error."""
    if opt is None:
        opt = OptState.fresh(params.size)
    x = d.inputs()
    with np.errstate(over="ignore", invalid="ignore"):
        f = net.forward_batch(spec, params, x)
        u = f - targets.qbar
        if not np.all(np.isfinite(u)):
            raise CrashSignal("non-finite TD error in td_step")
        grad = net.loss_gradient(spec, params, x, u / d.m)
    if not np.all(np.isfinite(grad)):
        raise CrashSignal("non-finite gradient in td_step")
    theta = _apply_update(params.theta, grad, config, opt)
    return Params(theta), opt


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _seem_from_factors(fx, fs, gamma, m):
    g_xx = net.gram(fx, fx)
    g_sx = net.gram(fs, fx)
    a = gamma * g_sx - g_xx
    raw = linalg.max_real_eigenvalue(a)
    scale = float(np.trace(g_xx)) / m
    norm = raw / scale if scale > 0.0 else float("nan")
    return raw, norm, g_xx


def run(
    config: TrainConfig,
    d: Dataset,
    params0: Params | None = None,
    snapshot_every: int | None = None,
) -> TrainTrace:
    """Train per the config, recording diagnostics; halt on crash.

    `params0` overrides the seeded init (used for classic fixed inits).
    `snapshot_every` stores full parameter copies at that step cadence for
    offline diagnostics.
    """
    spec = config.spec
    env = d.env
    params = params0 if params0 is not None else net.init(spec, config.seed)
    if params.size != net.num_params(spec):
        raise ValueError("params0 does not match the network spec")
    m = d.m
    n_actions = env.n_actions
    x_enc = d.inputs()
    cand = d.next_candidates()
    rewards = d.rewards
    all_rows = np.vstack([x_enc, cand])
    rng = np.random.default_rng(config.seed)
    updater = _InplaceUpdater(config, params.size)
    theta = params.theta.copy()
    live = Params(theta)  # wraps the mutable buffer; diagnostics copy from it
    views = net.unflatten(spec, live)
    grad_buf = np.empty(params.size)
    work_all = net.Workspace(spec, m + m * n_actions)
    work_x = net.Workspace(spec, m)
    work_cand = None
    ema_theta = None
    ema_views = None
    if config.use_ema:
        ema_theta = theta.copy()
        ema_views = net.unflatten(spec, net.Params(ema_theta))
        work_cand = net.Workspace(spec, m * n_actions)
    diag_every = config.diag_every or config.record_every

    trace = TrainTrace()
    prev_gram = None
    prev_actions = None

    def record(step, f_x, u, theta, astar, with_diag, crashed=False):
        nonlocal prev_gram, prev_actions
        q_mean = float(np.mean(f_x)) if f_x is not None else float("nan")
        u_norm = float(np.linalg.norm(u)) if u is not None else float("nan")
        theta_norm = float(np.linalg.norm(theta))
        rec = TraceRecord(
            step=step,
            q_mean=q_mean,
            u_norm=u_norm,
            theta_norm=theta_norm,
            crashed=crashed,
            astar=None if astar is None else astar.copy(),
        )
        if with_diag and not crashed:
            p = Params(theta)
            fx = net.grad_factors(spec, p, x_enc)
            rows = np.arange(m) * n_actions + astar
            fs = net.grad_factors(spec, p, cand[rows])
            raw, norm, g_xx = _seem_from_factors(fx, fs, config.gamma, m)
            rec.seem_raw = raw
            rec.seem_norm = norm
            acts = env.action_vectors(astar).ravel()
            if prev_gram is not None:
                rec.ntk_cos = _cosine(g_xx.ravel(), prev_gram)
                rec.action_cos = _cosine(acts, prev_actions)
            prev_gram = g_xx.ravel().copy()
            prev_actions = acts.copy()
        trace.records.append(rec)
        return rec

    crashed = False
    arange_m = np.arange(m)
    last_finite = np.empty_like(theta)
    have_finite = False
    # overflow/invalid are legitimate outcomes of a diverging run; the loop
    # detects them via finiteness checks rather than warnings
    errstate = np.errstate(over="ignore", invalid="ignore", under="ignore")
    errstate.__enter__()

    def evaluate():
        """Values, targets and TD error at the current parameters."""
        if config.use_ema:
            q_next = net.forward_batch(spec, live, cand, work=work_cand, views=ema_views)
            f_x = net.forward_batch(spec, live, x_enc, work=work_x, views=views)
        else:
            f_all = net.forward_batch(spec, live, all_rows, work=work_all, views=views)
            f_x = f_all[:m]
            q_next = f_all[m:]
        q_next = q_next.reshape(m, n_actions)
        if not (np.all(np.isfinite(f_x)) and np.all(np.isfinite(q_next))):
            return None
        astar = q_next.argmax(axis=1)
        qbar = rewards + config.gamma * q_next[arange_m, astar]
        return f_x, f_x - qbar, astar

    for step in range(config.steps):
        state = evaluate()
        if state is None:
            record(step, None, None, theta, None, False, crashed=True)
            trace.crash_step = step
            crashed = True
            break
        f_x, u, astar = state
        if np.all(np.isfinite(theta)):
            np.copyto(last_finite, theta)
            have_finite = True
        if (
            config.diverge_threshold is not None
            and float(np.mean(np.abs(f_x))) > config.diverge_threshold
        ):
            record(step, f_x, u, theta, astar, False, crashed=True)
            trace.crash_step = step
            crashed = True
            break
        on_record = step % config.record_every == 0
        if on_record:
            record(step, f_x, u, theta, astar, step % diag_every == 0)
        if snapshot_every is not None and step % snapshot_every == 0:
            trace.snapshots.append((step, theta.copy()))
        if (
            config.stop_on_stable
            and on_record
            and float(np.linalg.norm(u)) < config.stable_u_tol
        ):
            trace.stopped_stable = True
            break

        # gradient of the half mean-squared TD error, batch or full
        if config.batch_size is not None and config.batch_size < m:
            idx = rng.choice(m, size=config.batch_size, replace=False)
            grad = net.loss_gradient(
                spec, live, x_enc[idx], u[idx] / config.batch_size, views=views
            )
        else:
            grad = net.loss_gradient(
                spec, live, x_enc, u / m, out=grad_buf, views=views, work=work_x
            )
        if not np.all(np.isfinite(grad)):
            record(step, f_x, u, theta, astar, False, crashed=True)
            trace.crash_step = step
            crashed = True
            break
        updater.step(theta, grad)
        if config.use_ema:
            tau = config.ema_tau
            ema_theta *= 1.0 - tau
            ema_theta += tau * theta

    if not crashed and not trace.stopped_stable:
        # closing record at the final parameter state
        state = evaluate()
        if state is not None:
            f_x, u, astar = state
            if np.all(np.isfinite(theta)):
                np.copyto(last_finite, theta)
                have_finite = True
            record(config.steps, f_x, u, theta, astar, True)
        else:
            record(config.steps, None, None, theta, None, False, crashed=True)
            trace.crash_step = config.steps
    errstate.__exit__(None, None, None)
    if have_finite:
        trace.final_theta = last_finite.copy()
    return trace


def sweep_config(base: TrainConfig, **overrides) -> TrainConfig:
    """A copy of the config with fields replaced (gamma sweeps, seeds)."""
    return replace(base, **overrides)
