"""Divergence diagnostics: spectral detector, crash-time laws, kernel maps.

Everything here is pure over immutable snapshots (parameters, datasets,
recorded traces); nothing mutates training state.

The central object is the M x M iteration matrix

    A = gamma * G(X*, X) - G(X, X)

whose largest real eigenvalue ("seem") decides divergence: positive means
the bootstrapped targets move away faster than the predictions chase them,
and the TD error grows along A's dominant eigenvector. The normalized
variant divides by trace(G(X, X)) / M, a positive scale tracking the
kernel's current size, so the sign is preserved and values are comparable
across checkpoints of very different parameter norms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg, net
from .envs import Dataset
from .linalg import LineFit
from .net import MLPSpec, Params
from .train import TrainConfig, TrainTrace, compute_targets

NTK_COS_THRESHOLD = 0.99
ACTION_COS_THRESHOLD = 0.999
CONSECUTIVE_RECORDS = 5


class DiagnosticsError(ValueError):
    """A diagnostic was asked of data that cannot support it."""


@dataclass
class SeemReport:
    step: int | None
    a_matrix: np.ndarray
    seem_raw: float
    seem_norm: float
    dominant: np.ndarray | None = None
    dominant_converged: bool = False


@dataclass(frozen=True)
class CrashFit:
    window: tuple[int, int]
    exponent: float  # (2L-2)/L: the power 1/||u||^exponent decays linearly
    fit: LineFit
    predicted_t: float


@dataclass(frozen=True)
class CriticalPoint:
    step: int | None  # None = not reached
    ntk_cos: float | None = None
    action_cos: float | None = None

    @property
    def reached(self) -> bool:
        return self.step is not None


@dataclass(frozen=True)
class NtkMap:
    x0: np.ndarray
    xs: np.ndarray  # grid axis values, shape (n,)
    ys: np.ndarray
    values: np.ndarray  # (n, n), max |value| scaled to 1
    raw_max: float  # the |value| that was scaled to 1


def seem(
    spec: MLPSpec,
    params: Params,
    d: Dataset,
    gamma: float,
    want_eigenvector: bool = False,
) -> SeemReport:
    """The divergence detector at a parameter snapshot.

    Builds X* by exhaustive argmax over the action set, forms
    A = gamma G(X*, X) - G(X, X) from tangent-kernel Gram matrices, and
    returns its largest real eigenvalue, raw and scale-normalized.
    """
    if not params.is_finite():
        raise DiagnosticsError("cannot compute the detector on crashed parameters")
    targets = compute_targets(spec, params, d, gamma)
    fx = net.grad_factors(spec, params, d.inputs())
    fs = net.grad_factors(spec, params, targets.xstar)
    g_xx = net.gram(fx, fx)
    g_sx = net.gram(fs, fx)
    a = gamma * g_sx - g_xx
    raw = linalg.max_real_eigenvalue(a)
    scale = float(np.trace(g_xx)) / d.m
    norm = raw / scale if scale > 0.0 else float("nan")
    dom, converged = (None, False)
    if want_eigenvector:
        dom, converged = linalg.dominant_eigenvector(a)
    return SeemReport(
        step=None,
        a_matrix=a,
        seem_raw=raw,
        seem_norm=norm,
        dominant=dom,
        dominant_converged=converged,
    )


def detect_critical_point(
    trace: TrainTrace,
    ntk_threshold: float = NTK_COS_THRESHOLD,
    action_threshold: float = ACTION_COS_THRESHOLD,
    consecutive: int = CONSECUTIVE_RECORDS,
) -> CriticalPoint:
    """Earliest record ending a run of `consecutive` stable-kernel records.

    Stability means the kernel-direction cosine and argmax-action cosine
    against the previous record both clear their thresholds. Returns a
    CriticalPoint with step=None when the trace never stabilizes.
    """
    recs = [r for r in trace.records if r.ntk_cos is not None and r.action_cos is not None]
    if len(recs) + 1 < consecutive + 1:
        return CriticalPoint(step=None)
    run_len = 0
    for r in recs:
        ok = r.ntk_cos >= ntk_threshold and r.action_cos >= action_threshold
        run_len = run_len + 1 if ok else 0
        if run_len >= consecutive:
            return CriticalPoint(step=r.step, ntk_cos=r.ntk_cos, action_cos=r.action_cos)
    return CriticalPoint(step=None)


def crash_exponent(layers: int) -> float:
    if layers < 2:
        raise DiagnosticsError("the SGD crash law needs at least 2 layers")
    return (2.0 * layers - 2.0) / layers


def _window_records(trace: TrainTrace, window):
    recs = [
        r
        for r in trace.records
        if not r.crashed and np.isfinite(r.u_norm) and r.u_norm > 0.0
    ]
    if window is not None:
        lo, hi = window
        recs = [r for r in recs if lo <= r.step <= hi]
    else:
        # last 20% of records before the crash, at least 10 points
        k = max(10, int(np.ceil(0.2 * len(recs))))
        recs = recs[-k:]
    if len(recs) < 2:
        raise DiagnosticsError("not enough finite records in the fit window")
    return recs


def predict_crash_sgd(trace: TrainTrace, layers: int, window=None) -> CrashFit:
    """Fit the SGD divergence law and locate the terminal step.

    For an L-layer net, 1 / ||u_t||^((2L-2)/L) decays linearly in t once the
    run is past its critical point; the fitted line's root is the predicted
    crash step. `window` is an inclusive (start_step, end_step) pair;
    omitted, the last 20% of pre-crash records (>= 10) are used.
    """
    expo = crash_exponent(layers)
    recs = _window_records(trace, window)
    steps = np.array([r.step for r in recs], dtype=np.float64)
    y = np.array([r.u_norm for r in recs], dtype=np.float64) ** (-expo)
    fit = linalg.fit_line(steps, y)
    if fit.slope >= 0.0:
        raise DiagnosticsError(
            f"inverse TD-error norm is not decaying (slope {fit.slope:.3g}); "
            "the run does not look divergent on this window"
        )
    predicted = fit.root()
    return CrashFit(
        window=(int(steps[0]), int(steps[-1])),
        exponent=expo,
        fit=fit,
        predicted_t=predicted,
    )


@dataclass(frozen=True)
class AdamGrowthReport:
    window: tuple[int, int]
    theta_slope: float
    theta_slope_expected: float  # eta * sqrt(P)
    theta_fit: LineFit
    q_loglog_slope: float
    q_slope_expected: float  # L
    q_fit: LineFit


def adam_growth_check(
    trace: TrainTrace, eta: float, n_params: int, layers: int, window=None
) -> AdamGrowthReport:
    """Check the Adam divergence laws on a recorded run.

    Fits ||theta_t|| against t (expected slope eta * sqrt(P)) and
    log mean |Q| against log t (expected slope L) over a window after the
    critical point. An explicit window starting before the critical point is
    rejected; the default window spans from the critical point to the crash.
    """
    t0 = detect_critical_point(trace)
    if window is None:
        if not t0.reached:
            raise DiagnosticsError("no critical point found; give an explicit window")
        window = (t0.step, trace.records[-1].step)
    elif t0.reached and window[0] < t0.step:
        raise DiagnosticsError(
            f"window starts at {window[0]}, before the critical point {t0.step}"
        )
    recs = [
        r
        for r in trace.records
        if not r.crashed
        and window[0] <= r.step <= window[1]
        and np.isfinite(r.theta_norm)
        and np.isfinite(r.q_mean)
    ]
    if len(recs) < 3:
        raise DiagnosticsError("not enough records in the window")
    steps = np.array([r.step for r in recs], dtype=np.float64)
    theta_fit = linalg.fit_line(steps, [r.theta_norm for r in recs])
    pos = [(r.step, abs(r.q_mean)) for r in recs if abs(r.q_mean) > 0 and r.step > 0]
    if len(pos) < 3:
        raise DiagnosticsError("not enough positive-|Q| records for the log-log fit")
    q_fit = linalg.fit_line(
        np.log10([s for s, _ in pos]), np.log10([q for _, q in pos])
    )
    return AdamGrowthReport(
        window=(int(window[0]), int(window[1])),
        theta_slope=theta_fit.slope,
        theta_slope_expected=eta * float(np.sqrt(n_params)),
        theta_fit=theta_fit,
        q_loglog_slope=q_fit.slope,
        q_slope_expected=float(layers),
        q_fit=q_fit,
    )


@dataclass(frozen=True)
class HomogeneityRow:
    lam: float
    output_ratio: float
    grad_scale: float
    ntk_scale: float
    ntk_cos: float


def homogeneity_check(
    spec: MLPSpec, params: Params, x: np.ndarray, lambdas
) -> list[HomogeneityRow]:
    """Measure how outputs, gradients and the kernel scale under theta -> lam*theta.

    On checkpoints whose biases are negligible (late in a divergent run) the
    ratios approach lam^L, lam^(L-1), lam^(2L-2) and the feature directions
    stay parallel. Ratios are averaged over the probe batch.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    f_base = net.forward_batch(spec, params, x)
    if np.any(f_base == 0.0):
        raise DiagnosticsError("probe inputs with exactly zero output; move them")
    phi_base = net.gradient_features(spec, params, x)
    phi_base_norms = np.linalg.norm(phi_base, axis=0)
    g_base = phi_base.T @ phi_base
    rows = []
    for lam in lambdas:
        scaled = net.scale_params(params, float(lam))
        f_s = net.forward_batch(spec, scaled, x)
        phi_s = net.gradient_features(spec, scaled, x)
        g_s = phi_s.T @ phi_s
        rows.append(
            HomogeneityRow(
                lam=float(lam),
                output_ratio=float(np.mean(f_s / f_base)),
                grad_scale=float(np.mean(np.linalg.norm(phi_s, axis=0) / phi_base_norms)),
                ntk_scale=float(np.linalg.norm(g_s) / np.linalg.norm(g_base)),
                ntk_cos=_flat_cosine(phi_s, phi_base),
            )
        )
    return rows


def _flat_cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel()
    b = b.ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def ntk_map(
    spec: MLPSpec,
    params: Params,
    x0=(0.1, 0.2),
    grid_low: float = -4.0,
    grid_high: float = 4.0,
    grid_n: int = 41,
) -> NtkMap:
    """Kernel slice k(x0, x) over a square grid, max-|value| normalized.

    Requires a 2-input network. A plain ReLU MLP peaks far from x0 (the
    kernel grows along rays); a layernorm network peaks at x0.
    """
    if spec.input_dim != 2:
        raise DiagnosticsError(f"kernel maps need a 2-input network, got d0={spec.input_dim}")
    x0 = np.asarray(x0, dtype=np.float64)
    axis = np.linspace(grid_low, grid_high, grid_n)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    f0 = net.grad_factors(spec, params, x0[None, :])
    vals = np.empty(pts.shape[0])
    chunk = 4096
    for lo in range(0, pts.shape[0], chunk):
        fb = net.grad_factors(spec, params, pts[lo : lo + chunk])
        vals[lo : lo + chunk] = net.gram(f0, fb)[0]
    raw_max = float(np.max(np.abs(vals)))
    if raw_max > 0.0:
        vals = vals / raw_max
    return NtkMap(x0=x0, xs=axis, ys=axis, values=vals.reshape(grid_n, grid_n), raw_max=raw_max)


@dataclass(frozen=True)
class RolloutResult:
    norms: np.ndarray  # ||u_t|| for t = 0..steps
    alignment: np.ndarray  # |cos(u_t, dominant eigenvector)| per step
    eigenvector: np.ndarray | None
    eigenvector_converged: bool


def linearized_rollout(a, u0, eta: float, steps: int) -> RolloutResult:
    """Iterate u <- (I + eta A) u and track alignment with A's top eigenvector."""
    a = linalg.as_matrix(a, "a")
    if eta <= 0.0:
        raise DiagnosticsError("eta must be positive")
    if not np.all(np.isfinite(a)):
        raise DiagnosticsError("rollout needs a finite matrix")
    u = np.asarray(u0, dtype=np.float64).copy()
    dom, converged = linalg.dominant_eigenvector(a)
    norms = np.empty(steps + 1)
    align = np.empty(steps + 1)

    def alignment(vec):
        n = np.linalg.norm(vec)
        if n == 0.0 or dom is None:
            return 0.0
        return float(abs(vec @ dom) / n)

    norms[0] = np.linalg.norm(u)
    align[0] = alignment(u)
    for t in range(1, steps + 1):
        u = u + eta * (a @ u)
        norms[t] = np.linalg.norm(u)
        align[t] = alignment(u)
    return RolloutResult(
        norms=norms,
        alignment=align,
        eigenvector=dom,
        eigenvector_converged=converged,
    )


@dataclass(frozen=True)
class LinearizationCheck:
    residual: float  # || u' - (I + eta_eff A) u || / (eta_eff ||A u||)
    argmax_changed: bool
    eta_effective: float


def linearization_residual(
    spec: MLPSpec,
    params: Params,
    d: Dataset,
    gamma: float,
    eta_prime: float,
) -> LinearizationCheck:
    """First-order check of the TD evolving equation at a snapshot.

    Takes one SGD step at the tiny rate `eta_prime` on the half mean-squared
    loss and compares the new TD-error vector against (I + eta' / M * A) u.
    The raw Gram difference A pairs with eta' / M because of the mean-loss
    convention.
    """
    targets = compute_targets(spec, params, d, gamma)
    x = d.inputs()
    f = net.forward_batch(spec, params, x)
    u = f - targets.qbar
    rep = seem(spec, params, d, gamma)
    eta_eff = eta_prime / d.m
    grad = net.loss_gradient(spec, params, x, u / d.m)
    stepped = Params(params.theta - eta_prime * grad)
    targets2 = compute_targets(spec, stepped, d, gamma)
    changed = bool(np.any(targets2.astar != targets.astar))
    u2 = net.forward_batch(spec, stepped, x) - targets2.qbar
    predicted = u + eta_eff * (rep.a_matrix @ u)
    denom = eta_eff * float(np.linalg.norm(rep.a_matrix @ u))
    if denom == 0.0:
        raise DiagnosticsError("A u vanished; the check is undefined here")
    residual = float(np.linalg.norm(u2 - predicted)) / denom
    return LinearizationCheck(
        residual=residual, argmax_changed=changed, eta_effective=eta_eff
    )


def extreme_point_ratio(trace: TrainTrace, d: Dataset) -> list[tuple[int, float]]:
    """Mean ||argmax action|| / max action norm per diagnostic record.

    Divergent runs drive argmax actions to the boundary of the action set,
    pushing this ratio toward 1.
    """
    max_norm = float(np.max(d.env.action_norms()))
    out = []
    for r in trace.records:
        if r.astar is None:
            continue
        norms = np.linalg.norm(d.env.action_vectors(r.astar), axis=1)
        out.append((r.step, float(np.mean(norms)) / max_norm))
    return out
