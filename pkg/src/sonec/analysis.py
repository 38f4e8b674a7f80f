"""Nonlinearity error bound and mean-convergence predictors.

Conventions: weight matrices are ``w[l, k]`` (weight node ``k`` gives
neighbour ``l``); mean-error states are ``(N, L)`` arrays, one row per node.
Regressors are i.i.d. zero-mean Gaussian with variance ``sigma_u2`` per entry;
all closed-form expectations below rely on Isserlis' theorem for that case.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .topology import CombinationMatrices


class AnalysisError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# error bound


@dataclass(frozen=True)
class BoundInputs:
    mu: float
    b_max: float
    L: int
    omega_norm: float
    a_k: np.ndarray | None = None  # combination weights over a neighbourhood

    def __post_init__(self) -> None:
        if not (self.mu > 0 and self.b_max > 0 and self.L >= 1 and self.omega_norm >= 0):
            raise ValueError(f"invalid bound inputs: {self}")
        if self.a_k is not None and np.any(np.asarray(self.a_k) < 0):
            raise ValueError("combination weights must be nonnegative")


def c1_max(inputs: BoundInputs) -> float:
    """Worst-case per-pair error constant of the one-step nonlinearity bound."""
    mu, b, L, w = inputs.mu, inputs.b_max, inputs.L, inputs.omega_norm
    first = 2.0 * b**2.5 * L * mu**1.5 * w**3
    second = mu**1.5 * b**3.5 * w**3 * (L * np.sqrt(mu * b) * w + 4.0 * np.sqrt(L)) ** 2
    return float(first + second)


def error_bound(c1: float, a_k) -> float:
    """``c1 * sum_{l1, l2} a_{l1} a_{l2}``; equals ``c1`` for stochastic weights."""
    if c1 < 0:
        raise ValueError("c1 must be nonnegative")
    s = float(np.sum(a_k))
    return c1 * s * s


def bound_db(inputs: BoundInputs) -> float:
    """Bound on the squared error norm, in dB (``10 log10``)."""
    a_k = inputs.a_k if inputs.a_k is not None else np.ones(1)
    return float(10.0 * np.log10(error_bound(c1_max(inputs), a_k)))


@dataclass
class BoundCheck:
    errors: np.ndarray  # (I, N) one-step squared error per iteration and node
    bound: float
    transient: int

    @property
    def dominated_fraction(self) -> float:
        tail = self.errors[self.transient:]
        return float(np.mean(tail <= self.bound))


def empirical_bound_check(
    dataset,
    weights: CombinationMatrices,
    mu: float,
    bound: float,
    transient: int = 100,
    normalize_regressors: bool = True,
    measurement_nonlinearity: bool = False,
) -> BoundCheck:
    """One-step nonlinearity error along a clean DLMS trajectory.

    At every iteration the clean network state is advanced twice from the same
    point and with the same noise: once with ideal links, once with the
    transmitted estimates distorted by each sender's quadratic term. The
    squared norm of the difference per node is what the bound caps.
    ``measurement_nonlinearity`` also distorts the measurements of the second
    copy. With ``normalize_regressors`` each regressor is scaled to unit norm,
    as the bound's derivation assumes.
    """
    u = np.asarray(dataset.u, dtype=float)
    if normalize_regressors:
        u = u / np.linalg.norm(u, axis=2, keepdims=True)
    truth = dataset.truth
    b = truth.b
    d = u @ truth.omega_o + dataset.v
    d_lin = d + dataset.theta
    d_nl = d + b[:, None] * d * d + dataset.theta if measurement_nonlinearity else d_lin
    a, c = weights.a, weights.c
    n, n_iters, L = u.shape
    omega = np.zeros((n, L))
    errors = np.empty((n_iters, n))
    for i in range(n_iters):
        u_i = u[:, i]
        pred = omega @ u_i.T  # pred[k, l] = u_l^T omega_k
        phi = omega + mu * np.einsum("lk,kl,lj->kj", c, d_lin[:, i][None, :] - pred, u_i)
        phi_nl = omega + mu * np.einsum("lk,kl,lj->kj", c, d_nl[:, i][None, :] - pred, u_i)
        sent_nl = phi_nl + b[:, None] * phi_nl * phi_nl
        omega_next = a.T @ phi
        diff = a.T @ sent_nl - omega_next
        errors[i] = (diff * diff).sum(axis=1)
        omega = omega_next
    return BoundCheck(errors=errors, bound=bound, transient=transient)


# ---------------------------------------------------------------------------
# linear algebra helper


def spectral_radius(matrix) -> float:
    """Largest eigenvalue magnitude of a square matrix (LAPACK ``geev``)."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    try:
        eig = np.linalg.eigvals(m)
    except np.linalg.LinAlgError as exc:
        raise AnalysisError(f"eigenvalue iteration did not converge: {exc}") from None
    return float(np.max(np.abs(eig)))


# ---------------------------------------------------------------------------
# mean-convergence recursions


def gamma_coefficients(weights: CombinationMatrices, mu: float, sigma_u2: float) -> np.ndarray:
    """``gamma[l', k] = a[l', k] - mu sigma_u^2 sum_l a[l, k] c[l', l]``."""
    a, c = np.asarray(weights.a, dtype=float), np.asarray(weights.c, dtype=float)
    return a - mu * sigma_u2 * (c @ a)


def special_transition(weights: CombinationMatrices, mu: float, sigma_u2: float) -> np.ndarray:
    """Bias-free mean transition ``a_tilde[l, k] = a[l, k] (1 - mu sigma_u^2 sum_l' c[l', l])``.

    Node ``l`` adapts with its own previous estimate against every neighbour's
    regressor, so the contraction factor multiplies the combination weight.
    """
    a, c = np.asarray(weights.a, dtype=float), np.asarray(weights.c, dtype=float)
    shrink = 1.0 - mu * sigma_u2 * c.sum(axis=0)
    return a * shrink[:, None]


@dataclass
class MeanTrajectory:
    mean_errors: np.ndarray  # (n_steps + 1, N, L), row 0 is the initial state
    transition: np.ndarray  # (N, N) linear part, indexed [l, k]
    rho: float
    divergent: bool
    bias: np.ndarray | None = None  # (n_steps + 1, N, L) forcing term, row 0 zero

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.mean_errors, axis=2)

    @property
    def bias_norms(self) -> np.ndarray | None:
        return None if self.bias is None else np.linalg.norm(self.bias, axis=(1, 2))


def mean_recursion_special(
    weights: CombinationMatrices,
    mu: float,
    sigma_u2: float,
    initial,
    n_steps: int,
) -> MeanTrajectory:
    """Iterate the mean error of ATC DLMS without nonlinearity bias.

    ``divergent`` is set (and iteration stops at non-finite values) when the
    transition's spectral radius is at least one.
    """
    trans = special_transition(weights, mu, sigma_u2)
    rho = spectral_radius(trans)
    state = np.array(initial, dtype=float)
    out = np.full((n_steps + 1,) + state.shape, np.nan)
    out[0] = state
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, n_steps + 1):
            state = trans.T @ state
            if not np.isfinite(state).all():
                break
            out[i] = state
    return MeanTrajectory(out, trans, rho, divergent=rho >= 1.0)


def appendix_f(c_l, sigma_u2: float, mean_errors) -> np.ndarray:
    """``E{p_l} = -sigma_u^2 sum_l' c[l', l] w_l'`` for mean errors ``w``."""
    return -sigma_u2 * np.asarray(c_l, dtype=float) @ np.asarray(mean_errors, dtype=float)


def appendix_t(c_l, sigma_u2: float, mean_errors) -> np.ndarray:
    """``E{p_l^2}`` elementwise, with the error vectors held at ``mean_errors``.

    Cross-node terms factor into products of second moments; same-node terms
    use the fourth-moment identity ``E{(u^T w)^2 u_r^2} = s^2 (|w|^2 + 2 w_r^2)``.
    """
    c = np.asarray(c_l, dtype=float)
    w = np.atleast_2d(np.asarray(mean_errors, dtype=float))
    s4 = sigma_u2 * sigma_u2
    cw = c @ w  # sum_l' c_l' w_l'
    cross = cw * cw - (c * c) @ (w * w)
    diag = (c * c) @ ((w * w).sum(axis=1, keepdims=True) + 2.0 * w * w)
    return s4 * (cross + diag)


def appendix_h(omega_prev, mu: float, f_l, t_l) -> np.ndarray:
    """``E{phi_l^2} = w^2 + 2 mu w f + mu^2 t`` for previous mean estimate ``w``."""
    w = np.asarray(omega_prev, dtype=float)
    return w * w + 2.0 * mu * w * np.asarray(f_l) + mu * mu * np.asarray(t_l)


def _sixth_moment(sigma_u2: float, w: np.ndarray) -> np.ndarray:
    # E{(u^T w)^4 u_r^2} = 3 s_w^4 s_u^2 + 12 s_w^2 cov^2, s_w^2 = s_u^2 |w|^2, cov = s_u^2 w_r
    n2 = (w * w).sum(axis=-1, keepdims=True)
    return sigma_u2**3 * (3.0 * n2 * n2 + 12.0 * n2 * w * w)


def _fourth_moment(sigma_u2: float, w: np.ndarray) -> np.ndarray:
    n2 = (w * w).sum(axis=-1, keepdims=True)
    return sigma_u2**2 * (n2 + 2.0 * w * w)


def appendix_A(sigma_u2: float, sigma_v2: float, estimates, as_written: bool = True) -> np.ndarray:
    """Same-node moment ``A[l', r]`` per neighbour row of ``estimates``.

    ``as_written`` keeps the published constant ``sigma_v^2 + 3 sigma_v^4 sigma_u^2``;
    otherwise the exact Gaussian constant ``3 sigma_v^4 sigma_u^2`` is used.
    """
    w = np.atleast_2d(np.asarray(estimates, dtype=float))
    const = 3.0 * sigma_v2 * sigma_v2 * sigma_u2
    if as_written:
        const += sigma_v2
    return _sixth_moment(sigma_u2, w) + 6.0 * sigma_v2 * _fourth_moment(sigma_u2, w) + const


def appendix_r(c_l, b, sigma_u2: float, sigma_v2: float, estimates, as_written: bool = True) -> np.ndarray:
    """``sum_l' c_l'^2 b_l'^2 A[l', r]``: the second moment of the nonlinear
    adaptation perturbation with the step size factored out."""
    c = np.asarray(c_l, dtype=float)
    b = np.asarray(b, dtype=float)
    return (c * c * b * b) @ appendix_A(sigma_u2, sigma_v2, estimates, as_written)


def mean_recursion_general(
    weights: CombinationMatrices,
    mu: float,
    sigma_u2: float,
    b,
    omega_o,
    initial,
    n_steps: int,
    sigma_v2: float = 0.0,
) -> MeanTrajectory:
    """Mean error of DLMS with nonlinear measurements and links.

    The linear part uses :func:`gamma_coefficients`; the forcing term is
    ``g_k = sum_l a[l, k] b_l (h_l + mu^2 r_l)`` with the random estimates in
    ``h`` and ``r`` replaced by their current means ``omega_o + error``.
    """
    a, c = np.asarray(weights.a, dtype=float), np.asarray(weights.c, dtype=float)
    b = np.asarray(b, dtype=float)
    omega_o = np.asarray(omega_o, dtype=float)
    gamma = gamma_coefficients(weights, mu, sigma_u2)
    rho = spectral_radius(gamma)
    n = a.shape[0]
    state = np.array(initial, dtype=float)
    out = np.full((n_steps + 1,) + state.shape, np.nan)
    bias = np.full_like(out, np.nan)
    out[0], bias[0] = state, 0.0
    divergent = rho >= 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, n_steps + 1):
            est = omega_o + state
            k_term = np.empty_like(state)
            for l in range(n):
                f_l = appendix_f(c[:, l], sigma_u2, state)
                t_l = appendix_t(c[:, l], sigma_u2, state)
                h_l = appendix_h(est[l], mu, f_l, t_l)
                r_l = appendix_r(c[:, l], b, sigma_u2, sigma_v2, est)
                k_term[l] = h_l + mu * mu * r_l
            g = a.T @ (b[:, None] * k_term)
            state = gamma.T @ state + g
            if not np.isfinite(state).all() or np.abs(state).max() > 1e6:
                divergent = True
                break
            out[i], bias[i] = state, g
    return MeanTrajectory(out, gamma, rho, divergent, bias)


# ---------------------------------------------------------------------------
# Monte Carlo companions


@dataclass
class MonteCarloEstimate:
    mean: np.ndarray
    std_error: np.ndarray
    n_samples: int

    def z_scores(self, reference) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (self.mean - np.asarray(reference)) / self.std_error
        return np.where(self.std_error == 0, np.where(self.mean == reference, 0.0, np.inf), z)


def monte_carlo_mean(
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    n_samples: int,
    seed: int,
    batch_size: int = 100_000,
) -> MonteCarloEstimate:
    """Mean and standard error of ``sampler`` draws, accumulated in batches.

    Each batch draws from its own spawned substream, so the estimate depends
    only on ``(seed, n_samples, batch_size)``.
    """
    n_batches = -(-n_samples // batch_size)
    streams = np.random.SeedSequence(seed).spawn(n_batches)
    total = total_sq = None
    done = 0
    for ss in streams:
        m = min(batch_size, n_samples - done)
        x = np.asarray(sampler(np.random.default_rng(ss), m), dtype=float)
        s, s2 = x.sum(axis=0), (x * x).sum(axis=0)
        total = s if total is None else total + s
        total_sq = s2 if total_sq is None else total_sq + s2
        done += m
    mean = total / n_samples
    var = np.maximum(total_sq / n_samples - mean * mean, 0.0) * n_samples / max(n_samples - 1, 1)
    return MonteCarloEstimate(mean, np.sqrt(var / n_samples), n_samples)


def sample_p(c_l, sigma_u: float, mean_errors, rng: np.random.Generator, n: int, sigma_v: float = 0.0) -> np.ndarray:
    """Draws of ``p_l = sum_l' c_l' (v_l' - u_l'^T w_l') u_l'``, shape ``(n, L)``."""
    c = np.asarray(c_l, dtype=float)
    w = np.atleast_2d(np.asarray(mean_errors, dtype=float))
    u = sigma_u * rng.standard_normal((n, w.shape[0], w.shape[1]))
    e = sigma_v * rng.standard_normal((n, w.shape[0])) - np.einsum("snj,nj->sn", u, w)
    return np.einsum("n,sn,snj->sj", c, e, u)


def sample_delta_phi_sq(c_l, b, sigma_u: float, sigma_v: float, estimates, rng, n: int) -> np.ndarray:
    """Draws of ``(sum_l' c_l' b_l' d_l'^2 u_l')^2`` with ``d = u^T w + v``."""
    c, b = np.asarray(c_l, dtype=float), np.asarray(b, dtype=float)
    w = np.atleast_2d(np.asarray(estimates, dtype=float))
    u = sigma_u * rng.standard_normal((n, w.shape[0], w.shape[1]))
    d = np.einsum("snj,nj->sn", u, w) + sigma_v * rng.standard_normal((n, w.shape[0]))
    x = np.einsum("n,sn,snj->sj", c * b, d * d, u)
    return x * x


@dataclass
class RTermReport:
    closed_form: np.ndarray  # as written
    exact: np.ndarray  # with the exact Gaussian constant
    monte_carlo: MonteCarloEstimate
    constant_discrepancy: float  # as-written minus exact, same for every entry

    @property
    def z_exact(self) -> np.ndarray:
        return self.monte_carlo.z_scores(self.exact)

    @property
    def z_as_written(self) -> np.ndarray:
        return self.monte_carlo.z_scores(self.closed_form)


def appendix_r_report(c_l, b, sigma_u2, sigma_v2, estimates, n_samples=1_000_000, seed=0) -> RTermReport:
    """Cross-check :func:`appendix_r` against sampling and expose the constant-term gap."""
    closed = appendix_r(c_l, b, sigma_u2, sigma_v2, estimates, as_written=True)
    exact = appendix_r(c_l, b, sigma_u2, sigma_v2, estimates, as_written=False)
    mc = monte_carlo_mean(
        lambda rng, n: sample_delta_phi_sq(c_l, b, np.sqrt(sigma_u2), np.sqrt(sigma_v2), estimates, rng, n),
        n_samples, seed,
    )
    gap = float(np.sum(np.asarray(c_l) ** 2 * np.asarray(b) ** 2) * sigma_v2)
    return RTermReport(closed, exact, mc, gap)


@dataclass
class GZeroReport:
    estimate: MonteCarloEstimate
    threshold: float = 4.0

    @property
    def z(self) -> np.ndarray:
        return self.estimate.z_scores(0.0)

    @property
    def failing(self) -> list[int]:
        return [int(j) for j in np.flatnonzero(np.abs(self.z) >= self.threshold)]

    @property
    def passed(self) -> bool:
        return not self.failing


def verify_g_zero(
    sample_count: int,
    L: int = 4,
    seed: int = 0,
    regressor_mean: float = 0.0,
    sigma_u: float = 1.0,
    sigma_v: float = 0.0,
    mu: float = 0.01,
    c_l=(0.25, 0.25, 0.5),
    b=(-0.1, -0.2, -0.3),
    omega=None,
) -> GZeroReport:
    """Sample ``E{delta phi}`` and flag components more than 4 standard errors from zero.

    ``regressor_mean`` shifts the regressors off zero, breaking the symmetry the
    zero-mean claim relies on (negative control).
    """
    c, b = np.asarray(c_l, dtype=float), np.asarray(b, dtype=float)
    if omega is None:
        omega = np.random.default_rng(seed).standard_normal(L)
        omega /= np.linalg.norm(omega)
    omega = np.asarray(omega, dtype=float)

    def draw(rng, n):
        u = regressor_mean + sigma_u * rng.standard_normal((n, c.size, omega.size))
        d = u @ omega + sigma_v * rng.standard_normal((n, c.size))
        return mu * np.einsum("n,sn,snj->sj", c * b, d * d, u)

    return GZeroReport(monte_carlo_mean(draw, sample_count, seed + 1))


# ---------------------------------------------------------------------------
# reporting


def format_recursion_csv(traj: MeanTrajectory, bound_db_value: float) -> str:
    """``iter, err_node1..err_nodeN, bias_norm, upper_bound_db``; row 0 is the initial state."""
    norms = traj.norms
    bias = traj.bias_norms
    n = norms.shape[1]
    lines = [",".join(["iter"] + [f"err_node{k + 1}" for k in range(n)] + ["bias_norm", "upper_bound_db"])]
    for i in range(norms.shape[0]):
        b = 0.0 if bias is None else bias[i]
        vals = [f"{x:.6g}" for x in norms[i]] + [f"{b:.6g}", f"{bound_db_value:.6g}"]
        lines.append(",".join([str(i)] + vals))
    return "\n".join(lines) + "\n"


@dataclass
class MomentCheck:
    check: str
    component: int
    closed_form: float
    monte_carlo: float
    std_error: float
    z: float
    limit: float

    @property
    def status(self) -> str:
        return "pass" if abs(self.z) < self.limit else "FAIL"


def _rows(check, closed, est: MonteCarloEstimate, limit=3.0) -> list[MomentCheck]:
    z = est.z_scores(closed)
    closed = np.broadcast_to(closed, est.mean.shape)
    return [
        MomentCheck(check, j + 1, float(closed[j]), float(est.mean[j]), float(est.std_error[j]), float(z[j]), limit)
        for j in range(est.mean.size)
    ]


def moment_fixture(seed: int = 0):
    """Small two-neighbour fixture used by :func:`validate_moments`."""
    rng = np.random.default_rng(seed)
    c_l = np.array([0.4, 0.6])
    errors = 0.5 * rng.standard_normal((2, 3))
    omega_prev = rng.standard_normal(3)
    return c_l, errors, omega_prev


def validate_moments(n_samples: int = 1_000_000, seed: int = 0, mu: float = 0.1) -> list[MomentCheck]:
    """Closed-form moments against sampling: f, t, h, r (exact and as written) and g = 0."""
    c_l, errs, w_prev = moment_fixture(seed)
    s_u, s_v = 1.0, 0.1
    out: list[MomentCheck] = []
    f = appendix_f(c_l, s_u**2, errs)
    t = appendix_t(c_l, s_u**2, errs)
    p_est = monte_carlo_mean(lambda rng, n: sample_p(c_l, s_u, errs, rng, n), n_samples, seed + 11)
    out += _rows("f", f, p_est)
    t_est = monte_carlo_mean(lambda rng, n: sample_p(c_l, s_u, errs, rng, n) ** 2, n_samples, seed + 12)
    out += _rows("t", t, t_est)
    h = appendix_h(w_prev, mu, f, t)
    h_est = monte_carlo_mean(
        lambda rng, n: (w_prev + mu * sample_p(c_l, s_u, errs, rng, n)) ** 2, n_samples, seed + 13
    )
    out += _rows("h", h, h_est)
    b = np.array([-0.2, -0.35])
    rep = appendix_r_report(c_l, b, s_u**2, s_v**2, w_prev + errs, n_samples, seed + 14)
    out += _rows("r_exact", rep.exact, rep.monte_carlo)
    out += _rows("r_as_written", rep.closed_form, rep.monte_carlo)
    g = verify_g_zero(n_samples, seed=seed + 15)
    out += _rows("g_zero", np.zeros_like(g.estimate.mean), g.estimate, limit=4.0)
    neg = verify_g_zero(n_samples, seed=seed + 16, regressor_mean=0.5)
    out += [
        MomentCheck("g_zero_biased_control", r.component, r.closed_form, r.monte_carlo, r.std_error, r.z, r.limit)
        for r in _rows("", np.zeros_like(neg.estimate.mean), neg.estimate, limit=4.0)
    ]
    return out
