"""ATC diffusion LMS and the SONEC-DLMS estimate-and-compensate variants.

Two layers live here:

* per-node building blocks (``compensate_measurement``, ``adaptation_step``,
  ``combine_step``, ...) plus ``dlms_atc_step`` / ``sonec_network_step`` that
  walk the network node by node. They are slow and serve as the readable
  reference.
* ``simulate_batch``: the same recursions vectorised over a stack of
  independent runs, used by the Monte Carlo harness. Its per-run arithmetic
  does not depend on how many runs are stacked together.

Weight matrices use ``w[l, k]`` = weight node ``k`` gives neighbour ``l``.
Nonlinearity estimates are stored as ``b_hat[k, l]``: node ``k``'s estimate
of neighbour ``l``'s coefficient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .signal_model import SensorDataset, corrupt_link_vector
from .topology import CombinationMatrices, NetworkTopology

EPS_B = 1e-8
DIVERGENCE_NORM = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, message: str = "") -> None:
        self.iteration = iteration
        super().__init__(message or f"estimate diverged at iteration {iteration}")


class DegeneratePilotError(ValueError):
    pass


class Variant(str, Enum):
    FULLY_DISTRIBUTED = "fully_distributed"
    SEMI_DISTRIBUTED = "semi_distributed"
    COMBINATION_ONLY = "combination_only"


@dataclass(frozen=True)
class StepSizes:
    mu: float
    mu_b: float

    def __post_init__(self) -> None:
        if not (self.mu > 0 and self.mu_b > 0):
            raise ValueError(f"step sizes must be positive, got mu={self.mu}, mu_b={self.mu_b}")


@dataclass
class CompensationStats:
    """Counts quadratic-root evaluations whose discriminant had to be clamped."""

    clamped: int = 0
    evaluated: int = 0


@dataclass
class NodeState:
    omega: np.ndarray  # (L,)
    b_hat: np.ndarray  # (|N_k|,) ordered like the node's neighbourhood
    phi: np.ndarray  # (L,)
    received_phi: list[np.ndarray] = field(default_factory=list)

    def check_finite(self, iteration: int) -> None:
        if not (np.isfinite(self.omega).all() and np.isfinite(self.b_hat).all()):
            raise DivergenceError(iteration, f"non-finite state at iteration {iteration}")
        if np.linalg.norm(self.omega) > DIVERGENCE_NORM:
            raise DivergenceError(iteration, f"|omega| exceeded {DIVERGENCE_NORM:g} at iteration {iteration}")


# ---------------------------------------------------------------------------
# compensation


def _invert_quadratic(x, b):
    """Root of ``b y^2 + y - x = 0`` on the branch through ``y = x`` at ``b = 0``.

    Returns ``(y, clamped_mask)``. The rationalised form ``2x / (1 + sqrt(disc))``
    equals ``(-1 + sqrt(disc)) / (2b)`` but has no cancellation for small
    ``b``. A negative discriminant is clamped to zero, which maps to the
    vertex ``-1 / (2b)``.
    """
    x, b = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(b, dtype=float))
    linear = np.abs(b) < EPS_B
    disc = 1.0 + 4.0 * b * x
    clamped = (disc < 0) & ~linear
    with np.errstate(divide="ignore", invalid="ignore"):
        root = 2.0 * x / (1.0 + np.sqrt(np.maximum(disc, 0.0)))
        vertex = -0.5 / np.where(linear, 1.0, b)
    y = np.where(linear, x, np.where(clamped, vertex, root))
    return y, clamped


def compensate_measurement(d_tilde, b_hat, stats: CompensationStats | None = None):
    """Estimate the clean measurement from ``d_tilde = d + b d^2``.

    Works elementwise on arrays; scalars in, scalar out.
    """
    y, clamped = _invert_quadratic(d_tilde, b_hat)
    if stats is not None:
        stats.clamped += int(clamped.sum())
        stats.evaluated += int(clamped.size)
    return float(y) if y.ndim == 0 else y


def compensate_intermediate(phi_tilde, b_hat_l: float, stats: CompensationStats | None = None) -> np.ndarray:
    return np.atleast_1d(compensate_measurement(np.asarray(phi_tilde, dtype=float), b_hat_l, stats))


# ---------------------------------------------------------------------------
# per-node steps


def estimate_nonlinearity_step(b_hat, d_hat, e_tilde, c_k, mu_b: float) -> np.ndarray:
    """Steepest-descent update of node k's neighbour coefficients."""
    d_hat = np.asarray(d_hat, dtype=float)
    return np.asarray(b_hat, dtype=float) + mu_b * np.asarray(c_k) * np.asarray(e_tilde) * d_hat * d_hat


def compensated_error(d_tilde, b_hat, d_hat, u_nb, omega) -> np.ndarray:
    """``d_tilde - b_hat d_hat^2 - u^T omega`` for each neighbour."""
    d_hat = np.asarray(d_hat, dtype=float)
    return np.asarray(d_tilde) - np.asarray(b_hat) * d_hat * d_hat - np.asarray(u_nb) @ omega


def adaptation_step(omega, u_nb, d_tilde_nb, b_hat, d_hat, c_k, mu: float) -> np.ndarray:
    """Intermediate estimate of node k from its neighbours' (compensated) data.

    ``u_nb`` is ``(|N_k|, L)``; the other neighbour-indexed arguments are
    ``(|N_k|,)``.
    """
    e = compensated_error(d_tilde_nb, b_hat, d_hat, u_nb, omega)
    return omega + mu * (np.asarray(c_k) * e) @ np.asarray(u_nb)


def combine_step(phis, a_k) -> np.ndarray:
    """Convex combination ``sum_l a_lk phi_l`` of the received estimates."""
    return np.asarray(a_k) @ np.asarray(phis)


LinkModel = Callable[[np.ndarray, int], np.ndarray]


def dlms_atc_step(
    omegas: np.ndarray,
    u_i: np.ndarray,
    d_i: np.ndarray,
    weights: CombinationMatrices,
    mu: float,
    link_model: LinkModel | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One ATC diffusion LMS iteration over the whole network.

    ``omegas`` and ``u_i`` are ``(N, L)``; ``d_i`` is ``(N,)``. ``link_model``
    maps ``(phi_l, l)`` to what neighbours receive; ``None`` means ideal links.
    Returns ``(phi, omega)``.
    """
    n = omegas.shape[0]
    phi = np.empty_like(omegas)
    for k in range(n):
        hood = np.flatnonzero(weights.c[:, k])
        err = d_i[hood] - u_i[hood] @ omegas[k]
        phi[k] = omegas[k] + mu * (weights.c[hood, k] * err) @ u_i[hood]
    sent = phi if link_model is None else np.stack([link_model(phi[l], l) for l in range(n)])
    omega = np.empty_like(omegas)
    for k in range(n):
        hood = np.flatnonzero(weights.a[:, k])
        omega[k] = combine_step(sent[hood], weights.a[hood, k])
    return phi, omega


def sonec_network_step(
    states: Sequence[NodeState],
    topology: NetworkTopology,
    u_i: np.ndarray,
    d_tilde_i: np.ndarray,
    weights: CombinationMatrices,
    steps: StepSizes,
    variant: Variant = Variant.FULLY_DISTRIBUTED,
    link_model: LinkModel | None = None,
    stats: CompensationStats | None = None,
) -> None:
    """One SONEC-DLMS iteration, updating ``states`` in place.

    Per node: compensate neighbour measurements with the previous ``b_hat``,
    update ``b_hat``, adapt, then (after the exchange) compensate the received
    intermediate estimates with the updated ``b_hat`` and combine. Step 4 runs
    only when ``link_model`` is given, since ideal links need no inversion.
    """
    variant = Variant(variant)
    for k, st in enumerate(states):
        hood = list(topology.neighborhoods[k])
        c_k = weights.c[hood, k]
        u_nb, dt_nb = u_i[hood], d_tilde_i[hood]
        if variant is Variant.COMBINATION_ONLY:
            d_hat = dt_nb
            e_b = compensated_error(dt_nb, st.b_hat, d_hat, u_nb, st.omega)
            st.phi = st.omega + steps.mu * (c_k * (dt_nb - u_nb @ st.omega)) @ u_nb
            st.b_hat = estimate_nonlinearity_step(st.b_hat, d_hat, e_b, c_k, steps.mu_b)
            continue
        d_hat = compensate_measurement(dt_nb, st.b_hat, stats)
        e = compensated_error(dt_nb, st.b_hat, d_hat, u_nb, st.omega)
        st.phi = st.omega + steps.mu * (c_k * e) @ u_nb
        if variant is Variant.FULLY_DISTRIBUTED:
            st.b_hat = estimate_nonlinearity_step(st.b_hat, d_hat, e, c_k, steps.mu_b)
    sent = [st.phi if link_model is None else link_model(st.phi, l) for l, st in enumerate(states)]
    for k, st in enumerate(states):
        hood = list(topology.neighborhoods[k])
        st.received_phi = [sent[l] for l in hood]
        if link_model is not None:
            st.received_phi = [compensate_intermediate(p, bh, stats) for p, bh in zip(st.received_phi, st.b_hat)]
        st.omega = combine_step(np.stack(st.received_phi), weights.a[hood, k])


def centralized_train_b(pilot_d: np.ndarray, pilot_d_tilde: np.ndarray) -> np.ndarray:
    """Per-node least-squares fit of ``b`` from clean/distorted pilot pairs."""
    d = np.atleast_2d(np.asarray(pilot_d, dtype=float))
    dt = np.atleast_2d(np.asarray(pilot_d_tilde, dtype=float))
    d2 = d * d
    den = (d2 * d2).sum(axis=1)
    if np.any(den == 0):
        raise DegeneratePilotError(f"degenerate pilot: all-zero clean data at node(s) {np.flatnonzero(den == 0).tolist()}")
    return ((dt - d) * d2).sum(axis=1) / den


# ---------------------------------------------------------------------------
# batched engine


@dataclass
class BatchResult:
    sq_dev: np.ndarray  # (R, I, N) squared deviation ||omega_k - omega_o||^2
    b_sq_dev: np.ndarray | None  # (R, I) ||b_bar - b||^2, None for plain DLMS
    diverged_at: np.ndarray  # (R,) 1-based iteration of divergence, 0 if none
    clamped: np.ndarray  # (R,) clamped discriminant count
    omega: np.ndarray | None = None  # (R, I, N, L) when recorded
    b_hat: np.ndarray | None = None  # (R, I, N, N) when recorded


@dataclass(frozen=True)
class AlgorithmSpec:
    """What the batched engine runs.

    ``kind`` is ``"dlms"`` or a :class:`Variant` value. ``measurements``
    selects the input stream: ``"nonlinear"`` (``d_tilde``) or ``"linear"``
    (``d + theta``).
    """

    kind: str
    measurements: str = "nonlinear"
    link_nonlinearity: bool = False


def _stack(datasets: Sequence[SensorDataset], measurements: str):
    if measurements == "nonlinear":
        meas = np.stack([ds.d_tilde for ds in datasets])
    elif measurements == "linear":
        meas = np.stack([ds.d_linear for ds in datasets])
    else:
        raise ValueError(f"unknown measurement stream {measurements!r}")
    # iteration-major for contiguous per-step slices
    u = np.ascontiguousarray(np.stack([ds.u for ds in datasets]).transpose(2, 0, 1, 3))
    eta = np.ascontiguousarray(np.stack([ds.eta for ds in datasets]).transpose(2, 0, 1, 3))
    meas = np.ascontiguousarray(meas.transpose(2, 0, 1))
    return u, meas, eta


def simulate_batch(
    datasets: Sequence[SensorDataset],
    weights: CombinationMatrices,
    algorithm: AlgorithmSpec,
    steps: StepSizes,
    b_hat_init: np.ndarray | None = None,
    record: bool = False,
) -> BatchResult:
    """Run one algorithm on each dataset of a stack; all datasets share the graph.

    For the semi-distributed variant ``b_hat_init`` must hold the frozen
    per-run estimates, shape ``(R, N)``; otherwise estimates start at zero.
    Divergent runs are frozen at zero and their metrics set to NaN.
    """
    kind = algorithm.kind
    if kind != "dlms":
        kind = Variant(kind)
    u, meas, eta = _stack(datasets, algorithm.measurements)
    n_iters, R, N, L = u.shape
    a, c = np.asarray(weights.a, dtype=float), np.asarray(weights.c, dtype=float)
    cT = np.ascontiguousarray(c.T)  # cT[k, l] = c[l, k]
    adj = (a != 0) | (c != 0)
    omega_o = np.stack([ds.truth.omega_o for ds in datasets])  # (R, L)
    b_true = np.stack([ds.truth.b for ds in datasets])  # (R, N)
    link = algorithm.link_nonlinearity

    omega = np.zeros((R, N, L))
    b_hat = np.zeros((R, N, N))
    if kind is Variant.SEMI_DISTRIBUTED:
        if b_hat_init is None:
            raise ValueError("semi-distributed variant needs pilot estimates b_hat_init")
        b_hat[:] = np.asarray(b_hat_init, dtype=float)[:, None, :]
    estimates_b = kind != "dlms"
    hood_count = adj.sum(axis=1)  # nodes k holding an estimate of b_l, per l

    sq_dev = np.full((R, n_iters, N), np.nan)
    b_sq_dev = np.full((R, n_iters), np.nan) if estimates_b else None
    diverged_at = np.zeros(R, dtype=np.int64)
    clamped = np.zeros(R, dtype=np.int64)
    rec_omega = np.full((R, n_iters, N, L), np.nan) if record else None
    rec_b = np.full((R, n_iters, N, N), np.nan) if record else None
    alive = np.ones(R, dtype=bool)

    with np.errstate(all="ignore"):
        for i in range(n_iters):
            u_i, m_i = u[i], meas[i]
            pred = np.einsum("rkj,rlj->rkl", omega, u_i)  # pred[r, k, l] = u_l^T omega_k
            if kind == "dlms" or kind is Variant.COMBINATION_ONLY:
                e = m_i[:, None, :] - pred
                if kind is Variant.COMBINATION_ONLY:
                    d2 = m_i * m_i
                    e_b = m_i[:, None, :] - b_hat * d2[:, None, :] - pred
                    b_hat = b_hat + steps.mu_b * cT * e_b * d2[:, None, :]
            else:
                d_hat, clamp = _invert_quadratic(m_i[:, None, :], b_hat)
                clamped += (clamp & adj.T).sum(axis=(1, 2))
                d2 = d_hat * d_hat
                e = m_i[:, None, :] - b_hat * d2 - pred
                if kind is Variant.FULLY_DISTRIBUTED:
                    b_hat = b_hat + steps.mu_b * cT * e * d2
            phi = omega + steps.mu * np.einsum("kl,rkl,rlj->rkj", cT, e, u_i)

            if link:
                b_link = b_true[:, :, None]
                sent = phi + b_link * phi * phi + eta[i]
            else:
                sent = phi
            if link and estimates_b:
                recv, clamp = _invert_quadratic(sent[:, None, :, :], b_hat[:, :, :, None])
                clamped += (clamp & adj.T[:, :, None]).sum(axis=(1, 2, 3))
                omega = np.einsum("lk,rklj->rkj", a, recv)
            else:
                omega = np.einsum("lk,rlj->rkj", a, sent)

            norms = np.sqrt((omega * omega).sum(axis=2)).max(axis=1)
            bad = alive & ~(np.isfinite(norms) & (norms <= DIVERGENCE_NORM) & np.isfinite(b_hat).all(axis=(1, 2)))
            if bad.any():
                diverged_at[bad] = i + 1
                alive &= ~bad
                omega[bad] = 0.0
                b_hat[bad] = 0.0

            dev = omega - omega_o[:, None, :]
            sq = (dev * dev).sum(axis=2)
            sq[~alive] = np.nan
            sq_dev[:, i] = sq
            if estimates_b:
                b_bar = (b_hat * adj.T).sum(axis=1) / hood_count  # mean over holders k of b_hat[k, l]
                db = b_bar - b_true
                bs = (db * db).sum(axis=1)
                bs[~alive] = np.nan
                b_sq_dev[:, i] = bs
            if record:
                rec_omega[alive, i] = omega[alive]
                rec_b[alive, i] = b_hat[alive]

    return BatchResult(sq_dev, b_sq_dev, diverged_at, clamped, rec_omega, rec_b)


# ---------------------------------------------------------------------------
# single-run conveniences


@dataclass
class Trajectory:
    omega: np.ndarray  # (I, N, L)
    b_hat: np.ndarray | None  # (I, N, N), node k's estimate of b_l at [i, k, l]
    sq_dev: np.ndarray  # (I, N)
    b_sq_dev: np.ndarray | None  # (I,)
    clamped: int


def _single(result: BatchResult, estimates_b: bool) -> Trajectory:
    if result.diverged_at[0]:
        raise DivergenceError(int(result.diverged_at[0]))
    return Trajectory(
        omega=result.omega[0],
        b_hat=result.b_hat[0] if estimates_b else None,
        sq_dev=result.sq_dev[0],
        b_sq_dev=result.b_sq_dev[0] if estimates_b else None,
        clamped=int(result.clamped[0]),
    )


def run_dlms(
    dataset: SensorDataset,
    weights: CombinationMatrices,
    mu: float,
    measurements: str = "nonlinear",
    link_nonlinearity: bool = False,
) -> Trajectory:
    spec = AlgorithmSpec("dlms", measurements, link_nonlinearity)
    res = simulate_batch([dataset], weights, spec, StepSizes(mu, 1.0), record=True)
    return _single(res, estimates_b=False)


def run_sonec_dlms(
    dataset: SensorDataset,
    topology: NetworkTopology,
    weights: CombinationMatrices,
    steps: StepSizes,
    variant: Variant | str = Variant.FULLY_DISTRIBUTED,
    link_nonlinearity: bool = False,
) -> Trajectory:
    """Run SONEC-DLMS on one dataset; raises :class:`DivergenceError` on blow-up."""
    variant = Variant(variant)
    if weights.a.shape[0] != topology.n_nodes or dataset.n_nodes != topology.n_nodes:
        raise ValueError("dataset, topology and weights disagree on the number of nodes")
    b_init = None
    if variant is Variant.SEMI_DISTRIBUTED:
        if dataset.pilot_d is None:
            raise ValueError("semi-distributed variant needs a pilot window in the dataset")
        b_init = centralized_train_b(dataset.pilot_d, dataset.pilot_d_tilde)[None, :]
    spec = AlgorithmSpec(variant.value, "nonlinear", link_nonlinearity)
    res = simulate_batch([dataset], weights, spec, steps, b_hat_init=b_init, record=True)
    return _single(res, estimates_b=True)


def link_model_for(dataset: SensorDataset, iteration: int) -> LinkModel:
    """Nonlinear-link model for the per-node reference steps at one iteration."""
    b, eta = dataset.truth.b, dataset.eta[:, iteration]
    return lambda phi, l: corrupt_link_vector(phi, b[l], eta[l])
