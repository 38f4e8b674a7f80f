"""Ground truth, sensor data and the second-order sensor nonlinearity.

Every random source in a dataset draws from its own child of a
``numpy.random.SeedSequence`` so that, e.g., changing the link-noise level
leaves the regressors and measurement noise untouched.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig

# Order in which per-dataset substreams are spawned; append only.
_STREAMS = ("omega", "b", "u", "v", "theta", "eta", "pilot")


@dataclass(frozen=True)
class GroundTruth:
    omega_o: np.ndarray  # (L,)
    b: np.ndarray  # (N,)
    sigma_theta: np.ndarray  # (N,)
    sigma_eta: np.ndarray  # (N,)
    sigma_u: float


@dataclass(frozen=True)
class SensorDataset:
    """One Monte Carlo realisation. Arrays are indexed ``[node, iteration, ...]``."""

    u: np.ndarray  # (N, I, L) regressors
    d: np.ndarray  # (N, I) clean measurements u^T w_o + v
    d_tilde: np.ndarray  # (N, I) nonlinear measurements d + b d^2 + theta
    v: np.ndarray  # (N, I)
    theta: np.ndarray  # (N, I)
    eta: np.ndarray  # (N, I, L) additive link noise on exchanged estimates
    truth: GroundTruth
    # training window observed before iteration 1 (semi-distributed variant)
    pilot_d: np.ndarray | None = None  # (N, T_p)
    pilot_d_tilde: np.ndarray | None = None  # (N, T_p)

    @property
    def n_iters(self) -> int:
        return self.d.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.d.shape[0]

    @property
    def L(self) -> int:
        return self.u.shape[2]

    @property
    def d_linear(self) -> np.ndarray:
        """Measurements with the background noise but without the nonlinear term."""
        return self.d + self.theta


def derive_seed(master_seed: int, *path: int) -> int:
    """Stateless mixing of ``(master_seed, *path)`` into a 64-bit seed.

    Uses the SeedSequence entropy hash, so nearby inputs give unrelated seeds
    and the result does not depend on call order.
    """
    ss = np.random.SeedSequence([int(master_seed), *map(int, path)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def draw_nonlinear_coeffs(n_nodes: int, b_max: float, seed: int) -> np.ndarray:
    """Independent ``b_k ~ U(-b_max, 0)``."""
    if not b_max > 0:
        raise ValueError(f"b_max must be > 0, got {b_max}")
    if n_nodes < 1:
        raise ValueError("n_nodes must be positive")
    rng = np.random.default_rng(seed)
    return -b_max * rng.random(n_nodes)


def apply_nonlinearity(d, b, theta=0.0):
    return d + b * d * d + theta


def corrupt_link_vector(phi: np.ndarray, b_l: float, eta) -> np.ndarray:
    """What a neighbour receives when node ``l`` transmits ``phi``."""
    phi = np.asarray(phi, dtype=float)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), phi.shape)
    return phi + b_l * phi * phi + eta


def _stream_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(len(_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(_STREAMS, children)}


def _draw_omega(rng: np.random.Generator, config: ExperimentConfig) -> np.ndarray:
    omega_o = rng.standard_normal(config.L)
    if config.normalize_omega:
        omega_o /= np.linalg.norm(omega_o)
    return omega_o


def draw_omega_o(config: ExperimentConfig, seed: int) -> np.ndarray:
    """The ``omega_o`` that :func:`generate_dataset` would produce for ``seed``."""
    return _draw_omega(_stream_rngs(seed)["omega"], config)


def generate_dataset(
    config: ExperimentConfig,
    seed: int,
    omega_o: np.ndarray | None = None,
    b: np.ndarray | None = None,
) -> SensorDataset:
    """Draw one realisation. ``omega_o`` and ``b`` override the random truth
    (their streams are still consumed, so the other sources do not shift)."""
    n, L, n_iters = config.n_nodes, config.L, config.n_iters
    if n < 1 or L < 1 or n_iters < 1:
        raise ValueError("n_nodes, L and n_iters must be positive")
    rngs = _stream_rngs(seed)

    drawn_omega = _draw_omega(rngs["omega"], config)
    drawn_b = draw_nonlinear_coeffs(n, config.b_max, int(rngs["b"].integers(2**63)))
    omega_o = drawn_omega if omega_o is None else np.array(omega_o, dtype=float).reshape(L)
    b = drawn_b if b is None else np.array(b, dtype=float).reshape(n)
    u = config.sigma_u * rngs["u"].standard_normal((n, n_iters, L))
    v = config.sigma_v * rngs["v"].standard_normal((n, n_iters))
    theta = config.sigma_theta * rngs["theta"].standard_normal((n, n_iters))
    eta = config.sigma_eta * rngs["eta"].standard_normal((n, n_iters, L))

    d = u @ omega_o + v
    d_tilde = apply_nonlinearity(d, b[:, None], theta)

    prng = rngs["pilot"]
    p_u = config.sigma_u * prng.standard_normal((n, config.pilot_len, L))
    pilot_d = p_u @ omega_o + config.sigma_v * prng.standard_normal((n, config.pilot_len))
    pilot_theta = config.sigma_theta * prng.standard_normal((n, config.pilot_len))
    pilot_d_tilde = apply_nonlinearity(pilot_d, b[:, None], pilot_theta)
    truth = GroundTruth(
        omega_o=omega_o,
        b=b,
        sigma_theta=np.full(n, float(config.sigma_theta)),
        sigma_eta=np.full(n, float(config.sigma_eta)),
        sigma_u=float(config.sigma_u),
    )
    return SensorDataset(
        u=u, d=d, d_tilde=d_tilde, v=v, theta=theta, eta=eta, truth=truth,
        pilot_d=pilot_d, pilot_d_tilde=pilot_d_tilde,
    )


def export_dataset(dataset: SensorDataset, directory: str | Path) -> list[Path]:
    """Write one CSV per field. Per-sample files have rows ``node, iter, values...``
    with 1-based indices; values use 17 significant digits so they round-trip."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    n, n_iters, L = dataset.u.shape
    node_iter = np.array([(k + 1, i + 1) for k in range(n) for i in range(n_iters)], dtype=float)
    written = []

    def save(name: str, header: str, rows: np.ndarray) -> None:
        path = out / f"{name}.csv"
        fmt = ["%d", "%d"] + ["%.17g"] * (rows.shape[1] - 2) if name not in ("omega_o", "b") else ["%d", "%.17g"]
        np.savetxt(path, rows, fmt=fmt, delimiter=",", header=header, comments="")
        written.append(path)

    save("omega_o", "index,value", np.column_stack([np.arange(1, L + 1), dataset.truth.omega_o]))
    save("b", "node,value", np.column_stack([np.arange(1, n + 1), dataset.truth.b]))
    vec_header = "node,iter," + ",".join(f"x{j + 1}" for j in range(L))
    save("u", vec_header, np.column_stack([node_iter, dataset.u.reshape(-1, L)]))
    save("eta", vec_header, np.column_stack([node_iter, dataset.eta.reshape(-1, L)]))
    for name in ("d", "d_tilde", "v", "theta"):
        save(name, "node,iter,value", np.column_stack([node_iter, getattr(dataset, name).reshape(-1)]))
    if dataset.pilot_d is not None:
        t_p = dataset.pilot_d.shape[1]
        pilot_idx = np.array([(k + 1, t + 1) for k in range(n) for t in range(t_p)], dtype=float)
        for name in ("pilot_d", "pilot_d_tilde"):
            save(name, "node,iter,value", np.column_stack([pilot_idx, getattr(dataset, name).reshape(-1)]))
    return written
