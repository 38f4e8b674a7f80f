"""Fisher information and Cramer-Rao bounds for ``theta = [omega; b]``.

Observation model per node ``k``: ``d_tilde_k = r_k + theta_k`` with
``r_k = U_k omega + b_k (U_k omega)^2`` and white Gaussian noise of variance
``sigma_theta2[k]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COND_LIMIT = 1e12


class NonIdentifiableError(np.linalg.LinAlgError):
    def __init__(self, message: str, null_direction: np.ndarray) -> None:
        super().__init__(message)
        self.null_direction = null_direction


@dataclass(frozen=True)
class ObservationModel:
    U: np.ndarray  # (N, I, L), row t of U[k] is u_{k,t}^T
    omega: np.ndarray  # (L,)
    b: np.ndarray  # (N,)
    sigma_theta2: np.ndarray  # (N,)

    def __post_init__(self) -> None:
        U = np.asarray(self.U, dtype=float)
        if U.ndim != 3 or U.shape[1] < 1:
            raise ValueError(f"U must be (N, I, L) with I >= 1, got shape {U.shape}")
        n, _, L = U.shape
        omega = np.asarray(self.omega, dtype=float).reshape(L)
        b = np.asarray(self.b, dtype=float).reshape(n)
        s2 = np.broadcast_to(np.asarray(self.sigma_theta2, dtype=float), (n,)).copy()
        if np.any(s2 <= 0):
            raise ValueError("noise variances must be positive")
        for name, val in (("U", U), ("omega", omega), ("b", b), ("sigma_theta2", s2)):
            object.__setattr__(self, name, val)

    @property
    def n_nodes(self) -> int:
        return self.U.shape[0]

    @property
    def L(self) -> int:
        return self.U.shape[2]

    def mean(self, omega=None, b=None) -> np.ndarray:
        """Noise-free observations ``r_k`` for every node, shape ``(N, I)``."""
        omega = self.omega if omega is None else np.asarray(omega, dtype=float)
        b = self.b if b is None else np.asarray(b, dtype=float)
        x = self.U @ omega
        return x + b[:, None] * x * x


def sensitivity_p(model: ObservationModel, k: int) -> np.ndarray:
    """``dr_k / domega``: rows ``u_{k,t}^T (1 + 2 b_k u_{k,t}^T omega)``, shape ``(I, L)``."""
    U = model.U[k]
    return U * (1.0 + 2.0 * model.b[k] * (U @ model.omega))[:, None]


def sensitivity_pprime(model: ObservationModel, k: int) -> np.ndarray:
    """``dr_k / db_k = (U_k omega)^2``; ``r_k`` does not depend on other nodes' ``b``."""
    x = model.U[k] @ model.omega
    return x * x


@dataclass(frozen=True)
class FimBlocks:
    f_omega: np.ndarray  # (L, L)
    f_b: np.ndarray  # (N, N), diagonal
    f_bomega: np.ndarray  # (N, L)

    def full(self) -> np.ndarray:
        return np.block([[self.f_omega, self.f_bomega.T], [self.f_bomega, self.f_b]])

    def scaled(self, factor: float) -> "FimBlocks":
        return FimBlocks(self.f_omega * factor, self.f_b * factor, self.f_bomega * factor)


def assemble_fim(model: ObservationModel) -> FimBlocks:
    L, n = model.L, model.n_nodes
    f_omega = np.zeros((L, L))
    f_b = np.zeros((n, n))
    f_bomega = np.zeros((n, L))
    for k in range(n):
        w = 1.0 / model.sigma_theta2[k]
        p = sensitivity_p(model, k)
        q = sensitivity_pprime(model, k)
        f_omega += w * (p.T @ p)
        f_b[k, k] = w * (q @ q)
        f_bomega[k] = w * (q @ p)
    return FimBlocks(0.5 * (f_omega + f_omega.T), f_b, f_bomega)


@dataclass(frozen=True)
class CrbResult:
    crb_omega: np.ndarray  # (L,) variance lower bounds
    crb_b: np.ndarray  # (N,)

    @property
    def trace_omega(self) -> float:
        return float(self.crb_omega.sum())

    @property
    def trace_b(self) -> float:
        return float(self.crb_b.sum())


def crb_from_fim(blocks: FimBlocks | np.ndarray, n_omega: int | None = None) -> CrbResult:
    """Diagonal of the inverse FIM, split into the omega and b parts.

    ``blocks`` may also be a full matrix, in which case ``n_omega`` gives the
    size of the omega block. Raises :class:`NonIdentifiableError` when the
    condition number exceeds ``COND_LIMIT``; the message names the parameters
    dominating the (near-)null eigenvector.
    """
    if isinstance(blocks, FimBlocks):
        fim, n_omega = blocks.full(), blocks.f_omega.shape[0]
    else:
        fim = np.asarray(blocks, dtype=float)
        if n_omega is None:
            raise ValueError("n_omega is required with a full matrix")
    names = [f"omega[{j}]" for j in range(n_omega)] + [f"b[{j}]" for j in range(fim.shape[0] - n_omega)]
    evals, evecs = np.linalg.eigh(fim)
    top = evals[-1]
    if top <= 0 or evals[0] <= top / COND_LIMIT:
        v = evecs[:, 0]
        order = np.argsort(-np.abs(v))
        terms = " ".join(f"{v[j]:+.3g}*{names[j]}" for j in order[:4] if abs(v[j]) > 1e-3)
        cond = np.inf if evals[0] <= 0 else top / evals[0]
        raise NonIdentifiableError(
            f"non-identifiable parameterization (condition number {cond:.3g}); null direction {terms}", v
        )
    chol = np.linalg.cholesky(fim)
    inv_chol = np.linalg.solve(chol, np.eye(fim.shape[0]))
    diag = (inv_chol * inv_chol).sum(axis=0)
    return CrbResult(diag[:n_omega], diag[n_omega:])


def crb_msd_db(crb: CrbResult) -> tuple[float, float]:
    """Total-variance bounds in dB: ``10 log10`` of each block's trace."""
    return float(10.0 * np.log10(crb.trace_omega)), float(10.0 * np.log10(crb.trace_b))


def model_from_dataset(dataset) -> ObservationModel:
    truth = dataset.truth
    return ObservationModel(dataset.u, truth.omega_o, truth.b, truth.sigma_theta**2)


@dataclass
class ScoreCovariance:
    mean: np.ndarray  # (P, P) sample covariance of the score
    std_error: np.ndarray  # (P, P)
    n_samples: int


def score_covariance(model: ObservationModel, n_samples: int, seed: int, eps: float = 1e-6) -> ScoreCovariance:
    """Monte Carlo ``E{s s^T}`` of the log-likelihood gradient at the true parameters.

    The score ``s = sum_k J_k^T (d_k - r_k) / sigma_k^2`` uses a Jacobian
    obtained by central differences of :meth:`ObservationModel.mean`, so it
    shares no code with :func:`assemble_fim`.
    """
    n, n_obs, L = model.U.shape
    theta0 = np.concatenate([model.omega, model.b])
    P = theta0.size

    def r_of(theta):
        return model.mean(theta[:L], theta[L:]).reshape(-1)

    jac = np.empty((n * n_obs, P))
    for j in range(P):
        step = np.zeros(P)
        step[j] = eps
        jac[:, j] = (r_of(theta0 + step) - r_of(theta0 - step)) / (2 * eps)
    sig2 = np.repeat(model.sigma_theta2, n_obs)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n_samples, n * n_obs)) * np.sqrt(sig2)
    scores = (noise / sig2) @ jac  # (S, P)
    outer = scores[:, :, None] * scores[:, None, :]
    mean = outer.mean(axis=0)
    se = outer.std(axis=0, ddof=1) / np.sqrt(n_samples)
    return ScoreCovariance(mean, se, n_samples)
