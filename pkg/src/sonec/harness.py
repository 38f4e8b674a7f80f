"""Monte Carlo runner: paired runs of every algorithm, MSD traces and CSV output.

Runs are processed in fixed-size chunks. Each chunk returns partial sums and
the chunks are reduced in index order, so the result is bit-identical no
matter how many worker processes execute them.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .algorithms import AlgorithmSpec, StepSizes, Variant, centralized_train_b, simulate_batch
from .analysis import BoundInputs, c1_max, error_bound
from .config import ExperimentConfig
from .crb import NonIdentifiableError, assemble_fim, crb_from_fim, model_from_dataset
from .signal_model import derive_seed, draw_omega_o, generate_dataset
from .topology import NetworkTopology, build_random_topology, uniform_weights

CHUNK_RUNS = 10
TOPOLOGY_STREAM = 2**32 - 1  # path component reserved for the graph seed

# CSV column -> (trace kind, algorithm)
CSV_COLUMNS = (
    ("msd_dlms_nl_db", "omega", "dlms_nl"),
    ("msd_dlms_clean_db", "omega", "dlms_clean"),
    ("msd_sonec_fd_db", "omega", "sonec_fd"),
    ("msd_sonec_sd_db", "omega", "sonec_sd"),
    ("msd_sonec_comb_db", "omega", "sonec_comb_only"),
    ("msd_b_fd_db", "b", "sonec_fd"),
    ("msd_b_sd_db", "b", "sonec_sd"),
)
CSV_HEADER = ["iter"] + [c[0] for c in CSV_COLUMNS] + ["crb_omega_db", "crb_b_db", "upper_bound_db"]


class AllRunsDivergedError(RuntimeError):
    pass


def msd_db(estimates, omega_o) -> float:
    """``10 log10`` of the mean squared deviation over runs and nodes.

    ``estimates`` is ``(R, N, L)`` (or ``(N, L)``); ``omega_o`` broadcasts
    against it. Runs containing non-finite values count as divergent and are
    left out; if none remain an :class:`AllRunsDivergedError` is raised.
    """
    est = np.asarray(estimates, dtype=float)
    if est.ndim == 2:
        est = est[None]
    ref = np.asarray(omega_o, dtype=float)
    if ref.ndim == 2:  # per-run truth
        ref = ref[:, None, :]
    dev = est - ref
    ok = np.isfinite(dev).all(axis=(1, 2))
    if not ok.any():
        raise AllRunsDivergedError("all runs diverged")
    sq = (dev[ok] ** 2).sum(axis=2)
    return float(10.0 * np.log10(sq.mean()))


def algorithm_spec(name: str, config: ExperimentConfig) -> AlgorithmSpec:
    link = config.link_nonlinearity
    return {
        "dlms_nl": AlgorithmSpec("dlms", "nonlinear", link),
        "dlms_clean": AlgorithmSpec("dlms", "linear", False),
        "sonec_fd": AlgorithmSpec(Variant.FULLY_DISTRIBUTED.value, "nonlinear", link),
        "sonec_sd": AlgorithmSpec(Variant.SEMI_DISTRIBUTED.value, "nonlinear", link),
        "sonec_comb_only": AlgorithmSpec(Variant.COMBINATION_ONLY.value, "nonlinear", link),
    }[name]


def run_seed(config: ExperimentConfig, run: int) -> int:
    return derive_seed(config.master_seed, run)


def experiment_topology(config: ExperimentConfig) -> NetworkTopology:
    seed = derive_seed(config.master_seed, TOPOLOGY_STREAM)
    return build_random_topology(config.n_nodes, config.topology_degree, seed)


def run_bound(config: ExperimentConfig, omega_norm: float) -> float:
    inputs = BoundInputs(config.mu, config.b_max, config.L, omega_norm)
    return error_bound(c1_max(inputs), np.ones(1))


@dataclass
class Divergence:
    algorithm: str
    run: int
    seed: int
    iteration: int


@dataclass
class ChunkSums:
    """Partial sums over the runs of one chunk."""

    sq: dict[str, np.ndarray]  # algorithm -> (I,) sum of squared deviations over ok runs and nodes
    ok_runs: dict[str, int]
    b_sq: dict[str, np.ndarray]  # algorithm -> (I,) sum over ok runs of ||b_bar - b||^2
    clamped: dict[str, int]
    divergences: list[Divergence]
    crb_omega: float
    crb_b: float
    crb_runs: int
    crb_failures: list[tuple[int, int, str]]
    bound: float


def _run_chunk(config: ExperimentConfig, adjacency: np.ndarray, runs: tuple[int, ...], with_crb: bool = True) -> ChunkSums:
    topology = NetworkTopology(adjacency)
    weights = uniform_weights(topology)
    steps = StepSizes(config.mu, config.mu_b)
    seeds = [run_seed(config, r) for r in runs]
    datasets = [generate_dataset(config, s) for s in seeds]

    sums = ChunkSums({}, {}, {}, {}, [], 0.0, 0.0, 0, [], 0.0)
    for name in config.algorithms:
        spec = algorithm_spec(name, config)
        b_init = None
        if name == "sonec_sd":
            b_init = np.stack([centralized_train_b(ds.pilot_d, ds.pilot_d_tilde) for ds in datasets])
        res = simulate_batch(datasets, weights, spec, steps, b_hat_init=b_init)
        ok = res.diverged_at == 0
        sums.sq[name] = res.sq_dev[ok].sum(axis=(0, 2))
        sums.ok_runs[name] = int(ok.sum())
        if res.b_sq_dev is not None:
            sums.b_sq[name] = res.b_sq_dev[ok].sum(axis=0)
        sums.clamped[name] = int(res.clamped.sum())
        for j in np.flatnonzero(~ok):
            sums.divergences.append(Divergence(name, runs[j], seeds[j], int(res.diverged_at[j])))

    for r, s, ds in zip(runs, seeds, datasets):
        sums.bound += run_bound(config, float(np.linalg.norm(ds.truth.omega_o)))
        if not with_crb:
            continue
        try:
            crb = crb_from_fim(assemble_fim(model_from_dataset(ds)))
        except NonIdentifiableError as exc:
            sums.crb_failures.append((r, s, str(exc)))
            continue
        sums.crb_omega += crb.trace_omega
        sums.crb_b += crb.trace_b
        sums.crb_runs += 1
    return sums


@dataclass
class Diagnostics:
    n_runs: int
    topology_edges: list[tuple[int, int]]
    divergences: list[Divergence] = field(default_factory=list)
    clamped: dict[str, int] = field(default_factory=dict)
    crb_failures: list[tuple[int, int, str]] = field(default_factory=list)

    def divergent_runs(self, algorithm: str) -> int:
        return sum(1 for d in self.divergences if d.algorithm == algorithm)


@dataclass
class MsdTrace:
    n_iters: int
    msd: dict[str, np.ndarray]  # algorithm -> (I,) omega-MSD in dB (NaN if every run diverged)
    msd_b: dict[str, np.ndarray]  # SONEC variants -> (I,) b-MSD in dB
    crb_omega_db: float | None
    crb_b_db: float | None
    upper_bound_db: float

    def steady_state(self, algorithm: str, fraction: float = 0.1, kind: str = "omega") -> float:
        """Mean of the last ``fraction`` of the dB trace."""
        trace = (self.msd if kind == "omega" else self.msd_b)[algorithm]
        tail = max(1, int(round(self.n_iters * fraction)))
        return float(np.mean(trace[-tail:]))


@dataclass
class ExperimentResult:
    trace: MsdTrace
    diagnostics: Diagnostics
    config: ExperimentConfig


def _chunks(n_runs: int) -> list[tuple[int, ...]]:
    return [tuple(range(s, min(s + CHUNK_RUNS, n_runs))) for s in range(0, n_runs, CHUNK_RUNS)]


def _map_chunks(config: ExperimentConfig, threads: int, with_crb: bool) -> tuple[NetworkTopology, list[ChunkSums]]:
    topology = experiment_topology(config)
    chunks = _chunks(config.n_runs)
    args = [(config, topology.adjacency, ch, with_crb) for ch in chunks]
    if threads <= 1 or len(chunks) == 1:
        return topology, [_run_chunk(*a) for a in args]
    with ProcessPoolExecutor(max_workers=min(threads, len(chunks))) as pool:
        return topology, list(pool.map(_run_chunk, *zip(*args)))


def _db(x: np.ndarray | float):
    with np.errstate(divide="ignore", invalid="ignore"):
        return 10.0 * np.log10(x)


def run_experiment(config: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Run every selected algorithm on ``n_runs`` paired datasets.

    Raises :class:`AllRunsDivergedError` when no algorithm has a single
    non-divergent run.
    """
    topology, parts = _map_chunks(config, threads, with_crb=True)
    diag = Diagnostics(config.n_runs, topology.edges())
    n, n_iters = config.n_nodes, config.n_iters
    msd, msd_b = {}, {}
    for name in config.algorithms:
        ok = sum(p.ok_runs[name] for p in parts)
        sq = np.zeros(n_iters)
        for p in parts:
            sq = sq + p.sq[name]
        msd[name] = _db(sq / (ok * n)) if ok else np.full(n_iters, np.nan)
        if name.startswith("sonec"):
            bs = np.zeros(n_iters)
            for p in parts:
                bs = bs + p.b_sq[name]
            msd_b[name] = _db(bs / ok) if ok else np.full(n_iters, np.nan)
        diag.clamped[name] = sum(p.clamped[name] for p in parts)
    for p in parts:
        diag.divergences.extend(p.divergences)
        diag.crb_failures.extend(p.crb_failures)
    if all(diag.divergent_runs(a) == config.n_runs for a in config.algorithms):
        raise AllRunsDivergedError(
            f"all {config.n_runs} runs diverged for every algorithm; first: {diag.divergences[0]}"
        )

    crb_runs = sum(p.crb_runs for p in parts)
    crb_omega = crb_b = None
    if crb_runs:
        crb_omega = float(_db(sum(p.crb_omega for p in parts) / crb_runs))
        crb_b = float(_db(sum(p.crb_b for p in parts) / crb_runs))
    bound = float(_db(sum(p.bound for p in parts) / config.n_runs))
    trace = MsdTrace(n_iters, msd, msd_b, crb_omega, crb_b, bound)
    return ExperimentResult(trace, diag, config)


def compute_crb(config: ExperimentConfig) -> tuple[float, float, list[tuple[int, int, str]]]:
    """Run-averaged CRB traces in dB (omega block, b block) and any non-identifiable runs."""
    tot_w = tot_b = 0.0
    count = 0
    failures = []
    for r in range(config.n_runs):
        seed = run_seed(config, r)
        try:
            crb = crb_from_fim(assemble_fim(model_from_dataset(generate_dataset(config, seed))))
        except NonIdentifiableError as exc:
            failures.append((r, seed, str(exc)))
            continue
        tot_w += crb.trace_omega
        tot_b += crb.trace_b
        count += 1
    if not count:
        raise NonIdentifiableError("no run has an identifiable parameterization", np.zeros(0))
    return float(_db(tot_w / count)), float(_db(tot_b / count)), failures


def config_bound(config: ExperimentConfig) -> tuple[float, float]:
    """Run-averaged ``(c1_max, bound_db)`` using each run's ``omega_o`` norm."""
    norms = [np.linalg.norm(draw_omega_o(config, run_seed(config, r))) for r in range(config.n_runs)]
    c1 = float(np.mean([c1_max(BoundInputs(config.mu, config.b_max, config.L, float(w))) for w in norms]))
    return c1, float(_db(c1))


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.6g}"


def format_csv(trace: MsdTrace) -> str:
    lines = [",".join(CSV_HEADER)]
    const = [_fmt(trace.crb_omega_db), _fmt(trace.crb_b_db), _fmt(trace.upper_bound_db)]
    cols = []
    for _, kind, alg in CSV_COLUMNS:
        src = trace.msd if kind == "omega" else trace.msd_b
        cols.append(src.get(alg))
    for i in range(trace.n_iters):
        row = [str(i + 1)] + ["" if c is None else _fmt(c[i]) for c in cols] + const
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_csv(trace: MsdTrace, path: str | Path) -> None:
    """Write the trace table; I/O failures propagate as ``OSError`` naming the path."""
    path = Path(path)
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(format_csv(trace))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None


def dump_trajectory(config: ExperimentConfig, algorithm: str, run: int, path: str | Path) -> None:
    """Per-iteration, per-node estimates (and b estimates) of one run as CSV.

    Columns: ``iter, node, w1..wL`` then, for SONEC variants, ``b1..bN`` holding
    the node's estimate of each neighbour's coefficient (0 for non-neighbours).
    """
    topology = experiment_topology(config)
    weights = uniform_weights(topology)
    ds = generate_dataset(config, run_seed(config, run))
    spec = algorithm_spec(algorithm, config)
    b_init = None
    if algorithm == "sonec_sd":
        b_init = centralized_train_b(ds.pilot_d, ds.pilot_d_tilde)[None, :]
    res = simulate_batch([ds], weights, spec, StepSizes(config.mu, config.mu_b), b_hat_init=b_init, record=True)
    n, L = config.n_nodes, config.L
    header = ["iter", "node"] + [f"w{j + 1}" for j in range(L)]
    with_b = res.b_hat is not None and algorithm != "dlms_nl" and algorithm != "dlms_clean"
    if with_b:
        header += [f"b{j + 1}" for j in range(n)]
    lines = [",".join(header)]
    for i in range(config.n_iters):
        for k in range(n):
            vals = [repr(float(x)) for x in res.omega[0, i, k]]
            if with_b:
                vals += [repr(float(x)) for x in res.b_hat[0, i, k]]
            lines.append(",".join([str(i + 1), str(k + 1)] + vals))
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
