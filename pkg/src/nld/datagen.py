"""Ground-truth data: random walks on a labeled Markov graph with Gaussian emissions.

Two stock configurations mirror the experiments the package is built
around: a symmetric three-state chain (uniform stationary law, off-diagonal
transition probability 0.025) and an asymmetric three-state chain with
stationary law (0.45, 0.35, 0.20).  Each visited state emits one draw from
a state-specific multivariate normal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import CholeskyFailure, LengthMismatch, NotConverged, UsageError


@dataclass
class MarkovSpec:
    """Chain + emission description. Rows of `transition` are per-step laws."""

    n_states: int
    transition: np.ndarray  # (n, n) row-stochastic
    emission_means: np.ndarray  # (n, obs_dim)
    emission_covs: np.ndarray  # (n, obs_dim, obs_dim), symmetric PD
    obs_dim: int

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.emission_means = np.asarray(self.emission_means, dtype=np.float64)
        self.emission_covs = np.asarray(self.emission_covs, dtype=np.float64)
        self.validate()

    def validate(self):
        n = self.n_states
        if self.transition.shape != (n, n):
            raise UsageError(f"transition must be ({n},{n}), got {self.transition.shape}")
        if np.any(self.transition < 0.0) or np.any(self.transition > 1.0):
            raise UsageError("transition entries must lie in [0, 1]")
        rows = self.transition.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > 1e-12:
            raise UsageError(f"transition rows must sum to 1 (sums {rows})")
        if self.emission_means.shape != (n, self.obs_dim):
            raise UsageError("emission_means shape mismatch")
        if self.emission_covs.shape != (n, self.obs_dim, self.obs_dim):
            raise UsageError("emission_covs shape mismatch")
        for i, c in enumerate(self.emission_covs):
            if np.max(np.abs(c - c.T)) > 1e-12:
                raise UsageError(f"covariance {i} is not symmetric")

    def cholesky_factors(self) -> np.ndarray:
        """Lower Cholesky factor per state; an all-zero covariance factors to zero."""
        out = np.empty_like(self.emission_covs)
        for i, c in enumerate(self.emission_covs):
            if not c.any():
                out[i] = 0.0
                continue
            try:
                out[i] = np.linalg.cholesky(c)
            except np.linalg.LinAlgError as e:
                raise CholeskyFailure(f"emission covariance {i} not positive definite: {e}") from e
        return out

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "transition": self.transition.tolist(),
            "emission_means": self.emission_means.tolist(),
            "emission_covs": self.emission_covs.tolist(),
            "obs_dim": self.obs_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "MarkovSpec":
        return MarkovSpec(
            n_states=int(d["n_states"]),
            transition=np.array(d["transition"]),
            emission_means=np.array(d["emission_means"]),
            emission_covs=np.array(d["emission_covs"]),
            obs_dim=int(d["obs_dim"]),
        )


@dataclass
class SequenceDataset:
    """Hidden-state sequences with their emitted observation sequences."""

    sequences: list  # list of (states: (L,) int array or None, obs: (L, obs_dim) array)
    spec: MarkovSpec | None
    seed: int

    def __post_init__(self):
        for states, obs in self.sequences:
            if states is not None:
                if len(states) != len(obs):
                    raise LengthMismatch("states and observations differ in length")
                if self.spec is not None and len(states) and int(np.max(states)) >= self.spec.n_states:
                    raise UsageError("state index out of range")

    def __len__(self):
        return len(self.sequences)


def stationary_distribution(transition: np.ndarray, tol: float = 1e-12, max_iters: int = 10**6) -> np.ndarray:
    """Stationary law by power iteration from the uniform distribution.

    Raises NotConverged when the l-inf change never drops below `tol`
    (a reducible or periodic chain, as seen from the uniform start).
    """
    p = np.asarray(transition, dtype=np.float64)
    n = p.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iters):
        nxt = pi @ p
        if np.max(np.abs(nxt - pi)) < tol:
            return nxt / nxt.sum()
        pi = nxt
    raise NotConverged("power iteration did not reach tolerance; chain may be reducible or periodic")


def sample_walk(spec: MarkovSpec, length: int, seed: int, sequence_index: int = 0) -> np.ndarray:
    """State sequence of `length` steps; initial state drawn from the stationary law."""
    if length < 1:
        raise UsageError("length must be >= 1")
    pi = stationary_distribution(spec.transition)
    gen = rngmod.stream(seed, rngmod.WALK, sequence_index)
    cum = np.cumsum(spec.transition, axis=1)
    cum_pi = np.cumsum(pi)
    u = gen.random(length)
    states = np.empty(length, dtype=np.int64)
    s = int(np.searchsorted(cum_pi, u[0]))
    states[0] = s
    for t in range(1, length):
        s = int(np.searchsorted(cum[s], u[t]))
        states[t] = s
    return states


def emit(states: np.ndarray, spec: MarkovSpec, seed: int, sequence_index: int = 0) -> np.ndarray:
    """One Gaussian observation per step, via the Cholesky factor of the state's covariance."""
    states = np.asarray(states, dtype=np.int64)
    if states.size and (states.min() < 0 or states.max() >= spec.n_states):
        raise UsageError("state index out of range")
    chols = spec.cholesky_factors()
    gen = rngmod.stream(seed, rngmod.EMIT, sequence_index)
    xi = gen.standard_normal((len(states), spec.obs_dim))
    obs = np.empty_like(xi)
    for s in range(spec.n_states):
        mask = states == s
        if np.any(mask):
            obs[mask] = spec.emission_means[s] + xi[mask] @ chols[s].T
    return obs


def experiment_config(which: int, seed: int, obs_dim: int = 15) -> MarkovSpec:
    """Stock three-state chains.

    Experiment 1: every off-diagonal transition probability is 0.025
    (stationary law uniform, expected dwell 20 steps).  Experiment 2: the
    reversible chain with stationary law (0.45, 0.35, 0.20) obtained from
    detailed balance with P_ij = 0.1 * pi_j / (pi_i + pi_j) off-diagonal.
    Emission means are drawn once from a seeded standard normal scaled by 3;
    covariances are the identity.
    """
    if which == 1:
        p = np.full((3, 3), 0.025)
        np.fill_diagonal(p, 0.95)
    elif which == 2:
        pi = np.array([0.45, 0.35, 0.20])
        p = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                if i != j:
                    p[i, j] = 0.1 * pi[j] / (pi[i] + pi[j])
        np.fill_diagonal(p, 1.0 - p.sum(axis=1))
    else:
        raise UsageError(f"experiment must be 1 or 2, got {which}")
    gen = rngmod.stream(seed, rngmod.INIT, which)
    means = 3.0 * gen.standard_normal((3, obs_dim))
    covs = np.broadcast_to(np.eye(obs_dim), (3, obs_dim, obs_dim)).copy()
    return MarkovSpec(n_states=3, transition=p, emission_means=means, emission_covs=covs, obs_dim=obs_dim)


def generate_dataset(spec: MarkovSpec, n_sequences: int, length: int, seed: int) -> SequenceDataset:
    """Sample n_sequences independent walks + emissions, one RNG stream per sequence."""
    seqs = []
    for i in range(n_sequences):
        states = sample_walk(spec, length, seed, sequence_index=i)
        obs = emit(states, spec, seed, sequence_index=i)
        seqs.append((states, obs))
    return SequenceDataset(sequences=seqs, spec=spec, seed=seed)


def mean_dwell_time(states: np.ndarray) -> float:
    """Average run length of consecutive identical states."""
    states = np.asarray(states)
    if states.size == 0:
        return float("nan")
    changes = int(np.count_nonzero(np.diff(states) != 0))
    return states.size / (changes + 1)


def empirical_frequencies(states: np.ndarray, n_states: int) -> np.ndarray:
    counts = np.bincount(np.asarray(states, dtype=np.int64), minlength=n_states)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# on-disk format: JSON Lines + sidecar header

HEADER_NAME = "header.json"
SEQUENCES_NAME = "sequences.jsonl"


def save_dataset(ds: SequenceDataset, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seq_path = out / SEQUENCES_NAME
    with open(seq_path, "w") as f:
        for states, obs in ds.sequences:
            rec = {"obs": np.asarray(obs).tolist()}
            if states is not None:
                rec = {"states": np.asarray(states).tolist(), "obs": rec["obs"]}
            f.write(json.dumps(rec) + "\n")
    header = {
        "format": "nld-dataset-v1",
        "n_sequences": len(ds.sequences),
        "lengths": [len(obs) for _, obs in ds.sequences],
        "seed": ds.seed,
        "spec": ds.spec.to_dict() if ds.spec is not None else None,
    }
    header_path = out / HEADER_NAME
    with open(header_path, "w") as f:
        json.dump(header, f, indent=1)
    return seq_path, header_path


def load_dataset(in_dir: str | Path) -> SequenceDataset:
    d = Path(in_dir)
    header_path = d / HEADER_NAME
    seq_path = d / SEQUENCES_NAME
    if not seq_path.exists():
        raise UsageError(f"no {SEQUENCES_NAME} in {d}")
    spec = None
    seed = 0
    if header_path.exists():
        with open(header_path) as f:
            header = json.load(f)
        seed = int(header.get("seed", 0))
        if header.get("spec") is not None:
            spec = MarkovSpec.from_dict(header["spec"])
    seqs = []
    with open(seq_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            obs = np.array(rec["obs"], dtype=np.float64)
            states = np.array(rec["states"], dtype=np.int64) if "states" in rec else None
            seqs.append((states, obs))
    return SequenceDataset(sequences=seqs, spec=spec, seed=seed)
