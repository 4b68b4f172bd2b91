"""Structure extraction from a learned energy: minima, weights, segmentation.

The entry point for trained models is ``analyze``; every routine also
accepts a plain ``Landscape`` wrapping synthetic callables, which is how
the estimators are validated against quadrature oracles.

The three stationary-weight estimators:

  sampling   simulate the prior to stationarity, gradient-flow the samples
             to their wells, report well frequencies;
  zeroth     softmax of -beta * E at the minima (depth only);
  second     Laplace approximation: exp(-beta E_i) (2 pi / beta)^{d/2}
             det(H_i)^{-1/2}, normalized (depth + curvature).

Energy comparisons during flows and the estimator inputs use the model's
bias-free energy head, so adding a constant to the energy provably changes
no flow decision, weight, or label; reported energies include the bias.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sde
from .autodiff import hessian_fd
from .errors import (DegeneratePoints, LengthMismatch, NonPositiveDefiniteHessian,
                     UsageError)


class Landscape:
    """Energy surface with its dynamics constants.

    value/grad are batched callables over (N, d) points; ``reported_value``
    may differ from ``value`` by a constant (model output bias).
    """

    def __init__(self, value, grad, dim: int, beta: float, gamma: float = 1.0,
                 mass: np.ndarray | None = None, mode: str = "overdamped",
                 reported_value=None):
        self.value = value
        self.grad = grad
        self.dim = dim
        self.beta = float(beta)
        self.gamma = float(gamma)
        self.mass = mass
        self.mode = mode
        self.reported_value = reported_value or value

    def dynamics(self):
        if self.mode == "underdamped":
            mass = np.ones(self.dim) if self.mass is None else self.mass
            return sde.UnderdampedDynamics(self.grad, self.gamma, self.beta, mass)
        return sde.OverdampedDynamics(self.grad, self.gamma, self.beta, self.dim)


def model_landscape(model) -> Landscape:
    """Landscape view of a trained energy-based model (position block)."""
    if model.config.mode == "nsde-baseline":
        raise UsageError("the free-drift baseline has no energy landscape")
    mass = None
    if model.config.mode == "underdamped":
        from . import autodiff as ad

        mass = np.asarray(ad.value_of(model.mass(model.raw)), dtype=np.float64)
    return Landscape(
        value=lambda q: model.energy_np(q, with_bias=False),
        grad=lambda q: model.energy_grad_np(np.atleast_2d(q)),
        dim=model.config.latent_dim,
        beta=model.beta_value(),
        gamma=model.gamma_value(),
        mass=mass,
        mode=model.config.mode,
        reported_value=lambda q: model.energy_np(q, with_bias=True),
    )


@dataclass
class FlowResult:
    point: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


@dataclass
class WellReport:
    minima: list  # (d,) arrays, sorted by energy
    energies: np.ndarray
    hessians: list  # (d, d) arrays
    weights_sampling: np.ndarray
    weights_zeroth: np.ndarray
    weights_second: np.ndarray
    beta: float
    unassigned_sampling: int = 0
    merge_tol: float = 1e-2
    degenerate_minima: int = 0  # flowed endpoints whose Hessian was not PD

    def to_dict(self):
        return {
            "minima": [m.tolist() for m in self.minima],
            "energies": self.energies.tolist(),
            "hessians": [h.tolist() for h in self.hessians],
            "weights_sampling": self.weights_sampling.tolist(),
            "weights_zeroth": self.weights_zeroth.tolist(),
            "weights_second": self.weights_second.tolist(),
            "beta": self.beta,
            "unassigned_sampling": self.unassigned_sampling,
            "merge_tol": self.merge_tol,
            "degenerate_minima": self.degenerate_minima,
        }

    def save(self, path: str | Path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


@dataclass
class SegmentationResult:
    labels: np.ndarray  # per-timestep well index
    permutation: tuple | None = None  # applied to labels when scored
    accuracy: float | None = None


# ---------------------------------------------------------------------------
# gradient flow


def _flow_batch(value_fn, grad_fn, z0: np.ndarray, step: float, tol: float,
                max_iters: int):
    """Vectorized descent with per-point backtracking (halve on increase).

    The trial step resets to `step` each iteration, so a steep start cannot
    permanently stall a point.  Returns (points, converged, iters).
    """
    z = np.array(z0, dtype=np.float64)
    n = z.shape[0]
    energy = np.asarray(value_fn(z), dtype=np.float64)
    converged = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iters):
        if not active.any():
            break
        g = np.asarray(grad_fn(z[active]))
        gnorm = np.sqrt(np.sum(np.square(g), axis=1))
        idx = np.flatnonzero(active)
        done = gnorm < tol
        converged[idx[done]] = True
        active[idx[done]] = False
        idx = idx[~done]
        g = g[~done]
        if idx.size == 0:
            continue
        iters[idx] += 1
        trial = np.full(idx.size, step)
        pending = np.ones(idx.size, dtype=bool)
        for _halve in range(60):
            if not pending.any():
                break
            rows = idx[pending]
            prop = z[rows] - trial[pending, None] * g[pending]
            e_prop = np.asarray(value_fn(prop))
            ok = e_prop <= energy[rows]
            ok_rows = rows[ok]
            z[ok_rows] = prop[ok]
            energy[ok_rows] = e_prop[ok]
            sel = np.flatnonzero(pending)
            pending[sel[ok]] = False
            trial[sel[~ok]] *= 0.5
        # points still pending have an effectively zero step; stop them
        stuck = idx[pending]
        active[stuck] = False
    return z, converged, iters


def gradient_flow(landscape: Landscape, z0: np.ndarray, step: float = 0.1,
                  tol: float = 1e-6, max_iters: int = 10**5) -> FlowResult:
    """Descend the energy from one start; stops when |grad E| < tol.

    A stationary start (saddle, maximum) satisfies the criterion immediately
    and is returned converged; callers that need minima should check the
    Hessian.  On max_iters the point is returned flagged, not raised.
    """
    if step <= 0:
        raise UsageError("step must be positive")
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    pts, conv, iters = _flow_batch(landscape.value, landscape.grad, z0, step, tol, max_iters)
    g = np.asarray(landscape.grad(pts))
    return FlowResult(point=pts[0], converged=bool(conv[0]), iterations=int(iters[0]),
                      grad_norm=float(np.sqrt(np.sum(g[0] ** 2))))


def flow_points(landscape: Landscape, starts: np.ndarray, step: float = 0.1,
                tol: float = 1e-6, max_iters: int = 10**5):
    """Batched gradient_flow; same rule applied per point."""
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    return _flow_batch(landscape.value, landscape.grad, starts, step, tol, max_iters)


@dataclass
class Minimum:
    point: np.ndarray
    energy: float  # bias-free head energy, used for ordering/weights
    count: int = 0  # flowed starts merged into this representative


def find_minima(landscape: Landscape, starts: np.ndarray, merge_tol: float = 1e-2,
                step: float = 0.1, tol: float = 1e-6, max_iters: int = 10**5) -> list[Minimum]:
    """Flow each start, merge endpoints within merge_tol, sort by energy.

    The representative of a merged cluster is its lowest-energy member.
    """
    pts, _conv, _ = flow_points(landscape, starts, step, tol, max_iters)
    energies = np.asarray(landscape.value(pts))
    order = np.argsort(energies, kind="stable")
    reps: list[Minimum] = []
    for i in order:
        p = pts[i]
        for rep in reps:
            if np.linalg.norm(p - rep.point) <= merge_tol:
                rep.count += 1
                break
        else:
            reps.append(Minimum(point=p.copy(), energy=float(energies[i]), count=1))
    return reps


def assign_to_minima(points: np.ndarray, minima: list[np.ndarray], merge_tol: float):
    """Index of the nearest minimum within merge_tol, -1 when unassigned."""
    points = np.atleast_2d(points)
    centers = np.stack([np.asarray(m) for m in minima])
    d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    idx = np.argmin(d, axis=1)
    best = d[np.arange(len(points)), idx]
    idx[best > merge_tol] = -1
    return idx


# ---------------------------------------------------------------------------
# stationary-weight estimators


def sample_stationary_states(landscape: Landscape, n_samples: int, burn_in: int,
                             thin: int, seed: int, dt: float = 0.01,
                             z0: np.ndarray | None = None) -> np.ndarray:
    """Thinned position samples from one long prior trajectory."""
    dyn = landscape.dynamics()
    total = burn_in + n_samples * thin
    cfg = sde.SdeConfig(dt=dt, n_steps=total, latent_dim=landscape.dim)
    if z0 is None:
        z0 = np.zeros(dyn.state_dim)
    path = sde.simulate_prior(dyn, z0, cfg, seed=seed)
    picks = burn_in + thin * np.arange(1, n_samples + 1)
    return path.states[picks, : landscape.dim]


def weights_sampling(landscape: Landscape, minima: list[np.ndarray],
                     n_samples: int = 1000, burn_in: int = 10**4, thin: int = 100,
                     seed: int = 0, dt: float = 0.01, merge_tol: float = 1e-2,
                     flow_step: float = 0.1, samples: np.ndarray | None = None):
    """Well frequencies of gradient-flowed stationary samples.

    Returns (weights, unassigned_count); samples flowing to no known
    minimum within merge_tol are counted, not raised.
    """
    if samples is None:
        samples = sample_stationary_states(landscape, n_samples, burn_in, thin, seed, dt)
    pts, _, _ = flow_points(landscape, samples, step=flow_step)
    idx = assign_to_minima(pts, minima, merge_tol)
    unassigned = int(np.count_nonzero(idx < 0))
    counts = np.bincount(idx[idx >= 0], minlength=len(minima)).astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise UsageError("no sample could be assigned to a minimum")
    return counts / total, unassigned


def weights_zeroth(energies: np.ndarray, beta: float) -> np.ndarray:
    """Softmax of -beta * E over the minima (stable: shifts by the min)."""
    e = np.asarray(energies, dtype=np.float64)
    if e.size == 0:
        raise UsageError("need at least one minimum")
    w = np.exp(-beta * (e - e.min()))
    return w / w.sum()


def weights_second(energies: np.ndarray, hessians, beta: float, dim: int) -> np.ndarray:
    """Laplace well masses: exp(-beta E_i) (2 pi/beta)^{d/2} det(H_i)^{-1/2}, normalized.

    Computed in the log domain; the (2 pi / beta)^{d/2} factor is constant
    across wells and cancels in the normalization.
    """
    e = np.asarray(energies, dtype=np.float64)
    logs = np.empty(len(e))
    for i, h in enumerate(hessians):
        h = np.asarray(h, dtype=np.float64)
        sign, logdet = np.linalg.slogdet(h)
        if sign <= 0 or not np.all(np.linalg.eigvalsh(h) > 0):
            raise NonPositiveDefiniteHessian(
                f"Hessian at minimum {i} is not positive definite")
        logs[i] = -beta * e[i] - 0.5 * logdet
    logs -= logs.max()
    w = np.exp(logs)
    return w / w.sum()


def minima_hessians(landscape: Landscape, minima: list[np.ndarray], h: float = 1e-4):
    return [hessian_fd(lambda q: np.asarray(landscape.grad(q[None, :]))[0], np.asarray(m), h=h)
            for m in minima]


# ---------------------------------------------------------------------------
# report assembly


def find_landscape_minima(landscape: Landscape, n_samples: int = 1000,
                          burn_in: int = 10**4, thin: int = 100, seed: int = 0,
                          dt: float | None = None, merge_tol: float = 1e-2,
                          flow_step: float = 0.1, min_share: float = 0.0):
    """Minima reached by gradient-flowing thinned stationary samples.

    ``min_share`` drops wells capturing less than that fraction of flowed
    samples (spurious shallow dimples). Returns (kept minima, samples).
    """
    if dt is None:
        dt = 0.01
    samples = sample_stationary_states(landscape, n_samples, burn_in, thin, seed, dt)
    minima = find_minima(landscape, samples, merge_tol=merge_tol, step=flow_step)
    if not minima:
        raise UsageError("no minima found")
    total = sum(m.count for m in minima)
    kept = [m for m in minima if m.count / total >= min_share]
    if not kept:
        kept = minima[:1]
    return kept, samples


def _is_pd(h: np.ndarray) -> bool:
    try:
        return bool(np.all(np.linalg.eigvalsh(h) > 0))
    except np.linalg.LinAlgError:
        return False


def analyze(landscape: Landscape, n_samples: int = 1000, burn_in: int = 10**4,
            thin: int = 100, seed: int = 0, dt: float | None = None,
            merge_tol: float = 1e-2, flow_step: float = 0.1,
            min_share: float = 0.0) -> WellReport:
    """Full landscape report: minima from flowed stationary samples plus the
    three weight estimates.

    Flowed endpoints whose Hessian is not positive definite are plateau or
    saddle contaminations, not wells: they are dropped (counted in
    ``degenerate_minima``) and their samples become unassigned, so barely
    trained landscapes still produce a valid, possibly degenerate, report.
    """
    kept, samples = find_landscape_minima(
        landscape, n_samples, burn_in, thin, seed, dt, merge_tol, flow_step, min_share)
    hessians_all = minima_hessians(landscape, [m.point for m in kept])
    strict = [(m, h) for m, h in zip(kept, hessians_all) if _is_pd(h)]
    degenerate = len(kept) - len(strict)
    if not strict:
        raise NonPositiveDefiniteHessian(
            "no strict minimum found (all Hessians non-positive-definite)")
    centers = [m.point for m, _ in strict]
    hessians = [h for _, h in strict]
    w_sample, unassigned = weights_sampling(
        landscape, centers, merge_tol=merge_tol, flow_step=flow_step, samples=samples)
    head_energies = np.array([m.energy for m, _ in strict])
    w0 = weights_zeroth(head_energies, landscape.beta)
    w2 = weights_second(head_energies, hessians, landscape.beta, landscape.dim)
    reported = np.asarray(landscape.reported_value(np.stack(centers)))
    return WellReport(
        minima=centers,
        energies=reported,
        hessians=hessians,
        weights_sampling=w_sample,
        weights_zeroth=w0,
        weights_second=w2,
        beta=landscape.beta,
        unassigned_sampling=unassigned,
        merge_tol=merge_tol,
        degenerate_minima=degenerate,
    )


# ---------------------------------------------------------------------------
# segmentation


def segment_sequence(model, observations: np.ndarray, minima: list[np.ndarray],
                     merge_tol: float = 0.5, flow_step: float = 0.1) -> SegmentationResult:
    """Label each timestep with the well its posterior-mean latent flows to.

    The posterior path is the deterministic (zero-noise) one, so labels are
    reproducible; see model.posterior_mean_path.
    """
    observations = np.asarray(observations, dtype=np.float64)
    if observations.shape[0] == 0:
        return SegmentationResult(labels=np.empty(0, dtype=np.int64))
    states = model.posterior_mean_path(observations)
    q = states[:, : model.config.latent_dim]
    scape = model_landscape(model)
    pts, _, _ = flow_points(scape, q, step=flow_step)
    labels = assign_to_minima(pts, minima, merge_tol)
    return SegmentationResult(labels=labels)


def best_permutation_accuracy(predicted, true, n_states: int):
    """Exhaustive search over label permutations; ties pick the
    lexicographically smallest permutation."""
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape:
        raise LengthMismatch("label sequences differ in length")
    if predicted.size == 0:
        return 0.0, tuple(range(n_states))
    if predicted.size and (predicted.min() < -1 or predicted.max() >= n_states):
        raise UsageError("predicted labels out of range")
    if true.min() < 0 or true.max() >= n_states:
        raise UsageError("true labels out of range")
    # confusion counts make each permutation an O(n_states^2) lookup
    valid = predicted >= 0
    conf = np.zeros((n_states, n_states), dtype=np.int64)
    np.add.at(conf, (predicted[valid], true[valid]), 1)
    best_acc = -1.0
    best_perm = None
    for perm in itertools.permutations(range(n_states)):
        hits = sum(conf[i, perm[i]] for i in range(n_states))
        acc = hits / predicted.size
        if acc > best_acc:
            best_acc = acc
            best_perm = perm
    return float(best_acc), best_perm


def l1_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"length {p.shape} vs {q.shape}")
    return float(np.sum(np.abs(p - q)))


# ---------------------------------------------------------------------------
# plane restriction and grid export


def plane_through_points(m1, m2, m3):
    """(origin, orthonormal basis pair) of the plane through three points."""
    m1, m2, m3 = (np.asarray(m, dtype=np.float64) for m in (m1, m2, m3))
    u = m2 - m1
    nu = np.linalg.norm(u)
    if nu <= 1e-10:
        raise DegeneratePoints("first two points coincide")
    b1 = u / nu
    v = m3 - m1
    v_perp = v - (v @ b1) * b1
    nv = np.linalg.norm(v_perp)
    if nv <= 1e-10:
        raise DegeneratePoints("points are collinear")
    b2 = v_perp / nv
    return m1, (b1, b2)


def native_plane(dim: int):
    """Identity plane for natively 2-D landscapes."""
    if dim != 2:
        raise UsageError("native export requires a 2-D latent space")
    return np.zeros(2), (np.array([1.0, 0.0]), np.array([0.0, 1.0]))


def export_landscape(fn, plane, bounds, resolution, kind: str = "energy"):
    """Tabulate energy (u, v, E) or projected drift (u, v, du, dv) on a grid.

    ``fn`` maps (N, d) points to (N,) energies or (N, d) drift vectors.
    Returns (rows, sidecar) where rows is the CSV table and sidecar the
    JSON-able grid description.
    """
    if kind not in ("energy", "drift"):
        raise UsageError(f"kind must be energy or drift, got {kind!r}")
    (u0, u1), (v0, v1) = bounds
    nu, nv = resolution
    if nu < 2 or nv < 2:
        raise UsageError("resolution must be at least 2 per axis")
    origin, (b1, b2) = plane
    us = np.linspace(u0, u1, nu)
    vs = np.linspace(v0, v1, nv)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    uf, vf = uu.reshape(-1), vv.reshape(-1)
    points = origin[None, :] + uf[:, None] * b1[None, :] + vf[:, None] * b2[None, :]
    out = np.asarray(fn(points))
    if kind == "energy":
        rows = np.column_stack([uf, vf, out.reshape(-1)])
        columns = ["u", "v", "E"]
    else:
        rows = np.column_stack([uf, vf, out @ b1, out @ b2])
        columns = ["u", "v", "du", "dv"]
    sidecar = {
        "kind": kind,
        "origin": origin.tolist(),
        "basis": [b1.tolist(), b2.tolist()],
        "bounds": [[float(u0), float(u1)], [float(v0), float(v1)]],
        "resolution": [int(nu), int(nv)],
        "rows": int(rows.shape[0]),
        "columns": columns,
    }
    return rows, sidecar


def write_grid(prefix: str | Path, rows: np.ndarray, sidecar: dict):
    """Write <prefix>.csv plus the <prefix>.json sidecar; returns both paths."""
    prefix = Path(prefix)
    csv_path = prefix.with_suffix(".csv")
    json_path = prefix.with_suffix(".json")
    with open(csv_path, "w") as f:
        f.write(",".join(sidecar["columns"]) + "\n")
        for row in rows:
            f.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(json_path, "w") as f:
        json.dump(sidecar, f, indent=1)
    return csv_path, json_path
