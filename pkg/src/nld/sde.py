"""Fixed-step Euler-Maruyama simulation of prior/posterior SDEs.

Dynamics objects supply drift and (constant, scalar) diffusion through a
small duck-typed surface:

    state_dim, noise_dim          dimensions of state and driving noise
    prior_drift(z, t)             (..., state_dim)
    diffusion()                   scalar g > 0
    expand_noise(dw)              lift (..., noise_dim) into state space
    restrict_to_noise(v)          project a state-space vector onto the
                                  noise subspace (identity when they match)
    control_drift(z, t, c)        optional posterior control, in noise space

For underdamped dynamics the noise drives the momentum block only, so
``expand_noise`` pads zeros onto the position block and position components
integrate deterministically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import NonFinite, SingularDiffusion

_MIN_DIFFUSION = 1e-12


@dataclass
class SdeConfig:
    dt: float
    n_steps: int
    latent_dim: int

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def T(self) -> float:
        return self.dt * self.n_steps

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


@dataclass
class WienerPath:
    """Increments dW_k ~ N(0, dt I); reusable across coupled simulations."""

    increments: np.ndarray  # (n_steps, noise_dim) or (n_steps, B, noise_dim)
    seed: int | None = None


def sample_wiener(config: SdeConfig, noise_dim: int, seed: int, index: int = 0) -> WienerPath:
    gen = rngmod.stream(seed, rngmod.WIENER, index)
    inc = np.sqrt(config.dt) * gen.standard_normal((config.n_steps, noise_dim))
    return WienerPath(increments=inc, seed=seed)


@dataclass
class LatentPath:
    times: np.ndarray  # (n_steps+1,)
    states: np.ndarray  # (n_steps+1, dim)
    control_sqnorms: np.ndarray  # (n_steps,) |u_k|^2, zeros for prior paths

    def positions(self, latent_dim: int) -> np.ndarray:
        """Position block (drops momentum for underdamped paths)."""
        return self.states[:, :latent_dim]


def euler_maruyama_step(z, drift, diffusion, dw, dt):
    """z' = z + drift*dt + diffusion*dw. Raises NonFinite on NaN/Inf."""
    out = z + drift * dt + diffusion * dw
    if not np.all(np.isfinite(out)):
        raise NonFinite("non-finite state after Euler-Maruyama step")
    return out


def simulate_prior(dyn, z0: np.ndarray, config: SdeConfig, seed: int | None = None,
                   wiener: WienerPath | None = None) -> LatentPath:
    """Integrate the prior SDE from z0 over the configured grid."""
    z = np.asarray(z0, dtype=np.float64)
    if z.shape[-1] != dyn.state_dim:
        raise ValueError(f"z0 dim {z.shape[-1]} != state dim {dyn.state_dim}")
    if wiener is None:
        if seed is None:
            raise ValueError("need a seed or an explicit WienerPath")
        wiener = sample_wiener(config, dyn.noise_dim, seed)
    g = float(dyn.diffusion())
    times = config.times()
    states = np.empty((config.n_steps + 1,) + z.shape)
    states[0] = z
    for k in range(config.n_steps):
        drift = dyn.prior_drift(z, times[k])
        z = euler_maruyama_step(z, drift, g, dyn.expand_noise(wiener.increments[k]), config.dt)
        states[k + 1] = z
    return LatentPath(times=times, states=states, control_sqnorms=np.zeros(config.n_steps))


def simulate_posterior(dyn, contexts, z0: np.ndarray, config: SdeConfig,
                       wiener: WienerPath) -> tuple[LatentPath, float]:
    """Integrate the controlled SDE and accumulate the Girsanov KL.

    The posterior drift is the prior drift plus the control; with constant
    scalar diffusion g the Girsanov integrand is u = control/g and
    KL = 0.5 * sum_k |u_k|^2 dt (left Riemann sum).
    """
    if len(contexts) < config.n_steps + 1:
        raise ValueError("context path shorter than n_steps + 1")
    g = float(dyn.diffusion())
    if g <= _MIN_DIFFUSION:
        raise SingularDiffusion(f"diffusion {g} <= {_MIN_DIFFUSION}; path KL undefined")
    z = np.asarray(z0, dtype=np.float64)
    times = config.times()
    states = np.empty((config.n_steps + 1,) + z.shape)
    states[0] = z
    usq = np.empty(config.n_steps)
    for k in range(config.n_steps):
        f = np.asarray(dyn.control_drift(z, times[k], contexts[k]), dtype=np.float64)
        u = f / g
        usq[k] = float(np.sum(np.square(u)))
        drift = dyn.prior_drift(z, times[k]) + dyn.expand_noise(f)
        z = euler_maruyama_step(z, drift, g, dyn.expand_noise(wiener.increments[k]), config.dt)
        states[k + 1] = z
    return (
        LatentPath(times=times, states=states, control_sqnorms=usq),
        kl_path_integral(usq, config.dt),
    )


def kl_path_integral(control_sqnorms: np.ndarray, dt: float) -> float:
    """0.5 * sum |u_k|^2 * dt over the step grid."""
    sq = np.asarray(control_sqnorms, dtype=np.float64)
    if np.any(sq < 0.0):
        raise ValueError("control squared norms must be nonnegative")
    return float(0.5 * dt * sq.sum())


def path_to_csv(path: LatentPath, file: str | Path, latent_dim: int | None = None):
    """Dump a path as t, z_1..z_d [, p_1..p_d] rows."""
    states = path.states
    dim = states.shape[1]
    if latent_dim is not None and 2 * latent_dim == dim:
        header = ["t"] + [f"z_{i+1}" for i in range(latent_dim)] + [f"p_{i+1}" for i in range(latent_dim)]
    else:
        header = ["t"] + [f"z_{i+1}" for i in range(dim)]
    with open(file, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for t, row in zip(path.times, states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# generic dynamics (used for synthetic energies and as building blocks)


class OverdampedDynamics:
    """dz = -grad E(z)/gamma dt + sqrt(2/(beta*gamma)) dW."""

    def __init__(self, grad_fn, gamma: float, beta: float, dim: int, control_fn=None):
        self.grad = grad_fn
        self.gamma = float(gamma)
        self.beta = float(beta)
        self.state_dim = dim
        self.noise_dim = dim
        self._control = control_fn

    def prior_drift(self, z, t):
        return -self.grad(z) / self.gamma

    def diffusion(self) -> float:
        return np.sqrt(2.0 / (self.beta * self.gamma))

    def expand_noise(self, dw):
        return dw

    def restrict_to_noise(self, v):
        return v

    def control_drift(self, z, t, c):
        if self._control is None:
            return np.zeros(self.noise_dim)
        return self._control(z, t, c)


class UnderdampedDynamics:
    """Position/momentum system; noise and control act on the momentum block.

        dq = M^-1 p dt
        dp = [-grad E(q) - gamma M^-1 p] dt + sqrt(2*gamma/beta) dW
    """

    def __init__(self, grad_fn, gamma: float, beta: float, mass: np.ndarray, control_fn=None):
        self.grad = grad_fn
        self.gamma = float(gamma)
        self.beta = float(beta)
        self.mass = np.asarray(mass, dtype=np.float64)
        d = self.mass.shape[0]
        self.state_dim = 2 * d
        self.noise_dim = d
        self._control = control_fn

    def prior_drift(self, z, t):
        d = self.noise_dim
        q, p = z[..., :d], z[..., d:]
        pm = p / self.mass
        return np.concatenate([pm, -self.grad(q) - self.gamma * pm], axis=-1)

    def diffusion(self) -> float:
        return np.sqrt(2.0 * self.gamma / self.beta)

    def expand_noise(self, dw):
        zeros = np.zeros(dw.shape[:-1] + (self.noise_dim,))
        return np.concatenate([zeros, dw], axis=-1)

    def restrict_to_noise(self, v):
        return v[..., self.noise_dim:]

    def control_drift(self, z, t, c):
        if self._control is None:
            return np.zeros(self.noise_dim)
        return self._control(z, t, c)
