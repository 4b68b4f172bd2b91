"""The latent-SDE VAE: energy-based prior, GRU-encoded control, Gaussian decoder.

Three prior modes share one model surface:

    overdamped      dz = -grad E(z)/gamma dt + sqrt(2/(beta*gamma)) dW
    underdamped     position/momentum system, noise on the momentum block
    nsde-baseline   free drift h(z, t), same constant diffusion

The posterior adds a control drift f(z, t, c_t) produced from a causal GRU
context; the path KL is the Girsanov integral of |f/g|^2 / 2.  Training is
discretize-then-optimize: the loss is built on an autodiff tape through the
unrolled Euler-Maruyama solver, so energy gradients inside the drift are
written out with primitive ops (see nets.mlp_value_and_input_grad).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nets
from . import rng as rngmod
from . import sde
from .errors import NonFinite, TooManySkips, UsageError

MODES = ("overdamped", "underdamped", "nsde-baseline")

_INV_SOFTPLUS_CACHE: dict[float, float] = {}


def _inv_softplus(y: float) -> float:
    """x with softplus(x) = y, for positive-constant reparameterization."""
    if y <= 0:
        raise UsageError("positive constants must start positive")
    return float(y + np.log1p(-np.exp(-y)))


@dataclass
class DynamicsConstants:
    """Friction, inverse temperature and (underdamped) diagonal mass.

    Trainable constants are stored as raw parameters and passed through a
    softplus, which keeps them positive; fixed constants are used verbatim.
    """

    gamma: float = 1.0
    beta: float = 1.0
    mass: np.ndarray | None = None
    train_gamma: bool = True
    train_beta: bool = True
    train_mass: bool = False

    def __post_init__(self):
        if self.gamma <= 0 or self.beta <= 0:
            raise UsageError("gamma and beta must be positive")
        if self.mass is not None:
            self.mass = np.asarray(self.mass, dtype=np.float64)
            if np.any(self.mass <= 0):
                raise UsageError("mass diagonal must be positive")

    def to_dict(self):
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "mass": None if self.mass is None else self.mass.tolist(),
            "train_gamma": self.train_gamma,
            "train_beta": self.train_beta,
            "train_mass": self.train_mass,
        }

    @staticmethod
    def from_dict(d):
        return DynamicsConstants(
            gamma=d.get("gamma", 1.0),
            beta=d.get("beta", 1.0),
            mass=None if d.get("mass") is None else np.array(d["mass"]),
            train_gamma=d.get("train_gamma", True),
            train_beta=d.get("train_beta", True),
            train_mass=d.get("train_mass", False),
        )


@dataclass
class NldConfig:
    mode: str = "overdamped"
    latent_dim: int = 2
    obs_dim: int = 15
    enc_hidden: int = 32
    context_dim: int = 16
    energy_hidden: tuple = (64, 64)
    control_hidden: tuple = (64,)
    decoder_hidden: tuple = (64,)
    dt: float = 0.05
    constants: DynamicsConstants = field(default_factory=DynamicsConstants)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "underdamped" and self.constants.mass is None:
            self.constants.mass = np.ones(self.latent_dim)
        self.energy_hidden = tuple(self.energy_hidden)
        self.control_hidden = tuple(self.control_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)

    @property
    def state_dim(self) -> int:
        return 2 * self.latent_dim if self.mode == "underdamped" else self.latent_dim

    @property
    def noise_dim(self) -> int:
        return self.latent_dim

    def to_dict(self):
        return {
            "mode": self.mode,
            "latent_dim": self.latent_dim,
            "obs_dim": self.obs_dim,
            "enc_hidden": self.enc_hidden,
            "context_dim": self.context_dim,
            "energy_hidden": list(self.energy_hidden),
            "control_hidden": list(self.control_hidden),
            "decoder_hidden": list(self.decoder_hidden),
            "dt": self.dt,
            "constants": self.constants.to_dict(),
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["constants"] = DynamicsConstants.from_dict(d.get("constants", {}))
        for k in ("energy_hidden", "control_hidden", "decoder_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return NldConfig(**d)


@dataclass
class ElboBreakdown:
    elbo: float
    recon_loglik: float
    kl_path: float
    kl_z0: float


class NldModel:
    """Parameter store plus polymorphic forward functions.

    Every method that evaluates networks takes a ``get`` callable resolving a
    parameter name to either a raw array (analysis/simulation) or a tape Var
    (training); ``self.raw`` is the array resolver.
    """

    def __init__(self, config: NldConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    # -- construction -------------------------------------------------------

    @staticmethod
    def new(config: NldConfig) -> "NldModel":
        c = config
        gen = rngmod.stream(c.seed, rngmod.INIT, 0)
        params: dict[str, np.ndarray] = {}

        def put(prefix, obj):
            for name, arr in obj.tensors(prefix):
                params[name] = np.asarray(arr, dtype=np.float64)

        put("enc", nets.init_gru(c.obs_dim, c.enc_hidden, gen))
        put("proj", _Linear(gen.uniform(-1, 1, (c.enc_hidden, c.context_dim)) / np.sqrt(c.enc_hidden),
                            np.zeros(c.context_dim)))
        if c.mode == "nsde-baseline":
            put("drift", nets.init_mlp([c.latent_dim + 1, *c.energy_hidden, c.latent_dim], gen))
        else:
            put("energy", nets.init_mlp([c.latent_dim, *c.energy_hidden, 1], gen))
        ctrl_in = c.state_dim + 1 + c.context_dim
        put("control", nets.init_mlp([ctrl_in, *c.control_hidden, c.noise_dim], gen))
        put("dec", nets.init_mlp([c.latent_dim, *c.decoder_hidden, c.obs_dim], gen))
        put("z0", _Linear(gen.uniform(-1, 1, (c.context_dim, 2 * c.state_dim)) / np.sqrt(c.context_dim),
                          np.zeros(2 * c.state_dim)))
        params["obs_log_var"] = np.zeros(c.obs_dim)
        k = c.constants
        if k.train_gamma:
            params["dyn.gamma_raw"] = np.array(_inv_softplus(k.gamma))
        if k.train_beta:
            params["dyn.beta_raw"] = np.array(_inv_softplus(k.beta))
        if c.mode == "underdamped" and k.train_mass:
            params["dyn.mass_raw"] = np.array([_inv_softplus(m) for m in k.mass])
        return NldModel(config, params)

    def raw(self, name: str):
        return self.params[name]

    def bind(self, tape: ad.Tape):
        leaves = {name: tape.leaf(arr, name=name) for name, arr in self.params.items()}
        return leaves, (lambda name: leaves[name])

    def trainable_names(self) -> list[str]:
        return sorted(self.params.keys())

    # -- parameter views ----------------------------------------------------

    def _mlp(self, get, prefix: str, sizes: list[int]) -> nets.MlpParams:
        n = len(sizes) - 1
        return nets.MlpParams(
            weights=[get(f"{prefix}.W{i}") for i in range(n)],
            biases=[get(f"{prefix}.b{i}") for i in range(n)],
        )

    def energy_mlp(self, get) -> nets.MlpParams:
        c = self.config
        return self._mlp(get, "energy", [c.latent_dim, *c.energy_hidden, 1])

    def control_mlp(self, get) -> nets.MlpParams:
        c = self.config
        return self._mlp(get, "control", [c.state_dim + 1 + c.context_dim, *c.control_hidden, c.noise_dim])

    def decoder_mlp(self, get) -> nets.MlpParams:
        c = self.config
        return self._mlp(get, "dec", [c.latent_dim, *c.decoder_hidden, c.obs_dim])

    def drift_mlp(self, get) -> nets.MlpParams:
        c = self.config
        return self._mlp(get, "drift", [c.latent_dim + 1, *c.energy_hidden, c.latent_dim])

    def gru(self, get) -> nets.GruParams:
        return nets.GruParams(**{n: get(f"enc.{n}") for n in
                                 ("Wr", "Wz", "Wn", "Ur", "Uz", "Un", "br", "bz", "bn")})

    # -- dynamics constants --------------------------------------------------

    def gamma(self, get):
        if self.config.constants.train_gamma:
            return ad.softplus(get("dyn.gamma_raw"))
        return self.config.constants.gamma

    def beta(self, get):
        if self.config.constants.train_beta:
            return ad.softplus(get("dyn.beta_raw"))
        return self.config.constants.beta

    def mass(self, get):
        k = self.config.constants
        if self.config.mode != "underdamped":
            return None
        if k.train_mass:
            return ad.softplus(get("dyn.mass_raw"))
        return k.mass

    def diffusion(self, get):
        g, b = self.gamma(get), self.beta(get)
        if self.config.mode == "underdamped":
            return ad.sqrt(ad.div(ad.mul(2.0, g), b))
        return ad.sqrt(ad.div(2.0, ad.mul(b, g)))

    def beta_value(self) -> float:
        return float(ad.value_of(self.beta(self.raw)))

    def gamma_value(self) -> float:
        return float(ad.value_of(self.gamma(self.raw)))

    # -- forward pieces ------------------------------------------------------

    def energy(self, get, q, with_bias: bool = True):
        """Energy values (..., 1). ``with_bias=False`` never adds the output
        bias, which cancels in drifts and normalized weights; analysis uses
        the bias-free head so a constant shift of the energy is exactly inert."""
        return nets.mlp_forward(self.energy_mlp(get), q, final_bias=with_bias)

    def energy_grad(self, get, q):
        _, g = nets.mlp_value_and_input_grad(self.energy_mlp(get), q)
        return g

    def prior_drift(self, get, z, t):
        """Drift of the prior SDE at state z, time t. z is (B, state_dim)."""
        c = self.config
        if c.mode == "nsde-baseline":
            b = ad.value_of(z).shape[0]
            tcol = np.full((b, 1), float(t))
            return nets.mlp_forward(self.drift_mlp(get), ad.concat([z, tcol], axis=1))
        if c.mode == "overdamped":
            ge = self.energy_grad(get, z)
            return ad.mul(ge, ad.neg(ad.div(1.0, self.gamma(get))))
        d = c.latent_dim
        q = ad.take(z, (slice(None), slice(0, d)))
        p = ad.take(z, (slice(None), slice(d, 2 * d)))
        pm = ad.div(p, self.mass(get))
        ge = self.energy_grad(get, q)
        dp = ad.sub(ad.neg(ge), ad.mul(self.gamma(get), pm))
        return ad.concat([pm, dp], axis=1)

    def control(self, get, z, t, ctx):
        """Posterior control in noise space: f(z, t, c), shape (B, noise_dim)."""
        b = ad.value_of(z).shape[0]
        tcol = np.full((b, 1), float(t))
        return nets.mlp_forward(self.control_mlp(get), ad.concat([z, tcol, ctx], axis=1))

    def expand_noise_np(self, v: np.ndarray) -> np.ndarray:
        if self.config.mode == "underdamped":
            zeros = np.zeros(v.shape[:-1] + (self.config.latent_dim,))
            return np.concatenate([zeros, v], axis=-1)
        return v

    def decode(self, get, z):
        d = self.config.latent_dim
        q = ad.take(z, (slice(None), slice(0, d))) if self.config.state_dim != d else z
        return nets.mlp_forward(self.decoder_mlp(get), q)

    def encode_hiddens(self, get, x_steps):
        return nets.gru_sequence(self.gru(get), x_steps)

    # -- numpy-side helpers for analysis ------------------------------------

    def energy_np(self, q: np.ndarray, with_bias: bool = True) -> np.ndarray:
        q2 = np.atleast_2d(np.asarray(q, dtype=np.float64))
        return self.energy(self.raw, q2, with_bias=with_bias)[:, 0]

    def energy_grad_np(self, q: np.ndarray) -> np.ndarray:
        q2 = np.atleast_2d(np.asarray(q, dtype=np.float64))
        g = self.energy_grad(self.raw, q2)
        return g if np.asarray(q).ndim == 2 else g[0]

    def encode_contexts_np(self, x: np.ndarray) -> np.ndarray:
        """Contexts (L, context_dim) for one observation sequence (L, obs_dim)."""
        steps = [x[t:t + 1] for t in range(x.shape[0])]
        hs = self.encode_hiddens(self.raw, steps)
        w, b = self.raw("proj.W"), self.raw("proj.b")
        return np.concatenate([h @ w + b for h in hs], axis=0)

    def decode_np(self, z: np.ndarray) -> np.ndarray:
        return self.decode(self.raw, np.atleast_2d(z))

    def dynamics(self):
        """Duck-typed dynamics object for the SDE engine (numpy path)."""
        c = self.config
        get = self.raw
        gamma = float(ad.value_of(self.gamma(get)))
        beta = float(ad.value_of(self.beta(get)))

        def control_fn(z, t, ctx):
            return self.control(get, np.atleast_2d(z), t, np.atleast_2d(ctx))[0]

        if c.mode == "overdamped":
            return sde.OverdampedDynamics(self.energy_grad_np, gamma, beta, c.latent_dim, control_fn)
        if c.mode == "underdamped":
            mass = np.asarray(ad.value_of(self.mass(get)), dtype=np.float64)
            return sde.UnderdampedDynamics(self.energy_grad_np, gamma, beta, mass, control_fn)
        return _BaselineDynamics(self, gamma, beta)

    def posterior_mean_path(self, x: np.ndarray) -> np.ndarray:
        """Deterministic posterior path: z0 at the head mean, no reparameterization
        or Wiener noise. Used for segmentation so labels are reproducible."""
        c = self.config
        ctxs = self.encode_contexts_np(x)
        head = ctxs[0] @ self.raw("z0.W") + self.raw("z0.b")
        z = head[: c.state_dim][None, :]
        states = np.empty((x.shape[0], c.state_dim))
        states[0] = z[0]
        get = self.raw
        for k in range(x.shape[0] - 1):
            t = k * c.dt
            drift = self.prior_drift(get, z, t) + self.expand_noise_np(
                self.control(get, z, t, ctxs[k][None, :]))
            z = z + drift * c.dt
            if not np.all(np.isfinite(z)):
                raise NonFinite(f"posterior mean path diverged at step {k}")
            states[k + 1] = z[0]
        return states

    # -- serialization -------------------------------------------------------

    def save(self, path: str | Path):
        doc = {
            "format": "nld-checkpoint-v1",
            "config": self.config.to_dict(),
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                       for k, v in sorted(self.params.items())},
        }
        with open(path, "w") as f:
            json.dump(doc, f)

    @staticmethod
    def load(path: str | Path) -> "NldModel":
        with open(path) as f:
            doc = json.load(f)
        if doc.get("format") != "nld-checkpoint-v1":
            raise UsageError(f"{path} is not a model checkpoint")
        config = NldConfig.from_dict(doc["config"])
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
        return NldModel(config, params)


class _Linear:
    def __init__(self, w, b):
        self.w, self.b = w, b

    def tensors(self, prefix):
        yield f"{prefix}.W", self.w
        yield f"{prefix}.b", self.b


class _BaselineDynamics:
    """Free-drift prior with the same constant scalar diffusion."""

    def __init__(self, model: NldModel, gamma: float, beta: float):
        self._model = model
        self.gamma = gamma
        self.beta = beta
        self.state_dim = model.config.latent_dim
        self.noise_dim = model.config.latent_dim

    def prior_drift(self, z, t):
        out = self._model.prior_drift(self._model.raw, np.atleast_2d(z), t)
        return out if np.asarray(z).ndim == 2 else out[0]

    def diffusion(self):
        return np.sqrt(2.0 / (self.beta * self.gamma))

    def expand_noise(self, dw):
        return dw

    def restrict_to_noise(self, v):
        return v

    def control_drift(self, z, t, c):
        out = self._model.control(self._model.raw, np.atleast_2d(z), t, np.atleast_2d(c))
        return out if np.asarray(z).ndim == 2 else out[0]


# ---------------------------------------------------------------------------
# ELBO


def elbo_detailed(model: NldModel, X: np.ndarray, seed: int,
                  noise_index: int | np.ndarray = 0, anneal: float = 1.0) -> dict:
    """Build the full ELBO tape for a batch X of shape (B, L, obs_dim).

    ``noise_index`` selects the reparameterization/Wiener streams: a scalar
    draws one batch-wide stream, an array of length B draws one stream per
    sequence (used for common-random-numbers training).

    Returns the loss Var (annealed negative ELBO), the exact breakdown, the
    bound leaves, and the noise draws, so callers can train, check gradients,
    or replay the same path through the numpy simulator.
    """
    c = model.config
    B, L, D = X.shape
    if D != c.obs_dim:
        raise UsageError(f"observation dim {D} != model obs dim {c.obs_dim}")
    if L < 2:
        raise UsageError("sequences must have at least 2 steps")
    K = L - 1
    dt = c.dt

    tape = ad.Tape()
    leaves, get = model.bind(tape)

    # encoder over time-major flattened inputs; x-projections precomputed
    Xtm = np.ascontiguousarray(X.transpose(1, 0, 2))  # (L, B, D)
    Xflat = Xtm.reshape(L * B, D)
    gru = model.gru(get)
    pre_r = ad.matmul(Xflat, gru.Wr)
    pre_z = ad.matmul(Xflat, gru.Wz)
    pre_n = ad.matmul(Xflat, gru.Wn)

    def rows(v, t):
        return ad.take(v, (slice(t * B, (t + 1) * B), slice(None)))

    h = np.zeros((B, c.enc_hidden))
    hiddens = []
    for t in range(L):
        h = nets.gru_step_pre(gru, h, rows(pre_r, t), rows(pre_z, t), rows(pre_n, t))
        hiddens.append(h)
    H_all = ad.concat(hiddens, axis=0)  # (L*B, enc_hidden)
    C_all = ad.add(ad.matmul(H_all, get("proj.W")), get("proj.b"))  # (L*B, ctx)

    # initial-state head from c_0
    c0 = rows(C_all, 0)
    head = ad.add(ad.matmul(c0, get("z0.W")), get("z0.b"))
    s = c.state_dim
    mu0 = ad.take(head, (slice(None), slice(0, s)))
    logsig0 = ad.take(head, (slice(None), slice(s, 2 * s)))
    if np.ndim(noise_index) == 0:
        eps = rngmod.stream(seed, rngmod.Z0, int(noise_index)).standard_normal((B, s))
    else:
        eps = np.stack([rngmod.stream(seed, rngmod.Z0, int(i)).standard_normal(s)
                        for i in noise_index])
    z = ad.add(mu0, ad.mul(ad.exp(logsig0), eps))
    kl_z0 = ad.div(ad.mul(0.5, ad.reduce_sum(
        ad.sub(ad.add(ad.square(mu0), ad.exp(ad.mul(2.0, logsig0))),
               ad.add(1.0, ad.mul(2.0, logsig0))))), float(B))

    # unrolled posterior SDE with shared Wiener increments
    if np.ndim(noise_index) == 0:
        W = rngmod.stream(seed, rngmod.WIENER, int(noise_index)).standard_normal((K, B, c.noise_dim))
    else:
        W = np.stack([rngmod.stream(seed, rngmod.WIENER, int(i)).standard_normal((K, c.noise_dim))
                      for i in noise_index], axis=1)
    W = np.sqrt(dt) * W
    g = model.diffusion(get)
    if float(ad.value_of(g)) <= 1e-12:
        raise UsageError("diffusion is numerically zero; the path KL is undefined")
    inv_gamma = ad.div(1.0, model.gamma(get))
    zs = [z]
    fs = []
    for k in range(K):
        t = k * dt
        ctx = rows(C_all, k)
        f = model.control(get, z, t, ctx)
        if c.mode == "overdamped":
            ge = model.energy_grad(get, z)
            drift = ad.sub(f, ad.mul(ge, inv_gamma))
            noise = W[k]
        elif c.mode == "underdamped":
            d = c.latent_dim
            q = ad.take(z, (slice(None), slice(0, d)))
            p = ad.take(z, (slice(None), slice(d, 2 * d)))
            pm = ad.div(p, model.mass(get))
            ge = model.energy_grad(get, q)
            dp = ad.add(ad.sub(ad.neg(ge), ad.mul(model.gamma(get), pm)), f)
            drift = ad.concat([pm, dp], axis=1)
            noise = np.concatenate([np.zeros((B, d)), W[k]], axis=1)
        else:
            drift = ad.add(model.prior_drift(get, z, t), f)
            noise = W[k]
        z = ad.add(z, ad.add(ad.mul(drift, dt), ad.mul(g, noise)))
        zs.append(z)
        fs.append(f)

    # path KL: u = f/g, kl = 0.5 dt sum |u|^2 (left Riemann), batch mean
    F_all = ad.concat(fs, axis=0)  # (K*B, noise_dim)
    kl_path = ad.div(ad.mul(ad.reduce_sum(ad.square(F_all)), 0.5 * dt / B), ad.square(g))

    # reconstruction: diagonal Gaussian with global learned log variance
    Z_all = ad.concat(zs, axis=0)  # (L*B, state_dim)
    mu = model.decode(get, Z_all)
    lv = get("obs_log_var")
    diff = ad.sub(mu, Xflat)
    sq_term = ad.reduce_sum(ad.mul(ad.square(diff), ad.exp(ad.neg(lv))))
    recon = ad.div(
        ad.mul(-0.5, ad.add(sq_term, ad.add(ad.mul(float(L * B), ad.reduce_sum(lv)),
                                            float(L * B * D) * np.log(2.0 * np.pi)))),
        float(B))

    elbo_v = ad.sub(ad.sub(recon, kl_path), kl_z0)
    loss = ad.neg(ad.sub(recon, ad.mul(float(anneal), ad.add(kl_path, kl_z0))))

    breakdown = ElboBreakdown(
        elbo=float(elbo_v.value),
        recon_loglik=float(recon.value),
        kl_path=float(kl_path.value),
        kl_z0=float(kl_z0.value),
    )
    return {
        "tape": tape,
        "leaves": leaves,
        "loss": loss,
        "elbo": elbo_v,
        "breakdown": breakdown,
        "wiener": W,
        "eps": eps,
        "z_path": np.stack([ad.value_of(v) for v in zs]),  # (L, B, state_dim)
        "contexts": ad.value_of(C_all).reshape(L, B, c.context_dim),
        "z0": ad.value_of(zs[0]),
    }


def elbo(model: NldModel, x: np.ndarray, seed: int = 0) -> ElboBreakdown:
    """ELBO breakdown for a single observation sequence (L, obs_dim)."""
    x = np.asarray(x, dtype=np.float64)
    detail = elbo_detailed(model, x[None, :, :], seed=seed)
    b = detail["breakdown"]
    if not all(np.isfinite([b.elbo, b.recon_loglik, b.kl_path, b.kl_z0])):
        raise NonFinite("non-finite ELBO")
    return b


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 50
    warmup_epochs: int = 10
    clip_norm: float = 10.0
    batch_size: int = 32
    seed: int = 0
    max_skip_fraction: float = 0.10
    noise_pool: int = 0  # >0 reuses that many noise streams across epochs (CRN)
    lr_decay_epoch: int = 0  # epoch from which lr is multiplied by lr_decay_factor
    lr_decay_factor: float = 1.0

    def to_dict(self):
        return {
            "lr": self.lr,
            "epochs": self.epochs,
            "warmup_epochs": self.warmup_epochs,
            "clip_norm": self.clip_norm,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "max_skip_fraction": self.max_skip_fraction,
            "noise_pool": self.noise_pool,
            "lr_decay_epoch": self.lr_decay_epoch,
            "lr_decay_factor": self.lr_decay_factor,
        }

    @staticmethod
    def from_dict(d):
        known = {k: v for k, v in d.items() if k in TrainConfig.__dataclass_fields__}
        return TrainConfig(**known)


def anneal_factor(epoch: int, warmup_epochs: int) -> float:
    """KL weight: ramps linearly over the warmup, 1 afterwards."""
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, (epoch + 1) / warmup_epochs)


def train(model: NldModel, dataset, cfg: TrainConfig):
    """Minibatch Adam on the annealed negative ELBO.

    Batches whose loss or gradients are non-finite are skipped and counted;
    an epoch skipping more than ``max_skip_fraction`` of its batches raises
    TooManySkips.  Returns (model, history) where history holds per-epoch
    means of the exact (un-annealed) ELBO terms.
    """
    obs = [np.asarray(o, dtype=np.float64) for _, o in dataset.sequences]
    if not obs:
        raise UsageError("dataset is empty")
    L = obs[0].shape[0]
    if any(o.shape[0] != L for o in obs):
        raise UsageError("training requires equal-length sequences")
    X = np.stack(obs)  # (N, L, D)
    n = X.shape[0]
    bs = min(cfg.batch_size, n)
    n_batches = (n + bs - 1) // bs

    state = nets.AdamState(lr=cfg.lr)
    names = model.trainable_names()
    history = []
    for epoch in range(cfg.epochs):
        order = rngmod.stream(cfg.seed, rngmod.SHUFFLE, epoch).permutation(n)
        anneal = anneal_factor(epoch, cfg.warmup_epochs)
        state.lr = cfg.lr
        if cfg.lr_decay_epoch and epoch >= cfg.lr_decay_epoch:
            state.lr = cfg.lr * cfg.lr_decay_factor
        sums = np.zeros(4)
        weight = 0
        skipped = 0
        for b in range(n_batches):
            idx = order[b * bs:(b + 1) * bs]
            batch = X[idx]
            # common random numbers: with a pool, each sequence keeps its own
            # fixed noise streams across epochs, making the objective a fixed
            # sample average; this removes the late-training parameter wander
            # caused by fresh-noise gradient variance
            if cfg.noise_pool > 0:
                noise_index = idx % cfg.noise_pool
            else:
                noise_index = epoch * n_batches + b
            with np.errstate(over="ignore", invalid="ignore"):
                detail = elbo_detailed(model, batch, seed=cfg.seed,
                                       noise_index=noise_index, anneal=anneal)
                loss = detail["loss"]
                if not np.isfinite(float(loss.value)):
                    skipped += 1
                    continue
                grads_all = ad.backward(loss)
                grads = {k: grads_all.wrt(detail["leaves"][k]) for k in names}
            if any(not np.all(np.isfinite(g)) for g in grads.values()):
                skipped += 1
                continue
            grads, _ = nets.clip_by_global_norm(grads, cfg.clip_norm)
            nets.adam_step(state, model.params, grads)
            bd = detail["breakdown"]
            sums += np.array([bd.elbo, bd.recon_loglik, bd.kl_path, bd.kl_z0]) * len(idx)
            weight += len(idx)
        if skipped > cfg.max_skip_fraction * n_batches:
            raise TooManySkips(f"epoch {epoch}: {skipped}/{n_batches} batches skipped")
        means = sums / weight if weight else np.full(4, np.nan)
        history.append({
            "epoch": epoch,
            "elbo": means[0],
            "recon": means[1],
            "kl_path": means[2],
            "kl_z0": means[3],
            "skipped_batches": skipped,
        })
    return model, history


def history_to_csv(history: list[dict], path: str | Path):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "elbo", "recon", "kl_path", "kl_z0", "skipped_batches"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["elbo"])), repr(float(row["recon"])),
                        repr(float(row["kl_path"])), repr(float(row["kl_z0"])),
                        row["skipped_batches"]])
