"""Discrete-latent VAE with a Boltzmann machine prior.

Encoder: input -> hidden (rectified linear) -> L Bernoulli means q.
Latents pass through the spike-and-exponential quantile transform so the
reconstruction gradient reaches the encoder; the prior's (h, W) train by
contrastive moment matching against a configurable negative-phase sampler.
A Gaussian-prior baseline shares the same networks and loop, differing only
in the latent head (mu, log sigma) and the closed-form KL.

All forward/backward math is explicit numpy; gradients are exact (verified
against central finite differences), and every random draw flows from
derived seeds so training is reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import energy as en
from .dataio import ExpressionDataset
from .rng import derive_seed, philox_gen
from .reparam import (DEFAULT_CONFIG, ReparamConfig, bernoulli_entropy,
                      binarize, clamp_q, zeta, zeta_grad_q)
from .samplers import (SampleSet, default_schedule, exact_sampler,
                       gibbs_sample, negative_phase_moments,
                       log_z_paper_estimate, simulated_annealing)
from .textio import floats_line, fmt, parse_floats, write_csv

HISTORY_HEADER = ["epoch", "split", "recon", "entropy", "pos_energy",
                  "log_z", "kl", "elbo"]


# ------------------------------------------------------------- parameters

@dataclass
class EncoderParams:
    """input -> hidden (relu) -> head; head width is L for the Bernoulli
    encoder and 2L (mu then log sigma) for the Gaussian baseline."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        h, d = self.w1.shape
        k, h2 = self.w2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (k,):
            raise ValueError("encoder layer shapes are inconsistent")
        for a in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(a)):
                raise ValueError("encoder parameters must be finite")

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.w1.copy(), self.b1.copy(),
                             self.w2.copy(), self.b2.copy())

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class DecoderParams:
    """(latent + batch one-hot) -> hidden (relu) -> linear output."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        h, _ = self.w1.shape
        d, h2 = self.w2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (d,):
            raise ValueError("decoder layer shapes are inconsistent")
        for a in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(a)):
                raise ValueError("decoder parameters must be finite")

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.w1.copy(), self.b1.copy(),
                             self.w2.copy(), self.b2.copy())

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class QbmVaeModel:
    """Full model: networks, prior (Boltzmann machine or Gaussian marker),
    quantile-transform settings, and the seed its parameters came from."""

    encoder: EncoderParams
    decoder: DecoderParams
    prior_bm: en.BoltzmannMachine | None
    reparam: ReparamConfig
    n_batches: int
    n_genes: int
    n_latent: int
    rng_seed: int = 0

    def __post_init__(self):
        head = self.encoder.w2.shape[0]
        expect = self.n_latent if self.prior_bm is not None else 2 * self.n_latent
        if head != expect:
            raise ValueError(f"encoder head width {head}, expected {expect}")
        if self.prior_bm is not None and self.prior_bm.n_visible != self.n_latent:
            raise ValueError("prior visible count must equal the latent width")
        if self.decoder.w1.shape[1] != self.n_latent + self.n_batches:
            raise ValueError("decoder input must be latent width + batch count")
        if self.decoder.w2.shape[0] != self.n_genes:
            raise ValueError("decoder output width must equal the gene count")
        if self.encoder.w1.shape[1] != self.n_genes:
            raise ValueError("encoder input width must equal the gene count")

    @property
    def prior_kind(self) -> str:
        return "gaussian" if self.prior_bm is None else "boltzmann"

    def copy(self) -> "QbmVaeModel":
        return QbmVaeModel(self.encoder.copy(), self.decoder.copy(),
                           self.prior_bm, self.reparam, self.n_batches,
                           self.n_genes, self.n_latent, self.rng_seed)


def new_model(n_genes: int, n_latent: int, n_batches: int, hidden: int = 256,
              prior: str = "boltzmann", n_hidden_bm: int = 0,
              reparam: ReparamConfig = DEFAULT_CONFIG,
              seed: int = 0) -> QbmVaeModel:
    """Seeded initialization: relu layers at scale sqrt(2/fan_in), heads at
    sqrt(1/fan_in), zero biases, zero prior couplings (uniform prior)."""
    if prior not in ("boltzmann", "gaussian"):
        raise ValueError(f"unknown prior {prior!r}")
    if min(n_genes, n_latent, n_batches, hidden) < 1:
        raise ValueError("all widths must be positive")
    head = n_latent if prior == "boltzmann" else 2 * n_latent
    gen = philox_gen(seed, 10)
    enc = EncoderParams(
        gen.normal(size=(hidden, n_genes)) * np.sqrt(2.0 / n_genes),
        np.zeros(hidden),
        gen.normal(size=(head, hidden)) * np.sqrt(1.0 / hidden),
        np.zeros(head))
    dec_in = n_latent + n_batches
    dec = DecoderParams(
        gen.normal(size=(hidden, dec_in)) * np.sqrt(2.0 / dec_in),
        np.zeros(hidden),
        gen.normal(size=(n_genes, hidden)) * np.sqrt(1.0 / hidden),
        np.zeros(n_genes))
    bm = None
    if prior == "boltzmann":
        n = n_latent + n_hidden_bm
        bm = en.BoltzmannMachine(n_latent, n_hidden_bm,
                                 np.zeros((n, n)), np.zeros(n))
    return QbmVaeModel(enc, dec, bm, reparam, n_batches, n_genes, n_latent, seed)


@dataclass(frozen=True)
class TrainConfig:
    lr_vae: float = 1e-2
    lr_bm: float = 1e-3
    patience: int = 10
    max_epochs: int = 500
    minibatch_size: int = 128
    n_negative_samples: int = 100
    sampler_choice: str = "gibbs"
    gibbs_sweeps: int = 1
    gibbs_burn_in: int = 100
    gibbs_chains: int = 16
    temperature: float = 1.0
    service_address: str = "127.0.0.1:7700"
    seed: int = 0
    debug_grad_check: bool = False

    def __post_init__(self):
        if self.lr_vae < 0 or self.lr_bm < 0:
            raise ValueError("learning rates must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if min(self.max_epochs, self.minibatch_size, self.n_negative_samples,
               self.gibbs_sweeps, self.gibbs_chains) < 1 or self.gibbs_burn_in < 0:
            raise ValueError("counts must be positive")
        if self.sampler_choice not in ("gibbs", "sa", "exact", "service"):
            raise ValueError(f"unknown sampler_choice {self.sampler_choice!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class ElboReport:
    """Per-evaluation scalars; kl = -entropy + positive_energy + log_z holds
    to 1e-9 whenever log_z is exact (Boltzmann prior, L <= enumeration cap).
    The Gaussian baseline reports its closed-form kl with the three
    Boltzmann-specific fields zeroed."""

    recon: float
    entropy: float
    positive_energy: float
    log_z: float
    kl: float
    elbo: float

    def row(self, epoch: int, split: str) -> list:
        return [epoch, split, self.recon, self.entropy, self.positive_energy,
                self.log_z, self.kl, self.elbo]


# ----------------------------------------------------------- forward passes

def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"batch label outside 0..{n_classes - 1}")
    out = np.zeros((labels.size, n_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def encode(x, enc: EncoderParams) -> np.ndarray:
    """Bernoulli means q in (0,1)^L for a batch of rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != enc.w1.shape[1]:
        raise ValueError(f"input width {x.shape[1]}, encoder expects {enc.w1.shape[1]}")
    h1 = np.maximum(x @ enc.w1.T + enc.b1, 0.0)
    q = _stable_sigmoid(h1 @ enc.w2.T + enc.b2)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite encoder activations")
    return q


def encode_gaussian(x, enc: EncoderParams) -> tuple[np.ndarray, np.ndarray]:
    """(mu, log_sigma) heads; log_sigma is clipped to [-10, 10]."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != enc.w1.shape[1]:
        raise ValueError(f"input width {x.shape[1]}, encoder expects {enc.w1.shape[1]}")
    h1 = np.maximum(x @ enc.w1.T + enc.b1, 0.0)
    a = h1 @ enc.w2.T + enc.b2
    L = a.shape[1] // 2
    return a[:, :L], np.clip(a[:, L:], -10.0, 10.0)


def decode(latent, batch_onehot, dec: DecoderParams) -> np.ndarray:
    latent = np.atleast_2d(np.asarray(latent, dtype=np.float64))
    batch_onehot = np.atleast_2d(np.asarray(batch_onehot, dtype=np.float64))
    u = np.hstack([latent, batch_onehot])
    if u.shape[1] != dec.w1.shape[1]:
        raise ValueError(f"decoder input width {u.shape[1]}, expects {dec.w1.shape[1]}")
    g1 = np.maximum(u @ dec.w1.T + dec.b1, 0.0)
    return g1 @ dec.w2.T + dec.b2


def sample_hidden_given_visible(bm: en.BoltzmannMachine, visible,
                                k: int = 10, seed: int = 0) -> np.ndarray:
    """Gibbs over the prior's hidden units with visibles clamped; the
    positive phase for the off-by-default hidden-unit extension."""
    visible = np.atleast_2d(np.asarray(visible, dtype=np.float64))
    m = visible.shape[0]
    nv, nh = bm.n_visible, bm.n_hidden
    if nh == 0:
        return np.zeros((m, 0))
    gen = philox_gen(seed, 5)
    state = (gen.random((m, nh)) < 0.5).astype(np.float64)
    for _ in range(k):
        for j in range(nh):
            idx = nv + j
            delta = (bm.h[idx] + visible @ bm.W[:nv, idx]
                     + state @ bm.W[nv:, idx])
            state[:, j] = gen.random(m) < _stable_sigmoid(-delta)
    return state


def _bm_log_z(bm: en.BoltzmannMachine,
              negative_set: SampleSet | None) -> float:
    """Exact when enumerable; else the quarantined mean-energy stand-in
    (diagnostic only, never fed to a gradient)."""
    if bm.n <= en.ENUMERATION_CAP:
        return en.exact_enumeration(bm).log_z
    if negative_set is not None:
        return log_z_paper_estimate(negative_set, bm)
    return float("nan")


def elbo_forward(x, batch_onehot, model: QbmVaeModel, rho,
                 negative_set: SampleSet | None = None) -> tuple[ElboReport, dict]:
    """Forward pass caching every intermediate the backward pass needs.

    recon is the squared error summed over genes, averaged over cells; for
    the Boltzmann prior kl = -entropy + positive_energy + log_z with the
    positive energy evaluated on the relaxed latents.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    batch_onehot = np.atleast_2d(np.asarray(batch_onehot, dtype=np.float64))
    rho = np.atleast_2d(np.asarray(rho, dtype=np.float64))
    m = x.shape[0]
    if rho.shape != (m, model.n_latent):
        raise ValueError(f"rho shape {rho.shape}, expected ({m}, {model.n_latent})")
    if batch_onehot.shape != (m, model.n_batches):
        raise ValueError("batch one-hot shape mismatch")
    enc, dec = model.encoder, model.decoder
    cache = {"x": x, "onehot": batch_onehot, "rho": rho, "model": model}

    a1 = x @ enc.w1.T + enc.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ enc.w2.T + enc.b2
    cache.update(a1=a1, h1=h1, a2=a2)

    if model.prior_kind == "boltzmann":
        bm = model.prior_bm
        q_raw = _stable_sigmoid(a2)
        q = clamp_q(q_raw, model.reparam)
        zv = zeta(rho, q, model.reparam)
        latent = zv
        eps = model.reparam.q_clamp_epsilon
        cache.update(q_raw=q_raw, q=q, zeta=zv,
                     clip_mask=(q_raw > eps) & (q_raw < 1.0 - eps))
        entropy = bernoulli_entropy(q, model.reparam) / m
        if bm.n_hidden > 0:
            hidden = sample_hidden_given_visible(
                bm, binarize(zv, "spike"), seed=model.rng_seed)
            full = np.hstack([zv, hidden])
            cache["hidden"] = hidden
        else:
            full = zv
        pos_energy = float(np.mean(en.bm_energies(full, bm, relaxed=True)))
        log_z = _bm_log_z(bm, negative_set)
        kl = -entropy + pos_energy + log_z
    else:
        L = model.n_latent
        mu = a2[:, :L]
        log_sigma = np.clip(a2[:, L:], -10.0, 10.0)
        sigma = np.exp(log_sigma)
        noise = ndtri(np.clip(rho, 1e-15, 1.0 - 1e-15))
        latent = mu + sigma * noise
        cache.update(mu=mu, log_sigma=log_sigma, sigma=sigma, noise=noise,
                     ls_mask=(a2[:, L:] > -10.0) & (a2[:, L:] < 10.0))
        entropy = 0.0
        pos_energy = 0.0
        log_z = 0.0
        kl = float(0.5 * np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * log_sigma) / m)

    u = np.hstack([latent, batch_onehot])
    d1 = u @ dec.w1.T + dec.b1
    g1 = np.maximum(d1, 0.0)
    x_hat = g1 @ dec.w2.T + dec.b2
    cache.update(latent=latent, u=u, d1=d1, g1=g1, x_hat=x_hat)

    recon = float(np.sum((x - x_hat) ** 2) / m)
    report = ElboReport(recon, float(entropy), float(pos_energy), float(log_z),
                        float(kl), -(recon + float(kl)))
    return report, cache


def backward(cache: dict) -> tuple[EncoderParams, DecoderParams]:
    """Exact gradients of (recon + kl) w.r.t. network parameters, with rho
    held fixed (reparameterization) and the prior's (h, W) held constant."""
    if "x_hat" not in cache:
        raise ValueError("forward cache is incomplete")
    model: QbmVaeModel = cache["model"]
    enc, dec = model.encoder, model.decoder
    x, onehot = cache["x"], cache["onehot"]
    m = x.shape[0]
    L = model.n_latent

    d_xhat = 2.0 * (cache["x_hat"] - x) / m
    grad_v2 = d_xhat.T @ cache["g1"]
    grad_c2 = d_xhat.sum(axis=0)
    d_g1 = d_xhat @ dec.w2
    d_d1 = d_g1 * (cache["d1"] > 0.0)
    grad_v1 = d_d1.T @ cache["u"]
    grad_c1 = d_d1.sum(axis=0)
    d_latent = (d_d1 @ dec.w1)[:, :L]

    if model.prior_kind == "boltzmann":
        bm = model.prior_bm
        q, zv, rho = cache["q"], cache["zeta"], cache["rho"]
        # d positive_energy / d zeta = (h + W z)/m over the visible block
        if bm.n_hidden > 0:
            full = np.hstack([zv, cache["hidden"]])
        else:
            full = zv
        d_latent = d_latent + (bm.h[:L] + full @ bm.W[:, :L]) / m
        d_q = d_latent * zeta_grad_q(rho, q, model.reparam)
        # kl carries -entropy: dH/dq = ln((1-q)/q)
        d_q = d_q - np.log((1.0 - q) / q) / m
        d_a2 = d_q * cache["clip_mask"] * cache["q_raw"] * (1.0 - cache["q_raw"])
    else:
        sigma, noise = cache["sigma"], cache["noise"]
        d_mu = d_latent + cache["mu"] / m
        d_ls = d_latent * sigma * noise + (sigma**2 - 1.0) / m
        d_a2 = np.hstack([d_mu, d_ls * cache["ls_mask"]])

    grad_w2 = d_a2.T @ cache["h1"]
    grad_b2 = d_a2.sum(axis=0)
    d_h1 = d_a2 @ enc.w2
    d_a1 = d_h1 * (cache["a1"] > 0.0)
    grad_w1 = d_a1.T @ x
    grad_b1 = d_a1.sum(axis=0)
    return (EncoderParams(grad_w1, grad_b1, grad_w2, grad_b2),
            DecoderParams(grad_v1, grad_c1, grad_v2, grad_c2))


# ------------------------------------------------------------- BM gradient

def posterior_moments(latent) -> tuple[np.ndarray, np.ndarray]:
    """Minibatch first/second moments of the (relaxed or binary) latents;
    pair diagonal carries the mean to mirror the sampler convention."""
    Z = np.atleast_2d(np.asarray(latent, dtype=np.float64))
    mean = Z.mean(axis=0)
    pair = Z.T @ Z / Z.shape[0]
    np.fill_diagonal(pair, mean)
    return mean, pair


def bm_gradient(pos_mean, pos_pair, neg_mean, neg_pair) -> tuple[np.ndarray, np.ndarray]:
    """KL gradient for the prior: positive-phase moments minus negative-phase
    moments; the coupling gradient is symmetrized with a zero diagonal."""
    pos_mean = np.asarray(pos_mean, dtype=np.float64)
    neg_mean = np.asarray(neg_mean, dtype=np.float64)
    pos_pair = np.asarray(pos_pair, dtype=np.float64)
    neg_pair = np.asarray(neg_pair, dtype=np.float64)
    if pos_mean.shape != neg_mean.shape or pos_pair.shape != neg_pair.shape:
        raise ValueError("moment shapes disagree")
    grad_h = pos_mean - neg_mean
    diff = pos_pair - neg_pair
    grad_w = 0.5 * (diff + diff.T)
    np.fill_diagonal(grad_w, 0.0)
    return grad_h, grad_w


def enumerated_kl(q, bm: en.BoltzmannMachine) -> float:
    """Exact KL(q || p) between a factorized Bernoulli posterior and the
    prior, by enumeration; testing/diagnostic helper."""
    q = clamp_q(np.asarray(q, dtype=np.float64))
    if q.shape != (bm.n,):
        raise ValueError("q must give one probability per unit")
    states = en.all_states(bm.n).astype(np.float64)
    log_q = states @ np.log(q) + (1.0 - states) @ np.log(1.0 - q)
    res = en.exact_enumeration(bm)
    log_p = -en.enumerate_energies(bm) - res.log_z
    return float(np.sum(np.exp(log_q) * (log_q - log_p)))


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_init(param: np.ndarray) -> AdamState:
    return AdamState(np.zeros_like(param), np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    if param.shape != grad.shape:
        raise ValueError("parameter and gradient shapes disagree")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------- training

def _negative_samples(bm: en.BoltzmannMachine, config: TrainConfig,
                      seed: int) -> SampleSet:
    if config.sampler_choice == "exact":
        return exact_sampler(bm, config.n_negative_samples, seed=seed)
    if config.sampler_choice == "gibbs":
        return gibbs_sample(bm, config.n_negative_samples,
                            n_sweeps=config.gibbs_sweeps,
                            burn_in=config.gibbs_burn_in,
                            temperature=config.temperature, seed=seed,
                            n_chains=config.gibbs_chains)
    if config.sampler_choice == "sa":
        ising, _ = en.bm_to_spin_model(bm)
        _, _, finals = simulated_annealing(
            ising, default_schedule(bm.n), n_runs=config.n_negative_samples,
            seed=seed)
        return finals
    # service: ship the BM over the wire, get samples back
    from .service import SampleJob, client_submit
    host, _, port = config.service_address.rpartition(":")
    job = SampleJob(job_id=f"neg-{seed}", n=bm.n,
                    upper=en.upper_triangle(bm.W), bias=bm.h, kind="binary",
                    n_samples=config.n_negative_samples,
                    temperature=config.temperature, seed=seed,
                    n_sweeps=config.gibbs_sweeps, burn_in=config.gibbs_burn_in,
                    n_chains=config.gibbs_chains)
    return client_submit(host or "127.0.0.1", int(port), job)


def _spot_check_gradients(x, onehot, model, rho, enc_grad, dec_grad,
                          probes: int, gen) -> None:
    """Central-difference probe of a few random coordinates; used by the
    debug mode every 50th step."""
    step = 1e-5
    for params, grads in ((model.encoder, enc_grad), (model.decoder, dec_grad)):
        tensors = params.tensors()
        for name, arr in tensors.items():
            g = grads.tensors()[name]
            for _ in range(probes):
                idx = np.unravel_index(int(gen.integers(arr.size)), arr.shape)
                keep = arr[idx]
                arr[idx] = keep + step
                up, _ = elbo_forward(x, onehot, model, rho)
                arr[idx] = keep - step
                dn, _ = elbo_forward(x, onehot, model, rho)
                arr[idx] = keep
                fd = ((up.recon + up.kl) - (dn.recon + dn.kl)) / (2 * step)
                err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-4)
                if err > 1e-3:
                    raise RuntimeError(
                        f"gradient check failed at {name}{idx}: "
                        f"analytic {g[idx]:.6e}, finite-difference {fd:.6e}")


def train(train_ds: ExpressionDataset, val_ds: ExpressionDataset,
          model: QbmVaeModel, config: TrainConfig):
    """Adam minibatch training with early stopping on validation ELBO.

    Per step: fresh rho, network update, then (Boltzmann prior) a prior
    update from fresh negative-phase samples.  Evaluation passes reuse one
    fixed rho per split so epoch curves are comparable; the best-validation
    snapshot is returned together with the full epoch history.
    """
    if train_ds.n_cells == 0 or val_ds.n_cells == 0:
        raise ValueError("both splits must be non-empty")
    if train_ds.n_genes != model.n_genes or val_ds.n_genes != model.n_genes:
        raise ValueError("dataset gene count does not match the model")
    model = model.copy()
    seed = config.seed
    L = model.n_latent
    X_train, X_val = train_ds.matrix, val_ds.matrix
    oh_train = one_hot(train_ds.batch, model.n_batches)
    oh_val = one_hot(val_ds.batch, model.n_batches)
    rho_train_eval = philox_gen(seed, 7).random((train_ds.n_cells, L))
    rho_val_eval = philox_gen(seed, 8).random((val_ds.n_cells, L))

    slots = {}
    for prefix, params in (("enc", model.encoder), ("dec", model.decoder)):
        for name, arr in params.tensors().items():
            slots[f"{prefix}.{name}"] = adam_init(arr)
    if model.prior_kind == "boltzmann":
        slots["bm.h"] = adam_init(model.prior_bm.h)
        slots["bm.W"] = adam_init(model.prior_bm.W)

    history = []
    best_elbo = -np.inf
    best_model = model.copy()
    stall = 0
    global_step = 0
    last_negative = None

    for epoch in range(1, config.max_epochs + 1):
        order = philox_gen(seed, 3 * epoch).permutation(train_ds.n_cells)
        rho_gen = philox_gen(seed, 3 * epoch + 1)
        for start in range(0, train_ds.n_cells, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            x, oh = X_train[idx], oh_train[idx]
            rho = rho_gen.random((idx.size, L))
            report, cache = elbo_forward(x, oh, model, rho)
            enc_grad, dec_grad = backward(cache)
            global_step += 1
            if config.debug_grad_check and global_step % 50 == 0:
                _spot_check_gradients(
                    x, oh, model, rho, enc_grad, dec_grad, probes=2,
                    gen=philox_gen(seed, 5 * global_step + 4))
            for prefix, params, grads in (("enc", model.encoder, enc_grad),
                                          ("dec", model.decoder, dec_grad)):
                for name, arr in params.tensors().items():
                    g = grads.tensors()[name]
                    setattr(params, name,
                            adam_step(arr, g, slots[f"{prefix}.{name}"],
                                      config.lr_vae))
            if model.prior_kind == "boltzmann":
                bm = model.prior_bm
                sampler_seed = derive_seed(seed, epoch * 100_000 + global_step)
                negative = _negative_samples(bm, config, sampler_seed)
                last_negative = negative
                neg_mean, neg_pair = negative_phase_moments(negative)
                if bm.n_hidden > 0:
                    full = np.hstack([cache["zeta"], cache["hidden"]])
                else:
                    full = cache["zeta"]
                pos_mean, pos_pair = posterior_moments(full)
                grad_h, grad_w = bm_gradient(pos_mean, pos_pair,
                                             neg_mean, neg_pair)
                new_h = adam_step(bm.h, grad_h, slots["bm.h"], config.lr_bm)
                new_w = adam_step(bm.W, grad_w, slots["bm.W"], config.lr_bm)
                new_w = 0.5 * (new_w + new_w.T)
                np.fill_diagonal(new_w, 0.0)
                model.prior_bm = en.BoltzmannMachine(
                    bm.n_visible, bm.n_hidden, new_w, new_h)

        train_report, _ = elbo_forward(X_train, oh_train, model,
                                       rho_train_eval, last_negative)
        val_report, _ = elbo_forward(X_val, oh_val, model,
                                     rho_val_eval, last_negative)
        history.append(train_report.row(epoch, "train"))
        history.append(val_report.row(epoch, "val"))
        if val_report.elbo > best_elbo:
            best_elbo = val_report.elbo
            best_model = model.copy()
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    return best_model, history


def save_history(path, history) -> None:
    write_csv(path, HISTORY_HEADER, history)


def embed(ds: ExpressionDataset, model: QbmVaeModel,
          output_kind: str = "q") -> np.ndarray:
    """Per-cell latent matrix: q (Bernoulli means), zeta (quantile transform
    at the deterministic rho = 0.5), or binary (spike indicator of that
    zeta).  The Gaussian baseline maps q/zeta to mu and binary to mu > 0."""
    if output_kind not in ("q", "zeta", "binary"):
        raise ValueError(f"unknown output_kind {output_kind!r}")
    if ds.n_genes != model.n_genes:
        raise ValueError("dataset gene count does not match the model")
    if model.prior_kind == "gaussian":
        mu, _ = encode_gaussian(ds.matrix, model.encoder)
        if output_kind == "binary":
            return (mu > 0.0).astype(np.float64)
        return mu
    q = clamp_q(encode(ds.matrix, model.encoder), model.reparam)
    if output_kind == "q":
        return q
    zv = zeta(np.full_like(q, 0.5), q, model.reparam)
    if output_kind == "zeta":
        return zv
    return binarize(zv, "spike").astype(np.float64)


# ------------------------------------------------------------- checkpoints

CHECKPOINT_HEADER = "qbmvae v1"


def _write_tensor(lines: list, name: str, arr: np.ndarray) -> None:
    mat = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    lines.append(f"tensor {name} {mat.shape[0]} {mat.shape[1]}")
    for row in mat:
        lines.append(floats_line(row))


def save_model(path, model: QbmVaeModel) -> None:
    """Single self-describing text container; embeds the prior using the
    same three-line layout as the standalone BM files."""
    lines = [CHECKPOINT_HEADER,
             f"prior {model.prior_kind}",
             f"n_genes {model.n_genes}",
             f"n_latent {model.n_latent}",
             f"n_batches {model.n_batches}",
             f"hidden {model.encoder.w1.shape[0]}",
             f"seed {model.rng_seed}",
             f"beta {fmt(model.reparam.beta)}",
             f"q_clamp_epsilon {fmt(model.reparam.q_clamp_epsilon)}"]
    for prefix, params in (("enc", model.encoder), ("dec", model.decoder)):
        for name, arr in params.tensors().items():
            _write_tensor(lines, f"{prefix}.{name}", arr)
    if model.prior_bm is not None:
        bm = model.prior_bm
        iu = np.triu_indices(bm.n, k=1)
        lines.append(f"bm v1 {bm.n_visible} {bm.n_hidden}")
        lines.append(floats_line(bm.h))
        lines.append(floats_line(bm.W[iu]) if bm.n > 1 else "")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> QbmVaeModel:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a {CHECKPOINT_HEADER!r} checkpoint")
    meta = {}
    pos = 1
    while pos < len(lines) and not lines[pos].startswith(("tensor ", "bm ")):
        key, _, value = lines[pos].partition(" ")
        meta[key] = value
        pos += 1
    for key in ("prior", "n_genes", "n_latent", "n_batches", "seed", "beta",
                "q_clamp_epsilon"):
        if key not in meta:
            raise ValueError(f"{path}: missing {key!r} in checkpoint header")
    tensors = {}
    bm = None
    while pos < len(lines):
        head = lines[pos].split()
        if head[0] == "tensor":
            name, rows, cols = head[1], int(head[2]), int(head[3])
            block = []
            for r in range(rows):
                block.append(parse_floats(lines[pos + 1 + r], expect=cols,
                                          what=f"{name} row"))
            tensors[name] = np.array(block)
            pos += 1 + rows
        elif head[0] == "bm":
            n_visible, n_hidden = int(head[2]), int(head[3])
            n = n_visible + n_hidden
            h = parse_floats(lines[pos + 1], expect=n, what="bias entries")
            iu = np.triu_indices(n, k=1)
            W = np.zeros((n, n))
            if n > 1:
                W[iu] = parse_floats(lines[pos + 2], expect=len(iu[0]),
                                     what="coupling entries")
            bm = en.BoltzmannMachine(n_visible, n_hidden, W + W.T, h)
            pos += 3
        else:
            raise ValueError(f"{path}: unexpected line {lines[pos]!r}")

    def squeeze(name):
        arr = tensors[name]
        return arr[0] if name.endswith(("b1", "b2")) else arr

    enc = EncoderParams(squeeze("enc.w1"), squeeze("enc.b1"),
                        squeeze("enc.w2"), squeeze("enc.b2"))
    dec = DecoderParams(squeeze("dec.w1"), squeeze("dec.b1"),
                        squeeze("dec.w2"), squeeze("dec.b2"))
    if meta["prior"] == "boltzmann" and bm is None:
        raise ValueError(f"{path}: boltzmann checkpoint without a prior block")
    cfg = ReparamConfig(beta=float(meta["beta"]),
                        q_clamp_epsilon=float(meta["q_clamp_epsilon"]))
    return QbmVaeModel(enc, dec, bm, cfg, int(meta["n_batches"]),
                       int(meta["n_genes"]), int(meta["n_latent"]),
                       int(meta["seed"]))
