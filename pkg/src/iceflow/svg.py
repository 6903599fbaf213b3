"""Stochastic video prediction with a learned prior, at toy scale.

Per time step ``t`` (0-based, predicting frame ``t`` from frames ``< t``):

* encoder ``E`` maps every frame to an embedding ``h`` and skip features;
* the posterior LSTM sees ``h_t`` and the prior LSTM sees ``h_{t-1}``, each
  producing a diagonal Gaussian over ``z_t``;
* the frame predictor LSTM consumes ``h_{t-1}`` concatenated with ``z_t``;
* the decoder turns the predictor output plus skip features from the last
  conditioning frame into a chip in (0, 1).

The training loss per step is ``mse + lambda_peak * peak_mse + beta * KL(q||p)``,
summed over steps and averaged over the batch.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    chip_size: int = 32
    z_dim: int = 8
    g_dim: int = 32
    rnn_layers: int = 2
    rnn_units: int = 32
    latent_units: int | None = None
    context_len: int = 8
    horizon: int = 2
    beta: float = 1e-4
    lambda_peak: float = 1.0
    peak_window: int = 16
    base_channels: int = 8
    leak: float = 0.2
    tie_posterior: bool = False

    def __post_init__(self):
        if self.context_len < 1 or self.horizon < 1:
            raise ValueError("context_len and horizon must be >= 1")
        if self.beta < 0 or self.lambda_peak < 0:
            raise ValueError("beta and lambda_peak must be >= 0")
        if not 1 <= self.peak_window <= self.chip_size:
            raise ValueError("peak_window must lie in [1, chip_size]")
        levels = math.log2(self.chip_size / 8) if self.chip_size >= 8 else -1
        if levels < 1 or not float(levels).is_integer():
            raise ValueError("chip_size must be 8 * 2**k with k >= 1")
        if min(self.z_dim, self.g_dim, self.rnn_layers, self.rnn_units, self.base_channels) < 1:
            raise ValueError("layer sizes must be positive")

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        base = dict(chip_size=128, z_dim=128, g_dim=128, rnn_units=128, context_len=8)
        base.update(kw)
        return cls(**base)

    @property
    def levels(self) -> int:
        return int(round(math.log2(self.chip_size / 8)))

    @property
    def seq_len(self) -> int:
        return self.context_len + self.horizon

    def channels(self, level: int) -> int:
        return 1 if level == 0 else self.base_channels * 2 ** (level - 1)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


@dataclass(frozen=True)
class LatentState:
    mu: np.ndarray
    log_sigma: np.ndarray
    z: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


@dataclass(frozen=True)
class LossBreakdown:
    recon_l2: float
    peak_l2: float
    kl: float
    total: float

    def as_row(self) -> list[float]:
        return [self.recon_l2, self.peak_l2, self.kl, self.total]


@dataclass
class StepOutput:
    predictions: list[Tensor]
    total: Tensor
    breakdown: LossBreakdown
    posterior: list[LatentState] = field(default_factory=list)
    prior: list[LatentState] = field(default_factory=list)


class NonFiniteLoss(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def new(name, shape, fan_in, scale=1.0):
        params[name] = Tensor(rng.normal(0.0, scale / math.sqrt(fan_in), shape), True, name)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), True, name)

    L = cfg.levels
    for lvl in range(1, L + 1):
        cin, cout = cfg.channels(lvl - 1), cfg.channels(lvl)
        new(f"enc.conv{lvl}.w", (cout, cin, 4, 4), cin * 16)
        zeros(f"enc.conv{lvl}.b", (cout,))
    flat = cfg.channels(L) * 64
    new("enc.fc.w", (flat, cfg.g_dim), flat)
    zeros("enc.fc.b", (cfg.g_dim,))

    new("dec.fc.w", (cfg.g_dim, flat), cfg.g_dim)
    zeros("dec.fc.b", (flat,))
    for lvl in range(L, 0, -1):
        cin, cout = 2 * cfg.channels(lvl), cfg.channels(lvl - 1)
        # transposed conv: each output pixel sees cin * 4 taps at stride 2
        new(f"dec.tconv{lvl}.w", (cin, cout, 4, 4), cin * 4)
        zeros(f"dec.tconv{lvl}.b", (cout,))

    def lstm_stack(prefix, n_in, units, layers, n_out):
        new(f"{prefix}.embed.w", (n_in, units), n_in)
        zeros(f"{prefix}.embed.b", (units,))
        for k in range(layers):
            new(f"{prefix}.lstm{k}.w", (2 * units, 4 * units), 2 * units)
            zeros(f"{prefix}.lstm{k}.b", (4 * units,))
        new(f"{prefix}.out.w", (units, n_out), units)
        zeros(f"{prefix}.out.b", (n_out,))

    lstm_stack("pred", cfg.g_dim + cfg.z_dim, cfg.rnn_units, cfg.rnn_layers, cfg.g_dim)
    units = cfg.latent_units or cfg.rnn_units
    lstm_stack("prior", cfg.g_dim, units, 1, 2 * cfg.z_dim)
    if not cfg.tie_posterior:
        lstm_stack("post", cfg.g_dim, units, 1, 2 * cfg.z_dim)
    return params


def as_params(arrays: dict, trainable: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v.data if isinstance(v, Tensor) else v), trainable, k) for k, v in arrays.items()}


def frozen(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Constant views of the parameters, for graph-free inference."""
    return {k: Tensor(p.data, False, k) for k, p in params.items()}


# ---------------------------------------------------------------------------
# network pieces


def encode(x: Tensor, params, cfg: ModelConfig):
    """``(N, H, W)`` chips -> ``(N, g_dim)`` embeddings and per-level skip maps."""
    n = x.shape[0]
    if x.shape[1:] != (cfg.chip_size, cfg.chip_size):
        raise ValueError(f"encode: expected chips of {cfg.chip_size}x{cfg.chip_size}, got {x.shape[1:]}")
    a = ad.reshape(x, (n, 1, cfg.chip_size, cfg.chip_size))
    skips = []
    for lvl in range(1, cfg.levels + 1):
        a = ad.conv2d(a, params[f"enc.conv{lvl}.w"], params[f"enc.conv{lvl}.b"], stride=2, padding=1)
        a = ad.leaky_relu(a, cfg.leak)
        skips.append(a)
    h = ad.linear(ad.reshape(a, (n, -1)), params["enc.fc.w"], params["enc.fc.b"])
    return ad.tanh(h), skips


def decode(g: Tensor, skips, params, cfg: ModelConfig) -> Tensor:
    """Embedding plus skip maps -> ``(N, H, W)`` chips in (0, 1)."""
    n = g.shape[0]
    if g.shape[1] != cfg.g_dim:
        raise ValueError(f"decode: expected embeddings of size {cfg.g_dim}, got {g.shape}")
    L = cfg.levels
    a = ad.linear(g, params["dec.fc.w"], params["dec.fc.b"])
    a = ad.leaky_relu(ad.reshape(a, (n, cfg.channels(L), 8, 8)), cfg.leak)
    for lvl in range(L, 0, -1):
        a = ad.concat([a, skips[lvl - 1]], axis=1)
        a = ad.conv_transpose2d(a, params[f"dec.tconv{lvl}.w"], params[f"dec.tconv{lvl}.b"], stride=2, padding=1)
        a = ad.leaky_relu(a, cfg.leak) if lvl > 1 else ad.sigmoid(a)
    return ad.reshape(a, (n, cfg.chip_size, cfg.chip_size))


class _Recurrent:
    """Embedding layer, stacked LSTM cells and a linear read-out."""

    def __init__(self, prefix: str, params, layers: int, batch: int):
        self.prefix = prefix
        self.params = params
        self.layers = layers
        units = params[f"{prefix}.embed.w"].shape[1]
        self.h = [Tensor(np.zeros((batch, units))) for _ in range(layers)]
        self.c = [Tensor(np.zeros((batch, units))) for _ in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        p, pre = self.params, self.prefix
        a = ad.linear(x, p[f"{pre}.embed.w"], p[f"{pre}.embed.b"])
        for k in range(self.layers):
            self.h[k], self.c[k] = ad.lstm_cell(a, self.h[k], self.c[k], p[f"{pre}.lstm{k}.w"], p[f"{pre}.lstm{k}.b"])
            a = self.h[k]
        return ad.linear(a, p[f"{pre}.out.w"], p[f"{pre}.out.b"])


def _gaussian(out: Tensor, z_dim: int):
    return out[:, :z_dim], out[:, z_dim:]


# ---------------------------------------------------------------------------
# losses


def kl_diag_gaussian(mu_q, sigma_q, mu_p, sigma_p) -> float:
    """KL(q || p) between diagonal Gaussians, summed over dimensions."""
    mu_q, sigma_q, mu_p, sigma_p = (np.asarray(v, dtype=np.float64) for v in (mu_q, sigma_q, mu_p, sigma_p))
    if np.any(sigma_q <= 0) or np.any(sigma_p <= 0):
        raise ValueError("standard deviations must be positive")
    terms = np.log(sigma_p / sigma_q) + (sigma_q**2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p**2) - 0.5
    return float(np.sum(terms))


def kl_term(mu_q: Tensor, ls_q: Tensor, mu_p: Tensor, ls_p: Tensor) -> Tensor:
    """Batch-mean KL from log-sigmas; exactly zero when q and p are the same tensors."""
    d = ad.sub(ls_p, ls_q)
    ratio = ad.exp(ad.mul(d, -2.0))
    spread = ad.mul(ad.square(ad.sub(mu_q, mu_p)), ad.exp(ad.mul(ls_p, -2.0)))
    per_dim = ad.add(ad.add(d, ad.mul(ad.add(ratio, spread), 0.5)), -0.5)
    return ad.mul(ad.sum(per_dim), 1.0 / mu_q.shape[0])


def peak_box(target, window: int) -> tuple[int, int]:
    """Top-left corner of the ``window`` box centred on the target's brightest pixel."""
    t = np.asarray(target)
    h, w = t.shape
    pr, pc = np.unravel_index(int(np.argmax(t)), t.shape)
    r0 = min(max(pr - window // 2, 0), h - window)
    c0 = min(max(pc - window // 2, 0), w - window)
    return int(r0), int(c0)


def peak_penalty(pred, target, peak_window: int) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if peak_window > min(target.shape):
        raise ValueError("peak_window larger than the chip")
    r0, c0 = peak_box(target, peak_window)
    box = (slice(r0, r0 + peak_window), slice(c0, c0 + peak_window))
    return float(np.mean((pred[box] - target[box]) ** 2))


def _peak_weights(targets: np.ndarray, window: int) -> np.ndarray:
    wts = np.zeros_like(targets)
    scale = 1.0 / (window * window * targets.shape[0])
    for b, t in enumerate(targets):
        r0, c0 = peak_box(t, window)
        wts[b, r0 : r0 + window, c0 : c0 + window] = scale
    return wts


# ---------------------------------------------------------------------------
# forward pass


def draw_noise(rng: np.random.Generator, steps: int, batch: int, z_dim: int) -> np.ndarray:
    return rng.standard_normal((steps, batch, z_dim))


def elbo_step(x, params, cfg: ModelConfig, mode: str = "train", noise=None, rng=None) -> StepOutput:
    """Run the model over a batch of sequences ``x`` of shape ``(B, T, H, W)``.

    ``train`` teacher-forces every step with posterior samples. ``rollout``
    does the same over the conditioning frames, then samples the prior and
    feeds predictions back. Loss terms cover every step whose ground truth is
    present in ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected (batch, time, H, W), got {x.shape}")
    if mode not in ("train", "rollout"):
        raise ValueError(f"unknown mode {mode!r}")
    B, T = x.shape[:2]
    steps = T - 1 if mode == "train" else cfg.seq_len - 1
    if mode == "train" and T < 2:
        raise ValueError("need at least two frames")
    if mode == "rollout" and T < cfg.context_len:
        raise ValueError(f"rollout needs {cfg.context_len} conditioning frames, got {T}")
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        noise = draw_noise(rng, steps, B, cfg.z_dim)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[0] < steps or noise.shape[1:] != (B, cfg.z_dim):
        raise ValueError(f"noise shape {noise.shape} does not cover {steps} steps of ({B}, {cfg.z_dim})")

    ctx = cfg.context_len
    observed = T if mode == "train" else min(T, ctx)
    h_obs, skips_obs = encode(Tensor(x[:, :observed].reshape(B * observed, *x.shape[2:])), params, cfg)
    h_obs = ad.reshape(h_obs, (B, observed, cfg.g_dim))
    skips_obs = [ad.reshape(s, (B, observed) + s.shape[1:]) for s in skips_obs]

    predictor = _Recurrent("pred", params, cfg.rnn_layers, B)
    prior = _Recurrent("prior", params, 1, B)
    posterior = None if cfg.tie_posterior else _Recurrent("post", params, 1, B)

    zero = Tensor(0.0)
    recon, peak, kl = zero, zero, zero
    preds, q_states, p_states = [], [], []
    h_prev = h_obs[:, 0]
    for t in range(1, steps + 1):
        teacher = mode == "train" or t < ctx
        skip_idx = min(t - 1, ctx - 1)
        skips = [s[:, skip_idx] for s in skips_obs]
        mu_p, ls_p = _gaussian(prior(h_prev), cfg.z_dim)
        if teacher:
            if posterior is None:
                mu_q, ls_q = mu_p, ls_p
            else:
                mu_q, ls_q = _gaussian(posterior(h_obs[:, t]), cfg.z_dim)
            mu_z, ls_z = mu_q, ls_q
        else:
            mu_z, ls_z = mu_p, ls_p
        z = ad.add(mu_z, ad.mul(ad.exp(ls_z), Tensor(noise[t - 1])))
        g = predictor(ad.concat([h_prev, z], axis=1))
        x_hat = decode(g, skips, params, cfg)
        preds.append(x_hat)
        p_states.append(LatentState(mu_p.data, ls_p.data, z.data if not teacher else None))
        if teacher:
            q_states.append(LatentState(mu_q.data, ls_q.data, z.data))
        if t < T:
            target = x[:, t]
            recon = ad.add(recon, ad.mean(ad.square(ad.sub(x_hat, Tensor(target)))))
            if cfg.lambda_peak > 0:
                wts = Tensor(_peak_weights(target, cfg.peak_window))
                peak = ad.add(peak, ad.sum(ad.mul(ad.square(ad.sub(x_hat, Tensor(target))), wts)))
            if teacher:
                kl = ad.add(kl, kl_term(mu_q, ls_q, mu_p, ls_p))
        if t < steps:
            if mode == "train" or t < ctx:
                h_prev = h_obs[:, t]
            else:
                h_prev, _ = encode(x_hat, params, cfg)

    total = ad.add(ad.add(recon, ad.mul(peak, cfg.lambda_peak)), ad.mul(kl, cfg.beta))
    breakdown = LossBreakdown(recon.item(), peak.item(), kl.item(), total.item())
    for name, value in zip(("recon_l2", "peak_l2", "kl"), (breakdown.recon_l2, breakdown.peak_l2, breakdown.kl)):
        if not math.isfinite(value):
            raise NonFiniteLoss(f"non-finite {name} term")
    return StepOutput(preds, total, breakdown, q_states, p_states)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 0
    checkpoint_every: int = 0


class TrainingDiverged(RuntimeError):
    def __init__(self, message, params, log):
        super().__init__(message)
        self.params = params
        self.log = log


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def train(sequences, cfg: ModelConfig, opt: TrainConfig = TrainConfig(), params=None, checkpoint_dir=None, progress=None):
    """Fit the model; returns ``(params, per-epoch LossBreakdown list)``.

    Sequences longer than ``context_len + horizon`` are cut to that length.
    """
    data = np.asarray(sequences, dtype=np.float64)
    if data.ndim != 4:
        raise ValueError(f"expected (n, time, H, W) sequences, got {data.shape}")
    if data.shape[1] < cfg.context_len + 1:
        raise ValueError(f"sequences need at least {cfg.context_len + 1} frames")
    data = data[:, : cfg.seq_len]
    rng = np.random.default_rng(opt.seed)
    model = init_params(cfg, int(rng.integers(2**63))) if params is None else as_params(params)
    adam = ad.Adam(model, lr=opt.lr)
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt:
        ckpt.mkdir(parents=True, exist_ok=True)
    good = _snapshot(model)
    log: list[LossBreakdown] = []
    n = data.shape[0]
    for epoch in range(opt.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, opt.batch_size):
            batch = data[order[start : start + opt.batch_size]]
            noise = draw_noise(rng, batch.shape[1] - 1, batch.shape[0], cfg.z_dim)
            adam.zero_grad()
            try:
                out = elbo_step(batch, model, cfg, "train", noise=noise)
            except NonFiniteLoss as exc:
                if ckpt:
                    ad.save_params(good, ckpt / "last_good.icew")
                raise TrainingDiverged(f"epoch {epoch + 1}: {exc}", good, log) from exc
            out.total.backward()
            adam.step()
            sums += np.array(out.breakdown.as_row()) * batch.shape[0]
        if not all(np.isfinite(p.data).all() for p in model.values()):
            if ckpt:
                ad.save_params(good, ckpt / "last_good.icew")
            raise TrainingDiverged(f"epoch {epoch + 1}: non-finite parameters", good, log)
        good = _snapshot(model)
        log.append(LossBreakdown(*(sums / n)))
        if progress:
            progress(epoch + 1, log[-1])
        if ckpt and opt.checkpoint_every and (epoch + 1) % opt.checkpoint_every == 0:
            ad.save_params(good, ckpt / f"epoch_{epoch + 1:04d}.icew")
    return good, log


def write_log(log, destination) -> None:
    with open(destination, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "recon_l2", "peak_l2", "kl", "total"])
        for i, row in enumerate(log, 1):
            w.writerow([i] + [repr(v) for v in row.as_row()])


def save_model(params, cfg: ModelConfig, path) -> None:
    """Checkpoint in ICEW plus a ``.json`` sidecar holding the config."""
    path = Path(path)
    ad.save_params(params, path)
    path.with_suffix(".json").write_text(json.dumps(cfg.to_json(), indent=2) + "\n")


def load_model(path):
    path = Path(path)
    cfg = ModelConfig.from_json(json.loads(path.with_suffix(".json").read_text()))
    return ad.load_params(path), cfg


# ---------------------------------------------------------------------------
# inference


def sequence_streams(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def predict_batch(contexts, params, cfg: ModelConfig, seed: int = 0, n_future: int | None = None) -> np.ndarray:
    """One sampled future per context sequence; stream ``k`` drives sequence ``k``.

    ``contexts`` is ``(N, context_len, H, W)``; returns ``(N, n_future, H, W)``.
    """
    ctx = np.asarray(contexts, dtype=np.float64)
    if ctx.ndim != 4 or ctx.shape[1] != cfg.context_len:
        raise ValueError(f"expected (N, {cfg.context_len}, H, W) contexts, got {ctx.shape}")
    n_future = cfg.horizon if n_future is None else n_future
    run_cfg = cfg if n_future == cfg.horizon else ModelConfig.from_json({**cfg.to_json(), "horizon": n_future})
    steps = run_cfg.seq_len - 1
    noise = np.stack([draw_noise(r, steps, 1, cfg.z_dim)[:, 0] for r in sequence_streams(seed, ctx.shape[0])], axis=1)
    out = elbo_step(ctx, frozen(as_params(params, False)), run_cfg, "rollout", noise=noise)
    future = out.predictions[cfg.context_len - 1 :]
    return np.stack([p.data for p in future], axis=1)


def predict(context, params, cfg: ModelConfig, n_samples: int = 1, seed: int = 0, n_future: int | None = None) -> np.ndarray:
    """``n_samples`` independent futures of one ``(context_len, H, W)`` context."""
    ctx = np.asarray(context, dtype=np.float64)
    if ctx.ndim != 3 or ctx.shape[0] != cfg.context_len:
        raise ValueError(f"context must hold {cfg.context_len} frames, got shape {ctx.shape}")
    return predict_batch(np.repeat(ctx[None], n_samples, axis=0), params, cfg, seed, n_future)
