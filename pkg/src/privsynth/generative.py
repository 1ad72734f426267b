"""Desk-scale diffusion model and GAN with non-private pretraining and DP fine-tuning.

Model checkpoint layout (little-endian)::

    b"PSGM"  magic
    u32      version (1)
    u8       kind (0 diffusion, 1 gan)
    u32 data_dim, u32 n_classes, u32 latent_dim, u32 T
    f64[T]   betas (T = 0 for a GAN)
    f64[d]   feature centre, f64[d] feature scale
    one nncore network (diffusion) or two (generator, discriminator)
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import nncore
from .accountant import BudgetLedger, Charge
from .data import LabeledDataset
from .dpcore import ClipConfig, NoiseSource, sanitize_batch


class ModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2) -> DiffusionSchedule:
    """Linear beta schedule; ``alpha_bars[t-1]`` is the product of ``1 - beta`` up to step t."""
    if T < 1 or not 0.0 < beta_start <= beta_end < 1.0:
        raise ModelError("need T >= 1 and 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return schedule_from_betas(betas)


def schedule_from_betas(betas) -> DiffusionSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size == 0 or np.any(betas <= 0) or np.any(betas >= 1):
        raise ModelError("betas must lie in (0, 1)")
    abar = np.empty_like(betas)
    run = 1.0
    for i, b in enumerate(betas):
        run = run * (1.0 - b)
        abar[i] = run
    return DiffusionSchedule(betas, abar)


def forward_noise(x0: np.ndarray, t, e: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Closed-form ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) e``; ``t`` is 1-based."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ModelError(f"timestep outside [1, {sched.T}]")
    a = sched.alpha_bars[t - 1]
    if np.ndim(a):
        a = a.reshape(-1, *([1] * (np.ndim(x0) - 1)))
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * e


@dataclass(frozen=True)
class GenerativeModel:
    kind: str
    data_dim: int
    denoiser: nncore.DenseNet | None = None
    gen: nncore.DenseNet | None = None
    dis: nncore.DenseNet | None = None
    schedule: DiffusionSchedule | None = None
    n_classes: int = 0
    latent_dim: int = 0
    center: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "diffusion":
            if self.denoiser is None or self.schedule is None:
                raise ModelError("a diffusion model needs a denoiser and a schedule")
            if self.denoiser.in_dim != self.data_dim + 1 + self.n_classes:
                raise ModelError("denoiser input width must be data_dim + 1 + n_classes")
        elif self.kind == "gan":
            if self.gen is None or self.dis is None:
                raise ModelError("a GAN needs both a generator and a discriminator")
            if self.gen.in_dim != self.latent_dim + self.n_classes or self.gen.out_dim != self.data_dim:
                raise ModelError("generator shape does not match latent/data dims")
            if self.dis.in_dim != self.data_dim + self.n_classes or self.dis.out_dim != 1:
                raise ModelError("discriminator shape does not match data dim")
        else:
            raise ModelError(f"unknown model kind {self.kind!r}")
        center = np.zeros(self.data_dim) if self.center is None else np.asarray(self.center, float)
        scale = np.ones(self.data_dim) if self.scale is None else np.asarray(self.scale, float)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", scale)

    def normalize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.center) / self.scale

    def denormalize(self, Z: np.ndarray) -> np.ndarray:
        return Z * self.scale + self.center

    def onehot(self, labels, n: int) -> np.ndarray | None:
        if not self.n_classes:
            return None
        if labels is None:
            raise ModelError("a conditional model needs category labels")
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise ModelError("one label per row is required")
        if np.any(labels < 0) or np.any(labels >= self.n_classes):
            raise ModelError("unknown category label")
        return np.eye(self.n_classes)[labels]


def make_diffusion_model(
    data_dim: int,
    hidden: int = 64,
    n_classes: int = 0,
    schedule: DiffusionSchedule | None = None,
    seed: int = 0,
    center=None,
    scale=None,
) -> GenerativeModel:
    rng = np.random.default_rng(seed)
    sizes = [data_dim + 1 + n_classes, hidden, hidden, data_dim]
    net = nncore.init_dense(sizes, ["relu", "relu", "identity"], rng)
    return GenerativeModel(
        "diffusion", data_dim, denoiser=net, schedule=schedule or make_schedule(),
        n_classes=n_classes, center=center, scale=scale,
    )


def make_gan_model(
    data_dim: int,
    latent_dim: int = 8,
    hidden: int = 64,
    n_classes: int = 0,
    seed: int = 0,
    center=None,
    scale=None,
) -> GenerativeModel:
    rng = np.random.default_rng(seed)
    gen = nncore.init_dense([latent_dim + n_classes, hidden, data_dim], ["relu", "identity"], rng)
    dis = nncore.init_dense([data_dim + n_classes, hidden, 1], ["tanh", "identity"], rng)
    return GenerativeModel(
        "gan", data_dim, gen=gen, dis=dis, n_classes=n_classes, latent_dim=latent_dim,
        center=center, scale=scale,
    )


def fit_normalizer(data: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    center = data.features.mean(axis=0)
    scale = data.features.std(axis=0)
    scale[scale == 0] = 1.0
    return center, scale


# --- objectives ------------------------------------------------------------


def _denoiser_batch(model: GenerativeModel, xt, t, labels, targets=None) -> nncore.Batch:
    n = xt.shape[0]
    tt = (np.asarray(t, dtype=np.float64) / model.schedule.T).reshape(n, 1)
    oh = model.onehot(labels, n)
    aux = tt if oh is None else np.hstack([tt, oh])
    return nncore.Batch(xt, targets, aux)


def draw_diffusion_noise(model: GenerativeModel, n: int, rng: np.random.Generator):
    t = rng.integers(1, model.schedule.T + 1, size=n)
    e = rng.standard_normal((n, model.data_dim))
    return t, e


def dm_per_example_loss_grads(
    model: GenerativeModel,
    x0: np.ndarray,
    rng: np.random.Generator | None = None,
    labels=None,
    t=None,
    e=None,
    normalized: bool = False,
):
    """Per-example gradients and losses of ``||e - e_theta(x_t, t)||^2``.

    ``t`` (1-based) and ``e`` are drawn from ``rng`` unless given. Returns
    ``(grads, losses)`` with ``grads`` of shape ``(b, n_params)``.
    """
    if model.kind != "diffusion":
        raise ModelError("dm_per_example_loss_grads needs a diffusion model")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if not normalized:
        x0 = model.normalize(x0)
    n = x0.shape[0]
    if t is None or e is None:
        if rng is None:
            raise ModelError("pass rng or both t and e")
        t_draw, e_draw = draw_diffusion_noise(model, n, rng)
        t = t_draw if t is None else t
        e = e_draw if e is None else e
    t = np.asarray(t, dtype=np.int64).reshape(n)
    xt = forward_noise(x0, t, e, model.schedule)
    batch = _denoiser_batch(model, xt, t, labels, targets=e)
    acts_out = nncore.forward(model.denoiser, batch)
    losses, _ = nncore.loss_and_delta(acts_out, e, "mse")
    grads = nncore.per_example_grads(model.denoiser, batch, "mse")
    return grads, losses


def _gen_forward(model: GenerativeModel, z, labels):
    oh = model.onehot(labels, z.shape[0])
    return nncore.Batch(z, None, oh)


def gan_step_grads(model: GenerativeModel, real: np.ndarray, z: np.ndarray, labels=None, normalized: bool = False):
    """Discriminator per-example gradients and the generator's mean gradient.

    Row ``i`` of the discriminator gradients covers the pair (real row i,
    fake from z row i), so removing a real record removes one clipped row.
    The generator gradient uses the non-saturating loss and sees real data
    only through the discriminator. Returns ``(dis_grads, gen_grad)``.
    """
    if model.kind != "gan":
        raise ModelError("gan_step_grads needs a GAN")
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    if not normalized:
        real = model.normalize(real)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n = real.shape[0]
    if z.shape[0] != n:
        raise ModelError("need one latent vector per real row")
    oh = model.onehot(labels, n)
    gen_batch = _gen_forward(model, z, labels)
    fake = nncore.forward(model.gen, gen_batch)

    real_b = nncore.Batch(real, np.ones(n), oh)
    fake_b = nncore.Batch(fake, np.zeros(n), oh)
    dis_grads = nncore.per_example_grads(model.dis, real_b, "gan_d") + nncore.per_example_grads(
        model.dis, fake_b, "gan_d"
    )

    logits = nncore.forward(model.dis, fake_b)
    _, dlogit = nncore.loss_and_delta(logits, None, "gan_g")
    _, dx = nncore.vjp(model.dis, fake_b.design, dlogit)
    dfake = dx[:, : model.data_dim]
    gen_pe, _ = nncore.vjp(model.gen, gen_batch.design, dfake)
    return dis_grads, gen_pe.mean(axis=0)


def gan_losses(model: GenerativeModel, real, z, labels=None, normalized: bool = False):
    """Mean discriminator and generator losses (for logging and tests)."""
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    if not normalized:
        real = model.normalize(real)
    n = real.shape[0]
    oh = model.onehot(labels, n)
    fake = nncore.forward(model.gen, _gen_forward(model, z, labels))
    ld = nncore.per_example_losses(model.dis, nncore.Batch(real, np.ones(n), oh), "gan_d")
    ld = ld + nncore.per_example_losses(model.dis, nncore.Batch(fake, np.zeros(n), oh), "gan_d")
    lg = nncore.per_example_losses(model.dis, nncore.Batch(fake, None, oh), "gan_g")
    return ld, lg


def gen_update_due(step: int, update_ratio: int) -> bool:
    """True when discriminator step ``step`` (0-based) is followed by a generator update."""
    return (step + 1) % update_ratio == 0


# --- training --------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 64
    seed: int = 0
    update_ratio: int = 5
    gen_lr: float | None = None


@dataclass(frozen=True)
class FineTuneConfig:
    clip_norm: float = 1.0
    batch_size: int = 64
    eta: float = 0.05
    sigma1: float = 1.0
    max_steps: int = 100
    sample_rate: float | None = None
    update_ratio: int = 5
    gen_eta: float | None = None

    def __post_init__(self):
        if not (self.clip_norm > 0 and self.batch_size > 0 and self.eta > 0):
            raise ModelError("clip_norm, batch_size and eta must be positive")
        if self.sigma1 < 0 or self.max_steps < 0:
            raise ModelError("sigma1 and max_steps must be nonnegative")
        if self.sample_rate is not None and not 0 < self.sample_rate <= 1:
            raise ModelError("sample_rate must lie in (0, 1]")
        if self.update_ratio < 1:
            raise ModelError("update_ratio must be >= 1")

    def rate(self, n: int) -> float:
        q = self.sample_rate if self.sample_rate is not None else self.batch_size / n
        if not 0 < q <= 1:
            raise ModelError(f"sample rate {q} outside (0, 1]; batch larger than the dataset?")
        return q


def _apply(model: GenerativeModel, which: str, grad: np.ndarray, eta: float) -> GenerativeModel:
    net = getattr(model, which)
    return replace(model, **{which: nncore.sgd_step(net, grad, eta)})


def pretrain(
    model: GenerativeModel,
    data: LabeledDataset,
    cfg: PretrainConfig = PretrainConfig(),
    history: list | None = None,
) -> GenerativeModel:
    """Non-private minibatch SGD on the public (selected) data; no budget is charged."""
    if len(data) == 0:
        import warnings

        warnings.warn("empty pretraining set; pretraining skipped", stacklevel=2)
        return model
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    X = model.normalize(data.features)
    labels = data.labels if model.n_classes else None
    n = len(data)
    gen_lr = cfg.lr if cfg.gen_lr is None else cfg.gen_lr
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            lab = None if labels is None else labels[idx]
            if model.kind == "diffusion":
                g, losses = dm_per_example_loss_grads(model, X[idx], rng, lab, normalized=True)
                model = _apply(model, "denoiser", g.mean(axis=0), cfg.lr)
                if history is not None:
                    history.append(float(losses.mean()))
            else:
                z = rng.standard_normal((len(idx), model.latent_dim))
                dg, gg = gan_step_grads(model, X[idx], z, lab, normalized=True)
                model = _apply(model, "dis", dg.mean(axis=0), cfg.lr)
                if gen_update_due(step, cfg.update_ratio):
                    z = rng.standard_normal((len(idx), model.latent_dim))
                    _, gg = gan_step_grads(model, X[idx], z, lab, normalized=True)
                    model = _apply(model, "gen", gg, gen_lr)
                if history is not None:
                    history.append(float(gan_losses(model, X[idx], z, lab, normalized=True)[0].mean()))
            step += 1
    return model


def finetune_dp(
    model: GenerativeModel,
    sensitive: LabeledDataset,
    cfg: FineTuneConfig,
    noise: NoiseSource,
    ledger: BudgetLedger | None = None,
    history: list | None = None,
) -> GenerativeModel:
    """DP-SGD fine-tuning for exactly ``cfg.max_steps`` iterations.

    Each iteration Poisson-samples the sensitive set at rate ``q``, clips the
    per-example gradients to ``C``, averages over the expected batch size,
    adds ``N(0, (sigma1 C / b)^2)`` noise and takes one SGD step. Every
    iteration charges one SGM step to ``ledger``; when the ledger has a target
    the whole run is checked before the first step and
    :class:`~privsynth.accountant.BudgetExceededError` is raised if it does
    not fit. For a GAN only the discriminator sees sensitive data and is
    sanitised; the generator is updated every ``update_ratio`` steps from
    discriminator feedback alone.
    """
    n = len(sensitive)
    if cfg.max_steps == 0:
        return model
    if n == 0:
        raise ModelError("sensitive dataset is empty")
    q = cfg.rate(n)
    if ledger is not None:
        if cfg.sigma1 <= 0:
            raise ModelError("a ledger-tracked run needs sigma1 > 0")
        ledger.check([Charge("sgm", float(cfg.sigma1), float(q))] * cfg.max_steps)
    denom = q * n
    clip = ClipConfig(cfg.clip_norm)
    sample_rng = noise.spawn(0).rng
    loss_rng = noise.spawn(1).rng
    grad_noise = noise.spawn(2)
    X = model.normalize(sensitive.features)
    labels = sensitive.labels if model.n_classes else None
    gen_eta = cfg.eta if cfg.gen_eta is None else cfg.gen_eta

    for step in range(cfg.max_steps):
        idx = np.flatnonzero(sample_rng.random(n) < q)
        lab = None if labels is None else labels[idx]
        if model.kind == "diffusion":
            if len(idx):
                g, losses = dm_per_example_loss_grads(model, X[idx], loss_rng, lab, normalized=True)
            else:
                g, losses = np.zeros((0, model.denoiser.n_params)), np.zeros(0)
            g_hat = sanitize_batch(g, clip, cfg.sigma1, grad_noise, denominator=denom, dim=model.denoiser.n_params)
            model = _apply(model, "denoiser", g_hat, cfg.eta)
            if history is not None:
                history.append(float(losses.mean()) if len(losses) else float("nan"))
        else:
            z = loss_rng.standard_normal((len(idx), model.latent_dim))
            if len(idx):
                dg, _ = gan_step_grads(model, X[idx], z, lab, normalized=True)
            else:
                dg = np.zeros((0, model.dis.n_params))
            g_hat = sanitize_batch(dg, clip, cfg.sigma1, grad_noise, denominator=denom, dim=model.dis.n_params)
            model = _apply(model, "dis", g_hat, cfg.eta)
            if gen_update_due(step, cfg.update_ratio):
                m = max(int(round(denom)), 1)
                zg = loss_rng.standard_normal((m, model.latent_dim))
                glab = None
                if model.n_classes:
                    glab = loss_rng.integers(0, model.n_classes, size=m)
                model = _apply(model, "gen", _generator_grad(model, zg, glab), gen_eta)
        if ledger is not None:
            ledger.charge_sgm(q, cfg.sigma1)
    return model


def _generator_grad(model: GenerativeModel, z, labels) -> np.ndarray:
    """Generator gradient of the non-saturating loss; touches no real data."""
    gb = _gen_forward(model, z, labels)
    fake = nncore.forward(model.gen, gb)
    fb = nncore.Batch(fake, None, model.onehot(labels, z.shape[0]))
    _, dlogit = nncore.loss_and_delta(nncore.forward(model.dis, fb), None, "gan_g")
    _, dx = nncore.vjp(model.dis, fb.design, dlogit)
    pe, _ = nncore.vjp(model.gen, gb.design, dx[:, : model.data_dim])
    return pe.mean(axis=0)


# --- sampling --------------------------------------------------------------


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Increasing 1-based sub-schedule of ``steps`` timesteps ending at ``T``."""
    if not 1 <= steps <= T:
        raise ModelError(f"sampler steps must lie in [1, {T}]")
    return np.unique(np.round(np.linspace(1, T, steps)).astype(np.int64))


def ddim_sample(
    eps_fn: Callable[[np.ndarray, int], np.ndarray],
    sched: DiffusionSchedule,
    x_T: np.ndarray,
    timesteps: np.ndarray,
) -> np.ndarray:
    """Deterministic DDIM (eta = 0) from ``x_T`` down through ``timesteps``."""
    x = np.array(x_T, dtype=np.float64)
    ts = list(timesteps)[::-1]
    for i, t in enumerate(ts):
        a_t = sched.alpha_bars[t - 1]
        a_prev = sched.alpha_bars[ts[i + 1] - 1] if i + 1 < len(ts) else 1.0
        e = eps_fn(x, int(t))
        x0 = (x - np.sqrt(1.0 - a_t) * e) / np.sqrt(a_t)
        x = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * e
    return x


def synthesize(
    model: GenerativeModel,
    n: int,
    labels=None,
    steps: int = 50,
    noise: NoiseSource | None = None,
) -> LabeledDataset:
    """Draw ``n`` synthetic rows. Conditional models cycle through categories when no labels are given."""
    if noise is None:
        noise = NoiseSource(0)
    d = model.data_dim
    if model.n_classes:
        labels = np.arange(n) % model.n_classes if labels is None else np.asarray(labels, dtype=np.int64)
        model.onehot(labels, n)  # validates
    elif labels is not None:
        raise ModelError("unconditional model cannot take labels")
    if n == 0:
        return LabeledDataset(
            np.zeros((0, d)),
            None if labels is None else np.zeros(0, dtype=np.int64),
            split="train",
            n_classes=model.n_classes or None,
        )
    if model.kind == "diffusion":
        xT = noise.normal((n, d))

        def eps_fn(x, t):
            return nncore.forward(model.denoiser, _denoiser_batch(model, x, np.full(n, t), labels))

        Z = ddim_sample(eps_fn, model.schedule, xT, ddim_timesteps(model.schedule.T, steps))
    else:
        z = noise.normal((n, model.latent_dim))
        Z = nncore.forward(model.gen, _gen_forward(model, z, labels))
    return LabeledDataset(
        model.denormalize(Z), labels, None, "train", model.n_classes or None, None
    )


# --- checkpoints -----------------------------------------------------------

_MAGIC = b"PSGM"
_VERSION = 1


def model_to_bytes(model: GenerativeModel) -> bytes:
    buf = io.BytesIO()
    T = model.schedule.T if model.schedule is not None else 0
    buf.write(_MAGIC)
    buf.write(struct.pack("<IB", _VERSION, 0 if model.kind == "diffusion" else 1))
    buf.write(struct.pack("<IIII", model.data_dim, model.n_classes, model.latent_dim, T))
    if T:
        buf.write(model.schedule.betas.astype("<f8").tobytes())
    buf.write(model.center.astype("<f8").tobytes())
    buf.write(model.scale.astype("<f8").tobytes())
    if model.kind == "diffusion":
        nncore.write_net(buf, model.denoiser)
    else:
        nncore.write_net(buf, model.gen)
        nncore.write_net(buf, model.dis)
    return buf.getvalue()


def model_from_bytes(raw: bytes) -> GenerativeModel:
    fh = io.BytesIO(raw)
    if fh.read(4) != _MAGIC:
        raise ModelError("not a model checkpoint")
    head = fh.read(5 + 16)
    if len(head) != 21:
        raise ModelError("truncated model header")
    version, kind = struct.unpack("<IB", head[:5])
    if version != _VERSION:
        raise ModelError(f"unsupported model checkpoint version {version}")
    d, c, latent, T = struct.unpack("<IIII", head[5:])

    def f64(k):
        b = fh.read(8 * k)
        if len(b) != 8 * k:
            raise ModelError("truncated model checkpoint")
        return np.frombuffer(b, dtype="<f8").astype(np.float64)

    betas = f64(T) if T else None
    center, scale = f64(d), f64(d)
    try:
        if kind == 0:
            net = nncore.read_net(fh)
            return GenerativeModel("diffusion", d, denoiser=net, schedule=schedule_from_betas(betas),
                                   n_classes=c, center=center, scale=scale)
        gen = nncore.read_net(fh)
        dis = nncore.read_net(fh)
    except nncore.NetError as exc:
        raise ModelError(str(exc)) from exc
    return GenerativeModel("gan", d, gen=gen, dis=dis, n_classes=c, latent_dim=latent, center=center, scale=scale)


def save_model(path, model: GenerativeModel) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> GenerativeModel:
    return model_from_bytes(Path(path).read_bytes())
