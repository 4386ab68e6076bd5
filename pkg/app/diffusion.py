from __future__ import annotations

import hashlib
import json
import warnings
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from app.bezier import N_CONTROL, BezierLatent, decode
from app.conditions import ALPHA_BOUNDS, FlowCondition
from app.denoiser import WingUNet1D, build_denoiser
from app.errors import OptiwingError
from app.geometry import CANONICAL_SLICES, CANONICAL_SPAN_STATIONS, HALF_SPAN, Section, WingGeometry


HEADS = ("shape", "alpha", "eta")
N_STEPS = 1000
BETA_END = 0.02
BETA_START = {"shape": 1e-6, "alpha": 1e-4, "eta": 1e-4}
CHECKPOINT_VERSION = 1
STD_FLOOR = 1e-12


@dataclass(frozen=True)
class DiffusionSchedule:
    head: str
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def n_steps(self) -> int:
        return int(self.betas.shape[0])

    def to_dict(self) -> dict[str, Any]:
        return {
            "head": self.head,
            "n_steps": self.n_steps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


@dataclass(frozen=True)
class LossWeights:
    shape: float = 500.0
    alpha: float = 1.0
    eta: float = 9.0

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class DesignState:
    """Batched design: shape (B, slices, 3 * n_control), eta (B, slices), alpha (B, 1).

    Shape features per slice are control x, control y and log weights. Depending on
    context the values are physical (metres, degrees) or normalized.
    """

    shape: torch.Tensor
    eta: torch.Tensor
    alpha: torch.Tensor

    def __post_init__(self) -> None:
        batch = self.shape.shape[0]
        if (
            self.shape.ndim != 3
            or self.eta.shape != (batch, self.shape.shape[1])
            or self.alpha.shape != (batch, 1)
        ):
            raise OptiwingError(
                "invalid_design_state",
                f"Inconsistent design shapes {tuple(self.shape.shape)}, "
                f"{tuple(self.eta.shape)}, {tuple(self.alpha.shape)}.",
            )

    @property
    def batch_size(self) -> int:
        return int(self.shape.shape[0])

    @property
    def n_slices(self) -> int:
        return int(self.shape.shape[1])

    def head(self, name: str) -> torch.Tensor:
        return getattr(self, name)

    def map(self, fn: Callable[[str, torch.Tensor], torch.Tensor]) -> DesignState:
        return DesignState(**{name: fn(name, self.head(name)) for name in ("shape", "eta", "alpha")})

    def select(self, index: torch.Tensor | slice | list[int]) -> DesignState:
        return self.map(lambda _, value: value[index])

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(self.head(name)).all()) for name in HEADS)

    def latents(self, index: int = 0) -> list[BezierLatent]:
        return [
            BezierLatent.from_features(row)
            for row in self.shape[index].detach().cpu().double().numpy()
        ]

    @classmethod
    def stack(cls, states: Sequence[DesignState]) -> DesignState:
        return cls(
            shape=torch.cat([s.shape for s in states]),
            eta=torch.cat([s.eta for s in states]),
            alpha=torch.cat([s.alpha for s in states]),
        )

    @classmethod
    def from_designs(
        cls,
        latents: Sequence[Sequence[BezierLatent]],
        etas: Sequence[Sequence[float]],
        alphas: Sequence[float],
        dtype: torch.dtype = torch.float32,
    ) -> DesignState:
        shape = np.stack([[latent.to_features() for latent in design] for design in latents])
        return cls(
            shape=torch.as_tensor(shape, dtype=dtype),
            eta=torch.as_tensor(np.asarray(etas, dtype=float), dtype=dtype),
            alpha=torch.as_tensor(np.asarray(alphas, dtype=float), dtype=dtype).reshape(-1, 1),
        )


@dataclass(frozen=True)
class Conditioning:
    condition: FlowCondition
    z_a0: BezierLatent

    def __post_init__(self) -> None:
        violations = self.condition.bounds_violations()
        if violations:
            warnings.warn(
                f"Conditioning outside the sampled bounds for {', '.join(violations)}; extrapolating.",
                RuntimeWarning,
                stacklevel=3,
            )

    def features(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.condition.as_array()), self.z_a0.to_features()])


class Denoiser(Protocol):
    def __call__(
        self,
        shape: torch.Tensor,
        eta: torch.Tensor,
        alpha: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]: ...


def _standardize_stats(values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mean = values.mean(dim=0)
    std = values.std(dim=0, unbiased=False)
    std = torch.where(std < STD_FLOOR, torch.ones_like(std), std)
    return mean, std


@dataclass
class Normalizer:
    """Per-dimension standardization fitted on the training split.

    Alpha is mapped from degrees onto [0, 1] instead.
    """

    shape_mean: torch.Tensor
    shape_std: torch.Tensor
    eta_mean: torch.Tensor
    eta_std: torch.Tensor
    cond_mean: torch.Tensor
    cond_std: torch.Tensor
    alpha_scale: float = ALPHA_BOUNDS[1]

    @classmethod
    def fit(cls, states: DesignState, cond: torch.Tensor) -> Normalizer:
        shape_mean, shape_std = _standardize_stats(states.shape.double())
        eta_mean, eta_std = _standardize_stats(states.eta.double())
        cond_mean, cond_std = _standardize_stats(cond.double())
        return cls(shape_mean, shape_std, eta_mean, eta_std, cond_mean, cond_std)

    def normalize(self, states: DesignState) -> DesignState:
        dtype = states.shape.dtype
        return DesignState(
            shape=((states.shape - self.shape_mean) / self.shape_std).to(dtype),
            eta=((states.eta - self.eta_mean) / self.eta_std).to(dtype),
            alpha=(states.alpha / self.alpha_scale).to(dtype),
        )

    def denormalize(self, states: DesignState) -> DesignState:
        dtype = states.shape.dtype
        return DesignState(
            shape=(states.shape * self.shape_std + self.shape_mean).to(dtype),
            eta=(states.eta * self.eta_std + self.eta_mean).to(dtype),
            alpha=(states.alpha * self.alpha_scale).to(dtype),
        )

    def normalize_conditions(self, cond: torch.Tensor) -> torch.Tensor:
        return ((cond - self.cond_mean) / self.cond_std).to(cond.dtype)

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            name: getattr(self, name).tolist()
            for name in ("shape_mean", "shape_std", "eta_mean", "eta_std", "cond_mean", "cond_std")
        }
        payload["alpha_scale"] = self.alpha_scale
        return payload

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> Normalizer:
        tensors = {
            name: torch.tensor(payload[name], dtype=torch.float64)
            for name in ("shape_mean", "shape_std", "eta_mean", "eta_std", "cond_mean", "cond_std")
        }
        return cls(**tensors, alpha_scale=float(payload["alpha_scale"]))


def condition_features(conditionings: Sequence[Conditioning], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([c.features() for c in conditionings]), dtype=dtype)


def make_schedule(
    head: str,
    n_steps: int = N_STEPS,
    beta_start: float | None = None,
    beta_end: float = BETA_END,
) -> DiffusionSchedule:
    """Linear variance schedule for one output head."""
    if head not in BETA_START:
        raise OptiwingError("unknown_head", f"Unknown diffusion head {head!r}; expected one of {HEADS}.")
    if n_steps < 1:
        raise OptiwingError("invalid_schedule", "A schedule needs at least one step.")
    start = BETA_START[head] if beta_start is None else beta_start
    if start >= beta_end:
        raise OptiwingError(
            "invalid_schedule",
            f"beta_start ({start:g}) must be below beta_end ({beta_end:g}).",
        )
    betas = torch.linspace(start, beta_end, n_steps, dtype=torch.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(head=head, betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))


def make_schedules(
    n_steps: int = N_STEPS,
    beta_starts: dict[str, float] | None = None,
    beta_end: float = BETA_END,
) -> dict[str, DiffusionSchedule]:
    starts = {**BETA_START, **(beta_starts or {})}
    return {head: make_schedule(head, n_steps, starts[head], beta_end) for head in HEADS}


def schedule_hash(schedules: dict[str, DiffusionSchedule]) -> str:
    digest = hashlib.sha256()
    for head in HEADS:
        digest.update(head.encode("utf-8"))
        digest.update(schedules[head].betas.numpy().tobytes())
    return digest.hexdigest()


def _n_steps(schedules: dict[str, DiffusionSchedule]) -> int:
    steps = {schedule.n_steps for schedule in schedules.values()}
    if len(steps) != 1:
        raise OptiwingError("invalid_schedule", "All heads must share the same number of steps.")
    return steps.pop()


def _gather(values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = values[t.cpu()].to(device=like.device, dtype=like.dtype)
    return out.reshape(-1, *([1] * (like.ndim - 1)))


def _as_timesteps(t: int | torch.Tensor, batch: int, n_steps: int) -> torch.Tensor:
    steps = torch.full((batch,), t, dtype=torch.long) if isinstance(t, int) else t.long().reshape(-1)
    if steps.shape[0] != batch:
        raise OptiwingError("invalid_timestep", f"Expected {batch} timesteps, got {steps.shape[0]}.")
    if bool((steps < 0).any()) or bool((steps >= n_steps).any()):
        raise OptiwingError("invalid_timestep", f"Timesteps must lie in [0, {n_steps}).")
    return steps


def _randn_like(value: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
    return torch.randn(value.shape, generator=generator, dtype=value.dtype).to(value.device)


def forward_noise(
    x0: DesignState,
    t: int | torch.Tensor,
    schedules: dict[str, DiffusionSchedule],
    generator: torch.Generator | None = None,
    noise: DesignState | None = None,
) -> tuple[DesignState, DesignState]:
    """Sample q(x_t | x_0) per head; returns (x_t, eps)."""
    steps = _as_timesteps(t, x0.batch_size, _n_steps(schedules))
    eps = noise if noise is not None else x0.map(lambda _, value: _randn_like(value, generator))

    def noised(name: str, value: torch.Tensor) -> torch.Tensor:
        alpha_bar = _gather(schedules[name].alpha_bars, steps, value)
        return alpha_bar.sqrt() * value + (1.0 - alpha_bar).sqrt() * eps.head(name)

    return x0.map(noised), eps


def predict_x0(
    x_t: DesignState,
    t: int | torch.Tensor,
    eps: DesignState,
    schedules: dict[str, DiffusionSchedule],
) -> DesignState:
    steps = _as_timesteps(t, x_t.batch_size, _n_steps(schedules))

    def clean(name: str, value: torch.Tensor) -> torch.Tensor:
        alpha_bar = _gather(schedules[name].alpha_bars, steps, value)
        return (value - (1.0 - alpha_bar).sqrt() * eps.head(name)) / alpha_bar.sqrt()

    return x_t.map(clean)


def posterior_mean(
    x_t: DesignState,
    t: int | torch.Tensor,
    eps: DesignState,
    schedules: dict[str, DiffusionSchedule],
) -> DesignState:
    """Reverse-step mean from a noise prediction: (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)."""
    steps = _as_timesteps(t, x_t.batch_size, _n_steps(schedules))

    def mean(name: str, value: torch.Tensor) -> torch.Tensor:
        schedule = schedules[name]
        beta = _gather(schedule.betas, steps, value)
        alpha = _gather(schedule.alphas, steps, value)
        alpha_bar = _gather(schedule.alpha_bars, steps, value)
        return (value - beta / (1.0 - alpha_bar).sqrt() * eps.head(name)) / alpha.sqrt()

    return x_t.map(mean)


def q_posterior_mean(
    x0: DesignState,
    x_t: DesignState,
    t: int | torch.Tensor,
    schedules: dict[str, DiffusionSchedule],
) -> DesignState:
    """Mean of q(x_{t-1} | x_t, x_0) in its closed form over x_0 and x_t."""
    steps = _as_timesteps(t, x_t.batch_size, _n_steps(schedules))

    def mean(name: str, value: torch.Tensor) -> torch.Tensor:
        schedule = schedules[name]
        prev = torch.cat([torch.ones(1, dtype=torch.float64), schedule.alpha_bars[:-1]])
        beta = _gather(schedule.betas, steps, value)
        alpha = _gather(schedule.alphas, steps, value)
        alpha_bar = _gather(schedule.alpha_bars, steps, value)
        alpha_bar_prev = _gather(prev, steps, value)
        coef_x0 = alpha_bar_prev.sqrt() * beta / (1.0 - alpha_bar)
        coef_xt = alpha.sqrt() * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        return coef_x0 * x0.head(name) + coef_xt * value

    return x_t.map(mean)


def _predict(model: Denoiser, state: DesignState, steps: torch.Tensor, cond: torch.Tensor) -> DesignState:
    eps_shape, eps_eta, eps_alpha = model(state.shape, state.eta, state.alpha, steps, cond)
    return DesignState(shape=eps_shape, eta=eps_eta, alpha=eps_alpha)


def training_step(
    x0: DesignState,
    cond: torch.Tensor,
    model: Denoiser,
    schedules: dict[str, DiffusionSchedule],
    weights: LossWeights = LossWeights(),
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    noise: DesignState | None = None,
) -> torch.Tensor:
    """Weighted epsilon-prediction loss: sum over heads of weight * MSE(eps_hat, eps)."""
    if x0.batch_size == 0:
        raise OptiwingError("empty_batch", "Training step needs a non-empty batch.")
    n_steps = _n_steps(schedules)
    steps = (
        torch.randint(0, n_steps, (x0.batch_size,), generator=generator)
        if t is None
        else _as_timesteps(t, x0.batch_size, n_steps)
    )
    x_t, eps = forward_noise(x0, steps, schedules, generator=generator, noise=noise)
    eps_hat = _predict(model, x_t, steps.to(x0.shape.device), cond)
    terms = {name: F.mse_loss(eps_hat.head(name), eps.head(name)) for name in HEADS}
    loss = sum(getattr(weights, name) * terms[name] for name in HEADS)
    if not bool(torch.isfinite(loss)):
        raise OptiwingError(
            "non_finite_loss",
            "Training produced a non-finite loss.",
            status_code=500,
            details={name: float(value.detach()) for name, value in terms.items()},
        )
    return loss


@torch.no_grad()
def sample(
    cond: torch.Tensor,
    model: Denoiser,
    schedules: dict[str, DiffusionSchedule],
    generators: Sequence[torch.Generator],
    n_slices: int = CANONICAL_SLICES,
    n_control: int = N_CONTROL,
    normalizer: Normalizer | None = None,
) -> DesignState:
    """Ancestral sampling over every step with sigma_t^2 = beta_t.

    Each conditioning row draws from its own generator, so rows never share noise.
    """
    batch = cond.shape[0]
    if len(generators) != batch:
        raise OptiwingError("invalid_generators", f"Expected {batch} generators, got {len(generators)}.")
    n_steps = _n_steps(schedules)
    if isinstance(model, torch.nn.Module):
        model.eval()

    def draw(shape: tuple[int, ...]) -> torch.Tensor:
        return torch.stack(
            [torch.randn(shape, generator=g, dtype=cond.dtype) for g in generators]
        ).to(cond.device)

    def draw_state() -> DesignState:
        return DesignState(
            shape=draw((n_slices, 3 * n_control)),
            eta=draw((n_slices,)),
            alpha=draw((1,)),
        )

    x = draw_state()
    for step in range(n_steps - 1, -1, -1):
        steps = torch.full((batch,), step, dtype=torch.long, device=cond.device)
        eps_hat = _predict(model, x, steps, cond)
        mean = posterior_mean(x, steps.cpu(), eps_hat, schedules)
        if step > 0:
            z = draw_state()
            x = mean.map(
                lambda name, value: value + schedules[name].betas[step].sqrt().to(value.dtype) * z.head(name)
            )
        else:
            x = mean
        if not x.is_finite():
            raise OptiwingError(
                "non_finite_state",
                f"Sampling produced non-finite values at step {step}.",
                status_code=500,
            )
    x = x.map(lambda _, value: value.cpu())
    return normalizer.denormalize(x) if normalizer is not None else x


def assemble_wing(
    state: DesignState,
    index: int = 0,
    n_points: int = 192,
    decoder: Callable[[BezierLatent], Section] | None = None,
    span_stations: np.ndarray = CANONICAL_SPAN_STATIONS,
) -> tuple[WingGeometry, float]:
    """Decode each slice latent and add its dihedral shift in y; returns the wing and alpha (degrees)."""
    decoder = decoder or (lambda latent: decode(latent, n_points))
    eta = state.eta[index].detach().cpu().double().numpy()
    # Invalid sampled latents surface as decode failures (5xx).
    try:
        with np.errstate(over="raise"):
            latents = state.latents(index)
        slices = [decoder(latent).offset(dy=float(eta[k])) for k, latent in enumerate(latents)]
    except OptiwingError as exc:
        raise OptiwingError(
            "decode_failed",
            f"Could not decode design {index}: {exc.message}",
            status_code=500,
            details={"cause": exc.code},
        ) from exc
    except (ValueError, FloatingPointError) as exc:
        raise OptiwingError("decode_failed", f"Could not decode design {index}: {exc}", status_code=500) from exc
    wing = WingGeometry(slices=tuple(slices), span_stations=np.asarray(span_stations, dtype=float), half_span=HALF_SPAN)
    return wing, float(state.alpha[index, 0])


def make_condition_grid(
    base: FlowCondition,
    machs: Sequence[float],
    cl_cons: Sequence[float],
) -> list[FlowCondition]:
    """Mach x C_L sweep around a base condition, Mach-major."""
    return [replace(base, mach=float(mach), cl_con=float(cl)) for mach in machs for cl in cl_cons]


def seeded_generator(seed: int, *counter: int) -> torch.Generator:
    """Generator seeded from a per-run seed and a counter path."""
    state = np.random.SeedSequence([seed, *counter]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


@dataclass
class TrainingResult:
    losses: list[float]
    epoch: int
    optimizer_state: dict[str, Any] | None = None


def fit_denoiser(
    model: torch.nn.Module,
    states: DesignState,
    cond: torch.Tensor,
    schedules: dict[str, DiffusionSchedule],
    epochs: int,
    batch_size: int = 64,
    learning_rate: float = 1e-4,
    weights: LossWeights = LossWeights(),
    seed: int = 0,
    start_epoch: int = 0,
    optimizer_state: dict[str, Any] | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainingResult:
    """Adam training over normalized designs; epochs are numbered from `start_epoch`."""
    if states.batch_size == 0:
        raise OptiwingError("empty_training_set", "No designs to train on.")
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    if optimizer_state:
        optimizer.load_state_dict(optimizer_state)
    model.train()
    losses = []
    for epoch in range(start_epoch, start_epoch + epochs):
        generator = seeded_generator(seed, epoch)
        order = torch.randperm(states.batch_size, generator=generator)
        total = 0.0
        for start in range(0, states.batch_size, batch_size):
            index = order[start : start + batch_size]
            loss = training_step(
                states.select(index),
                cond[index],
                model,
                schedules,
                weights=weights,
                generator=generator,
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * index.shape[0]
        mean_loss = total / states.batch_size
        losses.append(mean_loss)
        if on_epoch:
            on_epoch(epoch, mean_loss)
    return TrainingResult(losses=losses, epoch=start_epoch + epochs, optimizer_state=optimizer.state_dict())


@dataclass
class Checkpoint:
    model: WingUNet1D
    normalizer: Normalizer
    schedules: dict[str, DiffusionSchedule]
    epoch: int
    hyperparameters: dict[str, Any]
    optimizer_state: dict[str, Any] | None = None
    losses: list[float] = field(default_factory=list)

    @property
    def schedule_hash(self) -> str:
        return schedule_hash(self.schedules)


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "hyperparameters": json.dumps(checkpoint.hyperparameters, sort_keys=True),
        "schedules": {head: schedule.to_dict() for head, schedule in checkpoint.schedules.items()},
        "schedule_hash": checkpoint.schedule_hash,
        "normalizer": checkpoint.normalizer.to_dict(),
        "model_state": checkpoint.model.state_dict(),
        "optimizer_state": checkpoint.optimizer_state,
        "epoch": checkpoint.epoch,
        "losses": list(checkpoint.losses),
    }
    torch.save(payload, path)


def load_checkpoint(path: Path, expected_hash: str | None = None) -> Checkpoint:
    if not path.exists():
        raise OptiwingError("checkpoint_not_found", f"No checkpoint at {path}.", status_code=404)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        version = payload["format_version"]
        hyperparameters = json.loads(payload["hyperparameters"])
        schedules = {
            head: make_schedule(head, spec["n_steps"], spec["beta_start"], spec["beta_end"])
            for head, spec in payload["schedules"].items()
        }
    except (OSError, RuntimeError, KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise OptiwingError("checkpoint_corrupt", f"Checkpoint {path} cannot be loaded.", status_code=422) from exc
    if version != CHECKPOINT_VERSION:
        raise OptiwingError(
            "checkpoint_version_unsupported",
            f"Checkpoint format {version} is not supported.",
            status_code=422,
        )
    actual = schedule_hash(schedules)
    for reference in (payload["schedule_hash"], expected_hash):
        if reference is not None and reference != actual:
            raise OptiwingError(
                "schedule_mismatch",
                "Checkpoint schedules do not match the expected schedule hash.",
                status_code=409,
                details={"expected": reference, "actual": actual},
            )
    model = build_denoiser(
        hyperparameters["preset"],
        n_slices=hyperparameters["n_slices"],
        n_control=hyperparameters["n_control"],
    )
    model.load_state_dict(payload["model_state"])
    model.eval()
    return Checkpoint(
        model=model,
        normalizer=Normalizer.from_dict(payload["normalizer"]),
        schedules=schedules,
        epoch=int(payload["epoch"]),
        hyperparameters=hyperparameters,
        optimizer_state=payload["optimizer_state"],
        losses=list(payload["losses"]),
    )
