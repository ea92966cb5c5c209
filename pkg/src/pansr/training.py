"""L1 loss, Adam, cosine-annealed learning rate and the training loop."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .checkpoint import Checkpoint
from .data import DatasetManifest, sample_batch
from .exceptions import ConfigError, NonFiniteError, ShapeError
from .imaging import evaluate_pair, quantize
from .nn import PAN, ModelConfig, build_pan
from .tensor import Tensor, backward, check_same_dtype, record


@dataclass
class TrainConfig:
    max_lr: float = 1e-3
    min_lr: float = 1e-7
    cosine_period: int = 250_000
    restarts: bool = True
    batch_size: int = 32
    hr_patch: int = 256
    total_iters: int = 250_000
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True

    def validate(self):
        if not 0 <= self.min_lr < self.max_lr:
            raise ConfigError(f"need 0 <= min_lr < max_lr, got {self.min_lr}, {self.max_lr}")
        if self.cosine_period < 1:
            raise ConfigError("cosine_period must be >= 1")
        if self.batch_size < 1 or self.hr_patch < 1:
            raise ConfigError("batch_size and hr_patch must be positive")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at exact ties is zero."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    check_same_dtype("l1_loss", pred, target)
    diff = pred.data - target.data
    count = diff.size
    out = np.abs(diff).mean(dtype=diff.dtype).reshape(1, 1, 1, 1)

    def grad(g):
        d = np.sign(diff) * (g.reshape(-1)[0] / count)
        return d, -d

    return record("l1_loss", out, [pred, target], grad)


def cosine_lr(iteration: int, config: TrainConfig) -> float:
    """Cosine annealing from ``max_lr`` to ``min_lr`` over each period.

    With ``restarts`` the schedule jumps back to ``max_lr`` every period;
    otherwise it stays at ``min_lr`` after the first one.
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    period = config.cosine_period
    t = iteration % period if config.restarts else min(iteration, period)
    return config.min_lr + 0.5 * (config.max_lr - config.min_lr) * (1 + math.cos(math.pi * t / period))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()},
                   0, beta1, beta2, eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, Optional[np.ndarray]],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        if name not in state.m:
            raise KeyError(f"Adam state has no moments for {name!r}")
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"Adam moment shape {m.shape} != parameter {p.shape} for {name!r}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        dt = p.dtype.type
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        m_hat = m / dt(corr1)
        v_hat = v / dt(corr2)
        p -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
    return state


@dataclass
class LogRow:
    iteration: int
    lr: float
    loss: float


class Trainer:
    """Iteration-based training: sample, forward, L1, backward, Adam at the cosine rate."""

    def __init__(self, model: PAN, manifest: DatasetManifest, config: TrainConfig,
                 eval_pair=None):
        config.validate()
        self.model = model
        self.manifest = manifest
        self.config = config
        self.eval_pair = eval_pair
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        self.adam = AdamState.zeros_like(model.state_dict(), config.beta1, config.beta2,
                                         config.eps)
        self.iteration = 0
        self.history: list[LogRow] = []
        self.eval_history: list[tuple[int, float, float]] = []

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, manifest: DatasetManifest,
                        config: TrainConfig | None = None, eval_pair=None) -> "Trainer":
        model_config = ModelConfig.from_dict(ckpt.model_config)
        config = config or TrainConfig.from_dict(ckpt.train_config)
        model = build_pan(model_config, seed=config.seed)
        model.load_state_dict(ckpt.params)
        trainer = cls(model, manifest, config, eval_pair)
        trainer.iteration = ckpt.iteration
        if ckpt.adam_m:
            trainer.adam.m = {k: v.copy() for k, v in ckpt.adam_m.items()}
            trainer.adam.v = {k: v.copy() for k, v in ckpt.adam_v.items()}
        trainer.adam.step = ckpt.adam_step
        if ckpt.rng_state is not None:
            trainer.rng.bit_generator.state = ckpt.rng_state
        return trainer

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params=self.model.state_dict(),
            adam_m={k: v.copy() for k, v in self.adam.m.items()},
            adam_v={k: v.copy() for k, v in self.adam.v.items()},
            iteration=self.iteration,
            adam_step=self.adam.step,
            rng_state=self.rng.bit_generator.state,
            model_config=self.model.config.to_dict(),
            train_config=self.config.to_dict(),
        )

    def step(self) -> LogRow:
        lr = cosine_lr(self.iteration, self.config)
        batch = sample_batch(self.manifest, self.rng, self.config)
        pred = self.model(batch.lr)
        loss = l1_loss(pred, batch.hr)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(
                f"non-finite loss at iteration {self.iteration}", batch.indices
            )
        backward(loss)
        params = dict(self.model.named_parameters())
        grads = {k: p.grad for k, p in params.items()}
        adam_step({k: p.data for k, p in params.items()}, grads, self.adam, lr)
        self.model.zero_grad()
        row = LogRow(self.iteration, lr, value)
        self.history.append(row)
        self.iteration += 1
        if self.config.eval_every and self.iteration % self.config.eval_every == 0:
            self.evaluate()
        return row

    def evaluate(self):
        if self.eval_pair is None:
            return None
        lr_img, hr_img = self.eval_pair
        sr = super_resolve(self.model, lr_img)
        result = evaluate_pair(quantize(sr), hr_img, shave=self.model.scale)
        self.eval_history.append((self.iteration, *result))
        return result

    def run(self, until: int | None = None) -> Iterator[Checkpoint]:
        """Train to ``until`` (default ``total_iters``), yielding periodic checkpoints and the last."""
        until = self.config.total_iters if until is None else until
        every = self.config.checkpoint_every
        while self.iteration < until:
            self.step()
            if every and self.iteration % every == 0 and self.iteration < until:
                yield self.checkpoint()
        yield self.checkpoint()


def train(model: PAN, manifest: DatasetManifest, config: TrainConfig,
          eval_pair=None) -> Iterator[Checkpoint]:
    """Checkpoint stream of a fresh run; see :class:`Trainer` for finer control."""
    return Trainer(model, manifest, config, eval_pair).run()


def super_resolve(model: PAN, lr_image) -> np.ndarray:
    """(H, W, 3) image in -> (sH, sW, 3) float image out, not clamped."""
    from .imaging import to_float

    x = to_float(lr_image, model.dtype).transpose(2, 0, 1)[None]
    return model.predict(np.ascontiguousarray(x))[0].transpose(1, 2, 0)


def format_loss_csv(rows: list[LogRow]) -> str:
    lines = ["iter,lr,loss"]
    lines += [f"{r.iteration},{r.lr!r},{r.loss!r}" for r in rows]
    return "\n".join(lines) + "\n"


__all__ = [
    "AdamState",
    "LogRow",
    "TrainConfig",
    "Trainer",
    "adam_step",
    "cosine_lr",
    "format_loss_csv",
    "l1_loss",
    "super_resolve",
    "train",
]
