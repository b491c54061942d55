"""Adam optimization, the training loop with early stopping, and the
evaluation metrics (MAE, RMSE, MAPE, SMAPE)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import WindowSample
from .graphs import Graph
from .model import ModelConfig, ModelParams, model_forward, sample_loss
from .tensor import Tape, scale

MAPE_EPS = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None   # max global gradient norm; off by default

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.max_epochs, self.patience) <= 0:
            raise ValueError("learning rate, batch size, epochs, patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError(
                f"patience {self.patience} exceeds max_epochs {self.max_epochs}"
            )


class Adam:
    """Standard Adam with bias correction over a list of (name, tensor)."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.named_params:
            if p.grad is not None:
                total += float(np.sum(p.grad**2))
        return float(np.sqrt(total))

    def clip_gradients(self, max_norm: float) -> None:
        norm = self.grad_norm()
        if norm > max_norm > 0:
            factor = max_norm / norm
            for _, p in self.named_params:
                if p.grad is not None:
                    p.grad *= factor

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} mismatches '{name}' {p.data.shape}")
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name].copy()
            out[f"optim.v.{name}"] = self.v[name].copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = np.array(arrays[f"optim.m.{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"optim.v.{name}"], dtype=np.float64)
        self.step_count = int(step_count)


def adam_step(params, grads, state: Adam, lr: float) -> None:
    """Apply one update to ``params`` given explicit ``grads`` (name -> array)."""
    for name, p in state.named_params:
        p.grad = grads.get(name)
    state.step(lr)


# ---------------------------------------------------------------------------
# metrics


def evaluate(preds: np.ndarray, targets: np.ndarray, eps: float = MAPE_EPS) -> dict[str, float]:
    """MAE, RMSE, MAPE (percent), SMAPE (in [0, 2]) on denormalized arrays."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {targets.shape}")
    if preds.size == 0:
        raise ValueError("empty inputs")
    err = preds - targets
    abs_err = np.abs(err)
    mae = float(abs_err.mean())
    rmse = float(np.sqrt(np.mean(err**2)))
    mape_mask = np.abs(targets) > eps
    mape = float(100.0 * np.mean(abs_err[mape_mask] / np.abs(targets[mape_mask]))) \
        if mape_mask.any() else 0.0
    denom = np.abs(targets) + np.abs(preds)
    smape_mask = denom > eps
    smape = float(np.mean(2.0 * abs_err[smape_mask] / denom[smape_mask])) \
        if smape_mask.any() else 0.0
    return {"MAE": mae, "RMSE": rmse, "MAPE_percent": mape, "SMAPE": smape}


def evaluate_per_day(
    preds: np.ndarray, targets: np.ndarray, steps_per_day: int
) -> list[tuple[int, dict[str, float]]]:
    """Metrics per day-sized chunk of the horizon axis (the last axis)."""
    horizon = preds.shape[-1]
    rows = []
    for day, lo in enumerate(range(0, horizon, steps_per_day), start=1):
        hi = min(lo + steps_per_day, horizon)
        rows.append((day, evaluate(preds[..., lo:hi], targets[..., lo:hi])))
    return rows


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    curves: list[dict]
    best_arrays: dict[str, np.ndarray]
    best_epoch: int
    best_val_mae: float
    epochs_run: int
    stopped_early: bool


def predict_windows(samples, a_diff: Graph, params: ModelParams, config: ModelConfig,
                    stats) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (S, N, H) denormalized predictions and raw targets."""
    preds, targets = [], []
    for sample in samples:
        out = model_forward(sample, a_diff, params, config).data
        preds.append(stats.denormalize_target(out))
        targets.append(sample.y_raw)
    return np.stack(preds), np.stack(targets)


def validation_mae(samples, a_diff, params, config, stats) -> float:
    preds, targets = predict_windows(samples, a_diff, params, config, stats)
    return float(np.mean(np.abs(preds - targets)))


def train_loop(
    params: ModelParams,
    config: ModelConfig,
    a_diff: Graph,
    train_samples: list[WindowSample],
    val_samples: list[WindowSample],
    tcfg: TrainConfig,
    stats,
    optimizer: Adam | None = None,
    start_epoch: int = 1,
    log=None,
) -> TrainResult:
    """Seeded shuffled mini-batches, Huber backward, Adam step, best-MAE
    checkpointing, early stop after ``patience`` stale epochs."""
    if not train_samples or not val_samples:
        raise ValueError("training and validation splits must be non-empty")
    named = list(params.named())
    opt = optimizer if optimizer is not None else Adam(
        named, tcfg.beta1, tcfg.beta2, tcfg.eps
    )

    curves: list[dict] = []
    best_arrays = {name: p.data.copy() for name, p in named}
    best_val = float("inf")
    best_epoch = 0
    stale = 0
    stopped_early = False

    for epoch in range(start_epoch, tcfg.max_epochs + 1):
        # per-epoch generator: resume from a checkpoint replays the same order
        rng = np.random.default_rng([tcfg.seed, epoch])
        order = rng.permutation(len(train_samples))
        epoch_loss = 0.0
        for b, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = order[lo : lo + tcfg.batch_size]
            opt.zero_grad()
            for idx in batch:
                with Tape() as tape:
                    loss = sample_loss(train_samples[idx], a_diff, params, config)
                    scaled = scale(loss, 1.0 / len(batch))
                value = float(loss.data)
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"non-finite training loss at epoch {epoch}, batch {b}, "
                        f"sample {int(idx)}"
                    )
                tape.backward(scaled)
                epoch_loss += value
            if tcfg.clip_norm is not None:
                opt.clip_gradients(tcfg.clip_norm)
            opt.step(tcfg.learning_rate)
        epoch_loss /= len(order)

        val_mae = validation_mae(val_samples, a_diff, params, config, stats)
        curves.append({"epoch": epoch, "train_loss": epoch_loss, "val_mae": val_mae})
        if log is not None:
            log(f"epoch {epoch:3d}  train_loss {epoch_loss:.6f}  val_mae {val_mae:.6f}")

        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best_arrays = {name: p.data.copy() for name, p in named}
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                stopped_early = True
                break

    return TrainResult(
        curves=curves,
        best_arrays=best_arrays,
        best_epoch=best_epoch,
        best_val_mae=best_val,
        epochs_run=curves[-1]["epoch"] if curves else start_epoch - 1,
        stopped_early=stopped_early,
    )
