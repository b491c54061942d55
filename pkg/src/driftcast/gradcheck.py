"""Finite-difference verification harness for parameters of assembled models.

Complements :func:`driftcast.tensor.grad_check` (which differentiates with
respect to one input tensor) by checking in-place parameter tensors of whole
blocks or the full model against central differences.
"""

from __future__ import annotations

import numpy as np

from .data import WindowSample
from .graphs import Graph
from .model import ModelConfig, ModelParams, init_model, sample_loss
from .tensor import Tape, Tensor


def fd_check_params(
    loss_fn,
    named_params: list[tuple[str, Tensor]],
    eps: float = 1e-5,
) -> dict[str, float]:
    """Max relative error per parameter, analytic vs central differences.

    ``loss_fn()`` must rebuild the forward pass from the current parameter
    values each call and return a scalar Tensor.
    """
    for _, p in named_params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in named_params
    }

    errors: dict[str, float] = {}
    for name, p in named_params:
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            central = (hi - lo) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - central) / (abs(a) + abs(central) + 1e-12)
            worst = max(worst, rel)
        errors[name] = worst
    return errors


def group_errors(per_param: dict[str, float]) -> dict[str, float]:
    """Fold per-tensor errors into top-level parameter groups."""
    groups: dict[str, float] = {}
    for name, err in per_param.items():
        group = name.split(".", 1)[0]
        groups[group] = max(groups.get(group, 0.0), err)
    return groups


# ---------------------------------------------------------------------------
# deterministic toy instances (no geography needed)


def random_binary_graph(rng: np.random.Generator, n: int, density: float = 0.4) -> Graph:
    w = (rng.random((n, n)) < density).astype(np.float64)
    np.fill_diagonal(w, 0.0)
    return Graph(w, directed=True)


def make_toy_setup(
    n: int = 4,
    t_in: int = 6,
    horizon: int = 3,
    tau: int = 2,
    d: int = 4,
    d_e: int = 4,
    memory_units: int = 2,
    k_hops: int = 2,
    substeps: int = 2,
    d_m: int = 2,
    seed: int = 0,
) -> tuple[WindowSample, Graph, ModelParams, ModelConfig]:
    """Small random-but-seeded instance for gradient and composition checks."""
    config = ModelConfig(
        n=n, t_in=t_in, horizon=horizon, d=d, d_e=d_e, k_hops=k_hops,
        memory_units=memory_units, tau=tau, d_m=d_m, substeps=substeps,
    )
    rng = np.random.default_rng(seed)
    sample = WindowSample(
        start=0,
        x=rng.normal(size=(n, t_in)),
        m=rng.normal(size=(n, t_in, d_m)),
        y_raw=rng.normal(size=(n, horizon)),
        y_norm=rng.normal(size=(n, horizon)),
        adv_graphs=tuple(random_binary_graph(rng, n) for _ in range(t_in)),
        horizon_adv_graphs=tuple(random_binary_graph(rng, n) for _ in range(horizon)),
        m_horizon=rng.normal(size=(n, horizon, d_m)),
        last_input_raw=rng.normal(size=n),
    )
    diff = rng.random((n, n)) * 0.5
    diff = (diff + diff.T) / 2.0
    np.fill_diagonal(diff, 0.0)
    a_diff = Graph(diff, directed=False)
    params = init_model(config, seed=seed + 1)
    return sample, a_diff, params, config


def end_to_end_check(
    seed: int = 0, eps: float = 1e-5, **toy_kwargs
) -> dict[str, float]:
    """Per-group max relative FD error of the full training loss."""
    sample, a_diff, params, config = make_toy_setup(seed=seed, **toy_kwargs)

    def loss_fn():
        return sample_loss(sample, a_diff, params, config)

    return group_errors(fd_check_params(loss_fn, list(params.named()), eps=eps))
