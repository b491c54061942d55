"""End-to-end forecaster: adaptive-graph GRU encoder over the input window,
dual-memory attention initial states, delay-aware continuous evolution over
the horizon, graph GRU decoder, and the Huber training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (
    GlobalMemory,
    GnnGruParams,
    MaaParams,
    MlpParams,
    gnn_gru_step,
    init_global_memory,
    init_gnn,
    init_gnn_gru,
    init_maa,
    init_mlp,
    maa_fuse,
    maa_global,
    maa_local,
    mlp,
)
from .data import WindowSample
from .dde import EvolutionParams, HistoryBuffer, evolution_rhs, solve_dde
from .graphs import Graph, build_adaptive_adjacency
from .tensor import (
    Tensor,
    absolute,
    add,
    concat_last_dim,
    concat_rows,
    mean,
    mul,
    scale,
    square,
    sub,
    zeros,
)


@dataclass(frozen=True)
class ModelConfig:
    n: int
    t_in: int
    horizon: int
    d: int = 32
    d_e: int = 32
    k_hops: int = 2
    memory_units: int = 16
    tau: int = 2
    d_m: int = 2
    diffusion_coeff: float = 0.1
    huber_delta: float = 1.0
    substeps: int = 4
    kappa: float = 0.1
    hold_covariates: bool = False

    def __post_init__(self):
        if not (self.t_in >= self.tau >= 1):
            raise ValueError(f"need T >= tau >= 1, got T={self.t_in}, tau={self.tau}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        for name in ("n", "d", "d_e", "k_hops", "memory_units", "d_m", "substeps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.huber_delta <= 0:
            raise ValueError(f"huber_delta must be > 0, got {self.huber_delta}")
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in (0, 1], got {self.kappa}")


@dataclass
class ModelParams:
    e1: Tensor
    e2: Tensor
    encoder: GnnGruParams
    maa: MaaParams
    memory: GlobalMemory
    evolution: EvolutionParams
    decoder: GnnGruParams
    out_mlp: MlpParams

    def named(self):
        yield "e1", self.e1
        yield "e2", self.e2
        yield from self.encoder.named("encoder")
        yield from self.maa.named("maa")
        yield from self.memory.named("memory")
        yield from self.evolution.named("evolution")
        yield from self.decoder.named("decoder")
        yield from self.out_mlp.named("out_mlp")


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, d_e, k = config.d, config.d_e, config.k_hops
    return ModelParams(
        e1=Tensor(rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(config.n, d))),
        e2=Tensor(rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(config.n, d))),
        encoder=init_gnn_gru(rng, k, 1 + config.d_m, d_e),
        maa=init_maa(rng, d_e, d),
        memory=init_global_memory(rng, config.memory_units, d_e),
        evolution=EvolutionParams(
            diffusion_coeff=config.diffusion_coeff,
            tau=float(config.tau),
            gnn_diff=init_gnn(rng, k, d, d),
            gnn_adv=init_gnn(rng, k, d, d),
            source_mlp=init_mlp(rng, [d + config.d_m, d, d]),
        ),
        decoder=init_gnn_gru(rng, k, d, d),
        out_mlp=init_mlp(rng, [d, 1]),
    )


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    return list(params.named())


def params_to_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.named()}


def load_params_arrays(params: ModelParams, arrays: dict[str, np.ndarray]) -> None:
    """Overwrite parameter values in place; shapes must match exactly."""
    for name, t in params.named():
        if name not in arrays:
            raise KeyError(f"checkpoint is missing parameter '{name}'")
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != t.data.shape:
            raise ValueError(
                f"checkpoint/config schema mismatch for '{name}': "
                f"{arr.shape} vs {t.data.shape}"
            )
        t.data = arr.copy()


# ---------------------------------------------------------------------------
# forward pieces


def encoder_rollout(x: np.ndarray, m: np.ndarray, adjacency, gru: GnnGruParams,
                    d_e: int) -> list[Tensor]:
    """GRU rollout from a zero state; step input is concat(x_t, m_t)."""
    n, t_in = x.shape
    h = zeros(n, d_e)
    states = []
    for t in range(t_in):
        inp = Tensor(np.concatenate([x[:, t : t + 1], m[:, t, :]], axis=1))
        h = gnn_gru_step(inp, h, adjacency, gru)
        states.append(h)
    return states


def encode(x: np.ndarray, m: np.ndarray, params: ModelParams, config: ModelConfig) -> list[Tensor]:
    """Hidden states h_e^1..h_e^T under the learned adjacency."""
    if x.shape != (config.n, config.t_in) or m.shape[:2] != (config.n, config.t_in):
        raise ValueError(
            f"encode: inputs {x.shape}/{m.shape} do not match config "
            f"(N={config.n}, T={config.t_in})"
        )
    adjacency = build_adaptive_adjacency(params.e1, params.e2)
    return encoder_rollout(x, m, adjacency, params.encoder, config.d_e)


def init_states(
    h_e: list[Tensor],
    adv_graphs,
    memory: GlobalMemory,
    maa: MaaParams,
    tau: int,
) -> list[Tensor]:
    """Fused initial/history states at the tau+1 trailing grid points."""
    t_in = len(h_e)
    if t_in < tau:
        raise ValueError(f"need T >= tau, got T={t_in}, tau={tau}")
    n, d_e = h_e[0].data.shape
    states = []
    for g in range(t_in - tau, t_in + 1):
        # grid point g is encoder step g (1-based); g = 0 is the zero initial state
        upto = h_e[:g] if g >= 1 else [zeros(n, d_e)]
        graph = adv_graphs[max(g, 1) - 1]
        h_now = upto[-1]
        h_g = maa_global(h_now, memory, maa.global_attn)
        local_rows = [
            maa_local(upto, graph, tau, i, maa.local_attn, maa.local_mlp)
            for i in range(n)
        ]
        h_l = local_rows[0] if n == 1 else concat_rows(local_rows)
        states.append(maa_fuse(h_now, h_g, h_l, maa.fuse_mlp))
    return states


def model_forward(
    sample: WindowSample,
    a_diff: Graph,
    params: ModelParams,
    config: ModelConfig,
    collect_history: list | None = None,
) -> Tensor:
    """Normalized predictions (N, H) for one window."""
    adjacency = build_adaptive_adjacency(params.e1, params.e2)
    h_e = encoder_rollout(sample.x, sample.m, adjacency, params.encoder, config.d_e)
    states = init_states(h_e, sample.adv_graphs, params.memory, params.maa, config.tau)

    history = HistoryBuffer(
        times=[float(k - config.tau) for k in range(config.tau + 1)],
        states=states,
    )

    if config.hold_covariates:
        adv_per_interval = [Tensor(sample.adv_graphs[-1].weights)] * config.horizon
        m_per_interval = [Tensor(sample.m[:, -1, :])] * config.horizon
    else:
        adv_per_interval = [Tensor(g.weights) for g in sample.horizon_adv_graphs]
        m_per_interval = [Tensor(sample.m_horizon[:, p, :]) for p in range(config.horizon)]
    a_diff_t = Tensor(a_diff.weights)
    evo = params.evolution

    def rhs(t, h, buf, interval):
        h_delayed = buf.query(t - evo.tau)
        return evolution_rhs(h, h_delayed, a_diff_t, adv_per_interval[interval],
                             m_per_interval[interval], evo)

    solved = solve_dde(rhs, states[-1], history, config.horizon, 1.0, config.substeps)
    if collect_history is not None:
        collect_history.append(history)

    dec_h = states[-1]
    columns = []
    for h_p in solved:
        dec_h = gnn_gru_step(h_p, dec_h, adjacency, params.decoder)
        columns.append(mlp(dec_h, params.out_mlp))
    return columns[0] if len(columns) == 1 else concat_last_dim(columns)


def forecast(
    sample: WindowSample,
    a_diff: Graph,
    params: ModelParams,
    config: ModelConfig,
    stats=None,
) -> np.ndarray:
    """Predictions for one window, denormalized when stats are given."""
    preds = model_forward(sample, a_diff, params, config).data
    return stats.denormalize_target(preds) if stats is not None else preds


def huber_loss(pred: Tensor, target, delta: float) -> Tensor:
    """Mean elementwise Huber loss: quadratic within delta, linear outside."""
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    if pred.data.shape != tgt.data.shape:
        raise ValueError(
            f"huber_loss: prediction shape {pred.data.shape} "
            f"!= target shape {tgt.data.shape}"
        )
    r = sub(pred, tgt)
    abs_r = absolute(r)
    inside = Tensor((abs_r.data <= delta).astype(np.float64))  # branch mask, constant
    quad = scale(square(r), 0.5)
    lin = scale(abs_r, delta) + (-0.5 * delta * delta)
    outside = Tensor(1.0 - inside.data)
    return mean(add(mul(inside, quad), mul(outside, lin)))


def sample_loss(sample: WindowSample, a_diff: Graph, params: ModelParams,
                config: ModelConfig) -> Tensor:
    return huber_loss(model_forward(sample, a_diff, params, config),
                      sample.y_norm, config.huber_delta)
