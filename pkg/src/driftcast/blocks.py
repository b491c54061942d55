"""Learned building blocks: MLP, attention, K-hop graph convolution,
graph-gated GRU cell, and the dual global/local memory attention module."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graphs import Graph, neighbor_set
from .tensor import (
    Tensor,
    add,
    concat_last_dim,
    concat_rows,
    matmul,
    mul,
    relu,
    scale,
    sigmoid,
    softmax_rows,
    take_rows,
    tanh,
    transpose,
    uniform_init,
)


def as_tensor(adj) -> Tensor:
    """Wrap a Graph or ndarray as a constant tensor; pass tensors through."""
    if isinstance(adj, Tensor):
        return adj
    if isinstance(adj, Graph):
        return Tensor(adj.weights)
    return Tensor(np.asarray(adj, dtype=np.float64))


# ---------------------------------------------------------------------------
# multilayer perceptron


@dataclass
class MlpParams:
    weights: list[Tensor]
    biases: list[Tensor]

    def named(self, prefix: str):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{i}", w
            yield f"{prefix}.b{i}", b


def init_mlp(rng: np.random.Generator, dims: list[int]) -> MlpParams:
    """Layer sizes ``dims = [d_in, hidden..., d_out]``; ReLU between layers."""
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(uniform_init(rng, d_in, d_out, fan_in=d_in))
        biases.append(uniform_init(rng, d_out, fan_in=d_in))
    return MlpParams(weights, biases)


def mlp(x: Tensor, params: MlpParams) -> Tensor:
    out = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = add(matmul(out, w), b)
        if i != last:
            out = relu(out)
    return out


# ---------------------------------------------------------------------------
# K-hop graph convolution and the graph-gated GRU


@dataclass
class GnnParams:
    """Per-hop weight matrices W_0..W_K plus one output bias."""

    hop_weights: list[Tensor]
    bias: Tensor

    @property
    def k_hops(self) -> int:
        return len(self.hop_weights) - 1

    def named(self, prefix: str):
        for k, w in enumerate(self.hop_weights):
            yield f"{prefix}.w{k}", w
        yield f"{prefix}.bias", self.bias


def init_gnn(rng: np.random.Generator, k_hops: int, d_in: int, d_out: int) -> GnnParams:
    if k_hops < 1:
        raise ValueError(f"k_hops must be >= 1, got {k_hops}")
    hop_weights = [uniform_init(rng, d_in, d_out, fan_in=d_in) for _ in range(k_hops + 1)]
    return GnnParams(hop_weights, uniform_init(rng, d_out, fan_in=d_in))


def gnn_khop(adj, h: Tensor, params: GnnParams) -> Tensor:
    """sum_{k=0..K} A^k H W_k + b, with A^0 = I.

    Powers are applied as repeated products A(A(...H)), never materialized.
    """
    a = as_tensor(adj)
    if a.data.shape[0] != h.data.shape[0]:
        raise ValueError(
            f"gnn_khop: adjacency {a.data.shape} does not match H rows {h.data.shape}"
        )
    propagated = h
    out = matmul(h, params.hop_weights[0])
    for w in params.hop_weights[1:]:
        propagated = matmul(a, propagated)
        out = add(out, matmul(propagated, w))
    return add(out, params.bias)


@dataclass
class GnnGruParams:
    """Gate GNNs over concat(input, hidden); hidden size is the gate output."""

    update: GnnParams
    reset: GnnParams
    candidate: GnnParams

    def named(self, prefix: str):
        yield from self.update.named(f"{prefix}.update")
        yield from self.reset.named(f"{prefix}.reset")
        yield from self.candidate.named(f"{prefix}.candidate")


def init_gnn_gru(rng: np.random.Generator, k_hops: int, d_in: int, d_hidden: int) -> GnnGruParams:
    d_cat = d_in + d_hidden
    return GnnGruParams(
        update=init_gnn(rng, k_hops, d_cat, d_hidden),
        reset=init_gnn(rng, k_hops, d_cat, d_hidden),
        candidate=init_gnn(rng, k_hops, d_cat, d_hidden),
    )


def gnn_gru_step(x_t: Tensor, h_prev: Tensor, adj, params: GnnGruParams) -> Tensor:
    """One GRU update where every gate's linear map is a K-hop graph conv."""
    xh = concat_last_dim([x_t, h_prev])
    z = sigmoid(gnn_khop(adj, xh, params.update))
    r = sigmoid(gnn_khop(adj, xh, params.reset))
    xrh = concat_last_dim([x_t, mul(r, h_prev)])
    c = tanh(gnn_khop(adj, xrh, params.candidate))
    one_minus_z = add_scalar_neg(z)
    return add(mul(z, h_prev), mul(one_minus_z, c))


def add_scalar_neg(z: Tensor) -> Tensor:
    # 1 - z via the scalar ops so the gate identity z=1 -> h_prev is exact
    return scale(z, -1.0) + 1.0


# ---------------------------------------------------------------------------
# scaled dot-product attention with learned projections


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    def named(self, prefix: str):
        yield f"{prefix}.wq", self.wq
        yield f"{prefix}.wk", self.wk
        yield f"{prefix}.wv", self.wv


def init_attention(
    rng: np.random.Generator, d_query: int, d_key_in: int, d_proj: int, d_value: int
) -> AttentionParams:
    return AttentionParams(
        wq=uniform_init(rng, d_query, d_proj, fan_in=d_query),
        wk=uniform_init(rng, d_key_in, d_proj, fan_in=d_key_in),
        wv=uniform_init(rng, d_key_in, d_value, fan_in=d_key_in),
    )


def attention(query: Tensor, keys: Tensor, values: Tensor, params: AttentionParams) -> Tensor:
    """softmax(QK^T / sqrt(d)) V after projecting all three inputs."""
    if keys.data.shape[0] == 0:
        raise ValueError("attention: empty key set")
    if keys.data.shape[0] != values.data.shape[0]:
        raise ValueError(
            f"attention: {keys.data.shape[0]} keys vs {values.data.shape[0]} values"
        )
    q = matmul(query, params.wq)
    k = matmul(keys, params.wk)
    v = matmul(values, params.wv)
    d_proj = q.data.shape[1]
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d_proj))
    return matmul(softmax_rows(scores), v)


def attention_weights(query: Tensor, keys: Tensor, params: AttentionParams) -> Tensor:
    """The row-stochastic weight matrix the attention output aggregates with."""
    q = matmul(query, params.wq)
    k = matmul(keys, params.wk)
    return softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.data.shape[1])))


# ---------------------------------------------------------------------------
# memory-augmented attention


@dataclass
class GlobalMemory:
    """Learnable global pattern bank, one row per memory unit."""

    units: Tensor

    @property
    def m(self) -> int:
        return self.units.data.shape[0]

    def named(self, prefix: str):
        yield f"{prefix}.units", self.units


def init_global_memory(rng: np.random.Generator, m: int, d_e: int) -> GlobalMemory:
    if m < 1:
        raise ValueError(f"memory unit count must be >= 1, got {m}")
    return GlobalMemory(uniform_init(rng, m, d_e, fan_in=d_e))


@dataclass
class MaaParams:
    global_attn: AttentionParams
    local_attn: AttentionParams
    local_mlp: MlpParams
    fuse_mlp: MlpParams

    def named(self, prefix: str):
        yield from self.global_attn.named(f"{prefix}.global_attn")
        yield from self.local_attn.named(f"{prefix}.local_attn")
        yield from self.local_mlp.named(f"{prefix}.local_mlp")
        yield from self.fuse_mlp.named(f"{prefix}.fuse_mlp")


def init_maa(rng: np.random.Generator, d_e: int, d: int) -> MaaParams:
    return MaaParams(
        global_attn=init_attention(rng, d_e, d_e, d_e, d_e),
        local_attn=init_attention(rng, d_e, d_e, d_e, d_e),
        local_mlp=init_mlp(rng, [d_e, d, d]),
        fuse_mlp=init_mlp(rng, [2 * d_e + d, d, d]),
    )


def maa_global(h_e: Tensor, mem: GlobalMemory, params: AttentionParams) -> Tensor:
    """Attend each station's hidden state over the global memory bank."""
    if mem.m == 0:
        raise ValueError("global memory has no units")
    return attention(h_e, mem.units, mem.units, params)


def maa_local(
    h_hist: list[Tensor],
    adv_graph: Graph,
    tau: int,
    i: int,
    attn: AttentionParams,
    out_mlp: MlpParams,
) -> Tensor:
    """Attend station i's latest state over its own and its upstream
    neighbors' hidden states in the trailing window of ``tau`` steps.

    ``h_hist`` lists encoder states for steps 1..t; the window covers
    [t - tau + 1, t], clipped to the available steps. The attended vector
    passes through an MLP; returns a 1 x d row.
    """
    t = len(h_hist)
    if t < 1:
        raise ValueError("maa_local needs at least one encoder step")
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    rows = [i] + [j for j in neighbor_set(adv_graph, i) if j != i]
    lo = max(0, t - tau)
    window = [take_rows(h_hist[s], rows) for s in range(lo, t)]
    bank = window[0] if len(window) == 1 else concat_rows(window)
    query = take_rows(h_hist[-1], [i])
    attended = attention(query, bank, bank, attn)
    return mlp(attended, out_mlp)


def maa_fuse(h_e: Tensor, h_g: Tensor, h_l: Tensor, fuse_mlp_params: MlpParams) -> Tensor:
    """Blend encoder, global-memory, and local-memory features into one state."""
    if not (h_e.data.shape[0] == h_g.data.shape[0] == h_l.data.shape[0]):
        raise ValueError(
            f"maa_fuse: row counts differ: {h_e.data.shape} {h_g.data.shape} {h_l.data.shape}"
        )
    return mlp(concat_last_dim([h_e, h_g, h_l]), fuse_mlp_params)
