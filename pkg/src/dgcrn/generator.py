"""Step-wise dynamic graph generation.

Two hyper-networks (static-graph convolutions over the concatenated speed,
time-of-day, and hidden state) emit per-node dynamic filters. The filters
modulate two learned node-embedding tables; the antisymmetrized, rectified
pairwise similarity of the modulated embeddings is the per-step directed
adjacency. Because the pre-activation is exactly antisymmetric, the raw
graph has a zero diagonal and never keeps both directions of a pair.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conv import ConvParams, dgconv_forward
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class DynamicGraph:
    """Per-batch directed adjacency for one time step."""

    raw: Tensor             # B x N x N, entries in [0,1)
    normalized: Tensor      # row-stochastic after adding self-loops
    normalized_bwd: Tensor  # same construction on the transposed graph


@dataclass
class HyperNetParams:
    """Filter net: optional static-graph convolution, then an affine projection.

    conv=None gives the plain affine variant (input -> filter directly).
    """

    conv: ConvParams | None
    proj_w: Tensor          # D_h (or D_in when conv is None) x filter_dim
    proj_b: Tensor          # filter_dim

    def __post_init__(self):
        if self.conv is not None and self.conv.beta_mix != 0.0:
            raise ConfigError(
                "hyper-network convolution must not use the dynamic graph "
                "(beta_mix=%r)" % self.conv.beta_mix
            )


@dataclass
class GeneratorParams:
    """Everything one half (encoder or decoder) needs to emit dynamic graphs."""

    emb_src: Tensor                    # N x D_e
    emb_tgt: Tensor                    # N x D_e
    hyper_src: HyperNetParams | None   # None only in frozen-filter mode
    hyper_tgt: HyperNetParams | None
    alpha_sat: float                   # saturation rate of tanh pre-activations
    filter_mode: str = "hadamard"      # hadamard | matmul | frozen

    def __post_init__(self):
        if self.alpha_sat <= 0:
            raise ConfigError("alpha_sat must be positive; got %r" % (self.alpha_sat,))
        if self.filter_mode not in ("hadamard", "matmul", "frozen"):
            raise ConfigError("unknown filter_mode %r" % (self.filter_mode,))
        if self.emb_src.shape != self.emb_tgt.shape or self.emb_src.ndim != 2:
            raise DimensionError(
                "embedding tables must share an N x D_e shape; got %r and %r"
                % (self.emb_src.shape, self.emb_tgt.shape)
            )
        if self.filter_mode == "frozen":
            if self.hyper_src is not None or self.hyper_tgt is not None:
                raise ConfigError("frozen-filter mode carries no hyper-networks")
        elif self.hyper_src is None or self.hyper_tgt is None:
            raise ConfigError("filter_mode %r requires both hyper-networks" % self.filter_mode)


def assemble_hyper_input(speed, time_of_day, hidden):
    """Concatenate speed, time-of-day, and previous hidden state along features.

    speed, time_of_day: B x N x 1; hidden: B x N x h -> B x N x (2+h).
    """
    for name, t, width in (
        ("speed", speed, 1),
        ("time_of_day", time_of_day, 1),
        ("hidden", hidden, None),
    ):
        if t.ndim != 3:
            raise DimensionError("%s: expected B x N x C, got shape %r" % (name, t.shape))
        if width is not None and t.shape[-1] != width:
            raise DimensionError(
                "%s: expected feature width %d, got shape %r" % (name, width, t.shape)
            )
    b, n = speed.shape[0], speed.shape[1]
    for name, t in (("time_of_day", time_of_day), ("hidden", hidden)):
        if t.shape[0] != b or t.shape[1] != n:
            raise DimensionError(
                "%s has shape %r, expected leading dims (%d, %d)" % (name, t.shape, b, n)
            )
    return T.concat([speed, time_of_day, hidden], axis=-1)


def hyper_forward(inp, graph, params: HyperNetParams):
    """Dynamic filter from the hyper-network: static-only conv, then projection."""
    if inp.ndim != 3 or inp.shape[-2] != graph.n_nodes:
        raise DimensionError(
            "hyper input shape %r does not match graph with %d nodes"
            % (inp.shape, graph.n_nodes)
        )
    h = inp if params.conv is None else dgconv_forward(inp, None, graph, params.conv)
    return T.matmul(h, params.proj_w) + params.proj_b


def dynamic_embeddings(df_src, df_tgt, params: GeneratorParams):
    """Modulate the embedding tables with the dynamic filters.

    hadamard mode: DE = tanh(alpha_sat * (DF (*) E)) with DF of shape B x N x D_e.
    matmul mode: DF carries D_e^2 features per node, reshaped to a per-node
    matrix acting on the embedding row.
    """
    de1 = _modulate(df_src, params.emb_src, params)
    de2 = _modulate(df_tgt, params.emb_tgt, params)
    return de1, de2


def _modulate(df, emb, params: GeneratorParams):
    n, d_e = emb.shape
    if params.filter_mode == "matmul":
        if df.ndim != 3 or df.shape[-1] != d_e * d_e:
            raise DimensionError(
                "matmul filter mode needs %d features per node; got shape %r"
                % (d_e * d_e, df.shape)
            )
        b = df.shape[0]
        mat = df.reshape(b, n, d_e, d_e)
        row = emb.reshape(1, n, 1, d_e)
        prod = T.matmul(row, mat).reshape(b, n, d_e)
    else:
        prod = T.broadcast_hadamard(df, emb)
    return T.tanh(prod * params.alpha_sat)


def dynamic_adjacency(de_src, de_tgt, alpha_sat: float) -> DynamicGraph:
    """Directed adjacency from modulated embeddings.

    raw = ReLU(tanh(alpha_sat * (DE1 DE2^T - DE2 DE1^T))). The argument is
    antisymmetric bit-for-bit, so the diagonal is exactly zero and at most
    one direction of each pair survives the ReLU.
    """
    if de_src.shape != de_tgt.shape or de_src.ndim != 3:
        raise DimensionError(
            "modulated embeddings must share B x N x D_e; got %r and %r"
            % (de_src.shape, de_tgt.shape)
        )
    if alpha_sat <= 0:
        raise ConfigError("alpha_sat must be positive; got %r" % (alpha_sat,))
    m1 = T.matmul(de_src, de_tgt.mT)
    m2 = T.matmul(de_tgt, de_src.mT)
    raw = T.relu(T.tanh((m1 - m2) * alpha_sat))
    return DynamicGraph(
        raw=raw,
        normalized=_self_loop_normalize(raw),
        normalized_bwd=_self_loop_normalize(raw.mT),
    )


def _self_loop_normalize(m):
    # rows of (M + I) divided by 1 + rowsum(M); differentiable through M
    n = m.shape[-1]
    eye = Tensor(np.eye(n, dtype=m.dtype))
    loops = m + eye
    deg = loops.sum(axis=-1, keepdims=True)
    return loops / deg


def generate(inp, graph, params: GeneratorParams) -> DynamicGraph:
    """Full generator chain for one step: filters, modulation, adjacency."""
    n = graph.n_nodes
    if params.emb_src.shape[0] != n:
        raise DimensionError(
            "embedding tables have %d rows, graph has %d nodes"
            % (params.emb_src.shape[0], n)
        )
    if params.filter_mode == "frozen":
        b = inp.shape[0]
        d_e = params.emb_src.shape[1]
        # constant all-ones filters run through the ordinary batched path
        df = T.ones((b, n, d_e), dtype=params.emb_src.dtype)
        df_src = df_tgt = df
    else:
        df_src = hyper_forward(inp, graph, params.hyper_src)
        df_tgt = hyper_forward(inp, graph, params.hyper_tgt)
    de1, de2 = dynamic_embeddings(df_src, df_tgt, params)
    return dynamic_adjacency(de1, de2, params.alpha_sat)
