"""Text-oriented cross-attention network.

Layout of one forward pass (default configuration, text as centre modality):

    text, visual, acoustic --conv1d--> resample to L rows --(+PE)--> F_t, F_v, F_a
    branch a: N x [LN -> self-attn(text) -> FFN ; LN -> cross-attn(q=text, kv=acoustic)
                   -> memory/fuse gates -> FFN]
    branch v: same architecture, separate parameters
    pool(F_a->t, F_t^(a), F_v->t, F_t^(v)) -> concat (4d) -> MLP -> y_pred

During training a shared-weight conv encoder plus one MLP head per modality
produces the unimodal predictions used by the auxiliary loss.

Parameters live in a flat ``{hierarchical name: Tensor}`` dict, e.g.
``branch.a.layer.2.gate.fuse.W``. The blocks below take the sub-dict for
their own prefix (see :func:`scope`).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .config import LONG, ModelConfig
from .data import WidthMismatchError
from .tensor import Tensor


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _rng_for(seed: int, name: str) -> np.random.Generator:
    # per-name streams keep a parameter's init independent of which others exist
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _uniform(seed: int, name: str, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    data = _rng_for(seed, name).uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True, name=name)


def _const(name: str, shape, value: float) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


def parameter_shapes(cfg: ModelConfig, input_dims: Mapping[str, int]) -> dict:
    """Ordered ``name -> (shape, init kind, fan_in)`` for a configuration."""
    d, k, hid = cfg.d, cfg.kernel_size, cfg.ffn_mult * cfg.d
    spec: dict = {}

    def weight(name, shape, fan_in):
        spec[name] = (tuple(shape), "uniform", fan_in)

    def zero(name, shape):
        spec[name] = (tuple(shape), "zeros", 0)

    def one(name, shape):
        spec[name] = (tuple(shape), "ones", 0)

    def ln(prefix):
        one(prefix + ".gain", (d,))
        zero(prefix + ".bias", (d,))

    def attn(prefix):
        for w in ("W_q", "W_k", "W_v", "W_o"):
            weight(f"{prefix}.{w}", (d, d), d)

    def ffn(prefix):
        ln(prefix + ".ln")
        weight(prefix + ".W1", (d, hid), d)
        zero(prefix + ".b1", (hid,))
        weight(prefix + ".W2", (hid, d), hid)
        zero(prefix + ".b2", (d,))

    def mlp(prefix, n_in):
        weight(prefix + ".W1", (n_in, d), n_in)
        zero(prefix + ".b1", (d,))
        weight(prefix + ".W2", (d, 1), d)
        zero(prefix + ".b2", (1,))

    for m in cfg.used_modalities:
        mod = LONG[m]
        weight(f"proj.{mod}.W", (k, input_dims[mod], d), k * input_dims[mod])
        zero(f"proj.{mod}.b", (d,))

    if len(cfg.modalities) == 1:
        m = cfg.modalities
        for i in range(cfg.N):
            p = f"stack.{m}.layer.{i}"
            ln(p + ".ln")
            attn(p + ".sa")
            ffn(p + ".ffn")
        n_streams = 1
    else:
        for c in cfg.cross_modalities:
            for i in range(cfg.N):
                p = f"branch.{c}.layer.{i}"
                ln(p + ".ln_center")
                ln(p + ".ln_cross")
                attn(p + ".sa")
                attn(p + ".ca")
                if cfg.gates_enabled:
                    for gate in ("memory", "fuse"):
                        weight(f"{p}.gate.{gate}.W", (2 * d, d), 2 * d)
                        zero(f"{p}.gate.{gate}.b", (d,))
                ffn(p + ".ffn_center")
                ffn(p + ".ffn_cross")
        n_streams = 2 * len(cfg.cross_modalities)
    mlp("head.final", n_streams * d)

    if cfg.joint_learning_enabled:
        weight("shared_encoder.W", (k, d, d), k * d)
        zero("shared_encoder.b", (d,))
        for m in cfg.used_modalities:
            mlp(f"head.{LONG[m]}", d)
    return spec


def init_params(cfg: ModelConfig, input_dims: Mapping[str, int], seed: int = 0) -> dict:
    params = ParamDict()
    for name, (shape, kind, fan_in) in parameter_shapes(cfg, input_dims).items():
        if kind == "uniform":
            params[name] = _uniform(seed, name, shape, fan_in)
        else:
            params[name] = _const(name, shape, 1.0 if kind == "ones" else 0.0)
    return params


def scope(params: Mapping[str, Tensor], prefix: str) -> dict:
    """Sub-dict of ``params`` under ``prefix.``, with the prefix stripped."""
    cache = getattr(params, "scopes", None)
    if cache is not None and prefix in cache:
        return cache[prefix]
    cut = len(prefix) + 1
    sub = ParamDict((k[cut:], v) for k, v in params.items() if k.startswith(prefix + "."))
    if cache is not None:
        cache[prefix] = sub
    return sub


class ParamDict(dict):
    """Plain dict that memoises :func:`scope` results; do not add keys after scoping."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.scopes = {}


def positional_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return pe.astype(np.float32)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def project_unimodal(x: Tensor, lengths, p: Mapping[str, Tensor], cfg: ModelConfig,
                     modality: str = "") -> Tensor:
    """Temporal conv to width ``d``, resample to ``L`` rows, add positional encoding.

    ``x`` is ``[B x] T x d_m`` with per-sample valid ``lengths`` (zero padded
    on the right); ``p`` holds ``W`` (``k x d_m x d``) and ``b``.
    """
    kernel = p["W"]
    if x.shape[-1] != kernel.shape[1]:
        raise WidthMismatchError(
            f"{modality or 'input'} width {x.shape[-1]} != expected {kernel.shape[1]}")
    k = kernel.shape[0]
    h = T.conv1d_temporal(x, kernel, p["b"], stride=1, padding=k // 2)
    out = T.resample_rows(h, lengths, cfg.L)
    if cfg.positional_encoding:
        out = T.add(out, Tensor(positional_encoding(cfg.L, cfg.d)))
    return out


def multi_head_attention(q_src: Tensor, kv_src: Tensor, p: Mapping[str, Tensor], h: int,
                         weights: Optional[list] = None) -> Tensor:
    """Scaled dot-product attention with queries from ``q_src`` only.

    Per head: ``softmax(Q K^T / sqrt(d/h)) V``; heads are concatenated and
    mapped back to width ``d`` by ``W_o``. If ``weights`` is a list, the
    ``(B*h) x L_q x L_kv`` attention matrix is appended to it.
    """
    d = q_src.shape[-1]
    squeeze = q_src.ndim == 2
    q = T.split_heads(T.matmul(q_src, p["W_q"]), h)
    k = T.split_heads(T.matmul(kv_src, p["W_k"]), h)
    v = T.split_heads(T.matmul(kv_src, p["W_v"]), h)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d // h))
    attn = T.softmax_rows(scores)
    if weights is not None:
        weights.append(attn.data)
    ctx = T.merge_heads(T.matmul(attn, v), h, squeeze=squeeze)
    return T.matmul(ctx, p["W_o"])


def cross_attention_block(f_cross: Tensor, f_text: Tensor, p: Mapping[str, Tensor], h: int,
                          residual: bool = False, weights: Optional[list] = None) -> Tensor:
    """Cross-attention with queries from the centre stream, keys/values from ``f_cross``.

    Inputs are expected to be layer-normalised already. ``residual`` adds
    ``f_cross`` (the stream being updated) back onto the attention output.
    """
    out = multi_head_attention(f_text, f_cross, p, h, weights)
    return T.add(out, f_cross) if residual else out


def self_attention_block(f_text: Tensor, p: Mapping[str, Tensor], h: int,
                         residual: bool = False, weights: Optional[list] = None) -> Tensor:
    out = multi_head_attention(f_text, f_text, p, h, weights)
    return T.add(out, f_text) if residual else out


def gated_fusion(f_prev: Tensor, f_attn: Tensor, f_text: Tensor, p: Mapping[str, Tensor],
                 enabled: bool = True, gates: Optional[list] = None) -> Tensor:
    """``g_m * f_prev + g_f * f_attn`` with both gates read from ``[f_text, f_prev]``.

    ``p`` holds ``memory.W``/``memory.b`` and ``fuse.W``/``fuse.b`` (``W`` is
    ``2d x d``). With ``enabled=False`` the attention output passes through
    untouched.
    """
    if not enabled:
        return f_attn
    z = T.concat_features(f_text, f_prev)
    g_m = T.sigmoid(T.add(T.matmul(z, p["memory.W"]), p["memory.b"]))
    g_f = T.sigmoid(T.add(T.matmul(z, p["fuse.W"]), p["fuse.b"]))
    if gates is not None:
        gates.append((g_m.data, g_f.data))
    return T.add(T.mul(g_m, f_prev), T.mul(g_f, f_attn))


def ffn_block(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Pre-norm position-wise feed-forward with a residual: ``x + FFN(LN(x))``."""
    y = T.layer_norm(x, p["ln.gain"], p["ln.bias"])
    y = T.relu(T.add(T.matmul(y, p["W1"]), p["b1"]))
    y = T.add(T.matmul(y, p["W2"]), p["b2"])
    return T.add(x, y)


def mlp_head(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """``[B x] n_in -> d -> 1`` with a ReLU hidden layer; returns shape ``[B]``."""
    y = T.relu(T.add(T.matmul(_as_matrix(x), p["W1"]), p["b1"]))
    y = T.add(T.matmul(y, p["W2"]), p["b2"])
    return T.reshape(y, (y.shape[0],))


def _as_matrix(x: Tensor) -> Tensor:
    return T.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def pool(x: Tensor, how: str) -> Tensor:
    return T.mean_rows(x) if how == "mean" else T.last_row(x)


@dataclass
class Diagnostics:
    gate_means: dict = field(default_factory=dict)
    attention_entropy: dict = field(default_factory=dict)
    attention_weights: dict = field(default_factory=dict)
    # block name -> (query modality, key/value modality)
    attention_sources: dict = field(default_factory=dict)


def _entropy(w: np.ndarray) -> float:
    return float(-(w * np.log(np.clip(w, 1e-12, None))).sum(axis=-1).mean())


def branch_forward(f_mod: Tensor, f_text: Tensor, bp: Mapping[str, Tensor], cfg: ModelConfig,
                   diag: Optional[Diagnostics] = None, name: str = "branch",
                   modalities: tuple = ("", "")) -> tuple:
    """Run the ``N`` stacked modules of one branch; returns ``(F_cross, F_center)``."""
    cross, center = f_mod, f_text
    for i in range(cfg.N):
        lp = scope(bp, f"layer.{i}")
        ln_center = T.layer_norm(center, lp["ln_center.gain"], lp["ln_center.bias"])
        ln_cross = T.layer_norm(cross, lp["ln_cross.gain"], lp["ln_cross.bias"])
        sa_w = [] if diag is not None else None
        ca_w = [] if diag is not None else None
        gates = [] if diag is not None else None
        sa = self_attention_block(ln_center, scope(lp, "sa"), cfg.h, cfg.attention_residual, sa_w)
        ca = cross_attention_block(ln_cross, ln_center, scope(lp, "ca"), cfg.h,
                                   cfg.attention_residual, ca_w)
        fused = gated_fusion(ln_cross, ca, ln_center, scope(lp, "gate"), cfg.gates_enabled, gates)
        center = ffn_block(sa, scope(lp, "ffn_center"))
        cross = ffn_block(fused, scope(lp, "ffn_cross"))
        if diag is not None:
            key = f"{name}.layer.{i}"
            diag.attention_weights[key + ".sa"] = sa_w[0]
            diag.attention_weights[key + ".ca"] = ca_w[0]
            diag.attention_entropy[key + ".sa"] = _entropy(sa_w[0])
            diag.attention_entropy[key + ".ca"] = _entropy(ca_w[0])
            diag.attention_sources[key + ".sa"] = (modalities[1], modalities[1])
            diag.attention_sources[key + ".ca"] = (modalities[1], modalities[0])
            if gates:
                diag.gate_means[key + ".gate.memory"] = float(gates[0][0].mean())
                diag.gate_means[key + ".gate.fuse"] = float(gates[0][1].mean())
    return cross, center


def single_stream_forward(f: Tensor, sp: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Self-attention-only stack used by the single-modality ablation."""
    for i in range(cfg.N):
        lp = scope(sp, f"layer.{i}")
        x = T.layer_norm(f, lp["ln.gain"], lp["ln.bias"])
        f = ffn_block(self_attention_block(x, scope(lp, "sa"), cfg.h, cfg.attention_residual),
                      scope(lp, "ffn"))
    return f


def fuse_and_predict(streams, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Pool every stream over time, concatenate the features and regress one score."""
    pooled = [pool(s, cfg.pooling) for s in streams]
    fused = pooled[0] if len(pooled) == 1 else T.concat_many(pooled)
    return mlp_head(fused, p)


def homogeneous_branch(features: Mapping[str, Tensor], params: Mapping[str, Tensor],
                       cfg: ModelConfig) -> dict:
    """Unimodal predictions through one shared conv encoder and per-modality heads.

    ``features`` maps long modality names to projected ``[B x] L x d``
    sequences. The same ``shared_encoder`` tensors are used for every
    modality, so their gradients sum the contributions of all of them.
    """
    enc = scope(params, "shared_encoder")
    k = enc["W"].shape[0]
    out = {}
    for mod, f in features.items():
        h = T.conv1d_temporal(f, enc["W"], enc["b"], stride=1, padding=k // 2)
        out[mod] = mlp_head(pool(h, cfg.pooling), scope(params, f"head.{mod}"))
    return out


# ---------------------------------------------------------------------------
# Whole model
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    y_pred: Tensor
    y_uni: Optional[dict] = None        # long modality name -> Tensor[B]
    diagnostics: Optional[Diagnostics] = None


class TCAN:
    """Model wrapper binding a configuration, input widths and parameters."""

    def __init__(self, config: ModelConfig, input_dims: Mapping[str, int],
                 params: Optional[dict] = None, seed: int = 0):
        self.config = config
        self.input_dims = {m: int(input_dims[m]) for m in input_dims}
        for m in config.used_modalities:
            if LONG[m] not in self.input_dims:
                raise ValueError(f"missing input width for modality {LONG[m]!r}")
        if params is None:
            params = init_params(config, self.input_dims, seed)
        elif not isinstance(params, ParamDict):
            params = ParamDict(params)
        self.params = params

    def parameters(self) -> list:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self) -> None:
        T.zero_grads(self.params.values())

    def project(self, inputs: Mapping[str, tuple]) -> dict:
        """Projected ``L x d`` features for every modality the config uses."""
        out = {}
        for m in self.config.used_modalities:
            mod = LONG[m]
            x, lengths = inputs[mod]
            out[mod] = project_unimodal(_as_tensor(x), lengths, scope(self.params, f"proj.{mod}"),
                                        self.config, mod)
        return out

    def forward(self, inputs: Mapping[str, tuple], training: bool = False,
                diagnostics: bool = False) -> ForwardOutput:
        """``inputs`` maps long modality names to ``(array B x T x d_m, lengths)``.

        Unimodal predictions are computed only when ``training`` is set and
        joint learning is enabled.
        """
        cfg = self.config
        diag = Diagnostics() if diagnostics else None
        feats = self.project(inputs)
        if len(cfg.modalities) == 1:
            mod = LONG[cfg.modalities]
            streams = [single_stream_forward(feats[mod], scope(self.params, f"stack.{cfg.modalities}"),
                                             cfg)]
            if diag is not None:
                diag.attention_sources[f"stack.{cfg.modalities}"] = (mod, mod)
        else:
            center = LONG[cfg.center]
            streams = []
            for c in cfg.cross_modalities:
                name = f"branch.{c}"
                f_cross, f_center = branch_forward(
                    feats[LONG[c]], feats[center], scope(self.params, name), cfg, diag, name,
                    (LONG[c], center))
                streams += [f_cross, f_center]
        y_pred = fuse_and_predict(streams, scope(self.params, "head.final"), cfg)
        y_uni = None
        if training and cfg.joint_learning_enabled:
            y_uni = homogeneous_branch(feats, self.params, cfg)
        return ForwardOutput(y_pred, y_uni, diag)

    def predict(self, inputs: Mapping[str, tuple]) -> np.ndarray:
        return self.forward(inputs, training=False).y_pred.data.copy()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
