"""Causal feature enhancement: attention, gated fusion, and analytic gradients.

The enhance-and-gate block attends from the input features onto knowledge
anchors (cross-attention), runs self-attention on the input, and blends the
enhanced features with the raw input through a sigmoid gate computed by two
small MLPs.  FFEM applies the block to fused scene features (the last row is
the speed feature); TFEM applies it to trajectory features using anchor
waypoints expanded into per-timestep tokens with sinusoidal positional
encoding.  Every operation has a hand-written backward pass so the desk-scale
decoder can be trained without an autodiff framework.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# Parameter containers and initialization
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Single-head scaled dot-product attention weights, all (h, h)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


@dataclass
class MLPParams:
    """Two-layer perceptron with a rectified hidden layer."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class AffineParams:
    """Single affine map x @ w + b."""

    w: np.ndarray
    b: np.ndarray


@dataclass
class EnhancerParams:
    """Weights of one enhance-and-gate block plus its anchor projection."""

    self_attn: AttentionParams
    cross_attn: AttentionParams
    gate_mlp_enh: MLPParams
    gate_mlp_self: MLPParams
    proj: AffineParams


def _uniform(rng: np.random.Generator, shape, h: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(h)
    return rng.uniform(-bound, bound, size=shape)


def init_attention(h: int, rng: np.random.Generator) -> AttentionParams:
    return AttentionParams(*(_uniform(rng, (h, h), h) for _ in range(4)))


def init_mlp(d_in: int, d_hidden: int, d_out: int, h: int,
             rng: np.random.Generator) -> MLPParams:
    return MLPParams(_uniform(rng, (d_in, d_hidden), h),
                     _uniform(rng, (d_hidden,), h),
                     _uniform(rng, (d_hidden, d_out), h),
                     _uniform(rng, (d_out,), h))


def init_enhancer(h: int, proj_in: int, seed: int) -> EnhancerParams:
    """Seeded uniform [-1/sqrt(h), 1/sqrt(h)] initialization of a block.

    proj_in is the anchor width fed to the projection: the full anchor
    dimension for FFEM, 2 (one waypoint) for TFEM.
    """
    rng = np.random.default_rng(seed)
    return EnhancerParams(
        self_attn=init_attention(h, rng),
        cross_attn=init_attention(h, rng),
        gate_mlp_enh=init_mlp(h, h, h, h, rng),
        gate_mlp_self=init_mlp(h, h, h, h, rng),
        proj=AffineParams(_uniform(rng, (proj_in, h), h),
                          _uniform(rng, (h,), h)),
    )


def param_arrays(obj) -> list[np.ndarray]:
    """All ndarray leaves of a (possibly nested) parameter dataclass, in
    deterministic field order."""
    out = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, np.ndarray):
            out.append(v)
        elif dataclasses.is_dataclass(v):
            out.extend(param_arrays(v))
    return out


def zeros_like_params(obj):
    """Same structure as obj with every array leaf zeroed."""
    kw = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, np.ndarray):
            kw[f.name] = np.zeros_like(v)
        elif dataclasses.is_dataclass(v):
            kw[f.name] = zeros_like_params(v)
        else:
            kw[f.name] = v
    return type(obj)(**kw)


# ---------------------------------------------------------------------------
# Primitive forward/backward pairs
# ---------------------------------------------------------------------------

def softmax_rows(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attention_forward(q_in: np.ndarray, k_in: np.ndarray, v_in: np.ndarray,
                      p: AttentionParams):
    """softmax((Q_in Wq)(K_in Wk)^T / sqrt(h)) (V_in Wv) Wo."""
    h = p.w_q.shape[0]
    if q_in.shape[1] != h or k_in.shape[1] != h or v_in.shape[1] != h:
        raise ValueError("input width does not match attention width")
    if k_in.shape[0] != v_in.shape[0]:
        raise ValueError("key and value row counts differ")
    q = q_in @ p.w_q
    k = k_in @ p.w_k
    v = v_in @ p.w_v
    weights = softmax_rows(q @ k.T / np.sqrt(h))
    pooled = weights @ v
    out = pooled @ p.w_o
    cache = (q_in, k_in, v_in, q, k, v, weights, pooled, p)
    return out, cache


def attention_backward(cache, d_out: np.ndarray):
    """Gradients of attention_forward wrt its three inputs and parameters."""
    q_in, k_in, v_in, q, k, v, weights, pooled, p = cache
    if d_out.shape != (q_in.shape[0], p.w_o.shape[1]):
        raise ValueError("upstream gradient shape does not match the forward")
    h = p.w_q.shape[0]
    d_wo = pooled.T @ d_out
    d_pooled = d_out @ p.w_o.T
    d_weights = d_pooled @ v.T
    d_v = weights.T @ d_pooled
    d_scores = weights * (d_weights - (d_weights * weights).sum(axis=1, keepdims=True))
    d_q = d_scores @ k / np.sqrt(h)
    d_k = d_scores.T @ q / np.sqrt(h)
    grads = AttentionParams(q_in.T @ d_q, k_in.T @ d_k, v_in.T @ d_v, d_wo)
    return d_q @ p.w_q.T, d_k @ p.w_k.T, d_v @ p.w_v.T, grads


def mlp_forward(x: np.ndarray, p: MLPParams):
    pre = x @ p.w1 + p.b1
    hid = np.maximum(pre, 0.0)
    out = hid @ p.w2 + p.b2
    return out, (x, pre, hid, p)


def mlp_backward(cache, d_out: np.ndarray):
    x, pre, hid, p = cache
    d_w2 = hid.T @ d_out
    d_b2 = d_out.sum(axis=0)
    d_hid = d_out @ p.w2.T
    d_pre = d_hid * (pre > 0.0)
    grads = MLPParams(x.T @ d_pre, d_pre.sum(axis=0), d_w2, d_b2)
    return d_pre @ p.w1.T, grads


def affine_forward(x: np.ndarray, p: AffineParams):
    return x @ p.w + p.b, (x, p)


def affine_backward(cache, d_out: np.ndarray):
    x, p = cache
    return d_out @ p.w.T, AffineParams(x.T @ d_out, d_out.sum(axis=0))


def positional_encoding(n_steps: int, h: int) -> np.ndarray:
    """Standard alternating sine/cosine encoding, (n_steps, h)."""
    pe = np.zeros((n_steps, h))
    pos = np.arange(n_steps)[:, None].astype(float)
    idx = np.arange(0, h, 2).astype(float)
    freq = np.exp(-np.log(10000.0) * idx / h)
    pe[:, 0::2] = np.sin(pos * freq[None, :])
    pe[:, 1::2] = np.cos(pos * freq[None, : pe[:, 1::2].shape[1]])
    return pe


# ---------------------------------------------------------------------------
# Enhance-and-gate block
# ---------------------------------------------------------------------------

def enhance_forward(f_input: np.ndarray, f_knowledge: np.ndarray,
                    p: EnhancerParams):
    """Gated fusion of the input with its causally enhanced counterpart.

    F_self   = self-attention over the input (no residual)
    F_enhan  = cross-attention(Q=input, K=V=knowledge) + input
    w        = sigmoid(MLP(F_enhan) + MLP(F_self))
    F_output = w * F_enhan + (1 - w) * input
    """
    f_self, self_cache = attention_forward(f_input, f_input, f_input,
                                           p.self_attn)
    cross, cross_cache = attention_forward(f_input, f_knowledge, f_knowledge,
                                           p.cross_attn)
    f_enhan = cross + f_input
    g_enh, enh_cache = mlp_forward(f_enhan, p.gate_mlp_enh)
    g_self, self_mlp_cache = mlp_forward(f_self, p.gate_mlp_self)
    w = 1.0 / (1.0 + np.exp(-(g_enh + g_self)))
    f_output = w * f_enhan + (1.0 - w) * f_input
    cache = (f_input, f_enhan, w, self_cache, cross_cache, enh_cache,
             self_mlp_cache, p)
    return f_output, w, cache


def enhance_backward(cache, d_out: np.ndarray):
    """Gradients of enhance_forward wrt both inputs and all block weights."""
    (f_input, f_enhan, w, self_cache, cross_cache, enh_cache,
     self_mlp_cache, p) = cache
    if d_out.shape != f_input.shape:
        raise ValueError("upstream gradient shape does not match the forward")
    d_w = d_out * (f_enhan - f_input)
    d_enhan = d_out * w
    d_input = d_out * (1.0 - w)

    d_gate = d_w * w * (1.0 - w)
    d_enhan_mlp, g_enh = mlp_backward(enh_cache, d_gate)
    d_self, g_self_mlp = mlp_backward(self_mlp_cache, d_gate)
    d_enhan = d_enhan + d_enhan_mlp

    # residual: F_enhan = cross + F_input
    d_input = d_input + d_enhan
    dq_c, dk_c, dv_c, g_cross = attention_backward(cross_cache, d_enhan)
    d_input = d_input + dq_c
    d_knowledge = dk_c + dv_c

    dq_s, dk_s, dv_s, g_self_attn = attention_backward(self_cache, d_self)
    d_input = d_input + dq_s + dk_s + dv_s

    grads = EnhancerParams(g_self_attn, g_cross, g_enh, g_self_mlp,
                           AffineParams(np.zeros_like(p.proj.w),
                                        np.zeros_like(p.proj.b)))
    return d_input, d_knowledge, grads


# ---------------------------------------------------------------------------
# FFEM / TFEM wrappers
# ---------------------------------------------------------------------------

def ffem_forward(f_fused: np.ndarray, anchors: np.ndarray, p: EnhancerParams):
    """Fused-feature enhancement: returns (F_fused', F_traj, F_speed, cache).

    Anchors are projected to width h by the block's affine projection; rows
    1..n-1 of the enhanced output are the trajectory features, the last row
    is the speed feature.
    """
    if anchors.shape[1] != p.proj.w.shape[0]:
        raise ValueError("anchor dim does not match the projection")
    know, proj_cache = affine_forward(anchors, p.proj)
    f_out, w, cache = enhance_forward(f_fused, know, p)
    return f_out, f_out[:-1], f_out[-1:], (cache, proj_cache)


def ffem_backward(cache, d_out: np.ndarray):
    """Gradients wrt the fused features, the anchors, and all parameters."""
    enh_cache, proj_cache = cache
    d_input, d_know, grads = enhance_backward(enh_cache, d_out)
    d_anchors, g_proj = affine_backward(proj_cache, d_know)
    grads.proj = g_proj
    return d_input, d_anchors, grads


def tfem_forward(f_traj: np.ndarray, anchors: np.ndarray, p: EnhancerParams):
    """Trajectory-feature enhancement: returns (F_traj', cache).

    Each anchor (flattened 10 x 2 waypoints, meters) expands into 10
    timestep tokens through a shared per-waypoint affine map plus sinusoidal
    positional encoding; the K*10 tokens form the key/value set.
    """
    if anchors.shape[1] % 2 != 0:
        raise ValueError("anchor dim must be even (waypoint pairs)")
    if p.proj.w.shape[0] != 2:
        raise ValueError("trajectory projection must map waypoints (width 2)")
    n_steps = anchors.shape[1] // 2
    h = p.proj.w.shape[1]
    waypoints = anchors.reshape(-1, 2)                      # (K*T, 2)
    tok, proj_cache = affine_forward(waypoints, p.proj)     # (K*T, h)
    pe = positional_encoding(n_steps, h)
    keys = tok + np.tile(pe, (anchors.shape[0], 1))
    f_out, w, cache = enhance_forward(f_traj, keys, p)
    return f_out, (cache, proj_cache, anchors.shape)


def tfem_backward(cache, d_out: np.ndarray):
    """Gradients wrt the trajectory features, the anchors, and parameters."""
    enh_cache, proj_cache, anchor_shape = cache
    d_input, d_keys, grads = enhance_backward(enh_cache, d_out)
    d_waypoints, g_proj = affine_backward(proj_cache, d_keys)
    grads.proj = g_proj
    return d_input, d_waypoints.reshape(anchor_shape), grads
