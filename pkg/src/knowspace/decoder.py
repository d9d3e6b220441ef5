"""Evolutionary trajectory decoder: anchor tokens, dual-branch decoding,
Top-K routing, the trajectory/speed loss suite, and a desk-scale trainer.

Each trajectory anchor (10 waypoints, flattened to 20 reals) is encoded into
one planning token; tokens attend onto the trajectory features, and two heads
predict per-anchor geometric offsets (fine branch) and selection logits
(coarse branch).  The token pool grows one-for-one with the anchor set, so
new knowledge extends the decoder without touching existing tokens.  All
gradients are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import (
    AffineParams,
    AttentionParams,
    MLPParams,
    affine_backward,
    affine_forward,
    attention_backward,
    attention_forward,
    init_attention,
    init_mlp,
    mlp_backward,
    mlp_forward,
    param_arrays,
    positional_encoding,
    softmax_rows,
    zeros_like_params,
    _uniform,
)

EPS = 1e-12


@dataclass
class DecoderParams:
    """Weights of the decoder plus routing scalars."""

    token_encoder: AffineParams     # per-waypoint 2 -> h
    interaction_attn: AttentionParams
    offset_head: MLPParams          # h -> h -> 20
    logit_head: MLPParams           # h -> h -> 1
    speed_head: AffineParams        # h -> n_speed_classes
    tau: float = 1.0
    top_k: int = 1

    def __post_init__(self):
        if not (self.tau > 0):
            raise ValueError("tau must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class DecodeOutput:
    trajs: np.ndarray     # (K, 20) candidate trajectories, meters
    probs: np.ndarray     # (K,) selection probabilities
    logits: np.ndarray    # (K,) selection logits
    offsets: np.ndarray   # (K, 20) geometric offsets
    selected: np.ndarray  # (20,) Top-K routed trajectory


@dataclass
class LossBreakdown:
    l_prob: float = 0.0
    l_best: float = 0.0
    l_weighted: float = 0.0
    l_traj: float = 0.0
    l_speed: float = 0.0
    total: float = 0.0


def init_decoder(h: int, seed: int, tau: float = 1.0, top_k: int = 1,
                 n_speed_classes: int = 4) -> DecoderParams:
    rng = np.random.default_rng(seed)
    return DecoderParams(
        token_encoder=AffineParams(_uniform(rng, (2, h), h),
                                   _uniform(rng, (h,), h)),
        interaction_attn=init_attention(h, rng),
        offset_head=init_mlp(h, h, 20, h, rng),
        logit_head=init_mlp(h, h, 1, h, rng),
        speed_head=AffineParams(_uniform(rng, (h, n_speed_classes), h),
                                _uniform(rng, (n_speed_classes,), h)),
        tau=tau, top_k=top_k,
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def encode_anchors(anchors: np.ndarray, p: DecoderParams):
    """One h-width planning token per anchor: per-waypoint affine plus
    positional encoding, mean-pooled over the 10 timesteps."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if anchors.shape[1] % 2 != 0:
        raise ValueError("anchor dim must be even (waypoint pairs)")
    K = anchors.shape[0]
    n_steps = anchors.shape[1] // 2
    h = p.token_encoder.w.shape[1]
    per, aff_cache = affine_forward(anchors.reshape(-1, 2), p.token_encoder)
    per = per.reshape(K, n_steps, h) + positional_encoding(n_steps, h)[None]
    tokens = per.mean(axis=1)
    return tokens, (aff_cache, K, n_steps, h)


def encode_anchors_backward(cache, d_tokens: np.ndarray):
    aff_cache, K, n_steps, h = cache
    d_per = np.repeat(d_tokens[:, None, :] / n_steps, n_steps, axis=1)
    d_wp, g_aff = affine_backward(aff_cache, d_per.reshape(-1, h))
    return d_wp.reshape(K, 2 * n_steps), g_aff


def top_k_route(trajs: np.ndarray, probs: np.ndarray, k: int) -> np.ndarray:
    """k=1: argmax row (lowest index on ties); k>1: probability-renormalized
    weighted mean of the top-k rows."""
    order = np.argsort(-probs, kind="stable")
    idx = order[: min(k, probs.shape[0])]
    if len(idx) == 1:
        return trajs[idx[0]].copy()
    w = probs[idx]
    w = w / w.sum()
    return w @ trajs[idx]


def decode_forward(anchors: np.ndarray, f_traj: np.ndarray, p: DecoderParams):
    """Full decode with cache for the backward pass."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if anchors.shape[0] == 0:
        raise ValueError("empty anchor set")
    tokens, tok_cache = encode_anchors(anchors, p)
    attended, attn_cache = attention_forward(tokens, f_traj, f_traj,
                                             p.interaction_attn)
    offsets, off_cache = mlp_forward(attended, p.offset_head)
    logits2d, log_cache = mlp_forward(attended, p.logit_head)
    logits = logits2d[:, 0]
    trajs = anchors + offsets
    probs = softmax_rows((logits / p.tau)[None, :])[0]
    selected = top_k_route(trajs, probs, p.top_k)
    out = DecodeOutput(trajs=trajs, probs=probs, logits=logits,
                       offsets=offsets, selected=selected)
    cache = (tok_cache, attn_cache, off_cache, log_cache, anchors, p)
    return out, cache


def decode(anchors: np.ndarray, f_traj: np.ndarray,
           p: DecoderParams) -> DecodeOutput:
    out, _ = decode_forward(anchors, f_traj, p)
    return out


def decode_backward(cache, d_trajs: np.ndarray, d_logits: np.ndarray):
    """Gradients wrt F_traj, anchors, and decoder weights.

    d_trajs is the upstream gradient on the candidate trajectories (which
    flows into both the offsets and, residually, the anchors); d_logits is
    the upstream gradient on the raw logits.
    """
    tok_cache, attn_cache, off_cache, log_cache, anchors, p = cache
    d_attended_o, g_off = mlp_backward(off_cache, d_trajs)
    d_attended_l, g_log = mlp_backward(log_cache, d_logits[:, None])
    d_tokens, dk, dv, g_attn = attention_backward(
        attn_cache, d_attended_o + d_attended_l)
    d_f_traj = dk + dv
    d_anchors_tok, g_tok = encode_anchors_backward(tok_cache, d_tokens)
    d_anchors = d_anchors_tok + d_trajs
    grads = DecoderParams(g_tok, g_attn, g_off, g_log,
                          AffineParams(np.zeros_like(p.speed_head.w),
                                       np.zeros_like(p.speed_head.b)),
                          tau=p.tau, top_k=p.top_k)
    return d_f_traj, d_anchors, grads


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def smooth_l1(residual: np.ndarray, beta: float = 1.0) -> np.ndarray:
    a = np.abs(residual)
    return np.where(a < beta, 0.5 * a ** 2 / beta, a - 0.5 * beta)


def smooth_l1_grad(residual: np.ndarray, beta: float = 1.0) -> np.ndarray:
    return np.where(np.abs(residual) < beta, residual / beta,
                    np.sign(residual))


def traj_loss(out: DecodeOutput, y_traj: np.ndarray,
              tau: float) -> LossBreakdown:
    lb, _, _ = traj_loss_with_grad(out, y_traj, tau)
    return lb


def traj_loss_with_grad(out: DecodeOutput, y_traj: np.ndarray, tau: float):
    """Trajectory loss suite plus analytic gradients wrt trajs and logits.

    Target distribution: Y_probs = softmax(-||trajs_k - Y||_2 / tau).
    l_prob     = KL(Y_probs || probs)
    l_best     = mean smooth-L1 to the minimum-distance candidate
    l_weighted = sum_k Y_probs_k * mean smooth-L1(trajs_k - Y)
    """
    y = np.asarray(y_traj, dtype=float)
    trajs = out.trajs
    K, d = trajs.shape
    resid = trajs - y[None, :]
    dist = np.sqrt((resid ** 2).sum(axis=1))
    y_probs = softmax_rows((-dist / tau)[None, :])[0]
    q = np.maximum(out.probs, EPS)

    l_prob = float((y_probs * (np.log(y_probs) - np.log(q))).sum())
    sl1_rows = smooth_l1(resid).mean(axis=1)          # (K,)
    j_best = int(np.argmin(dist))                      # lowest index on ties
    l_best = float(sl1_rows[j_best])
    l_weighted = float(y_probs @ sl1_rows)
    l_traj = l_prob + l_best + l_weighted
    lb = LossBreakdown(l_prob=l_prob, l_best=l_best, l_weighted=l_weighted,
                       l_traj=l_traj, total=l_traj)

    # --- gradients ---
    # logits: only l_prob sees probs; softmax(logits/tau) jacobian
    d_logits = (q - y_probs) / tau

    # trajs: direct smooth-L1 terms
    d_trajs = np.zeros_like(trajs)
    d_trajs[j_best] += smooth_l1_grad(resid[j_best]) / d
    d_trajs += y_probs[:, None] * smooth_l1_grad(resid) / d

    # trajs: through Y_probs = softmax(-dist/tau)
    # dKL/dY_probs_k = log(Y_probs/q) + 1 ; dl_weighted/dY_probs_k = sl1_k
    dLdp = (np.log(y_probs) - np.log(q) + 1.0) + sl1_rows
    d_scores = y_probs * (dLdp - float(y_probs @ dLdp))
    d_dist = -d_scores / tau
    safe = np.maximum(dist, EPS)
    d_trajs += (d_dist / safe)[:, None] * resid

    return lb, d_trajs, d_logits


def speed_loss(f_speed: np.ndarray, head: AffineParams,
               target_class: int) -> float:
    loss, _, _ = speed_loss_with_grad(f_speed, head, target_class)
    return loss


def speed_loss_with_grad(f_speed: np.ndarray, head: AffineParams,
                         target_class: int):
    """Cross-entropy of softmax(linear(F_speed)) at the target class."""
    f_speed = np.atleast_2d(np.asarray(f_speed, dtype=float))
    logits, cache = affine_forward(f_speed, head)
    n_classes = logits.shape[1]
    if not (0 <= target_class < n_classes):
        raise ValueError(f"target class {target_class} out of range "
                         f"[0, {n_classes})")
    probs = softmax_rows(logits)
    loss = float(-np.log(np.maximum(probs[0, target_class], EPS)))
    d_logits = probs.copy()
    d_logits[0, target_class] -= 1.0
    d_f_speed, g_head = affine_backward(cache, d_logits)
    return loss, d_f_speed, g_head


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_decoder(dataset, anchors: np.ndarray, p: DecoderParams,
                  steps: int, learning_rate: float, seed: int = 0):
    """Full-batch gradient descent with analytic gradients.

    Each sample is (F_traj, Y_traj, target_speed_class); the speed feature is
    the mean of the F_traj rows.  Deterministic (no stochastic minibatching;
    the seed only labels the run).  Returns the trained parameters and a
    per-step LossBreakdown trace.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    p = replace(p,
                token_encoder=AffineParams(p.token_encoder.w.copy(),
                                           p.token_encoder.b.copy()),
                interaction_attn=AttentionParams(
                    *(a.copy() for a in param_arrays(p.interaction_attn))),
                offset_head=MLPParams(*(a.copy() for a in
                                        param_arrays(p.offset_head))),
                logit_head=MLPParams(*(a.copy() for a in
                                       param_arrays(p.logit_head))),
                speed_head=AffineParams(p.speed_head.w.copy(),
                                        p.speed_head.b.copy()))
    trace = []
    n = len(dataset)
    for step in range(steps):
        total = zeros_like_params(p)
        agg = LossBreakdown()
        for f_traj, y_traj, speed_cls in dataset:
            out, cache = decode_forward(anchors, f_traj, p)
            lb, d_trajs, d_logits = traj_loss_with_grad(out, y_traj, p.tau)
            _, _, grads = decode_backward(cache, d_trajs, d_logits)
            f_speed = np.asarray(f_traj, dtype=float).mean(axis=0,
                                                           keepdims=True)
            sp, _, g_speed = speed_loss_with_grad(f_speed, p.speed_head,
                                                  int(speed_cls))
            grads.speed_head = g_speed
            for acc, g in zip(param_arrays(total), param_arrays(grads)):
                acc += g
            agg.l_prob += lb.l_prob
            agg.l_best += lb.l_best
            agg.l_weighted += lb.l_weighted
            agg.l_speed += sp
        agg.l_prob /= n
        agg.l_best /= n
        agg.l_weighted /= n
        agg.l_speed /= n
        agg.l_traj = agg.l_prob + agg.l_best + agg.l_weighted
        agg.total = agg.l_traj + agg.l_speed
        if not np.isfinite(agg.total):
            raise FloatingPointError(f"non-finite loss at step {step}")
        trace.append(agg)
        for arr, g in zip(param_arrays(p), param_arrays(total)):
            arr -= learning_rate * g / n
    return p, trace
