"""Pure-numpy implementations of the hot kernels.

This module is the reference semantics for the compiled core in
``_core.pyx``; both expose the same three functions and are interchangeable
up to floating-point summation order. The backend actually used is chosen
in ``goldilocks.backends`` at import time.

Teacher forward pass, for one feature vector x:

    z      = encoder_w @ x + encoder_b          # (positions * embed_dim,)
    stack  = tanh(z) reshaped to (positions, embed_dim)
    pooled = row mean of stack, or its last row  # (embed_dim,)
    pred   = 0.5 * sigmoid(head_w @ pooled + head_b)
"""

import math

import numpy as np

NAME = "python"


def teacher_predict(feats, enc_w, enc_b, head_w, head_b, positions, mean_pool):
    """Utility predictions for a batch of feature rows, each in (0, 0.5)."""
    n = feats.shape[0]
    z = feats @ enc_w.T + enc_b
    stack = np.tanh(z).reshape(n, positions, head_w.shape[0])
    pooled = stack.mean(axis=1) if mean_pool else stack[:, -1, :]
    u = pooled @ head_w + head_b
    return 0.5 / (1.0 + np.exp(-u))


def teacher_batch_grads(feats, targets, enc_w, enc_b, head_w, head_b, positions, mean_pool):
    """Mean-squared-error loss and its gradients on one mini-batch.

    Returns ``(preds, mse, g_enc_w, g_enc_b, g_head_w, g_head_b)`` where the
    gradients are of the batch-mean squared error with respect to each
    parameter block.
    """
    n = feats.shape[0]
    h = head_w.shape[0]
    z = feats @ enc_w.T + enc_b
    act = np.tanh(z)
    stack = act.reshape(n, positions, h)
    pooled = stack.mean(axis=1) if mean_pool else stack[:, -1, :]
    u = pooled @ head_w + head_b
    sig = 1.0 / (1.0 + np.exp(-u))
    preds = 0.5 * sig
    err = preds - targets
    mse = float(err @ err) / n

    # d(mse)/du_i, folding in the 0.5-scaled sigmoid derivative
    du = (2.0 / n) * err * 0.5 * sig * (1.0 - sig)
    g_head_b = float(du.sum())
    g_head_w = du @ pooled
    dpooled = np.outer(du, head_w)
    if mean_pool:
        dstack = np.broadcast_to(dpooled[:, None, :] / positions, stack.shape)
    else:
        dstack = np.zeros_like(stack)
        dstack[:, -1, :] = dpooled
    dz = dstack.reshape(n, positions * h) * (1.0 - act * act)
    g_enc_w = dz.T @ feats
    g_enc_b = dz.sum(axis=0)
    return preds, mse, g_enc_w, g_enc_b, g_head_w, g_head_b


def group_normalize(rewards):
    """Group-relative normalization of a reward vector.

    Returns ``(advantages, mean, std)`` with the population standard
    deviation (divide by the group size). A group whose rewards are all
    equal is detected exactly (max == min) and yields zero advantages and
    std == 0.0, so the zero-variance flag is never polluted by rounding.
    """
    r = np.ascontiguousarray(rewards, dtype=np.float64)
    g = r.shape[0]
    mean = float(r.sum()) / g
    if r.max() == r.min():
        return np.zeros(g), mean, 0.0
    d = r - mean
    std = math.sqrt(float(d @ d) / g)
    return d / std, mean, std
