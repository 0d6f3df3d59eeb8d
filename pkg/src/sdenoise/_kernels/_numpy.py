"""Pure-numpy implementations of the hot per-step kernels.

Mirror of the compiled core in ``_core.pyx``; same call signatures, same
semantics. Everything operates on C-contiguous float64 arrays with batch
rows, matching what the sampler and training loops pass in.
"""

import numpy as np

ACT_TANH = 0
ACT_SILU = 1


def _act(z, act):
    if act == ACT_TANH:
        return np.tanh(z)
    with np.errstate(over="ignore"):  # exp(-z) -> inf gives the correct 0
        s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def _dact(z, h, act):
    # derivative of the activation; tanh uses its output, silu its input
    if act == ACT_TANH:
        return 1.0 - h * h
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def mlp_forward(x, weights, biases, act):
    """Forward pass of a fully connected net with linear final layer.

    Parameters
    ----------
    x : (B, n_in) float64
    weights : list of (n_out_l, n_in_l) float64
    biases : list of (n_out_l,) float64
    act : int
        Activation id applied after every layer except the last.

    Returns
    -------
    out : (B, n_last) float64
    hs : list of layer inputs, hs[0] is x
    zs : list of hidden pre-activations
    """
    h = x
    hs = [h]
    zs = []
    for w, b in zip(weights[:-1], biases[:-1]):
        z = h @ w.T + b
        h = _act(z, act)
        zs.append(z)
        hs.append(h)
    out = h @ weights[-1].T + biases[-1]
    return out, hs, zs


def mlp_input_vjp(v, weights, hs, zs, act):
    """Rows of v^T (d out / d input), backpropagated through the net."""
    d = v @ weights[-1]
    for w, z, h in zip(reversed(weights[:-1]), reversed(zs), reversed(hs[1:])):
        d = (d * _dact(z, h, act)) @ w
    return d


def mlp_param_grads(dout, weights, hs, zs, act):
    """Gradients of a scalar loss wrt all weights/biases given d loss/d out."""
    dws = [None] * len(weights)
    dbs = [None] * len(weights)
    g = dout
    dws[-1] = g.T @ hs[-1]
    dbs[-1] = g.sum(axis=0)
    d = g @ weights[-1]
    for l in range(len(weights) - 2, -1, -1):
        g = d * _dact(zs[l], hs[l + 1], act)
        dws[l] = g.T @ hs[l]
        dbs[l] = g.sum(axis=0)
        if l > 0:
            d = g @ weights[l]
    return dws, dbs


def em_update(state, score, z, f_coeff, g_coeff, dt, noise_scale):
    """One Euler-Maruyama reverse step, fused.

    state - f*state*dt + g^2*score*dt + noise_scale*z
    """
    return (
        state
        - (f_coeff * dt) * state
        + (g_coeff * g_coeff * dt) * score
        + noise_scale * z
    )


def tweedie_combine(x, score, beta2, alpha):
    """(x + beta^2 * score) / alpha, fused."""
    return (x + beta2 * score) * (1.0 / alpha)


def diag_gaussian_score(x, mean, inv_var):
    """-(x - mean) * inv_var with (d,) mean/inv_var broadcast over rows."""
    return (mean - x) * inv_var
