"""Pure-numpy implementations of the hot training kernels.

Same contract as the compiled module ``fedsurv._ckernels``; which one is
active is decided once at import in ``fedsurv._backend``.
"""
import numpy as np


def mlp_forward(sizes, params, x):
    """Forward pass. ReLU on hidden layers, identity on the output layer."""
    h = x
    off = 0
    last = len(sizes) - 2
    for layer in range(len(sizes) - 1):
        nin, nout = int(sizes[layer]), int(sizes[layer + 1])
        w = params[off:off + nin * nout].reshape(nin, nout)
        off += nin * nout
        b = params[off:off + nout]
        off += nout
        h = h @ w + b
        if layer < last:
            h = np.maximum(h, 0.0)
    return h


def mlp_forward_cached(sizes, params, x):
    """Forward pass returning hidden post-activations for a later backward."""
    hidden = []
    h = x
    off = 0
    last = len(sizes) - 2
    for layer in range(len(sizes) - 1):
        nin, nout = int(sizes[layer]), int(sizes[layer + 1])
        w = params[off:off + nin * nout].reshape(nin, nout)
        off += nin * nout
        b = params[off:off + nout]
        off += nout
        h = h @ w + b
        if layer < last:
            h = np.maximum(h, 0.0)
            hidden.append(h)
    return h, hidden


def mlp_backward(sizes, params, x, hidden, dout):
    """Gradient of sum(dout * output) w.r.t. the flat parameter vector.

    ``hidden`` must come from mlp_forward_cached on the same (params, x).
    ReLU subgradient at 0 is 0, so the post-activation sign is enough.
    """
    n_layers = len(sizes) - 1
    offsets = []
    off = 0
    for layer in range(n_layers):
        nin, nout = int(sizes[layer]), int(sizes[layer + 1])
        offsets.append((off, nin, nout))
        off += nin * nout + nout
    grad = np.empty(off)
    d = dout
    for layer in reversed(range(n_layers)):
        off, nin, nout = offsets[layer]
        h_in = x if layer == 0 else hidden[layer - 1]
        grad[off:off + nin * nout] = (h_in.T @ d).ravel()
        grad[off + nin * nout:off + nin * nout + nout] = d.sum(axis=0)
        if layer > 0:
            w = params[off:off + nin * nout].reshape(nin, nout)
            d = (d @ w.T) * (hidden[layer - 1] > 0.0)
    return grad


def adam_update(params, grad, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam step at step counter t (already incremented)."""
    m2 = beta1 * m + (1.0 - beta1) * grad
    v2 = beta2 * v + (1.0 - beta2) * grad * grad
    mhat = m2 / (1.0 - beta1 ** t)
    vhat = v2 / (1.0 - beta2 ** t)
    p2 = params - lr * mhat / (np.sqrt(vhat) + eps)
    return p2, m2, v2
