"""Small dense networks with hand-rolled backprop.

Everything operates on plain float64 numpy arrays; no autograd framework is
involved, so training stays dependency-free and bit-reproducible.
"""

from __future__ import annotations

import numpy as np


def tanh_deriv_from_act(a):
    # derivative of tanh expressed through its output: 1 - tanh(x)^2
    return 1.0 - a * a


class Mlp:
    """Feed-forward net with tanh on every layer except the linear head.

    ``layers`` is a list of ``(W, b)`` pairs with ``W`` of shape
    ``(out, in)`` and ``b`` of shape ``(out,)``.
    """

    def __init__(self, layers):
        self.layers = [
            (np.array(W, dtype=float), np.array(b, dtype=float)) for W, b in layers
        ]
        for j, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {j}: weight {W.shape} / bias {b.shape} mismatch")
            if j > 0 and W.shape[1] != self.layers[j - 1][0].shape[0]:
                raise ValueError(
                    f"layer {j} expects {W.shape[1]} inputs, got {self.layers[j - 1][0].shape[0]}"
                )

    @classmethod
    def create(cls, sizes, rng, final_scale=1.0):
        """Gaussian init with 1/sqrt(fan_in) scale; head scaled by final_scale."""
        layers = []
        for j in range(len(sizes) - 1):
            scale = 1.0 / np.sqrt(sizes[j])
            if j == len(sizes) - 2:
                scale *= final_scale
            W = rng.normal(0.0, scale, size=(sizes[j + 1], sizes[j]))
            b = np.zeros(sizes[j + 1])
            layers.append((W, b))
        return cls(layers)

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def in_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self):
        return [self.in_dim] + [W.shape[0] for W, _ in self.layers]

    def forward(self, x):
        """Returns (output (n, out_dim), cache) for a batch of inputs (n, in_dim)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        acts = [x]
        pres = []
        last = self.n_layers - 1
        for j, (W, b) in enumerate(self.layers):
            pre = acts[-1] @ W.T + b
            pres.append(pre)
            acts.append(np.tanh(pre) if j < last else pre)
        return acts[-1], (pres, acts)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Backprop a batch of output gradients.

        Returns ``(grads, grad_in)`` where ``grads[j] = (dW_j, db_j)`` summed
        over the batch and ``grad_in`` is the gradient wrt the inputs.
        """
        pres, acts = cache
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        grads = [None] * self.n_layers
        last = self.n_layers - 1
        for j in range(last, -1, -1):
            W, _ = self.layers[j]
            g_pre = g if j == last else g * tanh_deriv_from_act(acts[j + 1])
            grads[j] = (g_pre.T @ acts[j], g_pre.sum(axis=0))
            g = g_pre @ W
        return grads, g

    def input_jacobian(self, cache):
        """d(output)/d(input) per sample: shape (n, out_dim, in_dim)."""
        pres, acts = cache
        n = acts[0].shape[0]
        last = self.n_layers - 1
        J = np.broadcast_to(
            self.layers[last][0], (n,) + self.layers[last][0].shape
        ).copy()
        for j in range(last - 1, -1, -1):
            W, _ = self.layers[j]
            J = (J * tanh_deriv_from_act(acts[j + 1])[:, None, :]) @ W
        return J

    def hidden_chain(self, cache, col):
        """Sensitivity of the head's input to input column ``col``: (n, width).

        For a single-layer net the head reads the raw input, so the chain is
        an indicator on that column.
        """
        pres, acts = cache
        n = acts[0].shape[0]
        last = self.n_layers - 1
        if last == 0:
            chain = np.zeros((n, self.in_dim))
            chain[:, col] = 1.0
            return chain
        W0, _ = self.layers[0]
        chain = tanh_deriv_from_act(acts[1]) * W0[:, col][None, :]
        for j in range(1, last):
            W, _ = self.layers[j]
            chain = tanh_deriv_from_act(acts[j + 1]) * (chain @ W.T)
        return chain

    def max_abs_preactivation(self, cache):
        """Largest |pre-activation| per sample across the tanh layers."""
        pres, _ = cache
        n = pres[0].shape[0]
        if self.n_layers == 1:
            return np.zeros(n)
        stacked = [np.abs(p).max(axis=1) for p in pres[:-1]]
        return np.max(np.stack(stacked, axis=0), axis=0)

    def parameters(self):
        out = []
        for W, b in self.layers:
            out.append(W)
            out.append(b)
        return out

    def copy(self):
        return type(self)([(W.copy(), b.copy()) for W, b in self.layers])

    def to_dict(self):
        return {
            "layers": [
                {"w": W.tolist(), "b": b.tolist()} for W, b in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, d):
        return cls([(np.array(l["w"]), np.array(l["b"])) for l in d["layers"]])


def stacked_forward(nets, x, dtype=None):
    """Evaluates same-shaped nets in one batched matmul chain.

    ``x`` has shape (k, n, in_dim) with one slab per net. Returns
    ``(out (k, n, out_dim), cache)``. Weight slabs are restacked on every
    call, so callers may mutate the underlying layers between calls.
    ``dtype`` optionally selects the compute precision (training uses
    float32 for speed; weights themselves stay float64).
    """
    dtype = np.float64 if dtype is None else dtype
    k = len(nets)
    L = nets[0].n_layers
    acts = [np.asarray(x, dtype=dtype)]
    Ws = []
    for j in range(L):
        W = np.stack([net.layers[j][0] for net in nets]).astype(dtype, copy=False)
        b = np.stack([net.layers[j][1] for net in nets]).astype(dtype, copy=False)
        Ws.append(W)
        pre = acts[-1] @ W.transpose(0, 2, 1) + b[:, None, :]
        acts.append(np.tanh(pre) if j < L - 1 else pre)
    return acts[-1], (Ws, acts)


def stacked_backward(nets, cache, grad_out):
    """Backprop through a stacked_forward cache.

    ``grad_out`` is (k, n, out_dim). Returns per-net grads:
    ``grads[net_index][layer] = (dW, db)`` in the cache's compute dtype.
    """
    Ws, acts = cache
    k = len(nets)
    L = len(Ws)
    g = np.asarray(grad_out, dtype=Ws[0].dtype)
    per_layer = [None] * L
    for j in range(L - 1, -1, -1):
        if j < L - 1:
            a = acts[j + 1]
            g = g * (1.0 - a * a)
        per_layer[j] = (g.transpose(0, 2, 1) @ acts[j], g.sum(axis=1))
        g = g @ Ws[j]
    return [
        [(per_layer[j][0][i], per_layer[j][1][i]) for j in range(L)] for i in range(k)
    ]


def global_norm(arrays):
    total = 0.0
    for a in arrays:
        total += float(np.sum(a * a))
    return np.sqrt(total)


def clip_global_norm(grads, max_norm):
    """Scales the list of gradient arrays in place; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class Adam:
    """Adaptive-moment optimizer over an explicit list of parameter arrays."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
