"""Finite-difference verification of the network's reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .model import AdaptiveSTNetwork, ModelConfig

TINY = ModelConfig(n_nodes=3, lookback=4, horizon=2, n_features=1, d_hidden=4, d_out=6,
                   d_adapter=2, st_blocks=1, diffusion_steps=2, kernel_size=2)


def tiny_problem(seed: int = 0, config: ModelConfig = TINY):
    """A tiny network with non-zero adapters, a random graph and a random batch."""
    rng = np.random.default_rng(seed)
    adj = rng.uniform(size=(config.n_nodes, config.n_nodes))
    net = AdaptiveSTNetwork(config, adj, seed=seed)
    # move the up-projection off zero so adapter gradients are exercised
    net.adapter["adapter.w2"].data = rng.uniform(-0.5, 0.5, net.adapter["adapter.w2"].shape)
    x = rng.normal(size=(2, config.n_nodes, config.lookback, config.n_features))
    weights = rng.normal(size=(2, config.n_nodes, config.horizon, config.n_features))
    return net, x, weights


def check_network_gradients(seed: int = 0, step: float = 1e-5, config: ModelConfig = TINY) -> dict[str, float]:
    """Max relative error per parameter between autodiff and central differences.

    The probe loss is a fixed random projection of the forecasts, which keeps it
    smooth apart from ReLU kinks.
    """
    net, x, weights = tiny_problem(seed, config)
    w = nx.Tensor(weights)
    params = net.named_parameters()
    net.set_trainable("full")
    net.zero_grad()
    with nx.Tape():
        loss = nx.total(nx.mul(net.forward(nx.Tensor(x)), w))
        nx.backward(loss)
    errors = {}
    for name, p in params.items():
        analytic = p.grad.copy()
        original = p.data.copy()

        def f(v, p=p):
            p.data = v
            return float(np.sum(net.predict(x) * weights))

        numeric = nx.finite_difference_gradient(f, original, step)
        p.data = original
        errors[name] = nx.relative_error(analytic, numeric)
    return errors
