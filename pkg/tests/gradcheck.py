"""Finite-difference gradient checking helpers shared by the test modules.

ReLU networks are piecewise linear, so central differences are only valid
when no pre-activation sits within the perturbation's reach of a kink;
instances are drawn from a deterministic seed sequence and re-drawn until
they clear the margin.
"""

from __future__ import annotations

import numpy as np

import stratbc.policy as pol

KINK_MARGIN = 2e-4


def draw_instance(seed: int, state_dim=6, hidden=8, out_dim=4, kind=pol.CONTINUOUS,
                  n_levels=2, batch=5):
    """Policy + batch with all pre-activations clear of ReLU kinks."""
    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt])
        policy = pol.init_policy(
            state_dim, hidden, out_dim, kind, n_levels, int(rng.integers(2**31))
        )
        states = rng.standard_normal((batch, state_dim))
        ok = True
        for level in range(1, n_levels + 1):
            _, cache = pol.forward(policy, level, states)
            margin = min(
                min(np.abs(z).min() for z in cache.enc_pre),
                np.abs(cache.head_pre[0]).min(),
            )
            if margin <= KINK_MARGIN:
                ok = False
                break
        if ok:
            return policy, states
    raise AssertionError(f"could not draw a kink-free instance for seed {seed}")


def flatten_params(policy) -> np.ndarray:
    return np.concatenate([a.reshape(-1) for a in pol.param_arrays(policy)])


def set_params(policy, flat: np.ndarray) -> None:
    offset = 0
    for a in pol.param_arrays(policy):
        a[...] = flat[offset : offset + a.size].reshape(a.shape)
        offset += a.size


def policy_fd_grad(policy, level, states, scalar_loss, step=1e-5) -> np.ndarray:
    """Central differences of scalar_loss(head_output) over every parameter."""
    base = flatten_params(policy).copy()
    fd = np.zeros_like(base)
    for i in range(base.size):
        for sign, slot in ((+1, 0), (-1, 1)):
            base[i] += sign * step
            set_params(policy, base)
            out, cache = pol.forward(policy, level, states)
            value = scalar_loss(cache.output if policy.head_kind == pol.DISCRETE else out)
            fd[i] += sign * value / (2 * step)
            base[i] -= sign * step
    set_params(policy, base)
    return fd


def analytic_policy_grad(policy, level, states, grad_at_output) -> np.ndarray:
    _, cache = pol.forward(policy, level, states)
    grads = pol.backward(policy, level, grad_at_output, cache)
    return np.concatenate([g.reshape(-1) for g in pol.grad_arrays(grads)])
