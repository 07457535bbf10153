"""Exact ground-truth safety computations.

Backward dynamic programming over the absorbing auxiliary MDP yields the
long-term safe probability as a value function: V(x, k) is the probability
that the system stays safe for the remaining k steps under a given policy.
A brute-force trajectory enumeration of the same probability ships as an
independent oracle for small instances, and a mixed-policy propagator
evaluates the safety of a deployed controller followed by a nominal policy.

The horizon is finite, so every sweep is a single exact pass; there is no
discounting and no iteration to convergence.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, EnumerationSizeError, UnsupportedEnvironmentError
from .mdp import (
    AugmentedState,
    ConfoundedMdpModel,
    MediatorModel,
    TabularPolicy,
    absorbing_online_matrix,
    p_online_matrix,
)

BRUTE_FORCE_GUARD = 10**7


@dataclass(frozen=True)
class TabularV:
    """Value table V(x, k) = long-term safe probability with k steps remaining."""

    values: np.ndarray  # (horizon + 1, n_states)

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1

    def value(self, x: int, k: int) -> float:
        return float(self.values[k, x])

    def __getitem__(self, y: AugmentedState) -> float:
        return self.value(y.x, y.k)


@dataclass(frozen=True)
class TabularQ:
    """Action-value table Q((x, k), u) of the absorbing auxiliary MDP."""

    values: np.ndarray  # (horizon + 1, n_states, n_actions)

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1

    def q_row(self, x: int, k: int) -> np.ndarray:
        return self.values[k, x]

    def value(self, x: int, k: int, u: int) -> float:
        return float(self.values[k, x, u])

    def __getitem__(self, key: tuple[AugmentedState, int]) -> float:
        y, u = key
        return self.value(y.x, y.k, u)


@dataclass(frozen=True)
class TabularQm:
    """Mediator-conditioned action-value table Q_M((x, k), u, m)."""

    values: np.ndarray  # (horizon + 1, n_states, n_actions, n_mediators)

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1

    def value(self, x: int, k: int, u: int, m: int) -> float:
        return float(self.values[k, x, u, m])


def _policy_matrix(model: ConfoundedMdpModel, policy: TabularPolicy, k: int) -> np.ndarray:
    if not policy.is_blind:
        raise ConfigurationError("dynamic programming requires a latent-blind policy")
    if policy.table.ndim == 2:
        table = policy.table
    else:
        if policy.table.shape[0] < model.horizon + 1:
            raise ConfigurationError("time-indexed policy table shorter than the horizon")
        table = policy.table[k]
    if table.shape != (model.n_states, model.n_actions):
        raise ConfigurationError("policy table does not cover all states and actions")
    return table


def q_dp(model: ConfoundedMdpModel, policy: TabularPolicy) -> TabularQ:
    """Exact Q by one backward sweep: Q((x,k),u) = E[V(x', k-1)] under the
    absorbing online kernel, with Q((x,0),u) = 1{C(x)} for every action."""
    absorbing = absorbing_online_matrix(model)
    h = model.horizon
    n, nu = model.n_states, model.n_actions
    q = np.empty((h + 1, n, nu))
    v_prev = model.safe.astype(float)
    q[0] = v_prev[:, None]
    for k in range(1, h + 1):
        q[k] = absorbing @ v_prev  # (x,u,y) @ (y,) -> (x,u)
        pi_k = _policy_matrix(model, policy, k)
        v_prev = np.where(model.safe, (pi_k * q[k]).sum(axis=1), 0.0)
    return TabularQ(values=q)


def value_dp(model: ConfoundedMdpModel, policy: TabularPolicy) -> TabularV:
    """Exact V by backward DP: the policy average of :func:`q_dp` slices."""
    q = q_dp(model, policy)
    h = model.horizon
    v = np.empty((h + 1, model.n_states))
    v[0] = model.safe.astype(float)
    for k in range(1, h + 1):
        pi_k = _policy_matrix(model, policy, k)
        v[k] = np.where(model.safe, (pi_k * q.values[k]).sum(axis=1), 0.0)
    return TabularV(values=v)


def qm_dp(
    model: ConfoundedMdpModel, mediator: MediatorModel, policy: TabularPolicy
) -> TabularQm:
    """Exact mediator-conditioned Q under online statistics.

    Conditioning on the mediator screens off the action online, so the rows
    are built from P(x'|x,m) = sum_w P(w|x) P(x'|x,m,w) at safe states and
    the frozen point mass at unsafe ones; the u axis is kept for interface
    parity with estimated tables.
    """
    if mediator is None:
        raise UnsupportedEnvironmentError("environment has no mediator structure")
    h = model.horizon
    n, nu, nm = model.n_states, model.n_actions, mediator.n_mediators
    # online mediated rows: (x, m, x')
    med_rows = np.einsum("xw,xmwy->xmy", model.latent_dist, mediator.mediated_transition)
    unsafe = np.flatnonzero(~model.safe)
    med_rows[unsafe] = 0.0
    med_rows[unsafe, :, unsafe] = 1.0
    v = value_dp(model, policy).values
    qm = np.empty((h + 1, n, nu, nm))
    qm[0] = model.safe.astype(float)[:, None, None]
    for k in range(1, h + 1):
        per_m = med_rows @ v[k - 1]  # (x, m)
        qm[k] = per_m[:, None, :]
    return TabularQm(values=qm)


def brute_force_psi(
    model: ConfoundedMdpModel, policy: TabularPolicy, x: int, t: int
) -> float:
    """Long-term safe probability by literal trajectory enumeration.

    Sums, over every visible trajectory x_{t:H} of the *raw* online chain
    under ``policy``, the product of one-step probabilities times the
    indicator that every visited state is safe. Independent of the DP path:
    no absorption, no value reuse.
    """
    model.check_state(x)
    if not 0 <= t <= model.horizon:
        raise ConfigurationError(f"time {t} outside the episode [0, {model.horizon}]")
    steps = model.horizon - t
    if model.n_states**steps > BRUTE_FORCE_GUARD:
        raise EnumerationSizeError(
            f"{model.n_states}^{steps} trajectories exceed the enumeration guard"
        )
    if not model.safe[x]:
        return 0.0
    online = p_online_matrix(model)
    total = 0.0
    for tail in itertools.product(range(model.n_states), repeat=steps):
        prob = 1.0
        current = x
        for offset, nxt in enumerate(tail):
            if not model.safe[nxt]:
                prob = 0.0
                break
            k_now = model.horizon - (t + offset)
            pi_row = policy.action_probs(current, k_now)
            prob *= float(pi_row @ online[current, :, nxt])
            if prob == 0.0:
                break
            current = nxt
        total += prob
    return total


def mixed_policy_long_term_safety(
    model: ConfoundedMdpModel,
    controller: Callable[[int, int], np.ndarray],
    policy: TabularPolicy,
    t: int,
    x0: int,
) -> float:
    """Exact long-term safety when ``controller`` runs for t steps, then ``policy``.

    ``controller(x, t)`` returns the action distribution the deployed
    controller plays at (x, t); deterministic controllers return a point
    mass. The visible-state distribution is propagated through the absorbing
    online kernel for t steps and then dotted with V(x, H - t).
    """
    model.check_state(x0)
    if not 0 <= t <= model.horizon:
        raise ConfigurationError(f"time {t} outside the episode [0, {model.horizon}]")
    v = value_dp(model, policy)
    absorbing = absorbing_online_matrix(model)
    dist = np.zeros(model.n_states)
    dist[x0] = 1.0
    for step in range(t):
        nxt = np.zeros(model.n_states)
        for x in np.flatnonzero(dist > 0.0):
            action_dist = controller(int(x), step)
            nxt += dist[x] * (action_dist @ absorbing[x])
        dist = nxt
    return float(dist @ v.values[model.horizon - t])


def export_v_csv(v: TabularV, path) -> None:
    """Flat dump of a value table: one (state, k, value) row per entry."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "k", "value"])
        for k in range(v.values.shape[0]):
            for x in range(v.values.shape[1]):
                writer.writerow([x, k, repr(float(v.values[k, x]))])


def export_q_csv(q: TabularQ, action_values: tuple[int, ...], path) -> None:
    """Flat dump of a Q table: one (state, k, action, value) row per entry."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "k", "u", "value"])
        for k in range(q.values.shape[0]):
            for x in range(q.values.shape[1]):
                for ui, u in enumerate(action_values):
                    writer.writerow([x, k, u, repr(float(q.values[k, x, ui]))])
