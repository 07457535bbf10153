"""Domain types and kernel algebra for confounded MDPs.

A confounded MDP has a visible state x, a latent state w redrawn each step
from P(w|x), and a transition law P(x'|x,u,w). Deployment-time ("online")
statistics marginalize w independently of the action; logged ("offline")
statistics reweight by a latent-aware behavioral policy, which is what makes
offline frequencies a biased picture of the online system.

On top of the raw kernels this module builds the absorbing auxiliary kernels
used for safety analysis: once the safety predicate fails, the visible state
freezes in place, and a countdown index k tracks remaining time. Augmented
states (x, k) are the working currency of every downstream module.

All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import EncodingError, EpisodeEndError, ModelError, PositivityError

ROW_SUM_ATOL = 1e-9

POLICY_BLIND = "blind"
POLICY_AWARE = "aware"


class AugmentedState(NamedTuple):
    """Visible state paired with the remaining time k in the episode (k = H - t)."""

    x: int
    k: int


def _check_probability_table(table: np.ndarray, name: str) -> None:
    if np.any(table < 0.0) or np.any(table > 1.0):
        raise ModelError(f"{name} has entries outside [0, 1]")
    sums = table.sum(axis=-1)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=ROW_SUM_ATOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ModelError(f"{name} rows must sum to 1 (worst deviation {worst:.3e})")


@dataclass(frozen=True)
class ConfoundedMdpModel:
    """Ground-truth specification of a confounded MDP over integer-encoded states.

    Attributes:
        transition: P(x'|x,u,w), shape (n_states, n_actions, n_latents, n_states).
        latent_dist: P(w|x), shape (n_states, n_latents). The latent is redrawn
            from this row at every step, independent of history given x.
        horizon: episode length H (number of transitions).
        safe: boolean safety predicate C(x) per encoded state.
        action_values: physical value of each action index (ordered); used for
            deviation penalties and "largest action" selection.
        name: optional identifier for error messages and reports.
    """

    transition: np.ndarray
    latent_dist: np.ndarray
    horizon: int
    safe: np.ndarray
    action_values: tuple[int, ...]
    name: str = ""

    def __post_init__(self):
        # copy so freezing the tables cannot alias a caller's array
        t = np.array(self.transition, dtype=float)
        d = np.array(self.latent_dist, dtype=float)
        s = np.array(self.safe, dtype=bool)
        if t.ndim != 4:
            raise ModelError("transition must have shape (x, u, w, x')")
        n, nu, nw, n2 = t.shape
        if n2 != n:
            raise ModelError("transition source and destination state axes disagree")
        if d.shape != (n, nw):
            raise ModelError("latent_dist shape must be (n_states, n_latents)")
        if s.shape != (n,):
            raise ModelError("safe mask shape must be (n_states,)")
        if len(self.action_values) != nu:
            raise ModelError("action_values length must equal the action axis")
        if self.horizon < 0:
            raise ModelError("horizon must be nonnegative")
        _check_probability_table(t, "transition")
        _check_probability_table(d, "latent_dist")
        for arr in (t, d, s):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "latent_dist", d)
        object.__setattr__(self, "safe", s)
        object.__setattr__(self, "action_values", tuple(int(a) for a in self.action_values))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_latents(self) -> int:
        return self.transition.shape[2]

    def check_state(self, x: int) -> int:
        if not 0 <= x < self.n_states:
            raise EncodingError(f"unknown state id {x} for model {self.name!r}")
        return int(x)

    def check_action(self, u: int) -> int:
        if not 0 <= u < self.n_actions:
            raise EncodingError(f"unknown action id {u} for model {self.name!r}")
        return int(u)


@dataclass(frozen=True)
class MediatorModel:
    """Front-door structure attached to a confounded MDP.

    The action influences the next state only through an observed mediator m:
    m ~ P(m|x,u), then x' ~ P(x'|x,m,w). The base model's direct transition
    must equal the m-marginal of ``mediated_transition``.

    Attributes:
        mediator_dist: P(m|x,u), shape (n_states, n_actions, n_mediators).
        mediated_transition: P(x'|x,m,w), shape (n_states, n_mediators, n_latents, n_states).
    """

    mediator_dist: np.ndarray
    mediated_transition: np.ndarray

    def __post_init__(self):
        md = np.array(self.mediator_dist, dtype=float)
        mt = np.array(self.mediated_transition, dtype=float)
        if md.ndim != 3 or mt.ndim != 4:
            raise ModelError("mediator tables have wrong rank")
        if mt.shape[0] != md.shape[0] or mt.shape[1] != md.shape[2] or mt.shape[3] != mt.shape[0]:
            raise ModelError("mediator table shapes disagree")
        _check_probability_table(md, "mediator_dist")
        _check_probability_table(mt, "mediated_transition")
        md.setflags(write=False)
        mt.setflags(write=False)
        object.__setattr__(self, "mediator_dist", md)
        object.__setattr__(self, "mediated_transition", mt)

    @property
    def n_mediators(self) -> int:
        return self.mediator_dist.shape[2]

    def check_mediator(self, m: int) -> int:
        if not 0 <= m < self.n_mediators:
            raise EncodingError(f"unknown mediator id {m}")
        return int(m)


@dataclass(frozen=True)
class TabularPolicy:
    """Finite action distribution table.

    Two kinds exist:
      * ``blind``  — online/nominal policies that may not see the latent.
        Table shape (n_states, n_actions), or (horizon+1, n_states, n_actions)
        when the policy depends on remaining time k.
      * ``aware``  — behavioral (logging) policies indexed by the latent.
        Table shape (n_states, n_latents, n_actions).
    """

    table: np.ndarray
    kind: str = POLICY_BLIND

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if self.kind == POLICY_BLIND:
            if t.ndim not in (2, 3):
                raise ModelError("blind policy table must be (x,u) or (k,x,u)")
        elif self.kind == POLICY_AWARE:
            if t.ndim != 3:
                raise ModelError("aware policy table must be (x,w,u)")
        else:
            raise ModelError(f"unknown policy kind {self.kind!r}")
        _check_probability_table(t, "policy table")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def is_blind(self) -> bool:
        return self.kind == POLICY_BLIND

    @property
    def n_actions(self) -> int:
        return self.table.shape[-1]

    def action_probs(self, x: int, k: int = 0) -> np.ndarray:
        """Action row of a latent-blind policy at augmented state (x, k)."""
        if not self.is_blind:
            raise ModelError("latent-aware policy requires the latent; use action_probs_latent")
        if self.table.ndim == 2:
            return self.table[x]
        return self.table[k, x]

    def action_probs_latent(self, x: int, w: int) -> np.ndarray:
        """Action row of a latent-aware behavioral policy at (x, w)."""
        if self.is_blind:
            return self.action_probs(x)
        return self.table[x, w]


def uniform_policy(n_states: int, n_actions: int) -> TabularPolicy:
    """Latent-blind policy playing every action with equal probability."""
    table = np.full((n_states, n_actions), 1.0 / n_actions)
    return TabularPolicy(table=table, kind=POLICY_BLIND)


def reward(y: AugmentedState, safe: np.ndarray) -> int:
    """Terminal indicator reward of the auxiliary MDP: 1 iff k = 0 and C(x)."""
    return int(y.k == 0 and bool(safe[y.x]))


# ---------------------------------------------------------------------------
# Marginalized one-step kernels
# ---------------------------------------------------------------------------


def p_online_matrix(model: ConfoundedMdpModel) -> np.ndarray:
    """Online statistics P(x'|x,u): the latent marginalized under P(w|x)."""
    return np.einsum("xw,xuwy->xuy", model.latent_dist, model.transition)


def p_online(model: ConfoundedMdpModel, x_next: int, x: int, u: int) -> float:
    """Single online transition probability P(x_next | x, u)."""
    model.check_state(x_next)
    model.check_state(x)
    model.check_action(u)
    return float(model.latent_dist[x] @ model.transition[x, u, :, x_next])


def p_offline_matrix(
    model: ConfoundedMdpModel, behavioral: TabularPolicy
) -> tuple[np.ndarray, np.ndarray]:
    """Offline statistics P(x'|x,u) of data logged under a latent-aware policy.

    Returns ``(rows, defined)`` where ``rows[x, u]`` is the conditional
    distribution over x' and ``defined[x, u]`` flags cells with positive
    behavioral support. Undefined rows are left as zeros; accessing them
    through :func:`p_offline` raises :class:`PositivityError` because the
    defining ratio is 0/0 there.
    """
    if behavioral.is_blind:
        raise ModelError("offline statistics require a latent-aware behavioral policy")
    if behavioral.table.shape[:2] != (model.n_states, model.n_latents):
        raise ModelError("behavioral policy table does not match the model dimensions")
    # weight[x, u, w] = P(w|x) * pi_b(u|x,w)
    weight = model.latent_dist[:, None, :] * np.transpose(behavioral.table, (0, 2, 1))
    denom = weight.sum(axis=2)
    numer = np.einsum("xuw,xuwy->xuy", weight, model.transition)
    defined = denom > 0.0
    rows = np.zeros_like(numer)
    np.divide(numer, denom[:, :, None], out=rows, where=defined[:, :, None])
    return rows, defined


def p_offline(
    model: ConfoundedMdpModel,
    behavioral: TabularPolicy,
    x_next: int,
    x: int,
    u: int,
) -> float:
    """Single offline transition probability P(x_next | x, u) under the behavioral policy."""
    model.check_state(x_next)
    model.check_state(x)
    model.check_action(u)
    rows, defined = p_offline_matrix(model, behavioral)
    if not defined[x, u]:
        raise PositivityError(
            f"action {u} is never taken at state {x} under the behavioral policy",
            cell=(x, u),
        )
    return float(rows[x, u, x_next])


# ---------------------------------------------------------------------------
# Absorbing auxiliary kernels
# ---------------------------------------------------------------------------


def absorbing_rows(model: ConfoundedMdpModel, base_rows: np.ndarray) -> np.ndarray:
    """Apply the freeze-on-failure rule to a (x, u, x') kernel.

    Safe states keep their base rows; unsafe states become point masses on
    themselves, so consumers never special-case the Dirac branch.
    """
    rows = base_rows.copy()
    unsafe = np.flatnonzero(~model.safe)
    rows[unsafe] = 0.0
    rows[unsafe, :, unsafe] = 1.0
    return rows


def absorbing_online_matrix(model: ConfoundedMdpModel) -> np.ndarray:
    """Auxiliary online kernel: online rows at safe states, self-loops elsewhere."""
    return absorbing_rows(model, p_online_matrix(model))


def absorbing_offline_matrix(
    model: ConfoundedMdpModel, behavioral: TabularPolicy
) -> np.ndarray:
    """Auxiliary offline kernel: offline rows at safe states, self-loops elsewhere.

    Raises :class:`PositivityError` if any safe state has an action with zero
    behavioral support, since that offline row is undefined.
    """
    rows, defined = p_offline_matrix(model, behavioral)
    missing = ~defined[model.safe]
    if np.any(missing):
        x_ids = np.flatnonzero(model.safe)
        bad_x, bad_u = np.nonzero(~defined[model.safe])
        cell = (int(x_ids[bad_x[0]]), int(bad_u[0]))
        raise PositivityError(
            f"offline row undefined at safe state {cell[0]}, action {cell[1]}", cell=cell
        )
    return absorbing_rows(model, rows)


def absorbing_kernel(
    base_row_fn: Callable[[ConfoundedMdpModel, int, int], np.ndarray],
    model: ConfoundedMdpModel,
    y: AugmentedState,
    u: int,
) -> dict[AugmentedState, float]:
    """One-step distribution of the auxiliary MDP from augmented state ``y``.

    ``base_row_fn(model, x, u)`` supplies the raw one-step row over x'
    (online or offline). If C(y.x) holds the base row is paired with k - 1;
    otherwise the state freezes: a point mass on (y.x, k - 1).
    """
    model.check_state(y.x)
    model.check_action(u)
    if y.k < 1:
        raise EpisodeEndError(f"no transition remains from augmented state {tuple(y)}")
    k_next = y.k - 1
    if not model.safe[y.x]:
        return {AugmentedState(y.x, k_next): 1.0}
    row = base_row_fn(model, y.x, u)
    return {
        AugmentedState(int(x_next), k_next): float(p)
        for x_next, p in enumerate(row)
        if p > 0.0
    }


def online_row(model: ConfoundedMdpModel, x: int, u: int) -> np.ndarray:
    """Raw online row over x' at (x, u); plugs into :func:`absorbing_kernel`."""
    return model.latent_dist[x] @ model.transition[x, u]


def offline_row_fn(
    behavioral: TabularPolicy,
) -> Callable[[ConfoundedMdpModel, int, int], np.ndarray]:
    """Raw offline row function bound to a behavioral policy."""

    def row(model: ConfoundedMdpModel, x: int, u: int) -> np.ndarray:
        rows, defined = p_offline_matrix(model, behavioral)
        if not defined[x, u]:
            raise PositivityError(
                f"action {u} is never taken at state {x} under the behavioral policy",
                cell=(x, u),
            )
        return rows[x, u]

    return row
