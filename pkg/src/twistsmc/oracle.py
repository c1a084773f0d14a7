"""Brute-force ground truth by full enumeration (toy scale only)."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import BadInput, TooLarge
from .rng import RngStream, categorical
from .seqmodel import all_sequences, as_rows, prefix_codes
from .targets import LOG_FLOOR, TargetSpec
from .twist import FixedTwists, Proposal

DEFAULT_GUARD = 2_000_000


@dataclass
class OracleTable:
    """Exact quantities for one (conditioned) target.

    ``lp0[t]`` holds log p0(s_t | s_{1:t-1}) for every length-t prefix in code
    order, ``log_phi[t]`` log phi_t, ``log_future[t]`` log E[prod_{tau>t} phi_tau | s_{1:t}],
    ``log_psi[t]`` the canonical optimal twist phi_t * future_t, and
    ``log_marg[t]`` log sigma(s_{1:t}). Index 0 is the empty prefix.
    """
    V: int
    T: int
    log_z: float
    lp0: list
    log_phi: list
    log_future: list
    log_psi: list
    log_marg: list
    fingerprint: str = ""
    conditioning: int | None = None
    conditional: dict = field(default_factory=dict)

    def marginal(self, t, prefixes):
        return self.log_marg[t][prefix_codes(as_rows(prefixes, t), self.V)]

    def twist(self, t, prefixes):
        return self.log_psi[t][prefix_codes(as_rows(prefixes, t), self.V)]

    def log_prefix_weight(self, t):
        """log p0(s_{1:t}) + sum_{tau<t} log phi_tau for every length-t prefix."""
        acc = np.zeros(1)
        for tau in range(1, t + 1):
            acc = np.repeat(acc, self.V) + self.lp0[tau]
            if tau < t:
                acc = acc + self.log_phi[tau]
        return acc

    def log_sigma(self):
        """log sigma(s_{1:T}) over all sequences in code order."""
        return self.log_marg[self.T]

    def twists(self, floor=True):
        """Optimal twists as a read-only twist set (dead cells clipped to a floor)."""
        tabs = []
        for t in range(1, self.T + 1):
            x = self.log_psi[t]
            tabs.append(np.maximum(x, LOG_FLOOR) if floor else x)
        return FixedTwists(self.V, self.T, tabs)

    def for_obs(self, o):
        return self.conditional[o]

    def cond_logprobs(self, t, prefixes):
        """Exact sigma(s_t | s_{1:t-1}), shape (N, V)."""
        prefixes = as_rows(prefixes, t - 1)
        codes = prefix_codes(prefixes, self.V)
        kids = self.log_marg[t].reshape(-1, self.V)[codes]
        parent = self.log_marg[t - 1][codes]
        with np.errstate(invalid="ignore"):
            out = kids - parent[:, None]
        return np.where(np.isfinite(parent)[:, None], out, -np.inf)


def _level_lp0(model, t):
    """log p0(s_t | s_{1:t-1}) for every length-t prefix, in code order."""
    return model.logprobs(all_sequences(model.V, t - 1)).reshape(-1)


def _fingerprint(spec):
    h = hashlib.sha256()
    m = spec.model
    h.update(repr((m.kind, m.V, m.T, m.seed, m.concentration, spec.potential.kind, spec.conditioning)).encode())
    return h.hexdigest()[:16]


def _build(spec, lp0):
    V, T = spec.V, spec.T
    seqs = [all_sequences(V, t) for t in range(T + 1)]
    log_phi = [np.zeros(1)] + [spec.log_potential(t, seqs[t]) for t in range(1, T + 1)]
    fut = [None] * (T + 1)
    fut[T] = np.zeros(V**T)
    for t in range(T - 1, -1, -1):
        inner = (lp0[t + 1] + log_phi[t + 1] + fut[t + 1]).reshape(-1, V)
        fut[t] = logsumexp(inner, axis=1)
    log_z = float(fut[0][0])
    log_psi = [np.zeros(1)] + [log_phi[t] + fut[t] for t in range(1, T + 1)]
    marg = [np.array([0.0 if np.isfinite(log_z) else -np.inf])]
    # prefix log p0 times earlier potentials, accumulated level by level
    acc = np.zeros(1)
    for t in range(1, T + 1):
        acc_t = np.repeat(acc, V) + lp0[t]
        marg.append(acc_t + log_psi[t] - log_z)
        acc = acc_t + log_phi[t]
    return OracleTable(V, T, log_z, lp0, log_phi, fut, log_psi, marg,
                       _fingerprint(spec), spec.conditioning)


def enumerate_target(spec: TargetSpec, guard=DEFAULT_GUARD, all_obs=False):
    """Exact log Z, marginals and optimal twists.

    For a conditional spec the table describes ``spec.conditioning``; with
    ``all_obs=True`` a table for every observation value is stored in
    ``conditional`` as well.
    """
    V, T = spec.V, spec.T
    if V**T > guard:
        raise TooLarge(f"V**T = {V**T} exceeds the enumeration guard {guard}")
    lp0 = [np.zeros(1)] + [_level_lp0(spec.model, t) for t in range(1, T + 1)]
    cond = {}
    if spec.observation is not None and all_obs:
        for o in range(spec.observation.n_obs):
            cond[o] = _build(spec.condition(o), lp0)
    if spec.observation is not None and spec.conditioning is None:
        if not all_obs:
            raise BadInput("conditional target needs condition(o) or all_obs=True")
        table = cond[0]
    else:
        table = _build(spec, lp0)
    table.conditional = cond
    return table


def exact_target_sample(table: OracleTable, rng: RngStream, n=1):
    """Ancestral draws from the exact conditionals sigma(s_t | s_{1:t-1})."""
    out = np.zeros((n, table.T), dtype=np.int64)
    for t in range(1, table.T + 1):
        out[:, t - 1] = categorical(table.cond_logprobs(t, out[:, :t - 1]), rng.uniform(n))
    return out


def log_q_all(q: Proposal, V, T):
    return q.log_prob(all_sequences(V, T))


def exact_kl(table: OracleTable, log_q, direction="q_sigma"):
    """Exact KL by summation; ``log_q`` is a Proposal or a vector over all sequences.

    Support mismatches give +inf.
    """
    if isinstance(log_q, Proposal):
        log_q = log_q_all(log_q, table.V, table.T)
    log_q = np.asarray(log_q, dtype=np.float64)
    log_s = table.log_sigma()
    if direction == "q_sigma":
        a, b = log_q, log_s
    elif direction == "sigma_q":
        a, b = log_s, log_q
    else:
        raise BadInput("direction must be 'q_sigma' or 'sigma_q'")
    live = np.isfinite(a)
    if np.any(~np.isfinite(b[live])):
        return float("inf")
    return float(np.sum(np.exp(a[live]) * (a[live] - b[live])))


def multi_step_optimal_proposal(table: OracleTable, t, c, prefix, guard=DEFAULT_GUARD):
    """Distribution over length-c continuations from s_{1:t-1}, ∝ p0 * phi * psi_{t+c-1}.

    Returns ``(continuations, log_probs, log_weight)`` where ``log_weight`` is the
    c-step incremental weight, the same for every continuation.
    """
    prefix = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
    V, T = table.V, table.T
    if prefix.shape[1] != t - 1 or t + c - 1 > T or c < 1:
        raise BadInput("need len(prefix) = t-1 and t+c-1 <= T")
    if V**c > guard:
        raise TooLarge(f"V**c = {V**c} exceeds the guard")
    conts = all_sequences(V, c)
    full = np.concatenate([np.repeat(prefix, conts.shape[0], axis=0), conts], axis=1)
    s = np.zeros(conts.shape[0])
    for j in range(c):
        tau = t + j
        code = prefix_codes(full[:, :tau], V)
        s = s + table.lp0[tau][code]
        if j < c - 1:
            s = s + table.log_phi[tau][code]
    s = s + table.log_psi[t + c - 1][prefix_codes(full, V)]
    lse = logsumexp(s)
    pcode = prefix_codes(prefix, V)[0]
    prev = table.log_psi[t - 1][pcode] if t > 1 else 0.0
    prev_phi = 0.0
    # the c-step weight: sum over continuations divided by the incoming twist,
    # times the potential phi_{t-1} already attached to the prefix
    if t > 1:
        prev_phi = table.log_phi[t - 1][pcode]
    return conts, s - lse, float(lse - prev + prev_phi)


def dump_csv(table: OracleTable, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "prefix", "log_marginal", "log_twist", "log_future"])
        for t in range(1, table.T + 1):
            seqs = all_sequences(table.V, t)
            for i, s in enumerate(seqs):
                w.writerow([t, " ".join(map(str, s)), repr(float(table.log_marg[t][i])),
                            repr(float(table.log_psi[t][i])), repr(float(table.log_future[t][i]))])
