"""Twist parameterizations and twist-driven proposals.

Every twist set exposes a batched interface:

* ``log_twist_batch(t, prefixes, o)`` -> log psi_t for each row, shape (N,)
* ``vjp(t, prefixes, coeffs, o)`` -> sum_n coeffs[n] * grad_theta log psi_t(row n)
* ``children(t, prefixes, o)`` -> log psi_t of every one-token extension, (N, V)

Parameters live in one flat float64 vector ``theta``. Tabular layout: for
t = 1..T, a block of ``n_obs * V**t`` cells ordered by (o, prefix code).
MLP layout: W1 (D, H), b1 (H), W2 (H, H), b2 (H), w3 (H), b3 (1), each
flattened row-major, in that order.

With ``head="prob"`` the raw output is a logit and psi = sigmoid(raw); the
log interface then returns log sigmoid(raw).
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp
from scipy.stats import norm

from .errors import BadConfig, BadInput, BadParameterization, MissingObservation
from .rng import RngStream, categorical, counter_uniform
from .seqmodel import SeqModel, as_rows, prefix_codes

LOG_FLOOR = np.log(1e-300)
HEADS = ("log", "prob")


def _obs_array(o, n, n_obs):
    if n_obs == 1:
        return np.zeros(n, dtype=np.int64)
    if o is None:
        raise MissingObservation("conditional twist needs an observation")
    o = np.asarray(o, dtype=np.int64)
    if np.any(o < 0) or np.any(o >= n_obs):
        raise BadInput("observation out of range")
    return np.broadcast_to(o, (n,)).astype(np.int64)


def _extend(prefixes, V):
    n, t = prefixes.shape
    kids = np.empty((n, V, t + 1), dtype=np.int64)
    kids[:, :, :t] = prefixes[:, None, :]
    kids[:, :, t] = np.arange(V)
    return kids.reshape(n * V, t + 1)


class TwistSet:
    V: int
    T: int
    n_obs: int = 1
    head: str = "log"
    theta: np.ndarray

    # raw output / raw vjp are what subclasses implement
    def raw_batch(self, t, prefixes, o=None):
        raise NotImplementedError

    def raw_vjp(self, t, prefixes, coeffs, o=None):
        raise NotImplementedError

    @property
    def n_params(self):
        return self.theta.size

    def _check(self, t, prefixes):
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.ndim == 1:
            prefixes = prefixes.reshape(1, -1)
        if prefixes.shape[1] != t or not 1 <= t <= self.T:
            raise BadInput(f"twist at step {t} got prefix length {prefixes.shape[1]}")
        return prefixes

    def log_twist_batch(self, t, prefixes, o=None):
        raw = self.raw_batch(t, prefixes, o)
        return raw if self.head == "log" else log_expit(raw)

    def prob_batch(self, t, prefixes, o=None):
        if self.head != "prob":
            raise BadParameterization("probability outputs need a prob-head twist")
        return expit(self.raw_batch(t, prefixes, o))

    def vjp(self, t, prefixes, coeffs, o=None):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if self.head == "prob":
            # d log sigmoid(x) / dx = 1 - sigmoid(x)
            coeffs = coeffs * expit(-self.raw_batch(t, prefixes, o))
        return self.raw_vjp(t, prefixes, coeffs, o)

    def children(self, t, prefixes, o=None):
        prefixes = as_rows(prefixes, t - 1)
        n = prefixes.shape[0]
        oo = None if o is None else np.repeat(np.broadcast_to(np.asarray(o), (n,)), self.V)
        return self.log_twist_batch(t, _extend(prefixes, self.V), oo).reshape(n, self.V)

    # single-sequence conveniences
    def log_twist(self, t, prefix, o=None):
        return float(self.log_twist_batch(t, np.asarray(prefix).reshape(1, -1), o)[0])

    def log_twist_with_grad(self, t, prefix, o=None):
        p = np.asarray(prefix).reshape(1, -1)
        return float(self.log_twist_batch(t, p, o)[0]), self.vjp(t, p, np.ones(1), o)

    def copy(self):
        raise NotImplementedError

    def with_theta(self, theta):
        tw = self.copy()
        tw.theta = np.asarray(theta, dtype=np.float64).copy()
        return tw


class TabularTwists(TwistSet):
    kind = "tabular"

    def __init__(self, V, T, n_obs=1, head="log", theta=None):
        if head not in HEADS:
            raise BadConfig(f"unknown head {head!r}")
        self.V, self.T, self.n_obs, self.head = V, T, n_obs, head
        sizes = [n_obs * V**t for t in range(1, T + 1)]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.theta = np.zeros(self.offsets[-1]) if theta is None else np.asarray(theta, dtype=np.float64).copy()
        if self.theta.size != self.offsets[-1]:
            raise BadConfig("theta has the wrong size for this tabular layout")

    def index(self, t, prefixes, o=None):
        prefixes = self._check(t, prefixes)
        oo = _obs_array(o, prefixes.shape[0], self.n_obs)
        return self.offsets[t - 1] + oo * self.V**t + prefix_codes(prefixes, self.V)

    def raw_batch(self, t, prefixes, o=None):
        return self.theta[self.index(t, prefixes, o)]

    def raw_vjp(self, t, prefixes, coeffs, o=None):
        g = np.zeros_like(self.theta)
        np.add.at(g, self.index(t, prefixes, o), coeffs)
        return g

    def block(self, t, o=0):
        start = self.offsets[t - 1] + o * self.V**t
        return self.theta[start:start + self.V**t]

    def set_block(self, t, values, o=0):
        start = self.offsets[t - 1] + o * self.V**t
        self.theta[start:start + self.V**t] = values

    def copy(self):
        return TabularTwists(self.V, self.T, self.n_obs, self.head, self.theta)

    def header(self):
        return {"kind": self.kind, "V": self.V, "T": self.T, "n_obs": self.n_obs, "head": self.head}


class MLPTwists(TwistSet):
    """Two tanh hidden layers on a fixed-size prefix featurization.

    Features: one-hot of each of the last W tokens (right-aligned, empty slots
    all zero), one-hot of t in 1..T, and one-hot of o when conditional.
    """
    kind = "mlp"

    def __init__(self, V, T, hidden=32, window=None, n_obs=1, head="log", seed=0, theta=None, init_scale=1.0):
        if head not in HEADS:
            raise BadConfig(f"unknown head {head!r}")
        self.V, self.T, self.n_obs, self.head = V, T, n_obs, head
        self.H = int(hidden)
        self.W = T if window is None else int(window)
        if self.H < 1 or not 1 <= self.W <= T:
            raise BadConfig("need hidden >= 1 and 1 <= window <= T")
        self.D = self.W * V + T + (n_obs if n_obs > 1 else 0)
        self.seed = seed
        shapes = [(self.D, self.H), (self.H,), (self.H, self.H), (self.H,), (self.H,), (1,)]
        self.shapes = shapes
        sizes = [int(np.prod(s)) for s in shapes]
        self.slices = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        if theta is not None:
            self.theta = np.asarray(theta, dtype=np.float64).copy()
            if self.theta.size != self.slices[-1]:
                raise BadConfig("theta has the wrong size for this mlp")
        else:
            self.theta = self.init_theta(seed, init_scale, zero_output=True)

    def init_theta(self, seed, scale=1.0, zero_output=False):
        theta = np.zeros(self.slices[-1])
        for i, (fan_in, layer) in enumerate([(self.D, 0), (self.H, 2), (self.H, 4)]):
            if zero_output and layer == 4:
                continue
            a, b = self.slices[layer], self.slices[layer + 1]
            u = counter_uniform(seed, 0x7E, layer, np.arange(b - a))
            theta[a:b] = norm.ppf(u) * scale / np.sqrt(fan_in)
        return theta

    def params(self, theta=None):
        theta = self.theta if theta is None else theta
        return [theta[self.slices[i]:self.slices[i + 1]].reshape(s) for i, s in enumerate(self.shapes)]

    def features(self, t, prefixes, o=None):
        prefixes = self._check(t, prefixes)
        n = prefixes.shape[0]
        x = np.zeros((n, self.D))
        k = min(t, self.W)
        rows = np.arange(n)
        for j in range(k):
            # slot W-1 holds the newest token
            slot = self.W - 1 - j
            x[rows, slot * self.V + prefixes[:, t - 1 - j]] = 1.0
        x[:, self.W * self.V + t - 1] = 1.0
        if self.n_obs > 1:
            oo = _obs_array(o, n, self.n_obs)
            x[rows, self.W * self.V + self.T + oo] = 1.0
        return x

    def _forward(self, x):
        W1, b1, W2, b2, w3, b3 = self.params()
        h1 = np.tanh(x @ W1 + b1)
        h2 = np.tanh(h1 @ W2 + b2)
        return h1, h2, h2 @ w3 + b3[0]

    def raw_batch(self, t, prefixes, o=None):
        return self._forward(self.features(t, prefixes, o))[2]

    def raw_vjp(self, t, prefixes, coeffs, o=None):
        x = self.features(t, prefixes, o)
        W1, b1, W2, b2, w3, b3 = self.params()
        h1, h2, _ = self._forward(x)
        c = np.asarray(coeffs, dtype=np.float64)
        g_w3 = h2.T @ c
        g_b3 = np.array([c.sum()])
        d2 = np.outer(c, w3) * (1 - h2**2)
        g_W2 = h1.T @ d2
        g_b2 = d2.sum(axis=0)
        d1 = (d2 @ W2.T) * (1 - h1**2)
        g_W1 = x.T @ d1
        g_b1 = d1.sum(axis=0)
        return np.concatenate([g.ravel() for g in (g_W1, g_b1, g_W2, g_b2, g_w3, g_b3)])

    def copy(self):
        return MLPTwists(self.V, self.T, self.H, self.W, self.n_obs, self.head, self.seed, self.theta)

    def header(self):
        return {"kind": self.kind, "V": self.V, "T": self.T, "n_obs": self.n_obs, "head": self.head,
                "hidden": self.H, "window": self.W, "seed": self.seed}


def make_twists(kind, V, T, n_obs=1, head="log", **kw):
    if kind == "tabular":
        return TabularTwists(V, T, n_obs=n_obs, head=head)
    if kind == "mlp":
        return MLPTwists(V, T, n_obs=n_obs, head=head, **kw)
    raise BadConfig(f"unknown twist kind {kind!r}")


# -- checkpoints -------------------------------------------------------------
def save_checkpoint(tw: TwistSet, path):
    """One JSON header line, then theta as little-endian float64 bytes."""
    head = dict(tw.header(), n_params=int(tw.theta.size), dtype="<f8", version=1)
    blob = json.dumps(head, sort_keys=True).encode() + b"\n" + tw.theta.astype("<f8").tobytes()
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        body = fh.read()
    try:
        head = json.loads(line)
    except ValueError:
        raise BadConfig(f"{path} is not a twist checkpoint") from None
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if theta.size != head.get("n_params"):
        raise BadConfig("checkpoint payload size does not match its header")
    if head["kind"] == "tabular":
        return TabularTwists(head["V"], head["T"], head["n_obs"], head["head"], theta)
    if head["kind"] == "mlp":
        return MLPTwists(head["V"], head["T"], head["hidden"], head["window"], head["n_obs"],
                         head["head"], head["seed"], theta)
    if head["kind"] == "value":
        return ValueTwists(head["V"], head["T"], head["n_obs"], theta)
    raise BadConfig(f"unknown checkpoint kind {head['kind']!r}")


# -- proposals ---------------------------------------------------------------
class Proposal:
    """q(s_t | s_{1:t-1}); ``logprobs(t, prefixes)`` returns (N, V)."""

    def logprobs(self, t, prefixes):
        raise NotImplementedError

    def sample(self, rng: RngStream, n):
        T = self.T
        out = np.zeros((n, T), dtype=np.int64)
        for t in range(1, T + 1):
            out[:, t - 1] = categorical(self.logprobs(t, out[:, :t - 1]), rng.uniform(n))
        return out

    def log_prob(self, seqs):
        seqs = np.asarray(seqs, dtype=np.int64)
        rows = np.arange(seqs.shape[0])
        total = np.zeros(seqs.shape[0])
        for t in range(1, seqs.shape[1] + 1):
            total = total + self.logprobs(t, seqs[:, :t - 1])[rows, seqs[:, t - 1]]
        return total


class BaseProposal(Proposal):
    kind = "base"

    def __init__(self, model: SeqModel):
        self.model, self.T, self.V = model, model.T, model.V

    def logprobs(self, t, prefixes):
        return self.model.logprobs(as_rows(prefixes, t - 1))


def twist_induced_scores(tw, spec, t, prefixes, final="exact"):
    """log p0(s|prefix) + log psi_t(prefix s) for every s, shape (N, V).

    At t = T with ``final="exact"`` the true terminal potential replaces psi_T.
    """
    prefixes = as_rows(prefixes, t - 1)
    lp0 = spec.model.logprobs(prefixes)
    if t == spec.T and final == "exact":
        kids = _extend(prefixes, spec.V)
        return lp0 + spec.log_potential(t, kids).reshape(-1, spec.V)
    if tw is None:
        return lp0
    return lp0 + tw.children(t, prefixes, spec.conditioning)


class TwistInducedProposal(Proposal):
    kind = "twist_induced"

    def __init__(self, tw, spec, final="exact"):
        if final not in ("exact", "learned"):
            raise BadConfig("final must be 'exact' or 'learned'")
        self.tw, self.spec, self.final = tw, spec, final
        self.T, self.V = spec.T, spec.V

    def scores(self, t, prefixes):
        return twist_induced_scores(self.tw, self.spec, t, prefixes, self.final)

    def logprobs(self, t, prefixes):
        prefixes = as_rows(prefixes, t - 1)
        s = self.scores(t, prefixes)
        out = s - logsumexp(s, axis=1, keepdims=True)
        if self.tw is not None and (t < self.T or self.final == "learned"):
            # rows with psi = 1 everywhere are p0 itself; skip the renormalization rounding
            lp0 = self.spec.model.logprobs(prefixes)
            flat = np.all(s == lp0, axis=1)
            out[flat] = lp0[flat]
        return out


def twist_induced_proposal_logprobs(tw, spec, t, prefix, final="exact"):
    return TwistInducedProposal(tw, spec, final).logprobs(t, np.asarray(prefix).reshape(1, -1))[0]


class TwistProposal(Proposal):
    """A twist set read as a learned proposal q_xi(s_t|.) ∝ p0 * psi_xi_t, every step.

    Unlike the twist-induced sampler there is no exact final potential: the
    last step also uses the learned modifier.
    """
    kind = "external"

    def __init__(self, tw: TwistSet, model: SeqModel, o=None):
        self.tw, self.model, self.o = tw, model, o
        self.T, self.V = model.T, model.V

    @property
    def xi(self):
        return self.tw.theta

    def logprobs(self, t, prefixes):
        prefixes = as_rows(prefixes, t - 1)
        s = self.model.logprobs(prefixes) + self.tw.children(t, prefixes, self.o)
        return s - logsumexp(s, axis=1, keepdims=True)

    def grad_log_prob(self, seqs, coeffs):
        """sum_n coeffs[n] * grad_xi log q_xi(seqs[n])."""
        seqs = np.asarray(seqs, dtype=np.int64)
        coeffs = np.asarray(coeffs, dtype=np.float64)
        g = np.zeros_like(self.tw.theta)
        n = seqs.shape[0]
        for t in range(1, self.T + 1):
            g += self.tw.vjp(t, seqs[:, :t], coeffs, self.o)
            q = np.exp(self.logprobs(t, seqs[:, :t - 1]))
            kids = _extend(seqs[:, :t - 1], self.V)
            oo = None if self.o is None else np.full(n * self.V, self.o)
            g -= self.tw.vjp(t, kids, (coeffs[:, None] * q).ravel(), oo)
        return g


def proposal_param_view(tw: TwistSet, model: SeqModel, o=None):
    return TwistProposal(tw, model, o)


# -- special twist families ----------------------------------------------------
class ProposalInducedTwists:
    """psi_t(s_{1:t}) = q(s_{1:t}) / p0(s_{1:t}) for a given proposal q.

    The engine asks for the per-step ratio ``log_increment``, which is exactly
    log q(s_t|.) - log p0(s_t|.); combined with the proposal correction the
    incremental weight is identically 1.
    """

    def __init__(self, proposal: Proposal, model: SeqModel):
        self.q, self.model, self.T, self.V = proposal, model, model.T, model.V
        self.n_obs = 1

    def log_increment(self, t, prefixes, tokens, lq=None, lp0=None):
        prefixes = as_rows(prefixes, t - 1)
        rows = np.arange(prefixes.shape[0])
        lq = self.q.logprobs(t, prefixes) if lq is None else lq
        lp0 = self.model.logprobs(prefixes) if lp0 is None else lp0
        return lq[rows, tokens] - lp0[rows, tokens]

    def log_twist_batch(self, t, prefixes, o=None):
        prefixes = as_rows(prefixes, t)
        return self.q.log_prob(prefixes) - self.model.sequence_logprobs(prefixes)

    def children(self, t, prefixes, o=None):
        prefixes = as_rows(prefixes, t - 1)
        n = prefixes.shape[0]
        return self.log_twist_batch(t, _extend(prefixes, self.V)).reshape(n, self.V)


class FixedTwists(TwistSet):
    """Read-only twists given by dense per-step log tables (e.g. oracle values)."""
    kind = "fixed"

    def __init__(self, V, T, tables, n_obs=1):
        # tables[t-1] has shape (n_obs, V**t)
        self.V, self.T, self.n_obs, self.head = V, T, n_obs, "log"
        self.tables = [np.asarray(x, dtype=np.float64).reshape(n_obs, V**t) for t, x in enumerate(tables, 1)]
        self.theta = np.zeros(0)

    def raw_batch(self, t, prefixes, o=None):
        prefixes = self._check(t, prefixes)
        oo = _obs_array(o, prefixes.shape[0], self.n_obs)
        return self.tables[t - 1][oo, prefix_codes(prefixes, self.V)]

    def raw_vjp(self, t, prefixes, coeffs, o=None):
        return np.zeros(0)

    def copy(self):
        return FixedTwists(self.V, self.T, self.tables, self.n_obs)

    def to_tabular(self):
        tw = TabularTwists(self.V, self.T, self.n_obs)
        for t, tab in enumerate(self.tables, 1):
            for o in range(self.n_obs):
                tw.set_block(t, tab[o], o)
        return tw


class ValueTwists:
    """Value parameterization log Phi_t for t = 0..T-1 (log Phi_T = 0 is fixed).

    Layout: blocks for t = 1..T-1 ordered like tabular twists, then one
    log Phi_0 entry per observation value at the end of theta.
    Twists follow as log psi_t = log phi_t + log Phi_t.
    """
    kind = "value"

    def __init__(self, V, T, n_obs=1, theta=None):
        self.V, self.T, self.n_obs = V, T, n_obs
        sizes = [n_obs * V**t for t in range(1, T)]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        n = int(self.offsets[-1]) + n_obs
        self.theta = np.zeros(n) if theta is None else np.asarray(theta, dtype=np.float64).copy()

    def index(self, t, prefixes, o=None):
        prefixes = as_rows(prefixes, t)
        oo = _obs_array(o, prefixes.shape[0], self.n_obs)
        if t == 0:
            return self.offsets[-1] + oo
        return self.offsets[t - 1] + oo * self.V**t + prefix_codes(prefixes, self.V)

    def log_value(self, t, prefixes, o=None):
        prefixes = as_rows(prefixes, t)
        if t == self.T:
            return np.zeros(prefixes.shape[0])
        return self.theta[self.index(t, prefixes, o)]

    def vjp(self, t, prefixes, coeffs, o=None):
        g = np.zeros_like(self.theta)
        if t < self.T:
            np.add.at(g, self.index(t, prefixes, o), coeffs)
        return g

    def copy(self):
        return ValueTwists(self.V, self.T, self.n_obs, self.theta)

    def header(self):
        return {"kind": self.kind, "V": self.V, "T": self.T, "n_obs": self.n_obs}

    def with_theta(self, theta):
        return ValueTwists(self.V, self.T, self.n_obs, theta)


class ValueInducedTwists(TwistSet):
    """View of ValueTwists as log psi_t = log phi_t + log Phi_t (for t < T)."""

    def __init__(self, values: ValueTwists, spec):
        self.values, self.spec = values, spec
        self.V, self.T, self.n_obs, self.head = spec.V, spec.T, values.n_obs, "log"
        self.theta = values.theta

    def raw_batch(self, t, prefixes, o=None):
        prefixes = self._check(t, prefixes)
        return self.spec.log_potential(t, prefixes) + self.values.log_value(t, prefixes, o)


def soft_q(tw, t, prefixes, beta=1.0, o=None):
    """Soft Q-values Q_t = log psi_t / beta."""
    return tw.log_twist_batch(t, prefixes, o) / beta


def soft_value(tw, spec, t, prefixes, beta=1.0):
    """V_t(prefix) = (1/beta) log sum_s p0(s|prefix) exp(beta Q_{t+1}(prefix s))."""
    prefixes = as_rows(prefixes, t)
    s = spec.model.logprobs(prefixes) + beta * soft_q(tw, t + 1, _extend(prefixes, spec.V), beta,
                                                         spec.conditioning).reshape(-1, spec.V)
    return logsumexp(s, axis=1) / beta
