"""Potentials and target specifications.

A target is ``sigma(s) ∝ p0(s) * prod_t phi_t(s_{1:t})``. Potentials are
vectorized: ``log_phi(t, seqs)`` takes an ``(N, t)`` integer array and returns
``N`` log values. Terminal-only potentials return exactly 0 for ``t < T``.

Rewards and tables are indexed by the base-``V`` code of a full sequence (see
:func:`twistsmc.seqmodel.prefix_codes`), which keeps every toy-scale
potential a dense array.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import BadConfig, BadInput, BadStep, Exhausted, MissingObservation, Unsupported
from .rng import RngStream, categorical, counter_uniform
from .seqmodel import SeqModel, decode_codes, prefix_codes

LOG_FLOOR = np.log(1e-300)


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=np.float64))


# -- rewards ---------------------------------------------------------------
@dataclass
class TableReward:
    """Reward looked up by full-sequence code."""
    V: int
    T: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.V**self.T,):
            raise BadConfig(f"reward table needs {self.V**self.T} entries")

    def __call__(self, seqs):
        return self.values[prefix_codes(seqs, self.V)]


def random_reward(V, T, seed, scale=1.0):
    """Gaussian-ish reward table drawn from the counter RNG (for test instances)."""
    from scipy.stats import norm
    u = counter_uniform(seed, 0xEE, np.arange(V**T))
    return TableReward(V, T, scale * norm.ppf(u))


@dataclass
class TokenCount:
    """Number of occurrences of ``token`` in the sequence."""
    token: int

    def __call__(self, seqs):
        return (np.asarray(seqs) == self.token).sum(axis=1).astype(np.float64)


# -- potentials ------------------------------------------------------------
class Potential:
    kind = "base"
    terminal_only = True
    # certified upper bound on phi, or None when none is available
    bound = None

    def log_terminal(self, seqs):
        raise NotImplementedError

    def log_phi(self, t, seqs, T):
        seqs = np.asarray(seqs, dtype=np.int64)
        if t < T:
            return np.zeros(seqs.shape[0])
        return self.log_terminal(seqs)

    def to_config(self):
        return {"kind": self.kind}


class Unit(Potential):
    kind = "unit"
    bound = 1.0

    def log_terminal(self, seqs):
        return np.zeros(np.asarray(seqs).shape[0])


@dataclass
class IndicatorThreshold(Potential):
    """phi = eps + I[r(s) <= eta] (or >= with ``op='ge'``)."""
    reward: object
    eta: float = -5.0
    eps: float = 1e-16
    op: str = "le"
    kind = "terminal_indicator_threshold"

    def __post_init__(self):
        if self.op not in ("le", "ge"):
            raise BadConfig("op must be 'le' or 'ge'")
        if self.eps < 0:
            raise BadConfig("eps must be nonnegative")
        self.bound = 1.0 + self.eps

    def log_terminal(self, seqs):
        r = self.reward(seqs)
        hit = r <= self.eta if self.op == "le" else r >= self.eta
        return _log(self.eps + hit.astype(np.float64))

    def to_config(self):
        return {"kind": self.kind, "eta": self.eta, "eps": self.eps, "op": self.op}


@dataclass
class ExpReward(Potential):
    """phi = exp(beta * r(s))."""
    reward: object
    beta: float = 1.0
    kind = "terminal_exp_reward"

    def log_terminal(self, seqs):
        return self.beta * self.reward(seqs)

    def to_config(self):
        return {"kind": self.kind, "beta": self.beta}


@dataclass
class ClassifierProb(Potential):
    """phi = p(class | s), a probability in (0, 1]."""
    probs: object
    kind = "terminal_classifier_prob"
    bound = 1.0

    def log_terminal(self, seqs):
        p = np.asarray(self.probs(seqs), dtype=np.float64)
        if np.any(p <= 0) or np.any(p > 1):
            raise BadConfig("classifier probabilities must lie in (0, 1]")
        return np.log(p)


def random_classifier(V, T, seed, sharpness=3.0):
    """Classifier whose logit is a random linear function of token counts."""
    from scipy.stats import norm
    w = norm.ppf(counter_uniform(seed, 0xC1, np.arange(V))) * sharpness / np.sqrt(T)
    b = norm.ppf(counter_uniform(seed, 0xC2, 0))

    def probs(seqs):
        seqs = np.asarray(seqs)
        counts = np.stack([(seqs == v).sum(axis=1) for v in range(V)], axis=1)
        logit = counts @ w + b - w.mean() * T
        return 1.0 / (1.0 + np.exp(-logit))

    return ClassifierProb(probs)


@dataclass
class TabularTerminal(Potential):
    """Arbitrary nonnegative terminal table indexed by sequence code."""
    V: int
    T: int
    values: np.ndarray
    kind = "tabular_terminal"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.V**self.T,) or np.any(self.values < 0):
            raise BadConfig("tabular potential needs V**T nonnegative entries")
        self.bound = float(self.values.max())

    def log_terminal(self, seqs):
        return _log(self.values[prefix_codes(seqs, self.V)])


@dataclass
class IntermediateProduct(Potential):
    """Per-step tables: ``tables[t-1]`` has ``V**t`` nonnegative entries for phi_t."""
    V: int
    tables: list
    kind = "intermediate_product"
    terminal_only = False

    def __post_init__(self):
        self.tables = [np.asarray(x, dtype=np.float64) for x in self.tables]
        for t, tab in enumerate(self.tables, start=1):
            if tab.shape != (self.V**t,) or np.any(tab < 0):
                raise BadConfig(f"phi_{t} table needs {self.V**t} nonnegative entries")

    def log_phi(self, t, seqs, T):
        seqs = np.asarray(seqs, dtype=np.int64)
        if t == 0:
            return np.zeros(seqs.shape[0])
        return _log(self.tables[t - 1][prefix_codes(seqs, self.V)])

    def log_terminal(self, seqs):
        return self.log_phi(len(self.tables), seqs, len(self.tables))


def random_intermediate(V, T, seed, low=0.2):
    tabs = [low + (1 - low) * counter_uniform(seed, 0x17, t, np.arange(V**t)) for t in range(1, T + 1)]
    return IntermediateProduct(V, tabs)


# -- observation models ----------------------------------------------------
class ObservationModel:
    n_obs: int

    def log_lik(self, seqs, o):
        raise NotImplementedError

    def log_lik_all(self, seqs):
        """(N, n_obs) log-likelihood matrix."""
        return np.stack([self.log_lik(seqs, o) for o in range(self.n_obs)], axis=1)

    def sample(self, seqs, rng):
        return categorical(self.log_lik_all(seqs), rng.uniform(np.asarray(seqs).shape[0]))


@dataclass
class TabularLikelihood(ObservationModel):
    """``probs[code, o]`` is sigma(o | s) for the full sequence with that code."""
    V: int
    T: int
    probs: np.ndarray
    kind = "tabular_likelihood"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.V**self.T:
            raise BadConfig("likelihood table must be (V**T, n_obs)")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1) > 1e-12):
            raise BadConfig("likelihood rows must be distributions")
        self.n_obs = self.probs.shape[1]

    def log_lik(self, seqs, o):
        return _log(self.probs[prefix_codes(seqs, self.V), o])

    def log_lik_all(self, seqs):
        return _log(self.probs[prefix_codes(seqs, self.V)])


@dataclass
class ContinuationObservation(ObservationModel):
    """o is the next ``c`` tokens under the base model, coded base-V."""
    model: SeqModel
    c: int
    kind = "continuation"

    def __post_init__(self):
        if self.c < 1:
            raise BadConfig("continuation length must be >= 1")
        self.n_obs = self.model.V**self.c
        self._ext = self.model.with_horizon(self.model.T + self.c)

    def log_lik(self, seqs, o):
        seqs = np.asarray(seqs, dtype=np.int64)
        cont = decode_codes(np.full(seqs.shape[0], o), self.model.V, self.c)
        full = np.concatenate([seqs, cont], axis=1)
        rows = np.arange(seqs.shape[0])
        total = np.zeros(seqs.shape[0])
        T = seqs.shape[1]
        for i in range(self.c):
            total = total + self._ext.logprobs(full[:, : T + i])[rows, full[:, T + i]]
        return total

    def sample(self, seqs, rng):
        seqs = np.asarray(seqs, dtype=np.int64)
        full = self._ext.extend(seqs, rng, seqs.shape[1] + self.c)
        return prefix_codes(full[:, seqs.shape[1]:], self.model.V)


# -- target specification --------------------------------------------------
@dataclass(frozen=True, eq=False)
class TargetSpec:
    model: SeqModel
    potential: Potential = field(default_factory=Unit)
    observation: ObservationModel | None = None
    conditioning: int | None = None

    @property
    def T(self):
        return self.model.T

    @property
    def V(self):
        return self.model.V

    @property
    def n_obs(self):
        return 1 if self.observation is None else self.observation.n_obs

    def condition(self, o):
        if self.observation is None:
            raise Unsupported("target has no observation model")
        if not 0 <= int(o) < self.observation.n_obs:
            raise BadInput(f"observation {o} out of range")
        return replace(self, conditioning=int(o))

    @property
    def terminal_only(self):
        return self.potential.terminal_only

    def _need_conditioning(self):
        if self.observation is not None and self.conditioning is None:
            raise MissingObservation("conditional target used before condition(o)")

    def log_potential(self, t, seqs):
        """log phi_t for a batch of length-t prefixes, shape (N,)."""
        seqs = np.asarray(seqs, dtype=np.int64)
        if seqs.ndim == 1:
            seqs = seqs.reshape(1, -1)
        if seqs.shape[1] != t or not 0 <= t <= self.T:
            raise BadStep(f"prefix length {seqs.shape[1]} does not match step {t}")
        self._need_conditioning()
        out = self.potential.log_phi(t, seqs, self.T)
        if t == self.T and self.observation is not None:
            out = out + self.observation.log_lik(seqs, self.conditioning)
        return out

    def log_potential_one(self, seq, t):
        return float(self.log_potential(t, np.asarray(seq).reshape(1, -1))[0])

    def log_unnormalized(self, seqs):
        seqs = np.asarray(seqs, dtype=np.int64)
        if seqs.ndim == 1:
            seqs = seqs.reshape(1, -1)
        if seqs.shape[1] != self.T:
            raise BadStep("log_unnormalized needs complete sequences")
        total = self.model.sequence_logprobs(seqs)
        for t in range(1, self.T + 1):
            total = total + self.log_potential(t, seqs[:, :t])
        return total

    def log_unnormalized_target(self, seq):
        return float(self.log_unnormalized(np.asarray(seq).reshape(1, -1))[0])

    def rejection_bound(self):
        """M with phi(s) * lik <= M for all s, or Unsupported."""
        if not self.potential.terminal_only or self.potential.bound is None:
            raise Unsupported(f"no certified bound for {self.potential.kind} potentials")
        # likelihoods are probabilities, so they never raise the bound
        return float(self.potential.bound)


def bdmc_exact_posterior_sample(spec: TargetSpec, rng: RngStream, n=1):
    """Draw (seqs, obs) jointly; each seqs row is exact for sigma(.|obs)."""
    if spec.observation is None:
        raise Unsupported("BDMC needs an observation model")
    if not spec.potential.terminal_only or spec.potential.kind != "unit":
        # joint sampling only covers p0(s) * lik(o|s)
        raise Unsupported("BDMC sampling requires a unit potential besides the likelihood")
    seqs = spec.model.sample(rng, n)
    obs = spec.observation.sample(seqs, rng)
    return seqs, obs


def rejection_sample_exact(spec: TargetSpec, rng: RngStream, max_draws=100_000, n=1, batch=1024,
                           return_draws=False):
    """Exact draws from sigma by rejection from p0 with bound M.

    Returns an ``(n, T)`` array (and, with ``return_draws``, the number of
    proposals consumed up to the last acceptance). Raises Exhausted when the
    draw budget runs out.
    """
    logM = np.log(spec.rejection_bound())
    out, used = [], 0
    while len(out) < n:
        if used >= max_draws:
            raise Exhausted(f"accepted {len(out)} of {n} after {used} draws")
        b = min(batch, max_draws - used)
        seqs = spec.model.sample(rng, b)
        logphi = spec.log_unnormalized(seqs) - spec.model.sequence_logprobs(seqs)
        acc = np.flatnonzero(np.log(rng.uniform(b)) < logphi - logM)
        take = acc[: n - len(out)]
        out.extend(seqs[take])
        used += int(take[-1]) + 1 if len(out) == n else b
    out = np.asarray(out, dtype=np.int64).reshape(n, spec.T)
    return (out, used) if return_draws else out


def load_table_csv(path, V, T):
    """CSV rows ``sequence,value`` with space- or dash-separated tokens."""
    vals = np.zeros(V**T)
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "sequence":
                continue
            toks = [int(x) for x in row[0].replace("-", " ").split()]
            if len(toks) != T:
                raise BadConfig(f"sequence {row[0]!r} has wrong length")
            vals[prefix_codes(np.array([toks]), V)[0]] = float(row[1])
    return vals


def lognormalizer_check(spec: TargetSpec, seqs):
    """Max deviation of sum_o lik(o|s) from 1 over the given sequences."""
    if spec.observation is None:
        return 0.0
    return float(np.max(np.abs(np.exp(logsumexp(spec.observation.log_lik_all(seqs), axis=1)) - 1)))
