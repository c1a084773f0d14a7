"""Tabular autoregressive base models over a finite vocabulary.

A :class:`SeqModel` plays the role of a prompt-conditioned language model:
it returns exact next-token log-probabilities for any prefix shorter than
the horizon. Three table layouts exist:

* ``iid``: one distribution reused at every step;
* ``markov1``: an initial distribution plus a transition matrix;
* ``full_context``: a separate distribution per prefix, generated lazily and
  deterministically from ``(seed, prefix)`` and cached.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import gamma

from .errors import BadConfig, BadInput, HorizonExceeded, TooLarge
from .rng import RngStream, categorical, counter_uniform

KINDS = ("iid", "markov1", "full_context")
_MAX_CODE = 2**62


def prefix_codes(prefixes, V):
    """Big-endian base-V integer code of each row of ``prefixes``."""
    prefixes = np.asarray(prefixes, dtype=np.int64)
    if prefixes.ndim == 1:
        prefixes = prefixes[None, :]
    t = prefixes.shape[1]
    if V**t >= _MAX_CODE:
        raise TooLarge(f"prefix codes for V={V}, t={t} overflow int64")
    codes = np.zeros(prefixes.shape[0], dtype=np.int64)
    for i in range(t):
        codes = codes * V + prefixes[:, i]
    return codes


def decode_codes(codes, V, t):
    """Inverse of :func:`prefix_codes` for prefixes of length ``t``."""
    codes = np.asarray(codes, dtype=np.int64).copy()
    out = np.zeros((codes.shape[0], t), dtype=np.int64)
    for i in range(t - 1, -1, -1):
        out[:, i] = codes % V
        codes //= V
    return out


def all_sequences(V, t):
    """Every length-``t`` sequence, in code order."""
    return decode_codes(np.arange(V**t, dtype=np.int64), V, t)


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(p, dtype=np.float64))


def _normalize_rows(p):
    p = np.asarray(p, dtype=np.float64)
    s = p.sum(axis=-1, keepdims=True)
    if np.any(s <= 0) or np.any(p < 0):
        raise BadConfig("probability rows must be nonnegative with positive mass")
    return p / s


@dataclass(eq=False)
class SeqModel:
    V: int
    T: int
    kind: str
    log_init: np.ndarray | None = None
    log_trans: np.ndarray | None = None
    seed: int = 0
    concentration: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BadConfig(f"unknown model kind {self.kind!r}")
        if self.V < 2 or self.T < 1:
            raise BadConfig("need V >= 2 and T >= 1")
        if self.kind in ("iid", "markov1") and self.log_init is None:
            raise BadConfig(f"{self.kind} model needs an initial table")
        if self.kind == "markov1" and self.log_trans is None:
            raise BadConfig("markov1 model needs a transition table")
        if self.kind == "full_context" and not self.concentration > 0:
            raise BadConfig("concentration must be positive")

    # -- construction ---------------------------------------------------
    @classmethod
    def iid(cls, probs, T):
        p = _normalize_rows(probs)
        return cls(V=p.shape[0], T=T, kind="iid", log_init=_log(p))

    @classmethod
    def markov(cls, init, trans, T):
        init = _normalize_rows(init)
        trans = _normalize_rows(trans)
        if trans.shape != (init.shape[0], init.shape[0]):
            raise BadConfig("transition matrix must be V x V")
        return cls(V=init.shape[0], T=T, kind="markov1", log_init=_log(init), log_trans=_log(trans))

    @classmethod
    def uniform(cls, V, T):
        return cls.iid(np.full(V, 1.0 / V), T)

    def with_horizon(self, T):
        """Same conditionals, different horizon (shares the lazy cache)."""
        m = SeqModel(
            V=self.V, T=T, kind=self.kind, log_init=self.log_init, log_trans=self.log_trans,
            seed=self.seed, concentration=self.concentration,
        )
        m._cache = self._cache
        m._lock = self._lock
        return m

    # -- conditionals -----------------------------------------------------
    def _context_rows(self, t, codes):
        """Lazily generated Dirichlet rows for prefixes of length ``t``."""
        uniq, inv = np.unique(codes, return_inverse=True)
        missing = [c for c in uniq.tolist() if (t, c) not in self._cache]
        if missing:
            miss = np.asarray(missing, dtype=np.int64)
            u = counter_uniform(self.seed, t, miss[:, None], np.arange(self.V)[None, :])
            g = gamma.ppf(u, self.concentration)
            s = g.sum(axis=1, keepdims=True)
            g = np.where(s > 0, g, 1.0)
            rows = _log(g / g.sum(axis=1, keepdims=True))
            with self._lock:
                # fillers of the same key compute identical rows, either may win
                for c, row in zip(missing, rows):
                    self._cache.setdefault((t, c), row)
        table = np.stack([self._cache[(t, c)] for c in uniq.tolist()])
        return table[inv]

    def logprobs(self, prefixes):
        """Next-token log-probs for a batch of equal-length prefixes, shape (N, V)."""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.ndim == 1:
            prefixes = prefixes.reshape(1, -1)
        n, t = prefixes.shape
        if t >= self.T:
            raise HorizonExceeded(f"prefix length {t} must be < T={self.T}")
        if self.kind == "iid":
            return np.broadcast_to(self.log_init, (n, self.V)).copy()
        if self.kind == "markov1":
            if t == 0:
                return np.broadcast_to(self.log_init, (n, self.V)).copy()
            return self.log_trans[prefixes[:, -1]]
        return self._context_rows(t, prefix_codes(prefixes, self.V))

    def next_token_logprobs(self, prefix):
        prefix = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
        self._check_tokens(prefix)
        return self.logprobs(prefix)[0]

    def _check_tokens(self, seqs):
        if seqs.size and (seqs.min() < 0 or seqs.max() >= self.V):
            raise BadInput("token id out of range")

    def sequence_logprobs(self, seqs):
        """Chain-rule log-probability of each row of ``seqs``."""
        seqs = np.asarray(seqs, dtype=np.int64)
        if seqs.ndim == 1:
            seqs = seqs.reshape(1, -1)
        n, t = seqs.shape
        if t > self.T:
            raise HorizonExceeded(f"sequence length {t} exceeds T={self.T}")
        self._check_tokens(seqs)
        total = np.zeros(n)
        rows = np.arange(n)
        for i in range(t):
            total = total + self.logprobs(seqs[:, :i])[rows, seqs[:, i]]
        return total

    def sequence_logprob(self, seq):
        return float(self.sequence_logprobs(np.asarray(seq, dtype=np.int64).reshape(1, -1))[0])

    # -- sampling ---------------------------------------------------------
    def sample(self, rng: RngStream, n, length=None):
        """Ancestral samples, shape (n, length)."""
        length = self.T if length is None else length
        if length > self.T:
            raise HorizonExceeded(f"length {length} exceeds T={self.T}")
        out = np.zeros((n, length), dtype=np.int64)
        for i in range(length):
            out[:, i] = categorical(self.logprobs(out[:, :i]), rng.uniform(n))
        return out

    def sample_sequence(self, rng: RngStream, length=None):
        return self.sample(rng, 1, length)[0]

    def extend(self, prefixes, rng: RngStream, length):
        """Roll out ``prefixes`` under the model to total length ``length``."""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        n, t = prefixes.shape
        out = np.zeros((n, length), dtype=np.int64)
        out[:, :t] = prefixes
        for i in range(t, length):
            out[:, i] = categorical(self.logprobs(out[:, :i]), rng.uniform(n))
        return out

    # -- serialization ----------------------------------------------------
    def to_config(self):
        cfg = {"kind": self.kind, "V": self.V, "T": self.T}
        if self.kind == "full_context":
            cfg.update(seed=self.seed, concentration=self.concentration)
        else:
            cfg["init"] = np.exp(self.log_init).tolist()
            if self.kind == "markov1":
                cfg["trans"] = np.exp(self.log_trans).tolist()
        return cfg

    def check_normalized(self, prefixes, tol=1e-12):
        lp = self.logprobs(prefixes)
        return bool(np.all(np.abs(np.exp(logsumexp(lp, axis=1)) - 1.0) <= tol))


def random_model(V, T, kind="full_context", seed=0, concentration=1.0):
    """Random instance whose conditionals are symmetric-Dirichlet draws.

    Large ``concentration`` gives near-uniform conditionals; 1.0 is uniform
    over the simplex.
    """
    if V < 2 or T < 1:
        raise BadConfig("need V >= 2 and T >= 1")
    if not concentration > 0:
        raise BadConfig("concentration must be positive")
    if kind == "full_context":
        return SeqModel(V=V, T=T, kind=kind, seed=seed, concentration=concentration)
    if kind not in KINDS:
        raise BadConfig(f"unknown model kind {kind!r}")
    u = counter_uniform(seed, 0x1D, np.arange(V + 1)[:, None], np.arange(V)[None, :])
    g = gamma.ppf(u, concentration)
    g = np.where(g.sum(axis=1, keepdims=True) > 0, g, 1.0)
    p = g / g.sum(axis=1, keepdims=True)
    if kind == "iid":
        m = SeqModel.iid(p[0], T)
    else:
        m = SeqModel.markov(p[0], p[1:], T)
    m.seed, m.concentration = seed, concentration
    return m


def model_from_config(cfg):
    cfg = dict(cfg)
    kind = cfg.get("kind", "full_context")
    try:
        T = int(cfg["T"])
        if "init" in cfg:
            if kind == "iid":
                return SeqModel.iid(cfg["init"], T)
            if kind == "markov1":
                return SeqModel.markov(cfg["init"], cfg["trans"], T)
            raise BadConfig("explicit tables are supported for iid and markov1 only")
        return random_model(
            int(cfg["V"]), T, kind=kind, seed=int(cfg.get("seed", 0)),
            concentration=float(cfg.get("concentration", 1.0)),
        )
    except KeyError as exc:
        raise BadConfig(f"model section missing {exc}") from None


def as_rows(x, width):
    """View ``x`` as an (N, width) int array; a 1-d input is one row."""
    x = np.asarray(x, dtype=np.int64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != width:
        raise BadInput(f"expected rows of length {width}, got shape {x.shape}")
    return x
