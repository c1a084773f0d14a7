"""SIS and twisted SMC samplers, the pinned-sample sampler, bounds and KL estimates.

Randomness is counter based. Every uniform is a hash of
``(seed, run, particle, step, stream)`` with stream 0 for proposal draws,
1 for resampling and 2 for the pinned index of the target sampler. Runs never
share state, so a batch of runs gives the same numbers as running each one
alone, and ``schedule="never"`` consumes the exact draws of :func:`run_sis`.

All weights stay in log space. For a step t the log incremental weight is

    log p0(s_t|.) - log q(s_t|.) + log phi_{t-1}(s_{1:t-1}) + L_t(s_{1:t}) - L_{t-1}(s_{1:t-1})

with L_t = log psi_t for t < T, L_T = log phi_T and L_0 = 0. With the
twist-induced proposal this is evaluated as a log-normalizer, which does not
depend on the sampled token.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import BadConfig, BadInput, DegenerateWeights, Unsupported
from .rng import RngStream, categorical, counter_uniform
from .targets import TargetSpec
from .twist import BaseProposal, Proposal, TwistInducedProposal, twist_induced_scores

PROPOSAL_STREAM, RESAMPLE_STREAM, PIN_STREAM = 0, 1, 2


@dataclass(frozen=True)
class ResampleSchedule:
    kind: str = "every_step"
    times: tuple = ()
    threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in ("every_step", "never", "at_times", "adaptive_ess"):
            raise BadConfig(f"unknown schedule {self.kind!r}")
        if self.kind == "at_times":
            ts = tuple(int(x) for x in self.times)
            if any(b <= a for a, b in zip(ts, ts[1:])) or any(x < 1 for x in ts):
                raise BadConfig("resample times must be strictly increasing and >= 1")
            object.__setattr__(self, "times", ts)
        if not 0 < self.threshold <= 1:
            raise BadConfig("ESS threshold must lie in (0, 1]")

    @classmethod
    def parse(cls, s):
        if isinstance(s, ResampleSchedule):
            return s
        s = str(s)
        if s in ("every_step", "never"):
            return cls(s)
        if s in ("ess", "adaptive_ess"):
            return cls("adaptive_ess")
        if s.startswith("ess:"):
            return cls("adaptive_ess", threshold=float(s[4:]))
        if s.startswith("at:"):
            return cls("at_times", times=tuple(int(x) for x in s[3:].split(",") if x))
        raise BadConfig(f"cannot parse schedule {s!r}")

    def label(self):
        if self.kind == "adaptive_ess":
            return "ess" if self.threshold == 0.5 else f"ess:{self.threshold:g}"
        if self.kind == "at_times":
            return "at:" + ",".join(map(str, self.times))
        return self.kind

    def check(self, T):
        if self.kind == "at_times" and any(x >= T for x in self.times):
            raise BadConfig("resample times must be < T")

    def mask(self, t, T, lw):
        """Which runs resample after step t; ``lw`` is (R, K)."""
        R, K = lw.shape
        if t >= T or self.kind == "never":
            return np.zeros(R, dtype=bool)
        if self.kind == "every_step":
            return np.ones(R, dtype=bool)
        if self.kind == "at_times":
            return np.full(R, t in self.times)
        return ess(lw) < self.threshold * K


@dataclass
class ParticleSystem:
    K: int
    t: int
    sequences: np.ndarray
    log_w_block: np.ndarray
    ancestry: list = field(default_factory=list)
    logZ_blocks: list = field(default_factory=list)
    # per-step log incremental weights (K, T), before any resampling reindexing
    step_log_w: np.ndarray | None = None

    def log_z(self):
        return float(sum(self.logZ_blocks) + _log_mean_exp(self.log_w_block))


def _log_mean_exp(lw, axis=-1):
    lw = np.asarray(lw, dtype=np.float64)
    return logsumexp(lw, axis=axis) - np.log(lw.shape[axis])


def ess(log_w):
    """(sum w)^2 / sum w^2 from log weights; works on the last axis."""
    log_w = np.asarray(log_w, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        out = np.exp(2 * logsumexp(log_w, axis=-1) - logsumexp(2 * log_w, axis=-1))
    return out if out.ndim else float(out)


def _resample_indices(lw, u):
    """Inverse-CDF multinomial draws per row; lw and u are (R, K)."""
    m = lw.max(axis=1, keepdims=True)
    if np.any(~np.isfinite(m)):
        raise DegenerateWeights("all log weights are -inf")
    cdf = np.cumsum(np.exp(lw - m), axis=1)
    tgt = u * cdf[:, -1:]
    K = lw.shape[1]
    out = np.empty(lw.shape, dtype=np.int64)
    if K > 256:
        # count(cdf <= u) per row, same result as the broadcast below
        for i in range(lw.shape[0]):
            out[i] = np.searchsorted(cdf[i], tgt[i], side="right")
        return np.minimum(out, K - 1)
    step = max(1, 4_000_000 // (K * K))
    for a in range(0, lw.shape[0], step):
        out[a:a + step] = (cdf[a:a + step, None, :] <= tgt[a:a + step, :, None]).sum(axis=2)
    return np.minimum(out, K - 1)


def multinomial_resample(ps: ParticleSystem, rng: RngStream):
    lw = ps.log_w_block.reshape(1, -1)
    idx = _resample_indices(lw, rng.uniform(ps.K).reshape(1, -1))[0]
    ps.logZ_blocks.append(float(_log_mean_exp(lw)[0]))
    ps.ancestry.append(idx)
    ps.sequences = ps.sequences[idx]
    ps.log_w_block = np.zeros(ps.K)
    return ps


def select_posterior_sample(ps: ParticleSystem, rng: RngStream):
    lw = np.asarray(ps.log_w_block, dtype=np.float64)
    if not np.any(np.isfinite(lw)):
        raise DegenerateWeights("all final weights are -inf")
    k = categorical((lw - logsumexp(lw)).reshape(1, -1), rng.uniform(1))[0]
    return ps.sequences[k].copy()


def _make_proposal(spec, tw, proposal, final):
    if isinstance(proposal, Proposal):
        return proposal
    if proposal == "base":
        return BaseProposal(spec.model)
    if proposal == "twist_induced":
        return TwistInducedProposal(tw, spec, final)
    raise BadConfig(f"unknown proposal {proposal!r}")


def _twist_values(tw, spec, t, seqs):
    """L_t for complete-to-step-t prefixes (N, t)."""
    if t == 0:
        return np.zeros(seqs.shape[0])
    if tw is None:
        return np.zeros(seqs.shape[0])
    return tw.log_twist_batch(t, seqs, spec.conditioning)


@dataclass
class BatchResult:
    log_z: np.ndarray
    sequences: np.ndarray
    log_w: np.ndarray
    ancestry: list
    logZ_blocks: np.ndarray
    step_log_w: np.ndarray | None = None
    n_resamples: np.ndarray | None = None


def _run_batch(spec: TargetSpec, tw, K, schedule, proposal, seed, runs, exact=None,
               final="exact", record_steps=False):
    """Core sampler over a batch of independent runs.

    ``exact`` (R, T) switches on the pinned-sample sampler: one particle per
    run follows the given sequence.
    """
    if K < 1:
        raise BadConfig("K must be >= 1")
    schedule = ResampleSchedule.parse(schedule)
    T, V = spec.T, spec.V
    schedule.check(T)
    if final not in ("exact", "learned"):
        raise BadConfig("final must be 'exact' or 'learned'")
    if final == "learned" and tw is None:
        raise BadConfig("a learned final twist needs a twist set")
    q = _make_proposal(spec, tw, proposal, final)
    induced = isinstance(q, TwistInducedProposal)
    if induced:
        # the token-free weight is only valid for the proposal's own twists
        if tw is not None and q.tw is not tw:
            raise BadConfig("twist-induced proposal built from different twists")
        if q.spec is not spec or q.final != final:
            raise BadConfig("twist-induced proposal built for a different target or final step")
        tw = q.tw
    incr = getattr(tw, "log_increment", None)
    runs = np.asarray(runs, dtype=np.int64)
    R = runs.size
    N = R * K
    seqs = np.zeros((R, K, T), dtype=np.int64)
    lw = np.zeros((R, K))
    logz = np.zeros(R)
    L_prev = np.zeros(N)
    phi_prev = np.zeros(N)
    ancestry, steps = [], []
    n_res = np.zeros(R, dtype=np.int64)
    part = np.arange(K)
    rr = np.arange(R)
    if exact is not None:
        exact = np.asarray(exact, dtype=np.int64).reshape(R, T)
        pin = np.minimum((counter_uniform(seed, runs, 0, 0, PIN_STREAM) * K).astype(np.int64), K - 1)
    for t in range(1, T + 1):
        prefixes = seqs[:, :, :t - 1].reshape(N, t - 1)
        lp0 = spec.model.logprobs(prefixes)
        if induced:
            scores = q.scores(t, prefixes)
            lnorm = logsumexp(scores, axis=1)
            lq = scores - lnorm[:, None]
        else:
            lq = q.logprobs(t, prefixes)
        u = counter_uniform(seed, runs[:, None], part[None, :], t, PROPOSAL_STREAM).reshape(N)
        tok = categorical(lq, u).reshape(R, K)
        if exact is not None:
            tok[rr, pin] = exact[:, t - 1]
        seqs[:, :, t - 1] = tok
        tok = tok.reshape(N)
        cur = seqs[:, :, :t].reshape(N, t)
        rows = np.arange(N)
        last = t == T
        if induced and (not last or final == "exact"):
            w = lnorm - L_prev + phi_prev
            L_new = None
        elif incr is not None and not last:
            w = (lp0[rows, tok] - lq[rows, tok]) + incr(t, prefixes, tok, lq=lq, lp0=lp0) + phi_prev
            L_new = None
        else:
            if last and final == "exact":
                L_new = spec.log_potential(T, cur)
            else:
                L_new = _twist_values(tw, spec, t, cur)
            w = (lp0[rows, tok] - lq[rows, tok]) + phi_prev + L_new - L_prev
            if last and final == "learned":
                # correction phi_T / psi_T on top of the learned final twist
                w = w + spec.log_potential(T, cur) - L_new
        if record_steps:
            steps.append(w.reshape(R, K).copy())
        lw += w.reshape(R, K)
        if last:
            break
        # carry L_t and log phi_t for the next step
        L_prev = _twist_values(tw, spec, t, cur) if L_new is None else L_new
        phi_prev = np.zeros(N) if spec.terminal_only else spec.log_potential(t, cur)
        mask = schedule.mask(t, T, lw)
        if mask.any():
            idx = np.arange(R)[mask]
            sub = lw[idx]
            if np.any(~np.isfinite(sub.max(axis=1))):
                raise DegenerateWeights(f"all log weights -inf at step {t}")
            logz[idx] += _log_mean_exp(sub)
            ur = counter_uniform(seed, runs[idx, None], part[None, :], t, RESAMPLE_STREAM)
            anc = _resample_indices(sub, ur)
            if exact is not None:
                pnew = np.minimum((counter_uniform(seed, runs[idx], 0, t, PIN_STREAM) * K).astype(np.int64), K - 1)
                anc[np.arange(idx.size), pnew] = pin[idx]
                pin[idx] = pnew
            full = np.tile(part, (R, 1))
            full[idx] = anc
            ancestry.append(full)
            n_res += mask
            seqs = np.take_along_axis(seqs, full[:, :, None], axis=1)
            flat = (rr[:, None] * K + full).reshape(N)
            L_prev = L_prev[flat]
            phi_prev = phi_prev[flat]
            lw[idx] = 0.0
    blocks = logz.copy()
    logz += _log_mean_exp(lw)
    return BatchResult(logz, seqs, lw, ancestry, blocks,
                       np.stack(steps, axis=-1) if record_steps else None, n_res)


def run_smc(spec, tw, K, schedule="every_step", proposal="twist_induced", seed=0, run=0,
            final="exact", exact_sample=None):
    """One SMC run; returns (ParticleSystem, logZ_hat)."""
    ex = None if exact_sample is None else np.asarray(exact_sample).reshape(1, -1)
    res = _run_batch(spec, tw, K, schedule, proposal, seed, [run], ex, final, record_steps=True)
    anc = [a[0] for a in res.ancestry]
    ps = ParticleSystem(K, spec.T, res.sequences[0], res.log_w[0], anc, [float(res.logZ_blocks[0])],
                        res.step_log_w[0])
    return ps, float(res.log_z[0])


def run_sis(spec, proposal, K, seed=0, run=0, tw=None, final="exact"):
    """Importance sampling over full sequences: log-mean-exp of log(sigma~/q)."""
    return run_smc(spec, tw, K, "never", proposal, seed, run, final)


def smc_log_z(spec, tw, K, n_runs, schedule="every_step", proposal="twist_induced", seed=0,
              final="exact", run_offset=0, chunk=None):
    """logZ_hat for runs ``run_offset .. run_offset + n_runs - 1``."""
    chunk = chunk or max(1, 200_000 // (K * max(spec.T, 1)))
    out = np.empty(n_runs)
    for a in range(0, n_runs, chunk):
        b = min(n_runs, a + chunk)
        out[a:b] = _run_batch(spec, tw, K, schedule, proposal, seed,
                              np.arange(a, b) + run_offset, None, final).log_z
    return out


def run_smc_target(spec, tw, K, schedule, exact_sample, seed=0, run=0, proposal="twist_induced",
                   final="exact"):
    """One pinned-sample run; returns the upper-bound log estimate."""
    ex = np.asarray(exact_sample, dtype=np.int64)
    if ex.ndim != 1 or ex.size != spec.T:
        raise BadInput(f"exact sample must have length T={spec.T}")
    return float(_run_batch(spec, tw, K, schedule, proposal, seed, [run], ex[None], final).log_z[0])


def smc_target_log_z(spec, tw, K, exact_samples, schedule="every_step", proposal="twist_induced",
                     seed=0, final="exact", run_offset=0, chunk=None):
    ex = np.asarray(exact_samples, dtype=np.int64)
    if ex.ndim != 2 or ex.shape[1] != spec.T:
        raise BadInput(f"exact samples must be (n, {spec.T})")
    n = ex.shape[0]
    chunk = chunk or max(1, 200_000 // (K * max(spec.T, 1)))
    out = np.empty(n)
    for a in range(0, n, chunk):
        b = min(n, a + chunk)
        out[a:b] = _run_batch(spec, tw, K, schedule, proposal, seed,
                              np.arange(a, b) + run_offset, ex[a:b], final).log_z
    return out


def incremental_log_weight(spec, tw, t, seq, proposal_logprob, final="exact", proposal_logprobs=None):
    """Log incremental weight for the token just appended to ``seq`` (length t).

    ``proposal_logprob`` is log q of that token. If ``proposal_logprobs`` (the
    full vector) is passed and equals the twist-induced proposal, the caller
    can compare against the log-normalizer form.
    """
    seq = np.asarray(seq, dtype=np.int64).reshape(1, -1)
    if seq.shape[1] != t:
        raise BadInput("sequence length must equal t")
    prefix = seq[:, :t - 1]
    lp0 = spec.model.logprobs(prefix)[0, seq[0, -1]]
    T = spec.T
    L_prev = _twist_values(tw, spec, t - 1, prefix)[0]
    phi_prev = 0.0 if t == 1 else float(spec.log_potential(t - 1, prefix)[0])
    if t == T and final == "exact":
        L_new = float(spec.log_potential(T, seq)[0])
    else:
        L_new = float(_twist_values(tw, spec, t, seq)[0])
    w = (lp0 - proposal_logprob) + phi_prev + L_new - L_prev
    if t == T and final == "learned":
        w += float(spec.log_potential(T, seq)[0]) - L_new
    return float(w)


def twist_induced_log_weight(spec, tw, t, prefix, final="exact"):
    """Token-free form: log sum_s p0 psi_t - log psi_{t-1} + log phi_{t-1}."""
    prefix = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
    lnorm = logsumexp(twist_induced_scores(tw, spec, t, prefix, final), axis=1)[0]
    L_prev = _twist_values(tw, spec, t - 1, prefix)[0]
    phi_prev = 0.0 if t == 1 else float(spec.log_potential(t - 1, prefix)[0])
    return float(lnorm - L_prev + phi_prev)


def _mean_ci(x, z=1.96):
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return float(x.mean()), float("nan")
    return float(x.mean()), float(z * x.std(ddof=1) / np.sqrt(x.size))


@dataclass
class BoundReport:
    K: int
    n_runs: int
    schedule: str
    proposal: str
    seed: int
    lb_samples: np.ndarray
    ub_samples: np.ndarray | None = None

    @property
    def lb_mean(self):
        return _mean_ci(self.lb_samples)[0]

    @property
    def lb_ci(self):
        return _mean_ci(self.lb_samples)[1]

    @property
    def ub_mean(self):
        return None if self.ub_samples is None else _mean_ci(self.ub_samples)[0]

    @property
    def ub_ci(self):
        return None if self.ub_samples is None else _mean_ci(self.ub_samples)[1]

    @property
    def gap(self):
        return None if self.ub_samples is None else self.ub_mean - self.lb_mean

    @property
    def midpoint(self):
        return None if self.ub_samples is None else 0.5 * (self.ub_mean + self.lb_mean)

    def se(self, side="lb"):
        x = self.lb_samples if side == "lb" else self.ub_samples
        return float(np.std(x, ddof=1) / np.sqrt(len(x)))


def bidirectional_bounds(spec, tw, K, n_runs, schedule="every_step", exact_source=None, seed=0,
                         proposal="twist_induced", final="exact", upper=True):
    """Lower bounds from SMC runs and upper bounds from pinned-sample runs.

    ``exact_source(n)`` must return n exact target samples as an (n, T) array;
    one fresh sample feeds each upper-bound run.
    """
    if n_runs < 2:
        raise BadConfig("n_runs must be >= 2")
    sched = ResampleSchedule.parse(schedule)
    lb = smc_log_z(spec, tw, K, n_runs, sched, proposal, seed, final)
    ub = None
    if upper:
        if exact_source is None:
            raise Unsupported("upper bounds need a source of exact target samples")
        ex = np.asarray(exact_source(n_runs), dtype=np.int64)
        ub = smc_target_log_z(spec, tw, K, ex, sched, proposal, seed, final, run_offset=n_runs)
    pname = proposal if isinstance(proposal, str) else getattr(proposal, "kind", "external")
    return BoundReport(K, n_runs, sched.label(), pname, seed, lb, ub)


@dataclass
class KLEstimate:
    kl_q_sigma: float
    se_q_sigma: float
    kl_sigma_q: float
    se_sigma_q: float


def estimate_kls(spec, q: Proposal, log_z, n_q_samples, exact_samples, rng: RngStream):
    """Monte Carlo KL in both directions given a log Z estimate.

    KL(q||sigma) = E_q[log q - log sigma~] + log Z and
    KL(sigma||q) = E_sigma[log sigma~ - log q] - log Z.
    """
    exact_samples = np.asarray(exact_samples, dtype=np.int64)
    if n_q_samples < 1 or exact_samples.size == 0:
        raise BadInput("need samples from both q and sigma")
    xs = q.sample(rng, n_q_samples)
    a = q.log_prob(xs) - spec.log_unnormalized(xs) + log_z
    b = spec.log_unnormalized(exact_samples) - q.log_prob(exact_samples) - log_z

    def m(x):
        mean = float(np.mean(x))
        if x.size < 2 or not np.isfinite(mean):
            return mean, float("nan")
        return mean, float(np.std(x, ddof=1) / np.sqrt(x.size))
    (ka, sa), (kb, sb) = m(a), m(b)
    return KLEstimate(ka, sa, kb, sb)


class SMCProposalView(Proposal):
    """Twist-induced proposal used as q for KL estimates (one particle, no resampling)."""

    def __init__(self, tw, spec, final="exact"):
        self.inner = TwistInducedProposal(tw, spec, final)
        self.T, self.V = spec.T, spec.V

    def logprobs(self, t, prefixes):
        return self.inner.logprobs(t, prefixes)
