"""Twist and proposal learning losses, and the training loop.

Every loss takes weighted sample sets and returns ``(loss, grad)`` with
``grad`` aligned to ``tw.theta``. Passing all sequences with their exact
probabilities as weights gives the enumeration (exact expectation) mode;
passing samples with weights 1/N gives the stochastic estimate.

Sample sets are :class:`Weighted` pairs of an (N, T) integer array and N
weights. CTL negatives additionally carry per-step weights (N, T), since
each twisted intermediate target has its own importance weights.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .engine import _run_batch
from .errors import BadConfig, BadInput, BadParameterization, DegenerateWeights, TrainingDiverged
from .oracle import OracleTable, exact_kl, exact_target_sample
from .rng import RngStream
from .seqmodel import all_sequences
from .targets import TargetSpec, rejection_sample_exact
from .twist import (BaseProposal, Proposal, TwistInducedProposal, TwistProposal, TwistSet,
                    ValueTwists, _extend)

LOSSES = ("ctl", "rl", "softq", "sixo", "fudge", "cdq", "cdfudge", "pcl1", "dpg")
POSITIVES = ("exact_oracle", "exact_rejection", "exact_bdmc", "approximate_sis", "approximate_smc")


@dataclass
class Weighted:
    seqs: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.seqs = np.asarray(self.seqs, dtype=np.int64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.seqs.ndim != 2 or self.w.shape[0] != self.seqs.shape[0]:
            raise BadInput("weights and samples have mismatched lengths")

    @classmethod
    def uniform(cls, seqs):
        seqs = np.asarray(seqs, dtype=np.int64)
        return cls(seqs, np.full(seqs.shape[0], 1.0 / seqs.shape[0]))

    @classmethod
    def from_log(cls, seqs, log_w):
        log_w = np.asarray(log_w, dtype=np.float64)
        if log_w.ndim == 1:
            lse = logsumexp(log_w)
            if not np.isfinite(lse):
                raise DegenerateWeights("all weights are zero")
            return cls(seqs, np.exp(log_w - lse))
        lse = logsumexp(log_w, axis=0)
        if np.any(~np.isfinite(lse)):
            raise DegenerateWeights("all weights are zero at some step")
        return cls(seqs, np.exp(log_w - lse))

    def at(self, t):
        """Weights for step t (1-based) when per-step weights are present."""
        return self.w[:, t - 1] if self.w.ndim == 2 else self.w


def _learned_steps(T, final):
    return range(1, T + 1) if final == "learned" else range(1, T)


# -- exact enumeration batches -------------------------------------------------
def sigma_batch(table: OracleTable):
    """All sequences weighted by the exact target."""
    return Weighted(all_sequences(table.V, table.T), np.exp(table.log_sigma()))


def p0_batch(spec: TargetSpec):
    seqs = all_sequences(spec.V, spec.T)
    return Weighted(seqs, np.exp(spec.model.sequence_logprobs(seqs)))


def proposal_batch(q: Proposal, V, T):
    seqs = all_sequences(V, T)
    return Weighted(seqs, np.exp(q.log_prob(seqs)))


def twisted_marginal_batch(tw, spec: TargetSpec):
    """Every sequence with per-step weights pi_t^theta(s_{1:t}) spread over completions.

    Column t holds pi_t(s_{1:t}) * p0(s_{t+1:T}|s_{1:t}), whose marginal on
    the first t tokens is exactly the normalized twisted target.
    """
    V, T = spec.V, spec.T
    seqs = all_sequences(V, T)
    lp_steps = np.stack([spec.model.logprobs(seqs[:, :t - 1])[np.arange(seqs.shape[0]), seqs[:, t - 1]]
                         for t in range(1, T + 1)], axis=1)
    cum = np.cumsum(lp_steps, axis=1)
    phi = np.zeros(seqs.shape[0])
    cols = []
    for t in range(1, T + 1):
        L = tw.log_twist_batch(t, seqs[:, :t], spec.conditioning)
        # p0(s_{1:T}) * prod_{tau<t} phi_tau * psi_t
        cols.append(cum[:, -1] + phi + L)
        phi = phi + (0 if spec.terminal_only else spec.log_potential(t, seqs[:, :t]))
    return Weighted.from_log(seqs, np.stack(cols, axis=1))


# -- CTL ---------------------------------------------------------------------------
def ctl_grad(tw: TwistSet, spec: TargetSpec, positives: Weighted, negatives: Weighted, final="exact"):
    """Surrogate -sum_t [E_pos log psi_t - E_neg log psi_t] with frozen weights."""
    g = np.zeros_like(tw.theta)
    loss = 0.0
    o = spec.conditioning
    for t in _learned_steps(spec.T, final):
        lp = tw.log_twist_batch(t, positives.seqs[:, :t], o)
        ln = tw.log_twist_batch(t, negatives.seqs[:, :t], o)
        wp, wn = positives.at(t), negatives.at(t)
        loss -= wp @ lp - wn @ ln
        g -= tw.vjp(t, positives.seqs[:, :t], wp, o)
        g += tw.vjp(t, negatives.seqs[:, :t], wn, o)
    return float(loss), g


def ctl_exact(tw: TwistSet, spec: TargetSpec, table: OracleTable, final="exact"):
    """Exact sum_t KL(sigma_t || pi_t^theta) and its gradient, by enumeration."""
    pos = sigma_batch(table)
    neg = twisted_marginal_batch(tw, spec)
    _, g = ctl_grad(tw, spec, pos, neg, final)
    V, T = spec.V, spec.T
    loss = 0.0
    for t in _learned_steps(T, final):
        seqs = all_sequences(V, t)
        log_pit = table.log_prefix_weight(t) + tw.log_twist_batch(t, seqs, spec.conditioning)
        log_pit = log_pit - logsumexp(log_pit)
        ls = table.log_marg[t]
        live = np.isfinite(ls)
        loss += float(np.sum(np.exp(ls[live]) * (ls[live] - log_pit[live])))
    return loss, g


# -- soft-Q / RL -------------------------------------------------------------------
def soft_q_grad(tw: TwistSet, spec: TargetSpec, batch: Weighted, target_tw=None, final="exact",
                intermediate=True):
    """Squared soft Bellman residuals with a stop-gradient on the bootstrap target.

    residual_t = log phi_t + log sum_s p0(s|s_{1:t}) psi_{t+1}(s_{1:t} s) - log psi_t
    for t < T, plus (log phi_T - log psi_T) when the final twist is learned.
    ``target_tw`` supplies the frozen bootstrap values (defaults to ``tw``).
    With ``intermediate=False`` the phi_t terms for t < T are dropped.
    """
    target_tw = tw if target_tw is None else target_tw
    V, T = spec.V, spec.T
    o = spec.conditioning
    seqs, w = batch.seqs, batch.w
    n = seqs.shape[0]
    g = np.zeros_like(tw.theta)
    loss = 0.0
    for t in _learned_steps(T, final):
        pre = seqs[:, :t]
        lpsi = tw.log_twist_batch(t, pre, o)
        if t == T:
            tgt = spec.log_potential(T, pre)
        else:
            kids = _extend(pre, V)
            if t + 1 == T and final == "exact":
                nxt = spec.log_potential(T, kids)
            else:
                oo = None if o is None else np.full(kids.shape[0], o)
                nxt = target_tw.log_twist_batch(t + 1, kids, oo)
            tgt = logsumexp(spec.model.logprobs(pre) + nxt.reshape(n, V), axis=1)
            if intermediate and not spec.terminal_only:
                tgt = tgt + spec.log_potential(t, pre)
        r = tgt - lpsi
        loss += float(w @ r**2)
        g += tw.vjp(t, pre, -2 * w * r, o)
    return loss, g


def rl_grad(tw, spec, batch, target_tw=None, final="exact"):
    """Terminal-only variant: intermediate potentials are ignored."""
    return soft_q_grad(tw, spec, batch, target_tw, final, intermediate=False)


# -- SIXO -------------------------------------------------------------------------
def sixo_grad(tw: TwistSet, spec: TargetSpec, positives: Weighted, negatives: Weighted):
    """Noise-contrastive loss with classifier sigmoid(log psi_t), t = 1..T."""
    o = spec.conditioning
    g = np.zeros_like(tw.theta)
    loss = 0.0
    for t in range(1, spec.T + 1):
        xp = tw.log_twist_batch(t, positives.seqs[:, :t], o)
        xn = tw.log_twist_batch(t, negatives.seqs[:, :t], o)
        wp, wn = positives.at(t), negatives.at(t)
        loss -= wp @ log_expit(xp) + wn @ log_expit(-xn)
        g += tw.vjp(t, positives.seqs[:, :t], -wp * expit(-xp), o)
        g += tw.vjp(t, negatives.seqs[:, :t], wn * expit(xn), o)
    return float(loss), g


# -- FUDGE ---------------------------------------------------------------------------
def fudge_labels(spec: TargetSpec, seqs):
    """sigma(o|s_{1:T}) for conditional targets, else phi(s_{1:T}), required in [0, 1]."""
    if spec.observation is not None:
        y = np.exp(spec.observation.log_lik(seqs, spec.conditioning))
        if spec.potential.kind != "unit":
            y = y * np.exp(spec.potential.log_terminal(seqs))
    else:
        if not spec.terminal_only:
            raise BadConfig("FUDGE labels need a terminal potential")
        y = np.exp(spec.log_potential(spec.T, seqs))
    if np.any(y < 0) or np.any(y > 1 + 1e-12):
        raise BadParameterization("FUDGE labels must be probabilities in [0, 1]")
    return np.minimum(y, 1.0)


def fudge_grad(tw: TwistSet, spec: TargetSpec, rollouts: Weighted, labels=None):
    """Cross-entropy of psi_t = sigmoid(raw) against labels of base-model rollouts."""
    if tw.head != "prob":
        raise BadParameterization("FUDGE needs a probability-head twist")
    o = spec.conditioning
    seqs, w = rollouts.seqs, rollouts.w
    y = fudge_labels(spec, seqs) if labels is None else np.asarray(labels, dtype=np.float64)
    g = np.zeros_like(tw.theta)
    loss = 0.0
    for t in range(1, spec.T + 1):
        raw = tw.raw_batch(t, seqs[:, :t], o)
        loss -= float(w @ (y * log_expit(raw) + (1 - y) * log_expit(-raw)))
        g += tw.raw_vjp(t, seqs[:, :t], -w * (y - expit(raw)), o)
    return loss, g


# -- CD-Q and CD-FUDGE ----------------------------------------------------------------
def cdq_grad(tw: TwistSet, spec: TargetSpec, batch: Weighted, final="exact"):
    """Squared one-step recursion error on psi itself, full gradient (no stop-gradient)."""
    V, T = spec.V, spec.T
    o = spec.conditioning
    seqs, w = batch.seqs, batch.w
    n = seqs.shape[0]
    g = np.zeros_like(tw.theta)
    loss = 0.0
    for t in _learned_steps(T, final):
        pre = seqs[:, :t]
        psi = np.exp(tw.log_twist_batch(t, pre, o))
        if t == T:
            tgt = np.exp(spec.log_potential(T, pre))
            r = tgt - psi
        else:
            kids = _extend(pre, V)
            p0 = np.exp(spec.model.logprobs(pre))
            phi_t = 1.0 if spec.terminal_only else np.exp(spec.log_potential(t, pre))
            if t + 1 == T and final == "exact":
                nxt = np.exp(spec.log_potential(T, kids)).reshape(n, V)
                learned_next = False
            else:
                oo = None if o is None else np.full(kids.shape[0], o)
                nxt = np.exp(tw.log_twist_batch(t + 1, kids, oo)).reshape(n, V)
                learned_next = True
            tgt = phi_t * np.sum(p0 * nxt, axis=1)
            r = tgt - psi
            if learned_next:
                c = (2 * w * r * phi_t)[:, None] * p0 * nxt
                g += tw.vjp(t + 1, kids, c.ravel(), oo)
        loss += float(w @ r**2)
        g += tw.vjp(t, pre, -2 * w * r * psi, o)
    return loss, g


def cdfudge_grad(tw: TwistSet, spec: TargetSpec, rollouts: Weighted, final="exact"):
    """sum_t (psi_t(s_{1:t}) - phi(s_{1:T}))^2 over base-model rollouts."""
    if not spec.terminal_only:
        raise BadConfig("CD-FUDGE needs a terminal potential")
    o = spec.conditioning
    seqs, w = rollouts.seqs, rollouts.w
    phi = np.exp(spec.log_potential(spec.T, seqs))
    g = np.zeros_like(tw.theta)
    loss = 0.0
    for t in _learned_steps(spec.T, final):
        psi = np.exp(tw.log_twist_batch(t, seqs[:, :t], o))
        r = psi - phi
        loss += float(w @ r**2)
        g += tw.vjp(t, seqs[:, :t], 2 * w * r * psi, o)
    return loss, g


# -- PCL (one step) ---------------------------------------------------------------------
def pcl1_grad(values: ValueTwists, spec: TargetSpec, q: Proposal, batch: Weighted):
    """One-step path consistency on log values, with the proposal held fixed.

    residual_t = log phi_t + log Phi_t - log Phi_{t-1} - log q(s_t|.) + log p0(s_t|.)
    """
    T = spec.T
    o = spec.conditioning
    seqs, w = batch.seqs, batch.w
    rows = np.arange(seqs.shape[0])
    g = np.zeros_like(values.theta)
    loss = 0.0
    for t in range(1, T + 1):
        pre, cur = seqs[:, :t - 1], seqs[:, :t]
        tok = seqs[:, t - 1]
        lq = q.logprobs(t, pre)[rows, tok]
        lp0 = spec.model.logprobs(pre)[rows, tok]
        r = (spec.log_potential(t, cur) + values.log_value(t, cur, o)
             - values.log_value(t - 1, pre, o) - lq + lp0)
        loss += float(w @ r**2)
        g += values.vjp(t, cur, 2 * w * r, o)
        g -= values.vjp(t - 1, pre, 2 * w * r, o)
    return loss, g


# -- DPG ------------------------------------------------------------------------------------
def dpg_grad(view: TwistProposal, spec: TargetSpec, seqs, log_w=None, weights=None):
    """Surrogate -sum_k wbar_k log q_xi(x_k) with frozen self-normalized weights.

    ``log_w`` are unnormalized log sigma~/q weights for proposal samples;
    alternatively pass normalized ``weights`` directly (enumeration mode).
    """
    seqs = np.asarray(seqs, dtype=np.int64)
    if weights is None:
        if seqs.shape[0] < 2:
            raise DegenerateWeights("self-normalized weights need at least two samples")
        if log_w is None:
            log_w = spec.log_unnormalized(seqs) - view.log_prob(seqs)
        lse = logsumexp(log_w)
        if not np.isfinite(lse):
            raise DegenerateWeights("all importance weights are zero")
        weights = np.exp(np.asarray(log_w) - lse)
    weights = np.asarray(weights, dtype=np.float64)
    loss = -float(weights @ view.log_prob(seqs))
    return loss, -view.grad_log_prob(seqs, weights)


# -- optimizers ------------------------------------------------------------------------------
@dataclass
class Adam:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    k: int = 0

    def step(self, theta, g):
        if self.m is None:
            self.m, self.v = np.zeros_like(theta), np.zeros_like(theta)
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.k)
        vh = self.v / (1 - self.b2**self.k)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class SGD:
    lr: float = 1e-3

    def step(self, theta, g):
        return theta - self.lr * g


# -- sample builders ---------------------------------------------------------------------------
def sis_particles(spec, tw, K, seed, proposal="twist_induced", final="exact"):
    """One SIS run; returns the K sequences and per-step log incremental weights (K, T)."""
    res = _run_batch(spec, tw, K, "never", proposal, seed, [0], None, final, record_steps=True)
    return res.sequences[0], res.step_log_w[0]


def ctl_samples(spec, tw, K, seed, final="exact"):
    """Negatives with per-step weights for pi_t^theta and approximate positives.

    The negative weight at step t is the cumulative incremental weight up to
    t; the positive weight uses the full product through the true terminal
    potential, so positives approximate sigma, not the twisted target.
    """
    seqs, steps = sis_particles(spec, tw, K, seed, final=final)
    cum = np.cumsum(steps, axis=1)
    neg = Weighted.from_log(seqs, cum)
    pos = Weighted.from_log(seqs, cum[:, -1])
    return pos, neg


def approximate_positive_weights(spec, seqs, log_q):
    """Self-normalized weights sigma~/q over full sequences."""
    return Weighted.from_log(seqs, spec.log_unnormalized(seqs) - np.asarray(log_q))


# -- training ---------------------------------------------------------------------------------
@dataclass
class LossConfig:
    loss: str = "ctl"
    positives: str = "approximate_sis"
    negatives: str = "twist_induced"
    K: int = 64
    lr: float | None = None
    steps: int = 1000
    seed: int = 0
    optimizer: str = "adam"
    eval_every: int = 100
    final: str = "exact"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise BadConfig(f"unknown loss {self.loss!r}")
        if self.positives not in POSITIVES:
            raise BadConfig(f"unknown positive source {self.positives!r}")
        if self.negatives not in ("base", "twist_induced"):
            raise BadConfig(f"unknown negative proposal {self.negatives!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise BadConfig(f"unknown optimizer {self.optimizer!r}")
        if self.K < 1 or self.steps < 0 or self.eval_every < 1:
            raise BadConfig("K >= 1, steps >= 0 and eval_every >= 1 required")
        if self.loss == "dpg" and self.K < 2:
            raise BadConfig("dpg needs K >= 2")
        if self.final not in ("exact", "learned"):
            raise BadConfig("final must be 'exact' or 'learned'")


@dataclass
class TrainTrace:
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    eval_step: list = field(default_factory=list)
    kl_q_sigma: list = field(default_factory=list)
    kl_sigma_q: list = field(default_factory=list)
    wall: list = field(default_factory=list)

    def rows(self):
        """One row per evaluation: step, loss, grad_norm, kl_q_sigma, kl_sigma_q."""
        out = []
        for i, s in enumerate(self.eval_step):
            j = min(s, len(self.loss)) - 1
            out.append((s, self.loss[j] if j >= 0 else float("nan"),
                        self.grad_norm[j] if j >= 0 else float("nan"),
                        self.kl_q_sigma[i], self.kl_sigma_q[i]))
        return out


def model_proposal(tw, spec, loss, final="exact"):
    """The sampler whose KLs a trained object is judged by."""
    if loss == "dpg":
        return TwistProposal(tw, spec.model, spec.conditioning)
    if loss == "pcl1":
        from .twist import ValueInducedTwists
        return TwistInducedProposal(ValueInducedTwists(tw, spec), spec, final)
    return TwistInducedProposal(tw, spec, final)


def _positives(cfg, spec, tw, seed, table):
    if cfg.positives == "exact_oracle":
        if table is None:
            raise BadConfig("exact_oracle positives need an oracle table")
        return Weighted.uniform(exact_target_sample(table, RngStream(seed), cfg.K))
    if cfg.positives == "exact_rejection":
        return Weighted.uniform(rejection_sample_exact(spec, RngStream(seed), max_draws=10**7, n=cfg.K))
    if cfg.positives == "exact_bdmc":
        raise BadConfig("exact_bdmc positives give one posterior per draw; use a fixed conditioning source")
    if cfg.positives == "approximate_smc":
        res = _run_batch(spec, tw, cfg.K, "every_step", "twist_induced", seed, [0], None, cfg.final)
        return Weighted.from_log(res.sequences[0], res.log_w[0])
    return None  # approximate_sis: taken from the negative batch


def _step_grad(cfg, spec, tw, seed, table):
    K = cfg.K
    loss = cfg.loss
    if loss == "ctl":
        pos_sis, neg = ctl_samples(spec, tw, K, seed, cfg.final)
        pos = _positives(cfg, spec, tw, seed + 1, table) or pos_sis
        return ctl_grad(tw, spec, pos, neg, cfg.final)
    if loss in ("rl", "softq", "cdq"):
        q = TwistInducedProposal(tw, spec, cfg.final) if cfg.negatives == "twist_induced" else BaseProposal(spec.model)
        batch = Weighted.uniform(q.sample(RngStream(seed), K))
        if loss == "cdq":
            return cdq_grad(tw, spec, batch, cfg.final)
        fn = rl_grad if loss == "rl" else soft_q_grad
        return fn(tw, spec, batch, final=cfg.final)
    if loss == "sixo":
        pos_sis, _ = ctl_samples(spec, tw, K, seed, cfg.final)
        pos = _positives(cfg, spec, tw, seed + 1, table) or pos_sis
        neg = Weighted.uniform(spec.model.sample(RngStream(seed + 2), K))
        return sixo_grad(tw, spec, pos, neg)
    if loss in ("fudge", "cdfudge"):
        roll = Weighted.uniform(spec.model.sample(RngStream(seed), K))
        return fudge_grad(tw, spec, roll) if loss == "fudge" else cdfudge_grad(tw, spec, roll, cfg.final)
    if loss == "pcl1":
        q = model_proposal(tw, spec, "pcl1", cfg.final)
        return pcl1_grad(tw, spec, q, Weighted.uniform(q.sample(RngStream(seed), K)))
    view = TwistProposal(tw, spec.model, spec.conditioning)
    xs = view.sample(RngStream(seed), K)
    return dpg_grad(view, spec, xs)


def oracle_kls(tw, spec, table, loss, final="exact"):
    q = model_proposal(tw, spec, loss, final)
    return exact_kl(table, q, "q_sigma"), exact_kl(table, q, "sigma_q")


def train(cfg: LossConfig, spec: TargetSpec, tw, table: OracleTable | None = None, callback=None):
    """Gradient training of ``tw`` (modified copy returned) under ``cfg``."""
    tw = tw.copy()
    if cfg.loss == "fudge" and tw.head != "prob":
        raise BadParameterization("FUDGE needs a probability-head twist")
    if cfg.loss != "fudge" and getattr(tw, "head", "log") != "log":
        raise BadParameterization(f"{cfg.loss} needs a log-head twist")
    if cfg.loss == "pcl1" and not isinstance(tw, ValueTwists):
        raise BadConfig("pcl1 trains a value parameterization")
    lr = cfg.lr if cfg.lr is not None else (1e-3 if getattr(tw, "kind", "") in ("tabular", "value") else 1e-4)
    opt = Adam(lr) if cfg.optimizer == "adam" else SGD(lr)
    trace = TrainTrace()
    t0 = time.perf_counter()
    master = RngStream(cfg.seed)

    def evaluate(step):
        if table is None or cfg.loss == "fudge":
            return
        a, b = oracle_kls(tw, spec, table, cfg.loss, cfg.final)
        trace.eval_step.append(step)
        trace.kl_q_sigma.append(a)
        trace.kl_sigma_q.append(b)

    evaluate(0)
    for k in range(1, cfg.steps + 1):
        loss, g = _step_grad(cfg, spec, tw, master.next_seed() % (2**61), table)
        gn = float(np.linalg.norm(g))
        trace.step.append(k)
        trace.loss.append(float(loss))
        trace.grad_norm.append(gn)
        trace.wall.append(time.perf_counter() - t0)
        if not (np.isfinite(loss) and np.isfinite(gn)):
            raise TrainingDiverged(f"non-finite loss at step {k}", trace)
        if lr != 0:
            tw.theta = opt.step(tw.theta, g)
        if k % cfg.eval_every == 0 or k == cfg.steps:
            evaluate(k)
        if callback is not None:
            callback(k, tw, trace)
    return tw, trace


def fit_full_batch(fn, tw, tol=1e-12, maxiter=5000):
    """Minimize ``fn(tw) -> (loss, grad)`` over theta with L-BFGS; returns a fitted copy."""
    from scipy.optimize import minimize
    work = tw.copy()

    def f(theta):
        work.theta = theta
        loss, g = fn(work)
        return loss, g

    res = minimize(f, tw.theta.copy(), jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter, "ftol": tol, "gtol": tol * 1e-2, "maxcor": 50})
    work.theta = res.x
    return work


def trace_dict(trace: TrainTrace):
    return asdict(trace)
