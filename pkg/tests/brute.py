import numpy as np
from scipy.special import logsumexp

from twistsmc.seqmodel import all_sequences, prefix_codes


def brute_twists(spec):
    """psi*_t(s_{1:t}) = phi_t * sum over completions of p0 * prod_{tau>t} phi_tau, by direct summation."""
    V, T = spec.V, spec.T
    seqs = all_sequences(V, T)
    lp = np.zeros(len(seqs))
    phis = []
    for t in range(1, T + 1):
        lp = lp + spec.model.logprobs(seqs[:, :t - 1])[np.arange(len(seqs)), seqs[:, t - 1]]
        phis.append(spec.log_potential(t, seqs[:, :t]))
    out = {}
    for t in range(1, T + 1):
        lp_pre = np.zeros(len(seqs))
        for tau in range(1, t + 1):
            lp_pre = lp_pre + spec.model.logprobs(seqs[:, :tau - 1])[np.arange(len(seqs)), seqs[:, tau - 1]]
        future = lp - lp_pre + sum(phis[t - 1:], np.zeros(len(seqs)))
        codes = prefix_codes(seqs[:, :t], V)
        vals = np.full(V**t, -np.inf)
        for c in range(V**t):
            vals[c] = logsumexp(future[codes == c])
        out[t] = vals
    return out
