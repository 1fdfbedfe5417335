"""Independent reference implementations used only by the tests.

Each one is written the slow, obvious way (explicit loops, enumeration)
and shares no code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def matmul_loops(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def softmax_row(x):
    m = max(x)
    e = [math.exp(v - m) for v in x]
    z = sum(e)
    return [v / z for v in e]


def attention_per_head(x_q, x_kv, wq, bq, wk, bk, wv, bv, wo, bo, n_heads, mask=None):
    """Loop over batch, head and query position; mask[b][i][j] True = attend."""
    b_sz, tq, d = x_q.shape
    tk = x_kv.shape[1]
    dk = d // n_heads
    q = x_q @ wq + bq
    k = x_kv @ wk + bk
    v = x_kv @ wv + bv
    ctx = np.zeros((b_sz, tq, d))
    for b in range(b_sz):
        for h in range(n_heads):
            sl = slice(h * dk, (h + 1) * dk)
            for i in range(tq):
                scores = []
                for j in range(tk):
                    if mask is not None and not mask[b][i][j]:
                        scores.append(-math.inf)
                    else:
                        scores.append(float(q[b, i, sl] @ k[b, j, sl]) / math.sqrt(dk))
                finite = [s for s in scores if s != -math.inf]
                mx = max(finite)
                w = [math.exp(s - mx) if s != -math.inf else 0.0 for s in scores]
                z = sum(w)
                for j in range(tk):
                    ctx[b, i, sl] += (w[j] / z) * v[b, j, sl]
    return ctx @ wo + bo


# -- CTC ---------------------------------------------------------------------

def collapse(path, blank=0):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def ctc_brute_force_nll(log_probs, label, blank=0):
    """-log sum over every frame labelling that collapses to ``label``."""
    t_len, v = log_probs.shape
    total = -math.inf
    for path in itertools.product(range(v), repeat=t_len):
        if collapse(path, blank) == tuple(label):
            lp = sum(log_probs[t, s] for t, s in enumerate(path))
            total = np.logaddexp(total, lp)
    return -total


def ctc_prefix_probs_brute(log_probs, blank=0):
    """Map every collapsed label sequence to its total probability."""
    t_len, v = log_probs.shape
    probs: dict[tuple, float] = {}
    for path in itertools.product(range(v), repeat=t_len):
        lab = collapse(path, blank)
        p = math.exp(sum(log_probs[t, s] for t, s in enumerate(path)))
        probs[lab] = probs.get(lab, 0.0) + p
    return probs


# -- priors --------------------------------------------------------------------

def smooth_oracle(counts):
    """Literal transcription of the smoothing rule, token by token."""
    c_total = sum(counts)
    v = len(counts)
    n0 = sum(1 for c in counts if c == 0)
    ind = 1 if n0 else 0
    out = []
    for c in counts:
        if c > 0:
            out.append(c / c_total - ind / ((v - n0) * c_total))
        else:
            out.append(ind / (n0 * c_total))
    return out


def bayes_reweight(logits, p_target, p_source, blank=0):
    """Posterior under the target prior by Bayes' rule, blank mass fixed.

    p(y|x) ∝ p_s(y|x) * p_t(y) / p_s(y) for non-blank y; the non-blank
    mass is then rescaled so that it sums to 1 - p_s(blank|x).
    """
    post = softmax_row(list(logits))
    nb = [i for i in range(len(logits)) if i != blank]
    unnorm = {}
    for j, i in enumerate(nb):
        unnorm[i] = post[i] * p_target[j] / p_source[j]
    z = sum(unnorm.values())
    out = [0.0] * len(logits)
    out[blank] = post[blank]
    for i in nb:
        out[i] = (1.0 - post[blank]) * unnorm[i] / z
    return out


# -- search --------------------------------------------------------------------

def all_label_sequences(symbols, max_len):
    for n in range(max_len + 1):
        yield from itertools.product(symbols, repeat=n)


def levenshtein(a, b):
    d = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        prev, d[0] = d[0], i
        for j in range(1, len(b) + 1):
            cur = min(d[j] + 1, d[j - 1] + 1, prev + (a[i - 1] != b[j - 1]))
            prev, d[j] = d[j], cur
    return d[len(b)]


def stationary_power(trans, iters=20000):
    p = np.full(trans.shape[0], 1.0 / trans.shape[0])
    for _ in range(iters):
        p = p @ trans
    return p
