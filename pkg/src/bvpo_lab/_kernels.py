"""Enumeration kernels over (sample, r_pos, r_neg) cells.

A *cell table* describes every realisation of the trace estimator for a
paired dataset of ``n`` samples:

* ``gp[i, a]``  gradient of ``log pi(a, y_pos_i | x_i)``   shape (n, T, d)
* ``gn[i, b]``  gradient of ``log pi(b, y_neg_i | x_i)``   shape (n, T, d)
* ``wp[i, a]``, ``wn[i, b]``  trace-draw probabilities     shape (n, T)
* ``coef[i, a, b]``  ``-beta * sigmoid(-margin)``          shape (n, T, T)
* ``ge[i]``  empty-trace gradient of sample ``i``          shape (n, d)

so that ``g_t(i, a, b) = coef[i, a, b] * (gp[i, a] - gn[i, b])`` with
probability ``wp[i, a] * wn[i, b] / n``.

Each kernel has a numba implementation and a pure-numpy one.  Set
``BVPO_LAB_DISABLE_NUMBA=1`` to force the numpy path (it is also used when
numba is not importable).
"""

import os

import numpy as np

_DISABLED = os.environ.get("BVPO_LAB_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
except ImportError:  # pragma: no cover - exercised via the env flag in CI
    njit = None

BACKEND = "numpy" if njit is None else "numba"


# ---------------------------------------------------------------------------
# numpy reference path


def moments_numpy(gp, gn, wp, wn, coef, ge):
    n = gp.shape[0]
    d = gp.shape[2]
    cond_t = np.empty((n, d))
    for i in range(n):
        w = wp[i][:, None] * wn[i][None, :] * coef[i]
        cond_t[i] = w.sum(axis=1) @ gp[i] - w.sum(axis=0) @ gn[i]
    mean_t = cond_t.mean(axis=0)
    mean_e = ge.mean(axis=0)
    var_t = 0.0
    within_t = 0.0
    sq_diff = 0.0
    for i in range(n):
        g = coef[i][:, :, None] * (gp[i][:, None, :] - gn[i][None, :, :])
        w = wp[i][:, None] * wn[i][None, :]
        var_t += float((w * ((g - mean_t) ** 2).sum(axis=2)).sum())
        within_t += float((w * ((g - cond_t[i]) ** 2).sum(axis=2)).sum())
        sq_diff += float((w * ((g - ge[i]) ** 2).sum(axis=2)).sum())
    dev_e = ge - mean_e
    var_e = float((dev_e ** 2).sum() / n)
    cov_te = float(((cond_t - mean_t) * dev_e).sum() / n)
    return mean_t, mean_e, var_t / n, var_e, cov_te, sq_diff / n, within_t / n


def mixture_numpy(gp, gn, wp, wn, coef, ge, mu, alpha):
    n = gp.shape[0]
    mean_c = np.zeros(gp.shape[2])
    cells = []
    for i in range(n):
        g = alpha * coef[i][:, :, None] * (gp[i][:, None, :] - gn[i][None, :, :]) \
            + (1.0 - alpha) * ge[i]
        w = wp[i][:, None] * wn[i][None, :] / n
        mean_c += (w[:, :, None] * g).sum(axis=(0, 1))
        cells.append((g, w))
    mse = 0.0
    var = 0.0
    for g, w in cells:
        mse += float((w * ((g - mu) ** 2).sum(axis=2)).sum())
        var += float((w * ((g - mean_c) ** 2).sum(axis=2)).sum())
    bias_sq = float(((mean_c - mu) ** 2).sum())
    return mse, bias_sq, var


def marginal_loss_batch_numpy(thetas, prompts, y_pos, y_neg, ref_log_marginal, beta,
                              n_prompts, n_traces, n_answers):
    m = thetas.shape[0]
    split = n_prompts * n_traces
    tl = thetas[:, :split].reshape(m, n_prompts, n_traces)
    al = thetas[:, split:].reshape(m, n_prompts, n_traces, n_answers)
    lt = tl - tl.max(axis=2, keepdims=True)
    lt = lt - np.log(np.exp(lt).sum(axis=2, keepdims=True))
    la = al - al.max(axis=3, keepdims=True)
    la = la - np.log(np.exp(la).sum(axis=3, keepdims=True))
    joint = lt[:, :, :, None] + la
    top = joint.max(axis=2, keepdims=True)
    marg = (top + np.log(np.exp(joint - top).sum(axis=2, keepdims=True)))[:, :, 0, :]
    d_pos = marg[:, prompts, y_pos] - ref_log_marginal[prompts, y_pos]
    d_neg = marg[:, prompts, y_neg] - ref_log_marginal[prompts, y_neg]
    return np.logaddexp(0.0, -beta * (d_pos - d_neg)).mean(axis=1)


# ---------------------------------------------------------------------------
# numba path

if njit is not None:

    @njit(cache=True, nogil=True)
    def moments_numba(gp, gn, wp, wn, coef, ge):
        n, t, d = gp.shape
        cond_t = np.zeros((n, d))
        mean_t = np.zeros(d)
        mean_e = np.zeros(d)
        for i in range(n):
            for a in range(t):
                for b in range(t):
                    w = wp[i, a] * wn[i, b] * coef[i, a, b]
                    if w == 0.0:
                        continue
                    for j in range(d):
                        cond_t[i, j] += w * (gp[i, a, j] - gn[i, b, j])
            for j in range(d):
                mean_t[j] += cond_t[i, j] / n
                mean_e[j] += ge[i, j] / n
        var_t = 0.0
        within_t = 0.0
        sq_diff = 0.0
        var_e = 0.0
        cov_te = 0.0
        for i in range(n):
            for a in range(t):
                for b in range(t):
                    w = wp[i, a] * wn[i, b]
                    if w == 0.0:
                        continue
                    c = coef[i, a, b]
                    s_var = 0.0
                    s_within = 0.0
                    s_diff = 0.0
                    for j in range(d):
                        g = c * (gp[i, a, j] - gn[i, b, j])
                        s_var += (g - mean_t[j]) ** 2
                        s_within += (g - cond_t[i, j]) ** 2
                        s_diff += (g - ge[i, j]) ** 2
                    var_t += w * s_var
                    within_t += w * s_within
                    sq_diff += w * s_diff
            for j in range(d):
                de = ge[i, j] - mean_e[j]
                var_e += de * de
                cov_te += (cond_t[i, j] - mean_t[j]) * de
        return mean_t, mean_e, var_t / n, var_e / n, cov_te / n, sq_diff / n, within_t / n

    @njit(cache=True, nogil=True)
    def mixture_numba(gp, gn, wp, wn, coef, ge, mu, alpha):
        n, t, d = gp.shape
        mean_c = np.zeros(d)
        for i in range(n):
            for a in range(t):
                for b in range(t):
                    w = wp[i, a] * wn[i, b] / n
                    if w == 0.0:
                        continue
                    c = alpha * coef[i, a, b]
                    for j in range(d):
                        mean_c[j] += w * (c * (gp[i, a, j] - gn[i, b, j]) + (1.0 - alpha) * ge[i, j])
        mse = 0.0
        var = 0.0
        for i in range(n):
            for a in range(t):
                for b in range(t):
                    w = wp[i, a] * wn[i, b] / n
                    if w == 0.0:
                        continue
                    c = alpha * coef[i, a, b]
                    s_mse = 0.0
                    s_var = 0.0
                    for j in range(d):
                        g = c * (gp[i, a, j] - gn[i, b, j]) + (1.0 - alpha) * ge[i, j]
                        s_mse += (g - mu[j]) ** 2
                        s_var += (g - mean_c[j]) ** 2
                    mse += w * s_mse
                    var += w * s_var
        bias_sq = 0.0
        for j in range(d):
            bias_sq += (mean_c[j] - mu[j]) ** 2
        return mse, bias_sq, var

    @njit(cache=True, nogil=True)
    def marginal_loss_batch_numba(thetas, prompts, y_pos, y_neg, ref_log_marginal, beta,
                                  n_prompts, n_traces, n_answers):
        m = thetas.shape[0]
        n = prompts.shape[0]
        split = n_prompts * n_traces
        out = np.empty(m)
        marg = np.empty((n_prompts, n_answers))
        lt = np.empty(n_traces)
        joint = np.empty(n_traces)
        for k in range(m):
            th = thetas[k]
            for x in range(n_prompts):
                base = x * n_traces
                top = th[base]
                for r in range(1, n_traces):
                    if th[base + r] > top:
                        top = th[base + r]
                s = 0.0
                for r in range(n_traces):
                    s += np.exp(th[base + r] - top)
                ls = top + np.log(s)
                for r in range(n_traces):
                    lt[r] = th[base + r] - ls
                for r in range(n_traces):
                    off = split + (x * n_traces + r) * n_answers
                    atop = th[off]
                    for yy in range(1, n_answers):
                        if th[off + yy] > atop:
                            atop = th[off + yy]
                    sa = 0.0
                    for yy in range(n_answers):
                        sa += np.exp(th[off + yy] - atop)
                    lt[r] -= atop + np.log(sa)
                for y in range(n_answers):
                    for r in range(n_traces):
                        joint[r] = lt[r] + th[split + (x * n_traces + r) * n_answers + y]
                    jt = joint[0]
                    for r in range(1, n_traces):
                        if joint[r] > jt:
                            jt = joint[r]
                    sj = 0.0
                    for r in range(n_traces):
                        sj += np.exp(joint[r] - jt)
                    marg[x, y] = jt + np.log(sj)
            total = 0.0
            for i in range(n):
                x = prompts[i]
                z = beta * ((marg[x, y_pos[i]] - ref_log_marginal[x, y_pos[i]])
                            - (marg[x, y_neg[i]] - ref_log_marginal[x, y_neg[i]]))
                # softplus(-z), stable in both tails
                if z > 0.0:
                    total += np.log1p(np.exp(-z))
                else:
                    total += -z + np.log1p(np.exp(z))
            out[k] = total / n
        return out

    moments = moments_numba
    mixture = mixture_numba
    marginal_loss_batch = marginal_loss_batch_numba
else:
    moments = moments_numpy
    mixture = mixture_numpy
    marginal_loss_batch = marginal_loss_batch_numpy
