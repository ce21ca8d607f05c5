"""Independent brute-force oracles for the loss terms: explicit per-sample
loops and python math, no engine code."""

import math

import numpy as np


def lse(xs):
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))


def info_nce_oracle(queries, keys, positives, tau):
    total = 0.0
    for i in range(len(queries)):
        logits = [float(queries[i] @ keys[j]) / tau for j in range(len(keys))]
        total += lse(logits) - logits[positives[i]]
    return total / len(queries)


def v2t_oracle(v, t, tau, symmetric=False):
    n = len(v)
    loss = info_nce_oracle(v, t, list(range(n)), tau)
    if symmetric:
        loss = 0.5 * (loss + info_nce_oracle(t, v, list(range(n)), tau))
    return loss


def pml_oracle(f1, v1, t1, f2, tau):
    n = len(f1)
    idx = list(range(n))
    return (info_nce_oracle(f1, f2, idx, tau)
            + info_nce_oracle(v1, f2, idx, tau)
            + info_nce_oracle(t1, f2, idx, tau))


def pdc_oracle(f, v, t, alpha2):
    n = len(f)
    total = 0.0
    for i in range(n):
        s_v = float(v[i] @ f[i])
        s_t = float(t[i] @ f[i])
        for j in range(n):
            if j == i:
                continue
            s_m = float(f[i] @ f[j])
            total += max(0.0, alpha2 + s_m - s_v)
            total += max(0.0, alpha2 + s_m - s_t)
    return total / n


def neighbors_oracle(sims, i, k):
    others = [j for j in range(len(sims)) if j != i]
    others.sort(key=lambda j: (-sims[i][j], j))
    return others[:k]


def plc_oracle(f, v, t, alpha3, k):
    n = len(f)
    if n < 2:
        return 0.0
    k = min(k, n - 1)
    s_m = np.asarray(f) @ np.asarray(f).T
    s_v = np.asarray(v) @ np.asarray(f).T
    s_t = np.asarray(t) @ np.asarray(f).T
    total = 0.0
    for i in range(n):
        for j in neighbors_oracle(s_m, i, k):
            total += max(0.0, (s_v[i, j] - s_m[i, j]) ** 2 - alpha3)
            total += max(0.0, (s_t[i, j] - s_m[i, j]) ** 2 - alpha3)
            total += max(0.0, (s_v[i, j] - s_t[i, j]) ** 2 - alpha3)
    return total / (n * k)


def v2v_oracle(v1, v2, tau_v, alpha4, k_hard):
    n = len(v1)
    std = info_nce_oracle(v1, v2, list(range(n)), tau_v)
    k = min(k_hard, n - 1)
    if k == 0:
        return std
    sims = np.asarray(v1) @ np.asarray(v2).T
    hard = 0.0
    for i in range(n):
        for j in neighbors_oracle(sims, i, k):
            hard += max(0.0, alpha4 + sims[i, j] - sims[i, i])
    return std + hard / (n * k)


def t2t_oracle(t1, t2, tau_t):
    return info_nce_oracle(t1, t2, list(range(len(t1))), tau_t)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
