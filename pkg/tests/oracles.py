"""Brute-force reference implementations used only by the tests.

Each one loops over subjects or pairs directly and shares no code with the
library.
"""

import math

import numpy as np


def naive_cox_nll(risk, time, event):
    total = 0.0
    for i in range(len(risk)):
        if event[i]:
            denom = sum(math.exp(risk[j]) for j in range(len(risk)) if time[j] >= time[i])
            total -= risk[i] - math.log(denom)
    return total


def naive_cox_grad(risk, time, event):
    n = len(risk)
    grad = [-float(event[i]) for i in range(n)]
    for e in range(n):
        if not event[e]:
            continue
        denom = sum(math.exp(risk[j]) for j in range(n) if time[j] >= time[e])
        for i in range(n):
            if time[i] >= time[e]:
                grad[i] += math.exp(risk[i]) / denom
    return np.array(grad)


def naive_c_index(risk, time, event):
    num = 0.0
    den = 0
    for i in range(len(risk)):
        for j in range(len(risk)):
            if time[i] < time[j] and event[i]:
                den += 1
                if risk[i] > risk[j]:
                    num += 1
                elif risk[i] == risk[j]:
                    num += 0.5
    return num / den


def naive_km(time, event):
    """(event time, survival) pairs by direct product-limit recursion."""
    out = []
    s = 1.0
    for t in sorted(set(t for t, e in zip(time, event) if e)):
        r = sum(1 for u in time if u >= t)
        d = sum(1 for u, e in zip(time, event) if e and u == t)
        s *= (r - d) / r
        out.append((t, s, r))
    return out


def naive_logrank_chi2(time_a, event_a, time_b, event_b):
    all_t = sorted(set([t for t, e in zip(time_a, event_a) if e] + [t for t, e in zip(time_b, event_b) if e]))
    o = e_sum = v = 0.0
    for t in all_t:
        na = sum(1 for u in time_a if u >= t)
        nb = sum(1 for u in time_b if u >= t)
        da = sum(1 for u, ev in zip(time_a, event_a) if ev and u == t)
        db = sum(1 for u, ev in zip(time_b, event_b) if ev and u == t)
        n, d = na + nb, da + db
        o += da
        e_sum += d * na / n
        if n > 1:
            v += d * na * nb * (n - d) / (n * n * (n - 1))
    return (o - e_sum) ** 2 / v if v > 0 else 0.0


def explicit_scores(W1, b1, w2, b2, X):
    """Per-tile score via two explicit matrix-vector products and a relu clamp."""
    out = []
    for row in X:
        h = [max(0.0, sum(W1[a, c] * row[c] for c in range(len(row))) + b1[a]) for a in range(W1.shape[0])]
        out.append(sum(w2[a] * h[a] for a in range(len(h))) + b2)
    return np.array(out)


def explicit_head(layers, x):
    a = list(x)
    for W, b, act in layers:
        z = [sum(W[o, i] * a[i] for i in range(len(a))) + b[o] for o in range(W.shape[0])]
        a = [max(0.0, v) for v in z] if act == "relu" else z
    return a[0]


def central_difference(f, arrays, step=1e-5):
    """Numerical gradient of f() with respect to every entry of every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            up = f()
            arr[idx] = old - step
            down = f()
            arr[idx] = old
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-5):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / den)))
    return worst
