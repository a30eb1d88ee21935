"""Independent pure-Python reference implementations (lists and math only)."""
import math


def normalize(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def bank(features, confidences, labels, n_classes, shots):
    """Top-``shots`` per class by (confidence desc, id asc), averaged, normalised."""
    out, support = [], []
    for k in range(n_classes):
        cand = [(-confidences[i], i) for i in range(len(labels)) if labels[i] == k]
        cand.sort()
        chosen = [i for _, i in cand[:shots]]
        support.append(chosen)
        if not chosen:
            out.append(None)
            continue
        d = len(features[0])
        mean = [sum(features[i][c] for i in chosen) / len(chosen) for c in range(d)]
        out.append(normalize(mean))
    return out, support


def mlp(x, weights, biases):
    for layer, (W, b) in enumerate(zip(weights, biases)):
        x = [sum(x[i] * W[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]
        if layer < len(weights) - 1:
            x = [max(v, 0.0) for v in x]
    return x


def attend(q, keys, values, scale):
    s = [sum(a * b for a, b in zip(q, k)) / scale for k in keys]
    m = max(s)
    w = [math.exp(v - m) for v in s]
    z = sum(w)
    return [sum(w[j] / z * values[j][c] for j in range(len(keys))) for c in range(len(q))]


def ift(z_rows, source, target, pre, post, scale, beta1, beta2):
    """``pre``/``post`` are ``(weights, biases)`` lists; returns ``h`` rows."""
    ks = [mlp(r, *pre) for r in source]
    kt = [mlp(r, *pre) for r in target]
    out = []
    for z in z_rows:
        q = mlp(z, *pre)
        zs = normalize([a + b for a, b in zip(mlp(attend(q, ks, ks, scale), *post), z)])
        zt = normalize([a + b for a, b in zip(mlp(attend(q, kt, kt, scale), *post), z)])
        out.append([beta1 * a + beta2 * b for a, b in zip(zs, zt)])
    return out
