"""Deliberately naive reference implementations (explicit Python loops).

They share no code with the package and are only fast enough for small
tensors.
"""
import math


def loop_mean(x):
    B, H, W, C = x.shape
    out = []
    for c in range(C):
        s = 0.0
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    s += float(x[b, i, j, c])
        out.append(s / (B * H * W))
    return out


def loop_var(x, mean):
    B, H, W, C = x.shape
    out = []
    for c in range(C):
        s = 0.0
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    d = float(x[b, i, j, c]) - mean[c]
                    s += d * d
        out.append(s / (B * H * W))
    return out


def loop_linear(weight, bias, x):
    B, H, W, C = x.shape
    c_out = len(bias)
    out = [[[[0.0] * c_out for _ in range(W)] for _ in range(H)] for _ in range(B)]
    for b in range(B):
        for i in range(H):
            for j in range(W):
                for o in range(c_out):
                    s = float(bias[o])
                    for c in range(C):
                        s += float(weight[o][c]) * float(x[b, i, j, c])
                    out[b][i][j][o] = s
    return out


def loop_bn(x, mean, var, gamma, beta, eps):
    B, H, W, C = x.shape
    out = [[[[0.0] * C for _ in range(W)] for _ in range(H)] for _ in range(B)]
    for b in range(B):
        for i in range(H):
            for j in range(W):
                for c in range(C):
                    f = float(x[b, i, j, c])
                    out[b][i][j][c] = float(gamma[c]) * (f - mean[c]) / math.sqrt(var[c] + eps) + float(beta[c])
    return out


def loop_cross_entropy(probs, labels, weights):
    B, H, W, _ = probs.shape
    total = 0.0
    for b in range(B):
        s = 0.0
        for i in range(H):
            for j in range(W):
                t = int(labels[b, i, j])
                s += -weights[t] * math.log(max(float(probs[b, i, j, t]), 1e-12))
        total += s / (H * W)
    return total / B


def loop_confusion(pred, truth, num_classes):
    cm = [[0] * num_classes for _ in range(num_classes)]
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        cm[t][p] += 1
    return cm


def mixing_weight(etas):
    """Weight left on the initial statistic after EMA steps with momenta ``etas``."""
    w = 1.0
    for e in etas:
        w *= 1.0 - e
    return w
