"""Regenerates oracles.json with 50-digit mpmath arithmetic.

Run from this directory: python3 make_oracles.py
"""
import json
import random

import mpmath as mp

mp.mp.dps = 50


def f(x):
    return float(x)


def softmax(z):
    m = max(z)
    e = [mp.e ** (mp.mpf(v) - m) for v in z]
    s = mp.fsum(e)
    return [f(v / s) for v in e]


def lse(z):
    return f(mp.log(mp.fsum(mp.e ** mp.mpf(v) for v in z)))


def bce_logits(z, t):
    total = mp.fsum(
        -(t_i * mp.log(1 / (1 + mp.e ** -mp.mpf(z_i))) + (1 - t_i) * mp.log(1 - 1 / (1 + mp.e ** -mp.mpf(z_i))))
        for z_i, t_i in zip(z, t)
    )
    return f(total / len(z))


def gelu_tanh(x):
    x = mp.mpf(x)
    return f(x / 2 * (1 + mp.tanh(mp.sqrt(2 / mp.pi) * (x + mp.mpf("0.044715") * x**3))))


def layernorm(row, eps):
    row = [mp.mpf(v) for v in row]
    n = len(row)
    mean = mp.fsum(row) / n
    var = mp.fsum((v - mean) ** 2 for v in row) / n
    return [f((v - mean) / mp.sqrt(var + mp.mpf(eps))) for v in row]


def dice_loss(p, t, eps):
    p = [mp.mpf(v) for v in p]
    inter = mp.fsum(a * b for a, b in zip(p, t))
    return f(1 - (2 * inter + mp.mpf(eps)) / (mp.fsum(p) + sum(t) + mp.mpf(eps)))


def pos_enc(coord, channels):
    pairs = channels // 6
    out = []
    for x in coord:
        for k in range(pairs):
            freq = mp.mpf(10000) ** (-mp.mpf(k) / pairs)
            out.append(f(mp.sin(x * freq)))
            out.append(f(mp.cos(x * freq)))
    return out


rng = random.Random(7)
lse_cases = [[1.0, 2.0, 3.0], [1000.0, 1001.0, 999.5], [-1000.0, -1000.0]]
lse_cases += [[round(rng.uniform(-20, 20), 6) for _ in range(rng.randint(2, 9))] for _ in range(7)]
bce_cases = []
for _ in range(8):
    n = rng.randint(1, 8)
    z = [round(rng.uniform(-30, 30), 6) for _ in range(n)]
    t = [float(rng.random() < 0.5) for _ in range(n)]
    bce_cases.append({"logits": z, "target": t, "loss": bce_logits(z, t)})
gelu_points = [-3.0, -1.5, -0.25, 0.0, 0.1, 0.75, 2.0, 4.5]
ln_row = [0.3, -1.2, 2.5, 0.0, 0.7, -0.4]
dice_p = [0.9, 0.2, 0.75, 0.05, 0.5]
dice_t = [1.0, 0.0, 1.0, 0.0, 1.0]

oracles = {
    "softmax_123": softmax([1, 2, 3]),
    "log_sum_exp": [{"z": z, "value": lse(z)} for z in lse_cases],
    "bce_with_logits": bce_cases,
    "gelu_tanh": [{"x": x, "value": gelu_tanh(x)} for x in gelu_points],
    "layernorm": {"row": ln_row, "eps": 1e-5, "value": layernorm(ln_row, "1e-5")},
    "dice_loss": {"probs": dice_p, "target": dice_t, "eps": 1e-5, "value": dice_loss(dice_p, dice_t, "1e-5")},
    "positional_encoding": {"coord": [5.0, 7.0, 9.0], "channels": 48, "value": pos_enc([5, 7, 9], 48)},
}

with open("oracles.json", "w") as fh:
    json.dump(oracles, fh, indent=1)
    fh.write("\n")
