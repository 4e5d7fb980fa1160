"""Regenerate vit_tiny.json: a one-block, width-2 encoder on two patches.

Written against numpy only, independently of the Rust encoder, so the
fixture acts as an external reference for the forward pass.
"""
import json
import math

import numpy as np

EPS = 1e-6


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + EPS) * g + b


def gelu(x):
    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


enc = {
    "patch_projection": [[0.5, -0.25], [0.125, 0.75], [-0.5, 0.25]],
    "patch_bias": [0.1, -0.05],
    "cls_token": [0.3, -0.2],
    "mask_token": [0.0, 0.0],
    "pos_embedding": [[0.01, 0.02], [-0.03, 0.04], [0.05, -0.06]],
    "blocks": [
        {
            "ln1": {"gamma": [1.1, 0.9], "beta": [0.05, -0.02]},
            "wq": [[0.6, -0.4], [0.2, 0.8]],
            "wk": [[-0.3, 0.5], [0.7, 0.1]],
            "wv": [[0.9, 0.2], [-0.1, 0.4]],
            "wo": [[0.5, 0.3], [-0.2, 0.6]],
            "bo": [0.01, -0.01],
            "ln2": {"gamma": [0.8, 1.2], "beta": [0.0, 0.1]},
            "w1": [[0.4, -0.6, 0.2], [0.3, 0.5, -0.7]],
            "b1": [0.05, 0.0, -0.05],
            "w2": [[0.2, -0.1], [0.6, 0.3], [-0.4, 0.5]],
            "b2": [0.02, 0.03],
        }
    ],
}
patches = np.array([[0.2, 0.4, 0.6], [0.9, 0.1, 0.3]])

x = patches @ np.array(enc["patch_projection"]) + np.array(enc["patch_bias"])
x = np.vstack([np.array(enc["cls_token"]), x]) + np.array(enc["pos_embedding"])
for blk in enc["blocks"]:
    a = {k: np.array(v) for k, v in blk.items() if not k.startswith("ln")}
    y = layer_norm(x, np.array(blk["ln1"]["gamma"]), np.array(blk["ln1"]["beta"]))
    q, k, v = y @ a["wq"], y @ a["wk"], y @ a["wv"]
    att = softmax(q @ k.T / math.sqrt(q.shape[1]))
    x = x + (att @ v) @ a["wo"] + a["bo"]
    y = layer_norm(x, np.array(blk["ln2"]["gamma"]), np.array(blk["ln2"]["beta"]))
    x = x + gelu(y @ a["w1"] + a["b1"]) @ a["w2"] + a["b2"]

fixture = {
    "version": 1,
    "encoder": enc,
    "patches": patches.tolist(),
    "expected_h": x[1:].tolist(),
    "expected_cls": x[0].tolist(),
}
with open(__file__.replace("gen_vit_tiny.py", "vit_tiny.json"), "w") as f:
    json.dump(fixture, f, indent=2)
    f.write("\n")
