"""Minimal hand-rolled neural-net plumbing shared by learner and policy.

Everything is float64 numpy; gradients are computed analytically by each model
and checked against finite differences in the test suite.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Adam:
    """Adam over a dict of named parameter arrays, one shared step counter."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1t = 1.0 - ADAM_BETA1**self.t
        b2t = 1.0 - ADAM_BETA2**self.t
        for k, g in grads.items():
            self.m[k] = ADAM_BETA1 * self.m[k] + (1 - ADAM_BETA1) * g
            self.v[k] = ADAM_BETA2 * self.v[k] + (1 - ADAM_BETA2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            params[k] -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)

    def copy(self) -> "Adam":
        dup = Adam({})
        dup.m = {k: v.copy() for k, v in self.m.items()}
        dup.v = {k: v.copy() for k, v in self.v.items()}
        dup.t = self.t
        return dup


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    """Symmetric scaled-uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    return z - np.log(np.sum(np.exp(z)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / np.sum(e)


def save_tensor_map(params: dict[str, np.ndarray], path: str | Path, meta: dict | None = None) -> None:
    """Persist named tensors as JSON: {name: {shape, data}} plus free-form meta.

    The format is deliberately plain so checkpoints stay readable and stable
    across versions; see README for the schema.
    """
    doc = {
        "format": "doloop-tensor-map-v1",
        "meta": meta or {},
        "tensors": {
            k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in params.items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_tensor_map(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "doloop-tensor-map-v1":
        raise ValueError(f"{path}: not a doloop tensor map")
    tensors = {
        k: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for k, spec in doc["tensors"].items()
    }
    return tensors, doc.get("meta", {})
