"""Dense implementations of the five small model kinds with analytic gradients.

Kinds: "gcn", "gat1", "appnp", "h2gcn", "mlp". Every forward pass caches the
intermediates its backward pass needs; backward returns exact gradients with
respect to every parameter tensor given an upstream gradient on the logits.
All math is float64 on dense matrices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graph import TagGraph

MODEL_KINDS = ("gcn", "gat1", "appnp", "h2gcn", "mlp")

PROB_FLOOR = 1e-12      # probability clamp floor, applied after row softmax
LEAKY_SLOPE = 0.2       # attention nonlinearity slope
APPNP_ALPHA = 0.1       # teleport probability, fixed scalar
APPNP_K_PROP = 10       # propagation steps


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class ModelParams:
    """Named parameter tensors plus the dimensions they were built for."""

    kind: str
    dims: dict[str, float]
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, dict(self.dims), {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    embedding: np.ndarray | None
    cache: dict = field(repr=False, default_factory=dict)


def _tensor_spec(kind: str, f: int, h: int, c: int) -> list[tuple[str, tuple[int, ...], int, int]]:
    """(name, shape, fan_in, fan_out) per tensor, in init draw order."""
    if kind in ("mlp", "gcn", "appnp"):
        return [("w1", (f, h), f, h), ("b1", (h,), 0, 0),
                ("w2", (h, c), h, c), ("b2", (c,), 0, 0)]
    if kind == "h2gcn":
        return [("w1", (f, h), f, h), ("b1", (h,), 0, 0),
                ("w2", (3 * h, c), 3 * h, c), ("b2", (c,), 0, 0)]
    if kind == "gat1":
        return [("w1", (f, h), f, h), ("a1s", (h,), h, 1), ("a1d", (h,), h, 1), ("b1", (h,), 0, 0),
                ("w2", (h, c), h, c), ("a2s", (c,), c, 1), ("a2d", (c,), c, 1), ("b2", (c,), 0, 0)]
    raise ValueError(f"unknown model kind {kind!r}")


def init_params(kind: str, in_dim: int, hidden_dim: int, out_dim: int, seed: int) -> ModelParams:
    """Glorot-uniform weights (uniform in [-s, s], s = sqrt(6/(fan_in+fan_out))), zero biases."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 29)))
    tensors: dict[str, np.ndarray] = {}
    for name, shape, fan_in, fan_out in _tensor_spec(kind, in_dim, hidden_dim, out_dim):
        if fan_in == 0:
            tensors[name] = np.zeros(shape)
        else:
            s = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-s, s, size=shape)
    dims: dict[str, float] = {"in": in_dim, "hidden": hidden_dim, "out": out_dim}
    if kind == "appnp":
        dims["alpha"] = APPNP_ALPHA
        dims["k_prop"] = APPNP_K_PROP
    return ModelParams(kind=kind, dims=dims, tensors=tensors)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max-subtraction, clamped to >= 1e-12 and renormalized."""
    z = np.asarray(logits, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    z = z - z.max(axis=1, keepdims=True)
    ex = np.exp(z)
    p = ex / ex.sum(axis=1, keepdims=True)
    p = np.maximum(p, PROB_FLOOR)
    p = p / p.sum(axis=1, keepdims=True)
    return p[0] if squeeze else p


def forward(kind: str, params: ModelParams, graph: TagGraph | None, inputs: np.ndarray | None = None,
            want_embedding: bool = False) -> ForwardResult:
    """Run the model; returns logits, softmax probabilities, and cached intermediates.

    `inputs` defaults to the graph's feature matrix. The penultimate-layer
    embedding (the input to the final classification layer) is only
    materialized when want_embedding is set; it is what the distance-based
    neighbor selector consumes.
    """
    t = params.tensors
    if kind == "mlp":
        x = inputs if inputs is not None else graph.features
        h_pre = x @ t["w1"] + t["b1"]
        h1 = np.maximum(h_pre, 0.0)
        logits = h1 @ t["w2"] + t["b2"]
        cache = {"x": x, "h_pre": h_pre, "h1": h1}
        emb = h1 if want_embedding else None
    elif kind == "gcn":
        ops = graph.operators()
        if inputs is None:
            ax = ops.a_hat_x
        else:
            ax = ops.a_hat @ inputs
        h_pre = ax @ t["w1"] + t["b1"]
        h1 = np.maximum(h_pre, 0.0)
        logits = ops.a_hat @ (h1 @ t["w2"]) + t["b2"]
        cache = {"ax": ax, "h_pre": h_pre, "h1": h1}
        emb = ops.a_hat @ h1 if want_embedding else None
    elif kind == "appnp":
        x = inputs if inputs is not None else graph.features
        ops = graph.operators()
        h_pre = x @ t["w1"] + t["b1"]
        h1 = np.maximum(h_pre, 0.0)
        z0 = h1 @ t["w2"] + t["b2"]
        alpha, k_prop = params.dims["alpha"], int(params.dims["k_prop"])
        z = z0
        for _ in range(k_prop):
            z = (1.0 - alpha) * (ops.a_hat @ z) + alpha * z0
        logits = z
        cache = {"x": x, "h_pre": h_pre, "h1": h1}
        emb = h1 if want_embedding else None
    elif kind == "h2gcn":
        x = inputs if inputs is not None else graph.features
        ops = graph.operators()
        h = int(params.dims["hidden"])
        h_pre = x @ t["w1"] + t["b1"]
        h0 = np.maximum(h_pre, 0.0)
        w2a, w2b, w2c = t["w2"][:h], t["w2"][h:2 * h], t["w2"][2 * h:]
        logits = h0 @ w2a + ops.hop1_mean @ (h0 @ w2b) + ops.hop2_mean @ (h0 @ w2c) + t["b2"]
        cache = {"x": x, "h_pre": h_pre, "h0": h0}
        emb = None
        if want_embedding:
            emb = np.concatenate([h0, ops.hop1_mean @ h0, ops.hop2_mean @ h0], axis=1)
    elif kind == "gat1":
        x = inputs if inputs is not None else graph.features
        mask = graph.operators().att_mask
        out1, cache1 = _gat_layer_forward(x, t["w1"], t["a1s"], t["a1d"], t["b1"], mask)
        h1 = np.maximum(out1, 0.0)
        logits, cache2 = _gat_layer_forward(h1, t["w2"], t["a2s"], t["a2d"], t["b2"], mask)
        cache = {"x": x, "out1": out1, "h1": h1, "l1": cache1, "l2": cache2}
        emb = h1 if want_embedding else None
    else:
        raise ValueError(f"unknown model kind {kind!r}")

    if not np.all(np.isfinite(logits)):
        raise TrainingDiverged(f"non-finite logits from {kind} forward")
    return ForwardResult(logits=logits, probs=softmax(logits), embedding=emb, cache=cache)


def backward(kind: str, params: ModelParams, graph: TagGraph | None, cache: dict,
             d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients w.r.t. every parameter tensor given d(loss)/d(logits)."""
    t = params.tensors
    dz = np.asarray(d_logits, dtype=np.float64)
    if kind == "mlp":
        grads = _mlp_backward(t, cache["x"], cache["h_pre"], cache["h1"], dz)
    elif kind == "gcn":
        a_hat = graph.operators().a_hat
        u = a_hat @ dz                                   # a_hat is symmetric
        grads = {"b2": dz.sum(axis=0), "w2": cache["h1"].T @ u}
        dh1 = u @ t["w2"].T
        dh_pre = dh1 * (cache["h_pre"] > 0)
        grads["b1"] = dh_pre.sum(axis=0)
        grads["w1"] = cache["ax"].T @ dh_pre
    elif kind == "appnp":
        a_hat = graph.operators().a_hat
        alpha, k_prop = params.dims["alpha"], int(params.dims["k_prop"])
        dz_cur = dz
        dz0 = np.zeros_like(dz)
        for _ in range(k_prop):
            dz0 += alpha * dz_cur
            dz_cur = (1.0 - alpha) * (a_hat @ dz_cur)    # a_hat is symmetric
        dz0 += dz_cur
        grads = _mlp_backward(t, cache["x"], cache["h_pre"], cache["h1"], dz0)
    elif kind == "h2gcn":
        ops = graph.operators()
        h = int(params.dims["hidden"])
        h0 = cache["h0"]
        q1 = ops.hop1_mean @ h0
        q2 = ops.hop2_mean @ h0
        grads = {"b2": dz.sum(axis=0)}
        grads["w2"] = np.concatenate([h0.T @ dz, q1.T @ dz, q2.T @ dz], axis=0)
        dh0 = dz @ t["w2"][:h].T + (ops.hop1_mean.T @ dz) @ t["w2"][h:2 * h].T \
            + (ops.hop2_mean.T @ dz) @ t["w2"][2 * h:].T
        dh_pre = dh0 * (cache["h_pre"] > 0)
        grads["b1"] = dh_pre.sum(axis=0)
        grads["w1"] = cache["x"].T @ dh_pre
    elif kind == "gat1":
        dh1, g2 = _gat_layer_backward(cache["h1"], t["w2"], t["a2s"], t["a2d"], cache["l2"], dz)
        dout1 = dh1 * (cache["out1"] > 0)
        _, g1 = _gat_layer_backward(cache["x"], t["w1"], t["a1s"], t["a1d"], cache["l1"], dout1)
        grads = {"w1": g1["w"], "a1s": g1["a_src"], "a1d": g1["a_dst"], "b1": g1["b"],
                 "w2": g2["w"], "a2s": g2["a_src"], "a2d": g2["a_dst"], "b2": g2["b"]}
    else:
        raise ValueError(f"unknown model kind {kind!r}")

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {kind}.{name}")
    return grads


def _mlp_backward(t, x, h_pre, h1, dz):
    grads = {"b2": dz.sum(axis=0), "w2": h1.T @ dz}
    dh1 = dz @ t["w2"].T
    dh_pre = dh1 * (h_pre > 0)
    grads["b1"] = dh_pre.sum(axis=0)
    grads["w1"] = x.T @ dh_pre
    return grads


def _gat_layer_forward(hin, w, a_src, a_dst, b, mask):
    """Single-head additive attention over neighbors plus self, dense form."""
    s = hin @ w
    u = s @ a_src
    v = s @ a_dst
    pre = u[:, None] + v[None, :]
    e = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    e = np.where(mask, e, -np.inf)
    e = e - e.max(axis=1, keepdims=True)                 # every row holds its self-loop
    ex = np.exp(e)
    att = ex / ex.sum(axis=1, keepdims=True)
    out = att @ s + b
    return out, {"s": s, "pre": pre, "att": att}


def _gat_layer_backward(hin, w, a_src, a_dst, cache, dout):
    s, pre, att = cache["s"], cache["pre"], cache["att"]
    db = dout.sum(axis=0)
    datt = dout @ s.T
    de = att * (datt - (att * datt).sum(axis=1, keepdims=True))
    dpre = de * np.where(pre > 0, 1.0, LEAKY_SLOPE)
    du = dpre.sum(axis=1)
    dv = dpre.sum(axis=0)
    ds = att.T @ dout + np.outer(du, a_src) + np.outer(dv, a_dst)
    grads = {"b": db, "a_src": s.T @ du, "a_dst": s.T @ dv, "w": hin.T @ ds}
    dhin = ds @ w.T
    return dhin, grads


def penultimate_embedding(kind: str, params: ModelParams, graph: TagGraph) -> np.ndarray:
    """Embedding rows entering the final classification layer."""
    return forward(kind, params, graph, want_embedding=True).embedding


def save_params(params: ModelParams, path) -> None:
    """Write the checkpoint JSON ({"kind", "dims", "tensors"}); round-trips bit-exactly."""
    payload = {
        "kind": params.kind,
        "dims": {k: (int(v) if float(v).is_integer() and k != "alpha" else float(v))
                 for k, v in params.dims.items()},
        "tensors": {name: arr.tolist() for name, arr in params.tensors.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, separators=(",", ":"))


def load_params(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    for key in ("kind", "dims", "tensors"):
        if key not in payload:
            raise ValueError(f"checkpoint missing key {key!r}")
    tensors = {name: np.asarray(arr, dtype=np.float64) for name, arr in payload["tensors"].items()}
    return ModelParams(kind=payload["kind"], dims=dict(payload["dims"]), tensors=tensors)
