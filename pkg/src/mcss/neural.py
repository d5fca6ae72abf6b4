"""Fully connected networks with hand-written backward passes and Adam.

Parameters are lists of ``(W, b)`` pairs with ``W`` shaped ``(fan_in, fan_out)``;
inputs are row-major batches ``(B, fan_in)``. Everything is float64.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import DataIOError, NumericError, ParseError, ValidationError

NORM_EPS = 1e-12
ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    activations: tuple
    final_l2_normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValidationError(f"bad layer widths {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise ValidationError("need one activation per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {a!r}")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def to_dict(self):
        return {"widths": list(self.widths), "activations": list(self.activations),
                "final_l2_normalize": self.final_l2_normalize}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["widths"]), tuple(d["activations"]), bool(d["final_l2_normalize"]))


def encoder_spec(input_dim=32, hidden=(256, 256), dim_phi=128) -> MlpSpec:
    widths = (input_dim, *hidden, dim_phi)
    acts = ("relu",) * len(hidden) + ("identity",)
    return MlpSpec(widths, acts, final_l2_normalize=True)


def head_spec(dim_phi=128, out_dim=48) -> MlpSpec:
    return MlpSpec((dim_phi, out_dim), ("identity",), final_l2_normalize=False)


def init_params(spec: MlpSpec, rng: np.random.Generator):
    """He-uniform for relu layers, +-1/sqrt(fan_in) for identity layers, zero biases."""
    params = []
    for fan_in, fan_out, act in zip(spec.widths[:-1], spec.widths[1:], spec.activations):
        limit = np.sqrt(6.0 / fan_in) if act == "relu" else 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params.append((W, np.zeros(fan_out)))
    return params


def l2_normalize(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= NORM_EPS):
        raise NumericError("cannot normalise a (near-)zero vector")
    return v / norm


def l2_normalize_backward(v, du):
    """Gradient through u = v/||v||: (I - u u^T) du / ||v||."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / norm
    return (du - u * np.sum(u * du, axis=-1, keepdims=True)) / norm


def _check_params(spec, params):
    if len(params) != spec.n_layers:
        raise ValidationError(f"expected {spec.n_layers} layers, got {len(params)}")
    for (W, b), fi, fo in zip(params, spec.widths[:-1], spec.widths[1:]):
        if W.shape != (fi, fo) or b.shape != (fo,):
            raise ValidationError(f"layer shape {W.shape}/{b.shape} does not match ({fi}, {fo})")


def forward(spec: MlpSpec, params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[-1] != spec.widths[0]:
        raise ValidationError(f"input width {x.shape[-1]} != {spec.widths[0]}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite network input")
    _check_params(spec, params)
    inputs, pre = [], []
    h = x
    for (W, b), act in zip(params, spec.activations):
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
    raw = h
    if spec.final_l2_normalize:
        h = l2_normalize(raw)
    cache = {"inputs": inputs, "pre": pre, "raw": raw, "single": single}
    return (h[0] if single else h), cache


def backward(spec: MlpSpec, params, cache, dout):
    """Returns ``(grads, d_input)`` for the scalar loss whose output-gradient is ``dout``."""
    dout = np.asarray(dout, dtype=np.float64)
    if cache["single"]:
        dout = dout[None]
    if dout.shape != cache["raw"].shape:
        raise ValidationError(f"output gradient shape {dout.shape} != {cache['raw'].shape}")
    g = l2_normalize_backward(cache["raw"], dout) if spec.final_l2_normalize else dout
    grads = [None] * spec.n_layers
    for k in reversed(range(spec.n_layers)):
        W, _ = params[k]
        if spec.activations[k] == "relu":
            g = g * (cache["pre"][k] > 0)
        grads[k] = (cache["inputs"][k].T @ g, g.sum(axis=0))
        g = g @ W.T
    return grads, (g[0] if cache["single"] else g)


def add_grads(a, b):
    return [(Wa + Wb, ba + bb) for (Wa, ba), (Wb, bb) in zip(a, b)]


def zeros_like(params):
    return [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]


def flatten(params) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in params])


def unflatten(spec: MlpSpec, flat):
    flat = np.asarray(flat, dtype=np.float64)
    params, pos = [], 0
    for fi, fo in zip(spec.widths[:-1], spec.widths[1:]):
        W = flat[pos:pos + fi * fo].reshape(fi, fo)
        pos += fi * fo
        b = flat[pos:pos + fo]
        pos += fo
        params.append((W.copy(), b.copy()))
    if pos != flat.size:
        raise ValidationError(f"flat parameter vector has {flat.size} values, spec needs {pos}")
    return params


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def for_params(cls, params, **kw):
        return cls(m=zeros_like(params), v=zeros_like(params), **kw)


def adam_step(state: AdamState, params, grads, lr=None):
    """One bias-corrected Adam update. Returns new ``(state, params)``; inputs are not mutated."""
    lr = state.lr if lr is None else lr
    for W, b in grads:
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise NumericError("non-finite gradient")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for (p_pair, g_pair, m_pair, v_pair) in zip(params, grads, state.m, state.v):
        layer_m, layer_v, layer_p = [], [], []
        for p, g, m, v in zip(p_pair, g_pair, m_pair, v_pair):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            p = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            layer_m.append(m)
            layer_v.append(v)
            layer_p.append(p)
        new_m.append(tuple(layer_m))
        new_v.append(tuple(layer_v))
        new_p.append(tuple(layer_p))
    new_state = AdamState(new_m, new_v, t, b1, b2, state.eps, state.lr)
    return new_state, new_p


def lr_schedule(epoch, base=1e-3, drop=0.1, every=20):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * drop ** (epoch // every)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _atomic_write_text(path, text):
    d = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e


def save_checkpoint(path, *, encoder_spec, encoder, head_spec, head,
                    encoder_adam=None, head_adam=None, epoch=0, rng_state=None, extra=None):
    def adam_dict(state):
        if state is None:
            return None
        return {"m": flatten(state.m).tolist(), "v": flatten(state.v).tolist(), "step": state.step,
                "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "lr": state.lr}

    doc = {
        "version": CHECKPOINT_VERSION,
        "encoder": {"spec": encoder_spec.to_dict(), "params": flatten(encoder).tolist(),
                    "adam": adam_dict(encoder_adam)},
        "head": {"spec": head_spec.to_dict(), "params": flatten(head).tolist(),
                 "adam": adam_dict(head_adam)},
        "epoch": epoch,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    _atomic_write_text(path, json.dumps(doc))


@dataclass
class Checkpoint:
    encoder_spec: MlpSpec
    encoder: list
    head_spec: MlpSpec
    head: list
    encoder_adam: AdamState | None = None
    head_adam: AdamState | None = None
    epoch: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"checkpoint is not valid JSON: {e.msg}", e.lineno) from e
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        out = {}
        for name in ("encoder", "head"):
            spec = MlpSpec.from_dict(doc[name]["spec"])
            params = unflatten(spec, doc[name]["params"])
            adam = doc[name].get("adam")
            if adam is not None:
                adam = AdamState(unflatten(spec, adam["m"]), unflatten(spec, adam["v"]), int(adam["step"]),
                                 adam["beta1"], adam["beta2"], adam["eps"], adam["lr"])
            out[name] = (spec, params, adam)
    except (KeyError, TypeError) as e:
        raise ParseError(f"malformed checkpoint: {e}") from e
    return Checkpoint(out["encoder"][0], out["encoder"][1], out["head"][0], out["head"][1],
                      out["encoder"][2], out["head"][2], int(doc.get("epoch", 0)),
                      doc.get("rng_state"), doc.get("extra") or {})
