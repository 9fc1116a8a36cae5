"""Deep GRU classifier: stacked GRU layers followed by a two-matrix output head.

Per layer and timestep::

    z  = sigmoid(Wz x + Uz h_prev + bz)
    r  = sigmoid(Wr x + Ur h_prev + br)
    hc = tanh(Wh x + Uh (r * h_prev) + bh)
    h  = (1 - z) * h_prev + z * hc

The top layer's last hidden state goes through
``softmax(W2 tanh(W1 h + b1) + b2)``. Output index equals the class label,
so ``probs[1]`` is the fall probability.

All computations run on batches of shape ``(B, T, input_dim)``; the
single-window functions are thin wrappers with ``B = 1``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FALL, NONFALL, NormStats, WindowInstance, apply_norm
from .errors import ModelFormatError, ShapeError
from .numerics import glorot_uniform, make_rng, sigmoid, softmax

FORMAT_VERSION = 1
N_CLASSES = 2
LAYER_PARAMS = ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh")
HEAD_PARAMS = ("W1", "b1", "W2", "b2")


@dataclass
class GruLayerParams:
    Wz: np.ndarray
    Wr: np.ndarray
    Wh: np.ndarray
    Uz: np.ndarray
    Ur: np.ndarray
    Uh: np.ndarray
    bz: np.ndarray
    br: np.ndarray
    bh: np.ndarray

    @property
    def input_dim(self):
        return self.Wz.shape[1]

    @property
    def hidden_dim(self):
        return self.Wz.shape[0]

    def validate(self, where="layer"):
        H, D = self.Wz.shape
        for name in ("Wz", "Wr", "Wh"):
            _check_shape(getattr(self, name), (H, D), f"{where}.{name}")
        for name in ("Uz", "Ur", "Uh"):
            _check_shape(getattr(self, name), (H, H), f"{where}.{name}")
        for name in ("bz", "br", "bh"):
            _check_shape(getattr(self, name), (H,), f"{where}.{name}")

    @classmethod
    def init(cls, rng, input_dim, hidden_dim):
        return cls(
            Wz=glorot_uniform(rng, hidden_dim, input_dim),
            Wr=glorot_uniform(rng, hidden_dim, input_dim),
            Wh=glorot_uniform(rng, hidden_dim, input_dim),
            Uz=glorot_uniform(rng, hidden_dim, hidden_dim),
            Ur=glorot_uniform(rng, hidden_dim, hidden_dim),
            Uh=glorot_uniform(rng, hidden_dim, hidden_dim),
            bz=np.zeros(hidden_dim), br=np.zeros(hidden_dim), bh=np.zeros(hidden_dim),
        )


@dataclass
class OutputHead:
    W1: np.ndarray  # (head, hidden)
    b1: np.ndarray
    W2: np.ndarray  # (2, head)
    b2: np.ndarray

    def validate(self, hidden_dim, where="head"):
        head_dim = self.W1.shape[0]
        _check_shape(self.W1, (head_dim, hidden_dim), f"{where}.W1")
        _check_shape(self.b1, (head_dim,), f"{where}.b1")
        _check_shape(self.W2, (N_CLASSES, head_dim), f"{where}.W2")
        _check_shape(self.b2, (N_CLASSES,), f"{where}.b2")


@dataclass
class DgruModel:
    layers: list
    head: OutputHead
    window_size: int = 40
    norm: NormStats = field(default_factory=NormStats.identity)
    format_version: int = FORMAT_VERSION

    @property
    def input_dim(self):
        return self.layers[0].input_dim

    @property
    def hidden_dims(self):
        return [layer.hidden_dim for layer in self.layers]

    @property
    def hidden_dim(self):
        return self.layers[-1].hidden_dim

    @property
    def head_dim(self):
        return self.head.W1.shape[0]

    def named_parameters(self):
        """``(name, array)`` pairs in a fixed order; arrays are the live parameters."""
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{n}", getattr(layer, n)) for n in LAYER_PARAMS)
        out.extend((f"head.{n}", getattr(self.head, n)) for n in HEAD_PARAMS)
        return out

    def n_parameters(self):
        return sum(a.size for _, a in self.named_parameters())

    def copy(self):
        return copy.deepcopy(self)

    def validate(self):
        if not self.layers:
            raise ShapeError("model needs at least one GRU layer")
        if self.window_size < 1:
            raise ShapeError(f"window_size must be >= 1, got {self.window_size}")
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            layer.validate(f"layers.{i}")
            if layer.input_dim != prev:
                raise ShapeError(f"layers.{i} expects input dim {layer.input_dim}, previous layer gives {prev}")
            prev = layer.hidden_dim
        self.head.validate(prev)
        for name, arr in self.named_parameters():
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"parameter {name} has non-finite entries")

    def arch(self):
        return {"input_dim": self.input_dim, "hidden_dims": self.hidden_dims, "head_dim": self.head_dim,
                "output_dim": N_CLASSES, "window_size": self.window_size}


def _check_shape(arr, shape, name):
    if not isinstance(arr, np.ndarray) or arr.shape != tuple(shape):
        got = getattr(arr, "shape", type(arr).__name__)
        raise ShapeError(f"{name} has shape {got}, expected {tuple(shape)}")


def init_model(seed=0, input_dim=3, hidden_dims=(256, 256), head_dim=None, window_size=40, norm=None):
    """Glorot-uniform weights, zero biases. ``head_dim`` defaults to the top hidden width."""
    rng = make_rng(seed)
    layers = []
    d = input_dim
    for h in hidden_dims:
        layers.append(GruLayerParams.init(rng, d, h))
        d = h
    head_dim = head_dim or d
    head = OutputHead(glorot_uniform(rng, head_dim, d), np.zeros(head_dim),
                      glorot_uniform(rng, N_CLASSES, head_dim), np.zeros(N_CLASSES))
    model = DgruModel(layers, head, window_size, norm or NormStats.identity())
    model.validate()
    return model


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class CellTrace:
    z: np.ndarray
    r: np.ndarray
    h_cand: np.ndarray


def gru_cell_step(x_t, h_prev, layer: GruLayerParams):
    """One GRU update. Works on a single vector or a batch of row vectors."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_t.shape[-1] != layer.input_dim:
        raise ShapeError(f"input has dim {x_t.shape[-1]}, layer expects {layer.input_dim}")
    if h_prev.shape[-1] != layer.hidden_dim:
        raise ShapeError(f"hidden state has dim {h_prev.shape[-1]}, layer expects {layer.hidden_dim}")
    z = sigmoid(x_t @ layer.Wz.T + h_prev @ layer.Uz.T + layer.bz)
    r = sigmoid(x_t @ layer.Wr.T + h_prev @ layer.Ur.T + layer.br)
    hc = np.tanh(x_t @ layer.Wh.T + (r * h_prev) @ layer.Uh.T + layer.bh)
    h = (1.0 - z) * h_prev + z * hc
    return h, CellTrace(z, r, hc)


@dataclass
class LayerTrace:
    """Per-layer cache, time-major: index ``[t, b, :]``."""

    x: np.ndarray  # (T, B, in) layer inputs
    h: np.ndarray  # (T+1, B, H); h[0] is the zero initial state
    z: np.ndarray  # (T, B, H)
    r: np.ndarray
    h_cand: np.ndarray


@dataclass
class ForwardTrace:
    layers: list  # of LayerTrace
    head_pre: np.ndarray  # (B, head) = W1 h_T + b1
    head_act: np.ndarray  # tanh(head_pre)
    logits: np.ndarray  # (B, 2)
    probs: np.ndarray  # (B, 2)

    def __len__(self):
        return self.layers[0].z.shape[0]


def _layer_forward(layer: GruLayerParams, X):
    T, B, _ = X.shape
    H = layer.hidden_dim
    W_all_T = np.concatenate([layer.Wz, layer.Wr, layer.Wh]).T
    b_all = np.concatenate([layer.bz, layer.br, layer.bh])
    xproj = (X.reshape(T * B, -1) @ W_all_T + b_all).reshape(T, B, 3 * H)
    U_zr_T = np.concatenate([layer.Uz, layer.Ur]).T
    Uh_T = layer.Uh.T
    hs = np.zeros((T + 1, B, H))
    zs = np.empty((T, B, H))
    rs = np.empty((T, B, H))
    hcs = np.empty((T, B, H))
    h = hs[0]
    for t in range(T):
        zr = sigmoid(xproj[t, :, : 2 * H] + h @ U_zr_T)
        z, r = zr[:, :H], zr[:, H:]
        hc = np.tanh(xproj[t, :, 2 * H:] + (r * h) @ Uh_T)
        h = (1.0 - z) * h + z * hc
        zs[t], rs[t], hcs[t], hs[t + 1] = z, r, hc, h
    return LayerTrace(X, hs, zs, rs, hcs)


def forward_batch(model: DgruModel, X):
    """Class probabilities for raw windows ``X`` of shape ``(B, T, input_dim)``.

    Normalization from ``model.norm`` is applied here, so callers always pass
    raw sensor values.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] != model.window_size or X.shape[2] != model.input_dim:
        raise ShapeError(f"windows have shape {X.shape}, model expects (B, {model.window_size}, {model.input_dim})")
    inp = np.ascontiguousarray(apply_norm(model.norm, X).transpose(1, 0, 2))
    traces = []
    for layer in model.layers:
        lt = _layer_forward(layer, inp)
        traces.append(lt)
        inp = lt.h[1:]
    h_top = traces[-1].h[-1]
    head = model.head
    pre = h_top @ head.W1.T + head.b1
    act = np.tanh(pre)
    logits = act @ head.W2.T + head.b2
    probs = softmax(logits, axis=-1)
    return probs, ForwardTrace(traces, pre, act, logits, probs)


def _window_values(model, window):
    values = window.values if isinstance(window, WindowInstance) else np.asarray(window, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != model.window_size:
        raise ShapeError(f"window has {values.shape[0] if values.ndim else 0} rows, model expects {model.window_size}")
    return values


def forward(model: DgruModel, window):
    """Single window -> ``(probs, trace)`` with ``probs`` of shape ``(2,)``."""
    values = _window_values(model, window)
    probs, trace = forward_batch(model, values[None])
    return probs[0], trace


def _layer_backward(layer: GruLayerParams, lt: LayerTrace, dH, grads, prefix):
    """Backprop through one layer given ``dH[t]`` = dLoss/dh_t from above; returns dLoss/dx."""
    T, B, H = lt.z.shape
    dA = np.empty((T, B, 3 * H))  # pre-activation grads for z | r | candidate
    U_zr = np.concatenate([layer.Uz, layer.Ur])  # (2H, H)
    Uh = layer.Uh
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dH[t] + dh_next
        hp = lt.h[t]
        z, r, hc = lt.z[t], lt.r[t], lt.h_cand[t]
        da = dA[t]
        da[:, 2 * H:] = dh * z * (1.0 - hc * hc)
        d_rh = da[:, 2 * H:] @ Uh
        da[:, :H] = dh * (hc - hp) * z * (1.0 - z)
        da[:, H:2 * H] = d_rh * hp * r * (1.0 - r)
        dh_next = dh * (1.0 - z) + d_rh * r + da[:, :2 * H] @ U_zr

    X = lt.x.reshape(T * B, -1)
    Hp = lt.h[:T].reshape(T * B, H)
    RH = (lt.r * lt.h[:T]).reshape(T * B, H)
    dA = dA.reshape(T * B, 3 * H)
    dW_all = dA.T @ X
    db_all = dA.sum(axis=0)
    dU_zr = dA[:, : 2 * H].T @ Hp
    grads[prefix + "Wz"], grads[prefix + "Wr"], grads[prefix + "Wh"] = dW_all[:H], dW_all[H:2 * H], dW_all[2 * H:]
    grads[prefix + "bz"], grads[prefix + "br"], grads[prefix + "bh"] = db_all[:H], db_all[H:2 * H], db_all[2 * H:]
    grads[prefix + "Uz"], grads[prefix + "Ur"] = dU_zr[:H], dU_zr[H:]
    grads[prefix + "Uh"] = dA[:, 2 * H:].T @ RH
    W_all = np.concatenate([layer.Wz, layer.Wr, layer.Wh])
    return (dA @ W_all).reshape(T, B, -1)


def backward_batch(model: DgruModel, trace: ForwardTrace, targets):
    """Gradient of the batch-mean cross-entropy w.r.t. every parameter (BPTT).

    Returns a dict keyed like :meth:`DgruModel.named_parameters`.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    B = trace.probs.shape[0]
    if targets.shape[0] != B:
        raise ShapeError(f"{targets.shape[0]} targets for a batch of {B}")
    if len(trace.layers) != len(model.layers) or trace.head_act.shape[1] != model.head_dim:
        raise ShapeError("trace does not belong to this model")
    grads = {}
    head = model.head
    dlogits = trace.probs.copy()
    dlogits[np.arange(B), targets] -= 1.0
    dlogits /= B
    grads["head.W2"] = dlogits.T @ trace.head_act
    grads["head.b2"] = dlogits.sum(axis=0)
    dpre = (dlogits @ head.W2) * (1.0 - trace.head_act ** 2)
    h_top = trace.layers[-1].h[-1]
    grads["head.W1"] = dpre.T @ h_top
    grads["head.b1"] = dpre.sum(axis=0)

    top = trace.layers[-1]
    dH = np.zeros_like(top.z)
    dH[-1] = dpre @ head.W1
    for i in range(len(model.layers) - 1, -1, -1):
        dH = _layer_backward(model.layers[i], trace.layers[i], dH, grads, f"layers.{i}.")
    return {name: grads[name] for name, _ in model.named_parameters()}


def backward(model: DgruModel, trace: ForwardTrace, target_class):
    return backward_batch(model, trace, [target_class])


def predict_proba(model: DgruModel, X, batch_size=512):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros((0, N_CLASSES))
    return np.concatenate([forward_batch(model, X[i:i + batch_size])[0] for i in range(0, X.shape[0], batch_size)])


def decide(probs):
    """Argmax over [non-fall, fall]; an exact tie goes to non-fall."""
    probs = np.asarray(probs)
    return np.where(probs[..., FALL] > probs[..., NONFALL], FALL, NONFALL)


def predict(model: DgruModel, window):
    """``(label, p_fall)`` for one window."""
    probs, _ = forward(model, window)
    return int(decide(probs)), float(probs[FALL])


# ---------------------------------------------------------------------------
# Model file: one JSON document, floats written with repr (shortest round trip)


def _param_digest(model: DgruModel):
    h = hashlib.sha256()
    for name, arr in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(model.norm.mean, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(model.norm.std, dtype="<f8").tobytes())
    return h.hexdigest()


def model_to_dict(model: DgruModel, extra=None):
    doc = {
        "format_version": FORMAT_VERSION,
        "arch": model.arch(),
        "norm": model.norm.to_dict(),
        "params": {
            "layers": [{n: getattr(layer, n).tolist() for n in LAYER_PARAMS} for layer in model.layers],
            "head": {n: getattr(model.head, n).tolist() for n in HEAD_PARAMS},
        },
        "checksum": _param_digest(model),
    }
    if extra:
        doc["meta"] = extra
    return doc


def save_model(model: DgruModel, path, extra=None):
    """Write the model as JSON. ``extra`` (e.g. the training config) lands under ``meta``."""
    model.validate()
    text = json.dumps(model_to_dict(model, extra), separators=(",", ":"), allow_nan=False)
    Path(path).write_text(text + "\n")


def _array(obj, shape, field_name):
    try:
        arr = np.array(obj, dtype=np.float64)
    except (TypeError, ValueError):
        raise ModelFormatError(f"{field_name} is not a numeric array", field_name) from None
    if arr.shape != tuple(shape):
        raise ModelFormatError(f"{field_name} has shape {arr.shape}, expected {tuple(shape)}", field_name)
    if not np.all(np.isfinite(arr)):
        raise ModelFormatError(f"{field_name} has non-finite entries", field_name)
    return arr


def model_from_dict(doc):
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format_version {version!r} (expected {FORMAT_VERSION})",
                               "format_version")
    try:
        arch = doc["arch"]
        input_dim = int(arch["input_dim"])
        hidden_dims = [int(h) for h in arch["hidden_dims"]]
        head_dim = int(arch["head_dim"])
        output_dim = int(arch["output_dim"])
        window_size = int(arch["window_size"])
        norm_doc = doc["norm"]
        params = doc["params"]
        layer_docs = params["layers"]
        head_doc = params["head"]
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"missing or malformed field: {e}", str(e)) from None
    if output_dim != N_CLASSES:
        raise ModelFormatError(f"arch.output_dim is {output_dim}, must be {N_CLASSES}", "arch.output_dim")
    if window_size < 1 or input_dim < 1 or not hidden_dims or min(hidden_dims) < 1 or head_dim < 1:
        raise ModelFormatError("arch dimensions must be positive", "arch")
    if len(layer_docs) != len(hidden_dims):
        raise ModelFormatError(f"{len(layer_docs)} layer entries for {len(hidden_dims)} hidden_dims",
                               "params.layers")
    layers = []
    d = input_dim
    for i, (ld, h) in enumerate(zip(layer_docs, hidden_dims)):
        shapes = {"Wz": (h, d), "Wr": (h, d), "Wh": (h, d), "Uz": (h, h), "Ur": (h, h), "Uh": (h, h),
                  "bz": (h,), "br": (h,), "bh": (h,)}
        try:
            arrays = {n: _array(ld[n], shapes[n], f"params.layers.{i}.{n}") for n in LAYER_PARAMS}
        except KeyError as e:
            raise ModelFormatError(f"params.layers.{i} is missing {e}", f"params.layers.{i}.{e.args[0]}") from None
        layers.append(GruLayerParams(**arrays))
        d = h
    shapes = {"W1": (head_dim, d), "b1": (head_dim,), "W2": (N_CLASSES, head_dim), "b2": (N_CLASSES,)}
    try:
        head = OutputHead(**{n: _array(head_doc[n], shapes[n], f"params.head.{n}") for n in HEAD_PARAMS})
    except KeyError as e:
        raise ModelFormatError(f"params.head is missing {e}", f"params.head.{e.args[0]}") from None
    try:
        norm = NormStats(_array(norm_doc["mean"], (3,), "norm.mean"), _array(norm_doc["std"], (3,), "norm.std"),
                         bool(norm_doc["enabled"]))
    except KeyError as e:
        raise ModelFormatError(f"norm is missing {e}", f"norm.{e.args[0]}") from None
    except ValueError as e:
        raise ModelFormatError(str(e), "norm.std") from None
    model = DgruModel(layers, head, window_size, norm, FORMAT_VERSION)
    if "checksum" in doc and doc["checksum"] != _param_digest(model):
        raise ModelFormatError("parameter checksum mismatch; file is corrupted", "checksum")
    return model


def load_model(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ModelFormatError(f"cannot read model file {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"model file {path} is not valid JSON: {e}") from None
    return model_from_dict(doc)


def model_fingerprint(model):
    return _param_digest(model)

