"""Attention MIL, max-pooling MIL and DeepSurv-style risk models trained on the
negative Cox partial log-likelihood."""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .ndgrad import (
    AdamState,
    LinearLayer,
    NonFiniteError,
    adam_step,
    dump_tensors,
    hadamard_backward,
    hadamard_forward,
    load_tensors,
    relu_backward,
    relu_forward,
    segment_softmax,
    segment_softmax_backward,
    sigmoid_backward,
    sigmoid_forward,
    softmax_forward,
    tanh_backward,
    tanh_forward,
)
from .survcore import Cohort

log = logging.getLogger(__name__)

PROJ_DIM = 512
ATTN_DIM = 256
DEEPSURV_HIDDEN = (32, 32)
CHECKPOINT_MAGIC = b"AMCK"


class NoEventsError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class FeatureBag:
    patient_id: str
    features: np.ndarray
    attention_cache: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.features.shape[0] < 1:
            raise ValueError(f"bag {self.patient_id!r} has no patches")

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class PackedBags:
    """Bags stacked row-wise; bag ``b`` owns rows ``offsets[b]:offsets[b+1]``."""

    features: np.ndarray
    offsets: np.ndarray
    ids: list[str]

    @classmethod
    def from_bags(cls, bags: Sequence[FeatureBag]) -> "PackedBags":
        if not bags:
            raise ValueError("no bags to pack")
        dims = {b.feature_dim for b in bags}
        if len(dims) != 1:
            raise ValueError(f"bags disagree on feature dimension: {sorted(dims)}")
        lengths = [b.n_patches for b in bags]
        return cls(np.concatenate([b.features for b in bags]),
                   np.r_[0, np.cumsum(lengths)].astype(np.intp),
                   [b.patient_id for b in bags])

    def __len__(self):
        return len(self.ids)

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def segment_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), self.lengths)

    def subset(self, indices) -> "PackedBags":
        return PackedBags.from_bags([self.bag(i) for i in indices])

    def bag(self, i: int) -> FeatureBag:
        return FeatureBag(self.ids[i], self.features[self.offsets[i]:self.offsets[i + 1]])


def _as_packed(data) -> PackedBags:
    if isinstance(data, PackedBags):
        return data
    if isinstance(data, FeatureBag):
        return PackedBags.from_bags([data])
    return PackedBags.from_bags(list(data))


class _Model:
    kind = ""

    def layers(self) -> list[LinearLayer]:
        raise NotImplementedError

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers() for p in layer.params()]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers() for g in layer.grads()]

    def zero_grad(self):
        for layer in self.layers():
            layer.zero_grad()

    def l1_norm(self) -> float:
        return float(sum(np.abs(p).sum() for p in self.parameters()))

    def extra_tensors(self) -> list[np.ndarray]:
        return []

    def set_tensors(self, tensors: list[np.ndarray]):
        layers = self.layers()
        if len(tensors) < 2 * len(layers):
            raise ValueError(f"expected at least {2 * len(layers)} tensors, got {len(tensors)}")
        for i, layer in enumerate(layers):
            w, b = tensors[2 * i], tensors[2 * i + 1]
            if w.shape != layer.weight.shape or b.size != layer.bias.size:
                raise ValueError(f"tensor {2 * i} has shape {w.shape}, expected {layer.weight.shape}")
            layer.weight[...] = w
            layer.bias[...] = b.reshape(-1)
        return tensors[2 * len(layers):]


class AmilModel(_Model):
    """Projection, gated attention (tanh branch V, sigmoid gate U, scorer Z), prediction.

    ``proj_activation`` is "linear" (default) or "relu".
    """

    kind = "amil"

    def __init__(self, feature_dim: int = 1024, seed: int = 0, proj_activation: str = "linear"):
        if proj_activation not in ("linear", "relu"):
            raise ValueError(f"proj_activation must be 'linear' or 'relu', got {proj_activation!r}")
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.proj_activation = proj_activation
        self.proj = LinearLayer.init(feature_dim, PROJ_DIM, rng)
        self.attn_u = LinearLayer.init(PROJ_DIM, ATTN_DIM, rng)
        self.attn_v = LinearLayer.init(PROJ_DIM, ATTN_DIM, rng)
        self.attn_z = LinearLayer.init(ATTN_DIM, 1, rng)
        self.pred = LinearLayer.init(PROJ_DIM, 1, rng)
        self._cache = None

    def layers(self):
        return [self.proj, self.attn_u, self.attn_v, self.attn_z, self.pred]

    def forward(self, data, fused: bool | None = None) -> np.ndarray:
        """Log-risk for every bag in ``data``; caches what ``backward`` needs."""
        packed = _as_packed(data)
        x = packed.features
        if x.shape[1] != self.feature_dim:
            raise ValueError(f"bags have {x.shape[1]} features, model expects {self.feature_dim}")
        if fused is None:
            fused = self.proj_activation == "linear"
        if fused and self.proj_activation != "linear":
            raise ValueError("fused path requires a linear projection")
        starts, lengths = packed.offsets[:-1], packed.lengths
        pw, pb = self.proj.weight, self.proj.bias
        if fused:
            # U(Wx + b) + c == (UW)x + (Ub + c); all attention work stays in input space
            u_pre = x @ (self.attn_u.weight @ pw).T + (self.attn_u.weight @ pb + self.attn_u.bias)
            v_pre = x @ (self.attn_v.weight @ pw).T + (self.attn_v.weight @ pb + self.attn_v.bias)
            h = h_pre = None
        else:
            h_pre = x @ pw.T + pb
            h = relu_forward(h_pre) if self.proj_activation == "relu" else h_pre
            u_pre = h @ self.attn_u.weight.T + self.attn_u.bias
            v_pre = h @ self.attn_v.weight.T + self.attn_v.bias
        gate = sigmoid_forward(u_pre)
        feat = tanh_forward(v_pre)
        gated = hadamard_forward(feat, gate)
        logits = gated @ self.attn_z.weight[0] + self.attn_z.bias[0]
        attn = segment_softmax(logits, packed.offsets)
        if fused:
            pooled_x = np.add.reduceat(attn[:, None] * x, starts)
            h_bag = pooled_x @ pw.T + pb
        else:
            pooled_x = None
            h_bag = np.add.reduceat(attn[:, None] * h, starts)
        out = h_bag @ self.pred.weight[0] + self.pred.bias[0]
        self._cache = dict(packed=packed, fused=fused, h_pre=h_pre, h=h, gate=gate, feat=feat,
                           gated=gated, attn=attn, pooled_x=pooled_x, h_bag=h_bag)
        return out

    def attention(self) -> list[np.ndarray]:
        """Per-bag attention weights from the last forward call."""
        c = self._cache
        if c is None:
            raise RuntimeError("no forward pass has been run")
        off = c["packed"].offsets
        return [c["attn"][off[b]:off[b + 1]].copy() for b in range(len(off) - 1)]

    def backward(self, grad_out: np.ndarray) -> None:
        c = self._cache
        if c is None:
            raise RuntimeError("backward called before forward")
        packed = c["packed"]
        x, starts, seg = packed.features, packed.offsets[:-1], packed.segment_ids
        grad_out = np.asarray(grad_out, dtype=np.float64).reshape(-1)
        pw, pb = self.proj.weight, self.proj.bias

        self.pred.grad_weight[0] += grad_out @ c["h_bag"]
        self.pred.grad_bias[0] += grad_out.sum()
        d_hbag = np.outer(grad_out, self.pred.weight[0])

        if c["fused"]:
            self.proj.grad_weight += d_hbag.T @ c["pooled_x"]
            self.proj.grad_bias += d_hbag.sum(axis=0)
            q = d_hbag @ pw
            d_attn = np.sum(x * q[seg], axis=1) + (d_hbag @ pb)[seg]
        else:
            h = c["h"]
            d_attn = np.sum(h * d_hbag[seg], axis=1)
            d_h = c["attn"][:, None] * d_hbag[seg]

        d_logits = segment_softmax_backward(c["attn"], d_attn, packed.offsets)
        self.attn_z.grad_weight[0] += d_logits @ c["gated"]
        self.attn_z.grad_bias[0] += d_logits.sum()
        d_gated = np.outer(d_logits, self.attn_z.weight[0])
        d_feat, d_gate = hadamard_backward(c["feat"], c["gate"], d_gated)
        d_v = tanh_backward(c["feat"], d_feat)
        d_u = sigmoid_backward(c["gate"], d_gate)

        if c["fused"]:
            for layer, d_pre in ((self.attn_u, d_u), (self.attn_v, d_v)):
                gx = d_pre.T @ x
                gsum = d_pre.sum(axis=0)
                layer.grad_weight += gx @ pw.T + np.outer(gsum, pb)
                layer.grad_bias += gsum
                self.proj.grad_weight += layer.weight.T @ gx
                self.proj.grad_bias += layer.weight.T @ gsum
        else:
            d_h = d_h + self.attn_u.backward(h, d_u) + self.attn_v.backward(h, d_v)
            if self.proj_activation == "relu":
                d_h = relu_backward(c["h_pre"], d_h)
            self.proj.backward(x, d_h)


class MaxPoolModel(_Model):
    """Projection, elementwise max over patches, prediction."""

    kind = "maxpool"

    def __init__(self, feature_dim: int = 1024, seed: int = 0, proj_activation: str = "linear"):
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.proj_activation = proj_activation
        self.proj = LinearLayer.init(feature_dim, PROJ_DIM, rng)
        self.pred = LinearLayer.init(PROJ_DIM, 1, rng)
        self._cache = None

    def layers(self):
        return [self.proj, self.pred]

    def forward(self, data) -> np.ndarray:
        packed = _as_packed(data)
        x = packed.features
        if x.shape[1] != self.feature_dim:
            raise ValueError(f"bags have {x.shape[1]} features, model expects {self.feature_dim}")
        h_pre = self.proj.forward(x)
        h = relu_forward(h_pre) if self.proj_activation == "relu" else h_pre
        off = packed.offsets
        argmax = np.stack([np.argmax(h[off[b]:off[b + 1]], axis=0) + off[b]
                           for b in range(len(packed))])
        cols = np.arange(h.shape[1])
        h_bag = h[argmax, cols]
        out = self.pred.forward(h_bag)[:, 0]
        self._cache = dict(packed=packed, h_pre=h_pre, argmax=argmax, h_bag=h_bag)
        return out

    def backward(self, grad_out):
        c = self._cache
        grad_out = np.asarray(grad_out, dtype=np.float64).reshape(-1, 1)
        d_hbag = self.pred.backward(c["h_bag"], grad_out)
        d_h = np.zeros_like(c["h_pre"])
        # rows of distinct bags are disjoint, so no (row, col) pair repeats
        d_h[c["argmax"], np.arange(d_h.shape[1])[None, :]] = d_hbag
        if self.proj_activation == "relu":
            d_h = relu_backward(c["h_pre"], d_h)
        self.proj.backward(c["packed"].features, d_h)


class DeepSurvModel(_Model):
    """Tabular MLP: two tanh hidden layers of 32 units and a linear scalar output.

    Inputs are standardized with statistics set by ``fit_scaler`` (identity until then).
    """

    kind = "deepsurv"

    def __init__(self, n_features: int, seed: int = 0, hidden=DEEPSURV_HIDDEN, activation: str = "tanh"):
        rng = np.random.default_rng(seed)
        dims = [n_features, *hidden, 1]
        self.hidden = [LinearLayer.init(a, b, rng) for a, b in zip(dims[:-2], dims[1:-1])]
        self.out = LinearLayer.init(dims[-2], 1, rng)
        self.activation = activation
        self.n_features = n_features
        self.center = np.zeros(n_features)
        self.scale = np.ones(n_features)
        self._cache = None

    def layers(self):
        return [*self.hidden, self.out]

    def fit_scaler(self, x):
        x = np.asarray(x, dtype=float)
        self.center = x.mean(axis=0)
        sd = x.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)

    def extra_tensors(self):
        return [self.center, self.scale]

    def set_tensors(self, tensors):
        rest = super().set_tensors(tensors)
        if len(rest) == 2:
            self.center, self.scale = rest[0].reshape(-1).copy(), rest[1].reshape(-1).copy()
        return []

    def _act(self, z):
        return tanh_forward(z) if self.activation == "tanh" else z

    def _act_backward(self, y, g):
        return tanh_backward(y, g) if self.activation == "tanh" else g

    def forward(self, covariates) -> np.ndarray:
        x = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
        if x.shape[1] != self.n_features:
            raise ValueError(f"covariates have {x.shape[1]} columns, model expects {self.n_features}")
        a = (x - self.center) / self.scale
        inputs, acts = [], []
        for layer in self.hidden:
            inputs.append(a)
            a = self._act(layer.forward(a))
            acts.append(a)
        self._cache = (inputs, acts)
        return self.out.forward(a)[:, 0]

    def backward(self, grad_out):
        inputs, acts = self._cache
        g = self.out.backward(acts[-1], np.asarray(grad_out, dtype=np.float64).reshape(-1, 1))
        for layer, inp, act in zip(reversed(self.hidden), reversed(inputs), reversed(acts)):
            g = layer.backward(inp, self._act_backward(act, g))


def amil_forward(params: AmilModel, bag: FeatureBag) -> tuple[float, np.ndarray]:
    """Single-bag forward, layer by layer; returns (log_risk, attention) and caches attention."""
    h = params.proj.forward(bag.features)
    if params.proj_activation == "relu":
        h = relu_forward(h)
    gated = hadamard_forward(tanh_forward(params.attn_v.forward(h)),
                             sigmoid_forward(params.attn_u.forward(h)))
    attention = softmax_forward(params.attn_z.forward(gated)[:, 0])
    h_bag = attention @ h
    log_risk = float(params.pred.forward(h_bag)[0, 0])
    if not np.isfinite(log_risk):
        raise NonFiniteError(f"non-finite log-risk for bag {bag.patient_id!r}")
    bag.attention_cache = attention
    return log_risk, attention


def maxpool_forward(params: AmilModel | MaxPoolModel, bag: FeatureBag) -> float:
    h = params.proj.forward(bag.features)
    if params.proj_activation == "relu":
        h = relu_forward(h)
    log_risk = float(params.pred.forward(h.max(axis=0))[0, 0])
    if not np.isfinite(log_risk):
        raise NonFiniteError(f"non-finite log-risk for bag {bag.patient_id!r}")
    return log_risk


def deepsurv_forward(mlp_params: DeepSurvModel, covariates) -> np.ndarray:
    return mlp_params.forward(covariates)


def _times_events(cohort):
    if isinstance(cohort, Cohort):
        return cohort.times, cohort.events
    t, e = cohort
    return np.asarray(t, dtype=float), np.asarray(e, dtype=int)


def cox_loss(scores, cohort, l1_lambda: float = 0.0, params_l1_norm: float = 0.0) -> float:
    """Mean negative Breslow partial log-likelihood over events, plus the L1 term."""
    times, events = _times_events(cohort)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != times.shape:
        raise ValueError(f"{scores.size} scores for a cohort of {times.size}")
    n_events = int(events.sum())
    if n_events == 0:
        raise NoEventsError("Cox loss undefined: no observed events")
    ll, _ = kernels.breslow_loglik(times, events, scores)
    return -ll / n_events + l1_lambda * params_l1_norm


def cox_loss_backward(scores, cohort) -> np.ndarray:
    times, events = _times_events(cohort)
    n_events = int(events.sum())
    if n_events == 0:
        raise NoEventsError("Cox loss undefined: no observed events")
    _, grad = kernels.breslow_loglik(times, events, np.asarray(scores, dtype=np.float64))
    return -grad / n_events


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-4
    l1_lambda: float = 1e-5
    seed: int = 0
    model_kind: str = "amil"
    proj_activation: str = "linear"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.l1_lambda < 0:
            raise ValueError(f"l1_lambda must be >= 0, got {self.l1_lambda}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.model_kind not in ("amil", "maxpool", "deepsurv"):
            raise ValueError(f"unknown model_kind {self.model_kind!r}")


@dataclass
class TrainResult:
    model: _Model
    loss_trace: list[float] = field(default_factory=list)


def build_model(config: TrainConfig, input_dim: int) -> _Model:
    if config.model_kind == "amil":
        return AmilModel(input_dim, seed=config.seed, proj_activation=config.proj_activation)
    if config.model_kind == "maxpool":
        return MaxPoolModel(input_dim, seed=config.seed, proj_activation=config.proj_activation)
    return DeepSurvModel(input_dim, seed=config.seed)


def train(data, cohort, config: TrainConfig, model: _Model | None = None) -> TrainResult:
    """Full-cohort Adam training on the Cox loss; one optimizer step per epoch.

    ``data`` is a list of FeatureBag / PackedBags (amil, maxpool) or a covariate
    matrix (deepsurv), row-aligned with ``cohort``.
    """
    times, events = _times_events(cohort)
    if int(events.sum()) == 0:
        raise NoEventsError("cannot train: training cohort has no observed events")
    if config.model_kind == "deepsurv":
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        input_dim = data.shape[1]
        ids = cohort.ids if isinstance(cohort, Cohort) else [str(i) for i in range(len(times))]
    else:
        data = _as_packed(data)
        input_dim = data.features.shape[1]
        ids = data.ids
        if isinstance(cohort, Cohort) and cohort.ids != data.ids:
            raise ValueError("bag order does not match cohort order")
    if len(ids) != times.size:
        raise ValueError(f"{len(ids)} training inputs for {times.size} survival records")
    if model is None:
        model = build_model(config, input_dim)
        if isinstance(model, DeepSurvModel):
            model.fit_scaler(data)
    adam = AdamState(learning_rate=config.learning_rate)
    params = model.parameters()
    trace = []
    for epoch in range(config.epochs):
        model.zero_grad()
        scores = model.forward(data)
        bad = np.flatnonzero(~np.isfinite(scores))
        if bad.size:
            raise TrainingDivergedError(f"non-finite risk at epoch {epoch} for patient {ids[bad[0]]!r}")
        loss = cox_loss(scores, (times, events), config.l1_lambda, model.l1_norm())
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        trace.append(float(loss))
        model.backward(cox_loss_backward(scores, (times, events)))
        grads = model.gradients()
        if config.l1_lambda:
            grads = [g + config.l1_lambda * np.sign(p) for g, p in zip(grads, params)]
        adam_step(adam, params, grads)
        if epoch % 25 == 0:
            log.debug("epoch %d loss %.6f", epoch, loss)
    return TrainResult(model, trace)


def predict(model: _Model, data) -> np.ndarray:
    return model.forward(data)


def save_checkpoint(path, model: _Model, **header) -> None:
    """``AMCK``, u32 LE header length, UTF-8 JSON header, then the AMW1 blob."""
    meta = {"model_kind": model.kind, **header}
    if isinstance(model, (AmilModel, MaxPoolModel)):
        meta.setdefault("feature_dim", model.feature_dim)
        meta.setdefault("proj_activation", model.proj_activation)
    elif isinstance(model, DeepSurvModel):
        meta.setdefault("feature_dim", model.n_features)
    head = json.dumps(meta, sort_keys=True).encode()
    blob = dump_tensors(model.parameters() + model.extra_tensors())
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + blob)


def load_checkpoint(path) -> tuple[_Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (n,) = struct.unpack_from("<I", raw, 4)
    meta = json.loads(raw[8:8 + n].decode())
    tensors = load_tensors(raw[8 + n:])
    kind, dim = meta["model_kind"], int(meta["feature_dim"])
    act = meta.get("proj_activation", "linear")
    if kind == "amil":
        model = AmilModel(dim, proj_activation=act)
    elif kind == "maxpool":
        model = MaxPoolModel(dim, proj_activation=act)
    elif kind == "deepsurv":
        model = DeepSurvModel(dim)
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    model.set_tensors(tensors)
    return model, meta


def export_attention_csv(path, attention) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_index", "weight"])
        for i, a in enumerate(np.asarray(attention).reshape(-1)):
            w.writerow([i, repr(float(a))])
