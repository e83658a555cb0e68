"""Layers, model assembly, optimizers and checkpoints.

Batch normalization keeps one set of running statistics per domain (source,
pristine target, perturbed target) and shares the affine scale/shift across
domains, so source and target gradients land in the same parameters.
"""

import enum
import hashlib
import io
import json
import math

import numpy as np

from lowbudget import autodiff as ad
from lowbudget.autodiff import Tensor
from lowbudget.errors import ContractViolation, DomainError, FormatError

CHECKPOINT_VERSION = 1


class Domain(enum.IntEnum):
    SOURCE = 0
    TARGET = 1
    TARGET_PERTURBED = 2


# An untrained branch borrows statistics from the next branch down this chain.
_FALLBACK = {
    Domain.SOURCE: (),
    Domain.TARGET: (Domain.SOURCE,),
    Domain.TARGET_PERTURBED: (Domain.TARGET, Domain.SOURCE),
}


def as_domain(tag):
    if isinstance(tag, Domain):
        return tag
    try:
        if isinstance(tag, str):
            return Domain[tag.upper()]
        return Domain(tag)
    except (KeyError, ValueError):
        raise ContractViolation(f"unknown domain tag {tag!r}") from None


class Dense:
    kind = "dense"

    def __init__(self, in_features, out_features, rng):
        std = 1.0 / math.sqrt(in_features)
        self.weight = Tensor(rng.normal(0.0, std, size=(in_features, out_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, domain, training):
        return x @ self.weight + self.bias

    def spec(self):
        return {"kind": self.kind, "in": self.weight.shape[0], "out": self.weight.shape[1]}


class ReLU:
    kind = "relu"

    def parameters(self):
        return []

    def forward(self, x, domain, training):
        return ad.maximum(x, 0.0)

    def spec(self):
        return {"kind": self.kind}


class SoftmaxHead:
    kind = "softmax"

    def parameters(self):
        return []

    def forward(self, x, domain, training):
        return ad.softmax(x)

    def spec(self):
        return {"kind": self.kind}


class DomainBatchNorm:
    """Batch normalization with per-domain running statistics and shared affine parameters."""

    kind = "domain_bn"

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        if num_features < 1:
            raise ContractViolation("num_features must be positive")
        if not 0.0 < momentum < 1.0:
            raise ContractViolation("momentum must lie in (0, 1)")
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        n = len(Domain)
        self.running_mean = np.zeros((n, num_features))
        self.running_var = np.ones((n, num_features))
        self.tracked = np.zeros(n, dtype=np.int64)

    def parameters(self):
        return [self.gamma, self.beta]

    def resolve(self, domain):
        """Branch whose running statistics serve ``domain`` at eval time."""
        domain = as_domain(domain)
        if self.tracked[domain]:
            return domain
        for other in _FALLBACK[domain]:
            if self.tracked[other]:
                return other
        return domain

    def forward(self, x, domain, training):
        domain = as_domain(domain)
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise ContractViolation(f"batch norm expects (batch, {self.num_features}), got {x.shape}")
        if training:
            mu = x.mean(axis=0, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=0, keepdims=True)
            self._update(domain, mu.data[0], var.data[0])
            xhat = centered * ad.power(var + self.eps, -0.5)
        else:
            b = self.resolve(domain)
            scale = 1.0 / np.sqrt(self.running_var[b] + self.eps)
            xhat = (x - self.running_mean[b]) * scale
        return xhat * self.gamma + self.beta

    def _update(self, domain, batch_mean, batch_var):
        m = self.momentum
        self.running_mean[domain] = (1.0 - m) * self.running_mean[domain] + m * batch_mean
        self.running_var[domain] = (1.0 - m) * self.running_var[domain] + m * batch_var
        self.tracked[domain] += 1

    def spec(self):
        return {"kind": self.kind, "features": self.num_features, "momentum": self.momentum, "eps": self.eps}


class Model:
    def __init__(self, layers, num_classes, seed=None):
        if not layers or not isinstance(layers[-1], SoftmaxHead):
            raise ContractViolation("a model must end with a softmax head")
        self.layers = list(layers)
        self.num_classes = num_classes
        self.seed = seed

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[0]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def batch_norms(self):
        return [layer for layer in self.layers if isinstance(layer, DomainBatchNorm)]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, batch, domain, training=False):
        """Class probabilities ``(batch, C)`` routed through the ``domain`` statistics."""
        domain = as_domain(domain)
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        elif x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.input_dim:
            raise ContractViolation(f"batch width {x.shape[1]} does not match input dim {self.input_dim}")
        for layer in self.layers:
            x = layer.forward(x, domain, training)
        return x

    def predict(self, batch, domain):
        """Eval-mode probabilities as a plain array, no graph."""
        with ad.no_grad():
            return self.forward(batch, domain, training=False).data

    __call__ = forward

    # -- state ------------------------------------------------------------

    def state_arrays(self):
        arrays = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                arrays[f"{i}.weight"] = layer.weight.data
                arrays[f"{i}.bias"] = layer.bias.data
            elif isinstance(layer, DomainBatchNorm):
                arrays[f"{i}.gamma"] = layer.gamma.data
                arrays[f"{i}.beta"] = layer.beta.data
                arrays[f"{i}.running_mean"] = layer.running_mean
                arrays[f"{i}.running_var"] = layer.running_var
                arrays[f"{i}.tracked"] = layer.tracked
        return arrays

    def spec(self):
        return {
            "layers": [layer.spec() for layer in self.layers],
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    def fingerprint(self):
        h = hashlib.sha256(json.dumps(self.spec(), sort_keys=True).encode())
        for name, arr in sorted(self.state_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def copy(self):
        return model_from_state(self.spec(), {k: v.copy() for k, v in self.state_arrays().items()})


def model_from_state(spec, arrays):
    rng = np.random.default_rng(0)
    layers = []
    for i, ls in enumerate(spec["layers"]):
        kind = ls["kind"]
        if kind == "dense":
            layer = Dense(ls["in"], ls["out"], rng)
            layer.weight = Tensor(arrays[f"{i}.weight"], requires_grad=True)
            layer.bias = Tensor(arrays[f"{i}.bias"], requires_grad=True)
        elif kind == "domain_bn":
            layer = DomainBatchNorm(ls["features"], ls["momentum"], ls["eps"])
            layer.gamma = Tensor(arrays[f"{i}.gamma"], requires_grad=True)
            layer.beta = Tensor(arrays[f"{i}.beta"], requires_grad=True)
            layer.running_mean = np.array(arrays[f"{i}.running_mean"], dtype=np.float64)
            layer.running_var = np.array(arrays[f"{i}.running_var"], dtype=np.float64)
            layer.tracked = np.array(arrays[f"{i}.tracked"], dtype=np.int64)
        elif kind == "relu":
            layer = ReLU()
        elif kind == "softmax":
            layer = SoftmaxHead()
        else:
            raise FormatError(f"unknown layer kind {kind!r} in layer {i}")
        layers.append(layer)
    return Model(layers, spec["num_classes"], seed=spec.get("seed"))


def build_mlp(input_dim, hidden_dims, num_classes, use_domain_bn=True, seed=0, bn_momentum=0.1, bn_eps=1e-5):
    """Dense -> DomainBN -> ReLU blocks followed by a dense softmax head.

    Weights are drawn from N(0, 1/fan_in) with a generator seeded by ``seed``;
    biases start at zero.
    """
    dims = [input_dim, *hidden_dims, num_classes]
    if any(int(d) < 1 for d in dims):
        raise ContractViolation(f"all layer widths must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-2], dims[1:-1]):
        layers.append(Dense(fan_in, fan_out, rng))
        if use_domain_bn:
            layers.append(DomainBatchNorm(fan_out, bn_momentum, bn_eps))
        layers.append(ReLU())
    layers.append(Dense(dims[-2], dims[-1], rng))
    layers.append(SoftmaxHead())
    return Model(layers, num_classes, seed=seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model, path, lineage=None):
    meta = {"version": CHECKPOINT_VERSION, "spec": model.spec(), "lineage": lineage or {}}
    arrays = dict(model.state_arrays())
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, lineage)``; parameters and statistics round-trip bit-exactly."""
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a checkpoint archive ({exc})") from None
    if "__meta__" not in arrays:
        raise FormatError(f"{path}: missing metadata record")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return model_from_state(meta["spec"], arrays), meta.get("lineage", {})


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Optimizer:
    """Adam or SGD with momentum, L2 weight decay added to the gradient.

    ``schedule`` is a list of ``(epoch, factor)`` pairs; the learning rate at
    an epoch is the initial rate times every factor whose epoch has been reached.
    """

    def __init__(
        self,
        params,
        kind="adam",
        lr=1e-3,
        weight_decay=0.0,
        schedule=(),
        momentum=0.9,
        betas=(0.9, 0.999),
        eps=1e-8,
    ):
        kind = kind.lower()
        if kind not in ("adam", "sgd"):
            raise ContractViolation(f"unknown optimizer kind {kind!r}")
        if lr <= 0:
            raise ContractViolation("learning rate must be positive")
        schedule = [(int(e), float(f)) for e, f in schedule]
        epochs = [e for e, _ in schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ContractViolation("schedule epochs must be strictly increasing")
        if any(f <= 0 for _, f in schedule):
            raise ContractViolation("schedule factors must be positive")
        self.params = list(params)
        self.kind = kind
        self.initial_lr = float(lr)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.schedule = schedule
        self.momentum = momentum
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def apply_schedule(self, epoch):
        lr = self.initial_lr
        for trigger, factor in self.schedule:
            if trigger <= epoch:
                lr *= factor
        self.lr = lr
        return lr

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.steps += 1
        t = self.steps
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if not np.isfinite(g).all():
                raise DomainError("non-finite gradient in optimizer step")
            if self.kind == "adam":
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
                mhat = self.m[i] / (1.0 - self.beta1**t)
                vhat = self.v[i] / (1.0 - self.beta2**t)
                p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            else:
                if self.momentum:
                    self.m[i] = self.momentum * self.m[i] + g
                    g = self.m[i]
                p.data = p.data - self.lr * g


def step_schedule(every, total_epochs, factor=0.1):
    """``[(every, f), (2*every, f), ...]`` up to ``total_epochs``."""
    return [(e, factor) for e in range(every, total_epochs, every)]
