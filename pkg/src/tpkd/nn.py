"""Layers, WRN-style classifiers, SGD and checkpoints."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal

import numpy as np

from . import container
from . import tensor as T
from .tensor import Tensor

CKPT_FORMAT = "tpkd-ckpt-v1"


class Module:
    training = True

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray) and name.startswith("running_"):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for m in val:
                    if isinstance(m, Module):
                        yield from m.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        problems = []
        for name, arr in own.items():
            if name not in state:
                problems.append(f"{name}: missing")
            elif tuple(state[name].shape) != arr.shape:
                problems.append(f"{name}: expected {arr.shape}, got {tuple(state[name].shape)}")
        problems += [f"{n}: unexpected" for n in state if n not in own]
        if problems:
            raise ValueError("state does not match model: " + "; ".join(problems))
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, buf in self.named_buffers():
            buf[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Dense(Module):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, bias=True):
        rng = rng or np.random.default_rng(0)
        self.weight = _param(rng.normal(0, np.sqrt(1.0 / n_in), (n_in, n_out)), dtype)
        self.bias = _param(np.zeros(n_out), dtype) if bias else None

    def forward(self, x):
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Conv(Module):
    """1-D or 2-D convolution with 'same'-style padding and optional stride."""

    def __init__(self, ndim, c_in, c_out, kernel, stride=1, rng=None, dtype=np.float32,
                 bias=False):
        rng = rng or np.random.default_rng(0)
        ksize = (kernel,) * ndim
        fan_in = c_in * kernel ** ndim
        self.ndim, self.stride, self.pad = ndim, stride, kernel // 2
        self.weight = _param(rng.normal(0, np.sqrt(2.0 / fan_in), (c_out, c_in) + ksize), dtype)
        self.bias = _param(np.zeros(c_out), dtype) if bias else None

    def forward(self, x):
        if self.ndim == 1:
            return T.conv1d(x, self.weight, self.bias, self.stride, self.pad)
        return T.conv2d(x, self.weight, self.bias, (self.stride,) * 2, (self.pad,) * 2)


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Identity(Module):
    def forward(self, x):
        return x


class PreActBlock(Module):
    """BN-ReLU-conv-BN-ReLU-conv with identity or 1x1 projection shortcut."""

    def __init__(self, ndim, c_in, c_out, stride, batch_norm, kernel, rng, dtype):
        norm = (lambda c: BatchNorm(c, dtype)) if batch_norm else (lambda c: Identity())
        self.bn1 = norm(c_in)
        self.conv1 = Conv(ndim, c_in, c_out, kernel, stride, rng, dtype)
        self.bn2 = norm(c_out)
        self.conv2 = Conv(ndim, c_out, c_out, kernel, 1, rng, dtype)
        if stride != 1 or c_in != c_out:
            self.shortcut = Conv(ndim, c_in, c_out, 1, stride, rng, dtype)
        else:
            self.shortcut = None

    def forward(self, x):
        o = T.relu(self.bn1(x))
        skip = self.shortcut(o) if self.shortcut is not None else x
        o = self.conv1(o)
        o = self.conv2(T.relu(self.bn2(o)))
        return o + skip


@dataclass(frozen=True)
class ModelSpec:
    input_kind: Literal["series_1d", "image_2d"] = "series_1d"
    channels_in: int = 3
    stages: int = 3
    blocks_per_stage: int = 2
    width: tuple[int, ...] = (8, 16, 32)
    classes: int = 4
    batch_norm: bool = True
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "width", tuple(int(w) for w in self.width))
        if self.input_kind not in ("series_1d", "image_2d"):
            raise ValueError(f"unknown input_kind {self.input_kind!r}")
        if len(self.width) != self.stages:
            raise ValueError(f"width has {len(self.width)} entries but stages={self.stages}")
        for name in ("channels_in", "stages", "blocks_per_stage", "classes", "kernel"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")

    @property
    def ndim(self) -> int:
        return 1 if self.input_kind == "series_1d" else 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width"] = list(self.width)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(**{**d, "width": tuple(d.get("width", (8, 16, 32)))})


class WideResNet(Module):
    """Reduced-scale pre-activation WRN for series or PI inputs.

    Stage ``s`` (1-based) downsamples by 2 for ``s > 1``. Captured activations
    are the rectified outputs at the end of each stage.
    """

    def __init__(self, spec: ModelSpec, seed=0, dtype=np.float32):
        self.spec = spec
        rng = np.random.default_rng(seed)
        nd = spec.ndim
        self.stem = Conv(nd, spec.channels_in, spec.width[0], spec.kernel, 1, rng, dtype)
        self.blocks = []
        self.stage_ends = []
        c = spec.width[0]
        for s, w in enumerate(spec.width):
            for b in range(spec.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                self.blocks.append(PreActBlock(nd, c, w, stride, spec.batch_norm,
                                               spec.kernel, rng, dtype))
                c = w
            self.stage_ends.append(len(self.blocks) - 1)
        self.bn_out = BatchNorm(c, dtype) if spec.batch_norm else Identity()
        self.fc = Dense(c, spec.classes, rng, dtype)

    def check_input(self, x):
        spec = self.spec
        want = 3 if spec.ndim == 1 else 4
        shape = tuple(x.shape)
        if len(shape) != want or shape[1] != spec.channels_in:
            layout = "[b, c, len]" if spec.ndim == 1 else "[b, c, h, w]"
            raise ValueError(f"expected input {layout} with c={spec.channels_in}, got {shape}")

    def forward(self, x, capture: Iterable[int] = ()):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.fc.weight.dtype))
        self.check_input(x)
        capture = set(capture)
        acts = {}
        o = self.stem(x)
        for i, block in enumerate(self.blocks):
            o = block(o)
            if i in self.stage_ends:
                stage = self.stage_ends.index(i) + 1
                if stage == len(self.stage_ends):
                    o = T.relu(self.bn_out(o))
                    if stage in capture:
                        acts[stage] = o
                elif stage in capture:
                    acts[stage] = T.relu(o)
        logits = self.fc(T.global_avg_pool(o))
        return logits, acts


def build_model(spec: ModelSpec, seed=0, dtype=np.float32) -> WideResNet:
    return WideResNet(spec, seed=seed, dtype=dtype)


def forward(model, batch, capture_layers=()):
    """Run ``model`` returning ``(logits, {stage: activation})``."""
    if isinstance(model, WideResNet):
        return model.forward(batch, capture_layers)
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    return model(batch), {}


# -- optimization -------------------------------------------------------------
@dataclass
class OptimizerState:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(state: OptimizerState, params) -> None:
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    ``params`` is a mapping or iterable of ``(name, Tensor)``.
    """
    items = list(params.items() if isinstance(params, dict) else params)
    for name, p in items:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    for name, p in items:
        g = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        if v.shape != p.data.shape:
            raise ValueError(f"velocity for {name!r} has shape {v.shape}, param {p.data.shape}")
        v = (state.momentum * v + g).astype(p.data.dtype, copy=False)
        state.velocity[name] = v
        p.data = (p.data - state.lr * v).astype(p.data.dtype, copy=False)


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 0.05
    milestones: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        ms = tuple((int(e), float(f)) for e, f in self.milestones)
        object.__setattr__(self, "milestones", ms)
        if not self.initial > 0:
            raise ValueError("initial learning rate must be positive")
        epochs = [e for e, _ in ms]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"milestone epochs must be strictly increasing: {epochs}")
        if any(not 0 < f <= 1 for _, f in ms):
            raise ValueError("milestone factors must lie in (0, 1]")

    def to_dict(self):
        return {"initial": self.initial, "milestones": [list(m) for m in self.milestones]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["initial"], tuple(tuple(m) for m in d.get("milestones", ())))


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    lr = schedule.initial
    for e, f in schedule.milestones:
        if e <= epoch:
            lr *= f
    return lr


def series_schedule(total_epochs: int, initial=0.05) -> LrSchedule:
    """x0.2 at epoch 10, then x0.1 every total/3 epochs."""
    step = max(total_epochs // 3, 1)
    ms = {10: 0.2}
    for e in range(step, total_epochs + 1, step):
        ms[e] = ms.get(e, 1.0) * 0.1
    return LrSchedule(initial, tuple(sorted(ms.items())))


def image_schedule(initial=0.1) -> LrSchedule:
    return LrSchedule(initial, ((10, 0.5), (40, 0.2), (80, 0.2), (120, 0.2), (160, 0.2)))


# -- checkpoints --------------------------------------------------------------
def checkpoint_bytes(model: WideResNet, meta: dict | None = None) -> bytes:
    m = {"spec": model.spec.to_dict(), **(meta or {})}
    return container.encode(CKPT_FORMAT, model.state_dict(), m)


def save_checkpoint(model: WideResNet, path, meta: dict | None = None) -> str:
    data = container.write(path, CKPT_FORMAT,
                           model.state_dict(), {"spec": model.spec.to_dict(), **(meta or {})})
    return hashlib.sha256(data).hexdigest()


def load_state(path) -> tuple[ModelSpec, dict[str, np.ndarray], dict]:
    header, arrays = container.read(path, CKPT_FORMAT)
    meta = header["meta"]
    return ModelSpec.from_dict(meta["spec"]), arrays, meta


def load_checkpoint(path) -> WideResNet:
    spec, arrays, _ = load_state(path)
    model = build_model(spec)
    model.load_state_dict(arrays)
    return model


def snapshot(model: Module) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def state_hash(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name]).tobytes())
    return h.hexdigest()
