"""Dense classifier with a frozen base, multi-branch LoRA adapters and a
softmax router that mixes the branches per input."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ContractError, DimensionError, Parameter, Tensor


@dataclass
class Topology:
    input_dim: int = 256
    hidden: tuple[int, ...] = (1024, 256)
    num_classes: int = 10
    n_bits: int = 10
    rank: int = 4
    router_hidden: int = 64
    lora_layers: tuple[int, ...] = (0,)
    lora_alpha: float = 32.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.lora_layers = tuple(int(i) for i in self.lora_layers)
        if any(i < 0 or i >= self.num_layers for i in self.lora_layers):
            raise ValueError(f"lora layer index out of range: {self.lora_layers}")
        for name in ("input_dim", "num_classes", "n_bits", "rank", "router_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.num_classes]

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.rank

    @property
    def router_input_dim(self) -> int:
        return self.sizes[min(self.lora_layers)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["lora_layers"] = list(self.lora_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(**d)


class Dense:
    def __init__(self, d: int, k: int, rng: np.random.Generator | None = None, name: str = ""):
        w = np.zeros((d, k)) if rng is None else rng.normal(0.0, np.sqrt(2.0 / d), size=(d, k))
        self.weight = Parameter(w, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(k), name=f"{name}.bias")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class MultiBranchLora:
    """``n`` LoRA branches on one layer: per-branch ``B_i`` (d x r) and a
    single shared ``A`` (r x k). Branch outputs carry the usual
    ``alpha / r`` factor, kept in ``scale``."""

    def __init__(self, d: int, k: int, n: int, rank: int, layer: int,
                 rng: np.random.Generator | None = None, scale: float = 1.0):
        self.layer = layer
        self.scale = float(scale)
        a = np.zeros((rank, k)) if rng is None else rng.normal(0.0, 0.02, size=(rank, k))
        self.A = Parameter(a, name=f"lora.{layer}.A")
        self.B = [Parameter(np.zeros((d, rank)), name=f"lora.{layer}.B.{i}") for i in range(n)]

    @property
    def n(self) -> int:
        return len(self.B)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.A, *self.B]


class Router:
    """Two dense layers and a softmax; emits one weight per branch."""

    def __init__(self, d: int, hidden: int, n: int, rng: np.random.Generator | None = None):
        self.fc1 = Dense(d, hidden, rng, name="router.0")
        # zero head: uniform routing until trained
        self.fc2 = Dense(hidden, n, None, name="router.1")

    @property
    def input_dim(self) -> int:
        return self.fc1.shape[0]

    @property
    def n(self) -> int:
        return self.fc2.shape[1]

    def logits(self, x: Tensor) -> Tensor:
        x = ag._as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"router expects input dim {self.input_dim}, got {x.shape[-1]}")
        return self.fc2(ag.relu(self.fc1(x)))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.softmax(self.logits(x))

    def parameters(self) -> list[Parameter]:
        return [*self.fc1.parameters(), *self.fc2.parameters()]


def route(router: Router, x) -> Tensor:
    """Routing vector(s) for ``x``: rows are nonnegative and sum to one."""
    return router(x)


def lora_layer_forward(x: Tensor, base: Dense, lora: MultiBranchLora, omega: Tensor) -> Tensor:
    """``x (W0 + s sum_i omega_i B_i A) + b``, evaluated as
    ``s (sum_i omega_i x B_i) A`` so no dense ``d x k`` delta is ever formed."""
    x, omega = ag._as_tensor(x), ag._as_tensor(omega)
    if omega.shape[-1] != lora.n:
        raise ContractError(f"routing vector has {omega.shape[-1]} entries, layer has {lora.n} branches")
    d, k = base.shape
    if x.shape[-1] != d or lora.B[0].shape[0] != d or lora.A.shape[1] != k:
        raise DimensionError(f"shape chain broken: x{x.shape}, W0{base.shape}, "
                             f"B{lora.B[0].shape}, A{lora.A.shape}")
    mixed = None
    for i, b in enumerate(lora.B):
        w = omega[..., i:i + 1]
        term = ag.mul(w, ag.matmul(x, b))
        mixed = term if mixed is None else ag.add(mixed, term)
    return ag.add(base(x), ag.scale(ag.matmul(mixed, lora.A), lora.scale))


def branch_output(x, lora: MultiBranchLora, i: int) -> Tensor:
    """Output of branch ``i`` alone: ``s x B_i A``."""
    return ag.scale(ag.matmul(ag.matmul(x, lora.B[i]), lora.A), lora.scale)


def branch_delta(lora: MultiBranchLora, i: int) -> np.ndarray:
    if not 0 <= i < lora.n:
        raise IndexError(f"branch {i} out of range for {lora.n} branches")
    return (lora.B[i].data @ lora.A.data) * np.float32(lora.scale)


def swap_branch(lora: MultiBranchLora, i: int, new_b) -> None:
    if not 0 <= i < lora.n:
        raise IndexError(f"branch {i} out of range for {lora.n} branches")
    new_b = np.asarray(new_b.data if isinstance(new_b, Tensor) else new_b)
    if new_b.shape != lora.B[i].shape:
        raise DimensionError(f"branch shape {new_b.shape} != {lora.B[i].shape}")
    lora.B[i].data = np.array(new_b, dtype=lora.B[i].data.dtype)


@dataclass
class LoraClassifier:
    """Base MLP with multi-branch LoRA on ``topology.lora_layers`` and one
    shared router consulted once per forward pass."""

    topology: Topology
    layers: list[Dense] = field(default_factory=list)
    loras: dict[int, MultiBranchLora] = field(default_factory=dict)
    router: Router | None = None

    @classmethod
    def create(cls, topology: Topology, rng: np.random.Generator) -> "LoraClassifier":
        sizes = topology.sizes
        layers = [Dense(sizes[i], sizes[i + 1], rng, name=f"layers.{i}")
                  for i in range(topology.num_layers)]
        loras = {l: MultiBranchLora(sizes[l], sizes[l + 1], topology.n_bits, topology.rank, l, rng,
                                    topology.lora_scale)
                 for l in topology.lora_layers}
        router = Router(topology.router_input_dim, topology.router_hidden, topology.n_bits, rng)
        return cls(topology, layers, loras, router)

    @property
    def first_lora(self) -> int:
        return min(self.loras)

    def base_parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def lora_parameters(self) -> list[Parameter]:
        return [p for l in sorted(self.loras) for p in self.loras[l].parameters()]

    def parameters(self) -> list[Parameter]:
        return self.base_parameters() + self.lora_parameters() + self.router.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def copy(self) -> "LoraClassifier":
        return copy.deepcopy(self)

    def set_frozen(self, params, frozen: bool) -> None:
        for p in params:
            p.frozen = frozen

    def features(self, x, upto: int | None = None) -> Tensor:
        """Activations entering layer ``upto`` (default: the first LoRA layer),
        computed through the plain base layers."""
        upto = self.first_lora if upto is None else upto
        h = ag._as_tensor(x)
        if h.shape[-1] != self.topology.input_dim:
            raise DimensionError(f"model expects input dim {self.topology.input_dim}, got {h.shape[-1]}")
        for layer in self.layers[:upto]:
            h = ag.relu(layer(h))
        return h

    def forward_from(self, h, start: int, omega: Tensor | None = None, use_lora: bool = True):
        """Run layers ``start..`` on activations ``h``. Returns (logits, omega)."""
        h = ag._as_tensor(h)
        for l in range(start, len(self.layers)):
            layer = self.layers[l]
            if use_lora and l in self.loras:
                if omega is None:
                    omega = self.router(h)
                h = lora_layer_forward(h, layer, self.loras[l], omega)
            else:
                h = layer(h)
            if l < len(self.layers) - 1:
                h = ag.relu(h)
        return h, omega

    def forward(self, x, use_lora: bool = True) -> Tensor:
        h = self.features(x)
        logits, _ = self.forward_from(h, self.first_lora, use_lora=use_lora)
        return logits

    __call__ = forward

    def predict(self, x: np.ndarray, batch: int = 1024) -> np.ndarray:
        return np.argmax(self.logits_np(x, batch), axis=-1)

    def logits_np(self, x: np.ndarray, batch: int = 1024) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        with ag.no_grad():
            if x.ndim == 1:
                return self.forward(x).data
            return np.concatenate([self.forward(x[i:i + batch]).data
                                   for i in range(0, len(x), batch)]) if len(x) else \
                np.zeros((0, self.topology.num_classes), np.float32)


def model_forward(model, x) -> Tensor:
    return model.forward(x)


def lora_parameter_count(topology: Topology) -> int:
    """Parameters added by the LoRA module (shared A plus every B_i)."""
    sizes = topology.sizes
    return sum(topology.rank * sizes[l + 1] + topology.n_bits * sizes[l] * topology.rank
               for l in topology.lora_layers)


def router_parameter_count(topology: Topology) -> int:
    d, h, n = topology.router_input_dim, topology.router_hidden, topology.n_bits
    return d * h + h + h * n + n


def base_parameter_count(topology: Topology) -> int:
    s = topology.sizes
    return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))
