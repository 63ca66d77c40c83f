"""Trigger construction, watermark datasets, the four training losses and
the dual-model schedule that produces the (inactive, active) model pair."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import ContractError, DomainError
from .data import CleanDataset, make_synthetic
from .model import Dense, LoraClassifier, Topology, branch_output
from .optim import Adam, make_rng

log = logging.getLogger(__name__)


class TrainingFailure(RuntimeError):
    def __init__(self, phase: str, message: str):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase


@dataclass(frozen=True)
class TriggerSpec:
    bit: int
    pattern: np.ndarray
    row: int
    col: int
    target: int

    @property
    def rect(self) -> tuple[int, int, int, int]:
        h, w = self.pattern.shape
        return self.row, self.col, self.row + h, self.col + w

    def to_dict(self) -> dict:
        return {"bit": self.bit, "pattern": self.pattern.tolist(), "row": self.row,
                "col": self.col, "target": self.target}

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        return cls(int(d["bit"]), np.asarray(d["pattern"], dtype=np.float32),
                   int(d["row"]), int(d["col"]), int(d["target"]))


def _border_cells(image_size: int, patch: int) -> list[tuple[int, int]]:
    """Patch-sized grid cells flush with the image edges, border ring first (clockwise from the
    top-left corner), then interior cells row by row."""
    steps = list(range(0, image_size - patch + 1, patch))
    steps[-1] = last = image_size - patch
    ring = [(0, c) for c in steps]
    ring += [(r, last) for r in steps[1:]]
    ring += [(last, c) for c in reversed(steps[:-1])]
    ring += [(r, 0) for r in reversed(steps[1:-1])]
    interior = [(r, c) for r in steps[1:-1] for c in steps[1:-1]]
    return ring, interior


def default_triggers(n: int, image_size: int = 16, num_classes: int = 10,
                     patch: int = 3, intensity: float = 1.0) -> list[TriggerSpec]:
    """Maximum-intensity square patches at ``n`` disjoint fixed positions,
    spread around the image border; bit ``i`` targets class ``i mod C``."""
    ring, interior = _border_cells(image_size, patch)
    if n <= len(ring):
        picks = [ring[j] for j in np.linspace(0, len(ring), n, endpoint=False).astype(int)]
    elif n <= len(ring) + len(interior):
        picks = ring + interior[: n - len(ring)]
    else:
        raise ValueError(f"cannot place {n} disjoint {patch}x{patch} triggers in a {image_size}^2 image")
    pattern = np.full((patch, patch), intensity, dtype=np.float32)
    return [TriggerSpec(i, pattern, r, c, i % num_classes) for i, (r, c) in enumerate(picks)]


def apply_trigger(x: np.ndarray, spec: TriggerSpec, image_shape: tuple[int, int] = (16, 16)) -> np.ndarray:
    """Add the trigger patch to flattened image(s) ``x`` and clamp to [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    h, w = image_shape
    r0, c0, r1, c1 = spec.rect
    if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
        raise DomainError(f"trigger for bit {spec.bit} at {spec.rect} leaves the {h}x{w} image")
    flat = x.shape[-1] == h * w
    img = x.reshape(*x.shape[:-1], h, w).copy() if flat else x.copy()
    img[..., r0:r1, c0:c1] = np.clip(img[..., r0:r1, c0:c1] + spec.pattern, 0.0, 1.0)
    return img.reshape(x.shape)


@dataclass
class DatasetBundle:
    x_clean: np.ndarray
    y_clean: np.ndarray
    wm_x: list[np.ndarray]
    wm_y: list[np.ndarray]
    wm_test_x: list[np.ndarray]
    wm_test_y: list[np.ndarray]
    ratio: float
    wm_index: list[np.ndarray] = field(default_factory=list)
    wm_test_index: list[np.ndarray] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.wm_x)


def per_bit_count(n_clean: int, ratio: float, floor: int = 8) -> int:
    return max(math.ceil(round(ratio * n_clean, 9)), floor)


def build_bundle(clean: CleanDataset, triggers: list[TriggerSpec], ratio: float,
                 rng: np.random.Generator, probe_size: int = 64, floor: int = 8) -> DatasetBundle:
    """Per-bit triggered sets: training copies drawn from the clean training
    split, probe copies from the held-out split."""
    if not 0 < ratio <= 1:
        raise DomainError(f"wm:clean ratio must lie in (0, 1], got {ratio}")
    n_clean = len(clean.x_train)
    count = per_bit_count(n_clean, ratio, floor)
    if count > n_clean:
        raise DomainError(f"need {count} samples per bit but the clean set has {n_clean}")
    if probe_size > len(clean.x_test):
        raise DomainError(f"probe size {probe_size} exceeds held-out set of {len(clean.x_test)}")
    bundle = DatasetBundle(clean.x_train, clean.y_train, [], [], [], [], ratio)
    for spec in triggers:
        idx = np.sort(rng.choice(n_clean, size=count, replace=False))
        tidx = np.sort(rng.choice(len(clean.x_test), size=probe_size, replace=False))
        bundle.wm_index.append(idx)
        bundle.wm_test_index.append(tidx)
        bundle.wm_x.append(apply_trigger(clean.x_train[idx], spec, clean.image_shape))
        bundle.wm_y.append(np.full(count, spec.target, dtype=np.int64))
        bundle.wm_test_x.append(apply_trigger(clean.x_test[tidx], spec, clean.image_shape))
        bundle.wm_test_y.append(np.full(probe_size, spec.target, dtype=np.int64))
    return bundle


# --- losses ---------------------------------------------------------------

def route_loss_from_features(router, h, bits) -> ag.Tensor:
    bits = np.asarray(bits, dtype=np.int64)
    if np.any(bits < 0):
        raise ContractError("route loss only accepts triggered samples (bit index >= 0)")
    return ag.cross_entropy(router.logits(h), bits)


def loss_route(model: LoraClassifier, x_triggered, bits) -> ag.Tensor:
    """Mean cross-entropy between routing output and the one-hot of each
    sample's bit. Clean samples (bit index -1) are rejected."""
    bits = np.asarray(bits, dtype=np.int64)
    if np.any(bits < 0):
        raise ContractError("route loss only accepts triggered samples (bit index >= 0)")
    with ag.no_grad():
        h = model.features(x_triggered)
    return route_loss_from_features(model.router, h, bits)


def loss_wm(model: LoraClassifier, x_triggered, targets) -> ag.Tensor:
    return ag.cross_entropy(model.forward(x_triggered), np.asarray(targets, dtype=np.int64))


def align_loss_from_features(active: LoraClassifier, inactive: LoraClassifier, h) -> ag.Tensor:
    total = None
    for l in sorted(active.loras):
        la, li = active.loras[l], inactive.loras[l]
        a_const = ag.Tensor(la.A.data)
        for j in range(la.n):
            out_active = ag.scale(ag.matmul(ag.matmul(h, la.B[j]), a_const), la.scale)
            with ag.no_grad():
                out_clean = branch_output(h, li, j)
            term = ag.mse(out_active, out_clean)
            total = term if total is None else ag.add(total, term)
    count = sum(active.loras[l].n for l in active.loras)
    return ag.scale(total, 1.0 / count)


def _check_aligned(active: LoraClassifier, inactive: LoraClassifier) -> None:
    if sorted(active.loras) != sorted(inactive.loras):
        raise ContractError("models carry LoRA on different layers")
    for l in active.loras:
        a, b = active.loras[l], inactive.loras[l]
        if a.n != b.n or a.A.shape != b.A.shape or a.B[0].shape != b.B[0].shape:
            raise ContractError(f"LoRA shapes differ on layer {l}")


def loss_align(active: LoraClassifier, inactive: LoraClassifier, x_clean) -> ag.Tensor:
    """Mean over branches of the MSE between watermarked and clean branch
    outputs on clean inputs; only the watermarked ``B`` receive gradient."""
    _check_aligned(active, inactive)
    if active.first_lora != inactive.first_lora:
        raise ContractError("models carry LoRA on different layers")
    with ag.no_grad():
        h = active.features(x_clean)
    return align_loss_from_features(active, inactive, h)


# --- configuration ----------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    n_train: int = 8000
    n_test: int = 2000
    image_size: int = 16
    num_classes: int = 10
    data_noise: float = 0.3
    data_mix: float = 1.6
    n_bits: int = 10
    rank: int = 4
    hidden: tuple[int, ...] = (1024, 256)
    router_hidden: int = 64
    lora_layers: tuple[int, ...] = (0,)
    lora_alpha: float = 32.0
    trigger_patch: int = 3
    epochs_base: int = 20
    epochs_inactive: int = 30
    epochs_warmup: int = 10
    epochs_active: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    base_weight_decay: float = 0.0
    lambda_route_consistency: float = 20.0
    wm_ratio: float = 0.01
    min_wm_per_bit: int = 8
    probe_size: int = 64
    accuracy_floor: float = 0.85
    route_accuracy_floor: float = 0.99
    bit_success_floor: float = 0.9
    align_threshold: float = 1e-2
    use_align: bool = True
    wm_weight_noise: float = 0.5
    route_disabled_bits: tuple[int, ...] = ()

    def __post_init__(self):
        self.hidden = tuple(int(v) for v in self.hidden)
        self.lora_layers = tuple(int(v) for v in self.lora_layers)
        self.route_disabled_bits = tuple(int(v) for v in self.route_disabled_bits)
        for name in ("n_train", "n_test", "n_bits", "rank", "batch_size", "probe_size", "router_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name}: must be positive")
        for name in ("epochs_base", "epochs_inactive", "epochs_warmup", "epochs_active"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr: must be positive")
        if self.wm_weight_noise < 0:
            raise ValueError("wm_weight_noise: must be non-negative")
        if not 0 < self.wm_ratio <= 1:
            raise ValueError("wm_ratio: must lie in (0, 1]")
        if any(b < 0 or b >= self.n_bits for b in self.route_disabled_bits):
            raise ValueError("route_disabled_bits: index out of range")

    def topology(self) -> Topology:
        return Topology(self.image_size ** 2, self.hidden, self.num_classes, self.n_bits,
                        self.rank, self.router_hidden, self.lora_layers, self.lora_alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("hidden", "lora_layers", "route_disabled_bits"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from a JSON mapping; unknown keys and bad types raise
        ``ValueError`` naming the offending field."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ValueError(f"{key}: unknown config field")
            default = getattr(cls(), key)
            if isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif isinstance(default, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            elif isinstance(default, tuple):
                ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
            else:
                ok = True
            if not ok:
                raise ValueError(f"{key}: expected {type(default).__name__}, got {type(value).__name__}")
            kwargs[key] = value
        return cls(**kwargs)


def clean_dataset(cfg: TrainConfig) -> CleanDataset:
    """The synthetic task a config describes; regenerated bit-for-bit from
    the config alone."""
    return make_synthetic(cfg.n_train, cfg.n_test, cfg.num_classes, cfg.image_size,
                          cfg.data_noise, cfg.data_mix, seed=cfg.seed)


def config_triggers(cfg: TrainConfig) -> list[TriggerSpec]:
    return default_triggers(cfg.n_bits, cfg.image_size, cfg.num_classes, cfg.trigger_patch)


# --- training ----------------------------------------------------------------

@dataclass
class ModelPair:
    inactive: LoraClassifier
    active: LoraClassifier
    triggers: list[TriggerSpec]
    probes_x: list[np.ndarray]
    probes_y: list[np.ndarray]
    config: TrainConfig
    metrics: list[dict] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.triggers)

    @property
    def topology(self) -> Topology:
        return self.inactive.topology

    def shared_tensors(self) -> dict[str, np.ndarray]:
        """Everything F and F' must agree on: base, A and router."""
        state = self.inactive.state_dict()
        return {k: v for k, v in state.items() if ".B." not in k}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for model in (self.inactive, self.active):
            for name, arr in sorted(model.state_dict().items()):
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        for x in self.probes_x:
            h.update(np.ascontiguousarray(x, dtype="<f4").tobytes())
        return h.hexdigest()


def _batches(n: int, batch: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch):
        yield perm[s:s + batch]


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float((np.argmax(logits, axis=-1) == y).mean()) if len(y) else 0.0


def _record(metrics, phase: str, epoch: int, **values) -> None:
    rec = {"phase": phase, "epoch": epoch}
    rec.update({k: float(v) for k, v in values.items()})
    metrics.append(rec)
    log.debug("%s", rec)


def pretrain_base(model: LoraClassifier, clean: CleanDataset, cfg: TrainConfig,
                  rng: np.random.Generator, metrics: list) -> None:
    params = model.base_parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.base_weight_decay)
    for epoch in range(cfg.epochs_base):
        total = 0.0
        for idx in _batches(len(clean.x_train), cfg.batch_size, rng):
            loss = ag.cross_entropy(model.forward(clean.x_train[idx], use_lora=False), clean.y_train[idx])
            ag.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        with ag.no_grad():
            acc = _accuracy(model.forward(clean.x_test, use_lora=False).data, clean.y_test)
        _record(metrics, "base", epoch, loss=total / len(clean.x_train), test_acc=acc)
    model.set_frozen(params, True)


def train_inactive(model: LoraClassifier, clean: CleanDataset, cfg: TrainConfig,
                   rng: np.random.Generator, metrics: list | None = None) -> float:
    """Fit A, every B_i and the router to the clean task with the base frozen.
    Returns held-out accuracy; raises TrainingFailure below the floor."""
    metrics = [] if metrics is None else metrics
    model.set_frozen(model.base_parameters(), True)
    params = model.lora_parameters() + model.router.parameters()
    model.set_frozen(params, False)
    opt = Adam(params, lr=cfg.lr)
    start = model.first_lora
    with ag.no_grad():
        h_train = model.features(clean.x_train).data
        h_test = model.features(clean.x_test).data
    for epoch in range(cfg.epochs_inactive):
        total = 0.0
        for idx in _batches(len(h_train), cfg.batch_size, rng):
            logits, _ = model.forward_from(h_train[idx], start)
            loss = ag.cross_entropy(logits, clean.y_train[idx])
            ag.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        with ag.no_grad():
            acc = _accuracy(model.forward_from(h_test, start)[0].data, clean.y_test)
        _record(metrics, "inactive", epoch, loss=total / len(h_train), test_acc=acc)
    with ag.no_grad():
        acc = _accuracy(model.forward_from(h_test, start)[0].data, clean.y_test)
    if acc < cfg.accuracy_floor:
        raise TrainingFailure("train_inactive", f"held-out accuracy {acc:.4f} below floor {cfg.accuracy_floor}")
    return acc


class _TriggerStream:
    """Cycles shuffled minibatches over the pooled triggered training set."""

    def __init__(self, arrays: tuple, batch: int, rng: np.random.Generator):
        self.arrays = arrays
        self.batch, self.rng = batch, rng
        self._queue = np.empty(0, dtype=np.int64)

    def next(self):
        size = len(self.arrays[0])
        if size == 0:
            return None
        while len(self._queue) < self.batch:
            self._queue = np.concatenate([self._queue, self.rng.permutation(size)])
        idx, self._queue = self._queue[: self.batch], self._queue[self.batch:]
        return tuple(a[idx] for a in self.arrays)


def _pool_triggers(model: LoraClassifier, bundle: DatasetBundle, bits_wanted=None):
    """Features, bit index, target label and original label of every
    triggered training sample."""
    bits_wanted = list(range(bundle.n) if bits_wanted is None else bits_wanted)
    xs, bits, ys, orig = [], [], [], []
    for b in bits_wanted:
        xs.append(bundle.wm_x[b])
        bits.append(np.full(len(bundle.wm_x[b]), b, dtype=np.int64))
        ys.append(bundle.wm_y[b])
        orig.append(bundle.y_clean[bundle.wm_index[b]])
    if not xs:
        d = model.topology.router_input_dim
        empty = np.zeros(0, np.int64)
        return np.zeros((0, d), np.float32), empty, empty, empty
    with ag.no_grad():
        h = model.features(np.concatenate(xs)).data
    return h, np.concatenate(bits), np.concatenate(ys), np.concatenate(orig)


def routing_accuracy(model: LoraClassifier, bundle: DatasetBundle, bits=None) -> float:
    bits = range(bundle.n) if bits is None else list(bits)
    hits = total = 0
    with ag.no_grad():
        for b in bits:
            omega = model.router(model.features(bundle.wm_test_x[b])).data
            hits += int((omega.argmax(axis=1) == b).sum())
            total += len(omega)
    return hits / total if total else 1.0


def share_parameters(active: LoraClassifier, inactive: LoraClassifier) -> None:
    """Make ``active`` use the very same base, ``A`` and router objects as
    ``inactive``; only the branch matrices stay separate."""
    _check_aligned(active, inactive)
    active.layers = inactive.layers
    for l, lora in active.loras.items():
        lora.A = inactive.loras[l].A
    active.router = inactive.router


def clean_routing(model: LoraClassifier, x: np.ndarray) -> np.ndarray:
    with ag.no_grad():
        return model.router(model.features(x)).data


def warmup_router(active: LoraClassifier, inactive: LoraClassifier, bundle: DatasetBundle,
                  cfg: TrainConfig, rng: np.random.Generator, metrics: list | None = None,
                  reference: np.ndarray | None = None) -> float:
    """Train only the router: route loss on triggered inputs plus a
    consistency penalty that keeps clean routing close to ``reference``
    (default: the inactive model's current routing on the clean set).
    Returns held-out routing accuracy."""
    metrics = [] if metrics is None else metrics
    others = active.base_parameters() + active.lora_parameters()
    active.set_frozen(others, True)
    params = active.router.parameters()
    active.set_frozen(params, False)
    opt = Adam(params, lr=cfg.lr)
    routed_bits = [b for b in range(bundle.n) if b not in cfg.route_disabled_bits]
    ref = clean_routing(inactive, bundle.x_clean) if reference is None else reference
    with ag.no_grad():
        h_clean = active.features(bundle.x_clean).data
    stream = _TriggerStream(_pool_triggers(active, bundle, routed_bits), cfg.batch_size, rng)
    for epoch in range(cfg.epochs_warmup):
        tot_route = tot_cons = 0.0
        steps = 0
        for idx in _batches(len(h_clean), cfg.batch_size, rng):
            loss = ag.scale(ag.mse(active.router(h_clean[idx]), ref[idx]), cfg.lambda_route_consistency)
            tot_cons += loss.item()
            trig = stream.next()
            if trig is not None:
                lr_ = route_loss_from_features(active.router, trig[0], trig[1])
                tot_route += lr_.item()
                loss = ag.add(loss, lr_)
            ag.backward(loss)
            opt.step()
            steps += 1
        _record(metrics, "warmup", epoch, route=tot_route / max(steps, 1),
                consistency=tot_cons / max(steps, 1),
                route_acc=routing_accuracy(active, bundle, routed_bits))
    acc = routing_accuracy(active, bundle, routed_bits)
    if routed_bits and cfg.epochs_warmup > 0 and acc < cfg.route_accuracy_floor:
        raise TrainingFailure("warmup_router", f"routing accuracy {acc:.4f} below {cfg.route_accuracy_floor}")
    return acc


def bit_success_rates(model, bundle: DatasetBundle) -> list[float]:
    out = []
    for b in range(bundle.n):
        logits = model.logits_np(bundle.wm_test_x[b])
        out.append(_accuracy(logits, bundle.wm_test_y[b]))
    return out


def mean_align_mse(active: LoraClassifier, inactive: LoraClassifier, x: np.ndarray) -> float:
    with ag.no_grad():
        return loss_align(active, inactive, x).item()


def perturbed_view(model: LoraClassifier, sigma: float, rng: np.random.Generator) -> LoraClassifier:
    """The same model with Gaussian noise of ``sigma`` times each base
    matrix's std added to its weights. Shares LoRA and router objects, so
    gradients still reach them; the base copies carry no gradient."""
    if sigma == 0:
        return model
    layers = []
    for layer in model.layers:
        w = layer.weight.data
        noisy = Dense.__new__(Dense)
        noisy.weight = ag.tensor(w + rng.normal(0.0, sigma * float(w.std()), size=w.shape).astype(w.dtype))
        noisy.bias = layer.bias
        layers.append(noisy)
    return LoraClassifier(model.topology, layers, model.loras, model.router)


def train_active(active: LoraClassifier, inactive: LoraClassifier, bundle: DatasetBundle,
                 cfg: TrainConfig, rng: np.random.Generator, metrics: list | None = None,
                 reference: np.ndarray | None = None, x_eval=None, y_eval=None) -> list[float]:
    """Embed one bit-watermark per branch.

    The two models share base, ``A`` and router (see ``share_parameters``).
    Each step combines, on a clean batch, the inactive model's task loss,
    the alignment loss (into the watermarked ``B`` only) and the routing
    consistency penalty, and on a triggered batch the route loss (router
    only) and the watermark loss (watermarked ``B`` and the shared ``A``).
    Returns per-bit success rates on the held-out triggers.
    """
    metrics = [] if metrics is None else metrics
    _check_aligned(active, inactive)
    if any(active.loras[l].A is not inactive.loras[l].A for l in active.loras) \
            or active.router is not inactive.router:
        raise ContractError("train_active needs models sharing A and router (share_parameters)")
    active.set_frozen(active.base_parameters(), True)
    wm_b = [b for l in sorted(active.loras) for b in active.loras[l].B]
    params = inactive.lora_parameters() + wm_b + inactive.router.parameters()
    active.set_frozen(params, False)
    opt = Adam(params, lr=cfg.lr)
    start = active.first_lora
    ref = clean_routing(inactive, bundle.x_clean) if reference is None else reference
    with ag.no_grad():
        h_clean = active.features(bundle.x_clean).data
    stream = _TriggerStream(_pool_triggers(active, bundle), cfg.batch_size, rng)
    routed = np.array([b not in cfg.route_disabled_bits for b in range(bundle.n)])
    for epoch in range(cfg.epochs_active):
        sums = {"utility": 0.0, "wm": 0.0, "align": 0.0, "route": 0.0, "consistency": 0.0,
                "negative": 0.0}
        steps = 0
        for idx in _batches(len(h_clean), cfg.batch_size, rng):
            hc = h_clean[idx]
            omega_c = inactive.router(hc)
            logits_c, _ = inactive.forward_from(hc, start, omega=omega_c)
            util = ag.cross_entropy(logits_c, bundle.y_clean[idx])
            cons = ag.scale(ag.mse(omega_c, ref[idx]), cfg.lambda_route_consistency)
            loss = ag.add(util, cons)
            sums["utility"] += util.item()
            sums["consistency"] += cons.item()
            if cfg.use_align:
                al = align_loss_from_features(active, inactive, hc)
                sums["align"] += al.item()
                loss = ag.add(loss, al)
            trig = stream.next()
            if trig is not None:
                ht, bt, yt, yo = trig
                keep = routed[bt]
                if keep.any():
                    rl = route_loss_from_features(active.router, ht[keep], bt[keep])
                    sums["route"] += rl.item()
                    loss = ag.add(loss, rl)
                with ag.no_grad():
                    omega_t = active.router(ht)
                # trigger losses see a randomly perturbed base, which buys
                # margin against later drift of the base weights
                noisy_active = perturbed_view(active, cfg.wm_weight_noise, rng)
                noisy_inactive = LoraClassifier(inactive.topology, noisy_active.layers,
                                                inactive.loras, inactive.router)
                logits_t, _ = noisy_active.forward_from(ht, start, omega=omega_t)
                wm = ag.cross_entropy(logits_t, yt)
                sums["wm"] += wm.item()
                # clean branches must ignore the trigger even when routed one-hot
                logits_n, _ = noisy_inactive.forward_from(ht, start, omega=omega_t)
                neg = ag.cross_entropy(logits_n, yo)
                sums["negative"] += neg.item()
                loss = ag.add(ag.add(loss, wm), neg)
            ag.backward(loss)
            opt.step()
            steps += 1
        rec = {k: v / max(steps, 1) for k, v in sums.items()}
        if x_eval is not None:
            rec["inactive_acc"] = _accuracy(inactive.logits_np(x_eval), y_eval)
            rec["active_acc"] = _accuracy(active.logits_np(x_eval), y_eval)
        _record(metrics, "active", epoch, **rec)
    rates = bit_success_rates(active, bundle)
    # bits trained without the route loss are expected to be weak; the
    # ablation is judged by hot-swap verification instead
    failed = [b for b, r in enumerate(rates)
              if r < cfg.bit_success_floor and b not in cfg.route_disabled_bits]
    if cfg.epochs_active > 0 and failed:
        raise TrainingFailure("train_active", f"bits {failed} below success floor "
                              f"{cfg.bit_success_floor}: {[round(rates[b], 3) for b in failed]}")
    return rates


def train_pair(clean: CleanDataset, triggers: list[TriggerSpec], cfg: TrainConfig,
               metrics: list | None = None) -> ModelPair:
    """Base pretraining, clean LoRA training, copy, router warm-up and
    watermark embedding; ends with F and F' sharing base, A and router."""
    metrics = [] if metrics is None else metrics
    if len(triggers) != cfg.n_bits:
        raise ValueError(f"{len(triggers)} triggers for {cfg.n_bits} bits")
    rng = make_rng(cfg.seed)
    model = LoraClassifier.create(cfg.topology(), rng)
    bundle = build_bundle(clean, triggers, cfg.wm_ratio, rng, cfg.probe_size, cfg.min_wm_per_bit)

    pretrain_base(model, clean, cfg, rng, metrics)
    acc_f = train_inactive(model, clean, cfg, rng, metrics)
    inactive = model
    active = model.copy()
    share_parameters(active, inactive)
    reference = clean_routing(inactive, clean.x_train)
    reference_test = clean_routing(inactive, clean.x_test)
    warmup_router(active, inactive, bundle, cfg, rng, metrics, reference)
    rates = train_active(active, inactive, bundle, cfg, rng, metrics, reference,
                         clean.x_test, clean.y_test)

    # detach the two models; shared tensors stay bit-identical
    active = active.copy()
    for p in inactive.parameters() + active.parameters():
        p.frozen = True
    pair = ModelPair(inactive, active, list(triggers), bundle.wm_test_x, bundle.wm_test_y, cfg, metrics)
    _record(metrics, "pair", 0, inactive_acc_clean_phase=acc_f,
            inactive_acc=_accuracy(inactive.logits_np(clean.x_test), clean.y_test),
            active_acc=_accuracy(active.logits_np(clean.x_test), clean.y_test),
            align_mse=mean_align_mse(active, inactive, clean.x_test),
            min_bit_success=min(rates) if rates else 1.0,
            inactive_max_bit_rate=max(bit_success_rates(inactive, bundle), default=0.0),
            clean_routing_drift_l1=float(np.abs(clean_routing(inactive, clean.x_test) - reference_test)
                                         .sum(axis=1).mean()))
    return pair
