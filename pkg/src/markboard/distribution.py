"""Minting user models from a trained pair: signature assignment, branch
substitution, parameter obfuscation and the on-disk artifact formats."""

from __future__ import annotations

import base64
import contextlib
import copy
import datetime as _dt
import fcntl
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Parameter
from .model import Dense, LoraClassifier, Router, Topology, branch_delta
from .optim import make_rng
from .watermark import ModelPair, TrainConfig, TriggerSpec

FORMAT_VERSION = 1
REGISTRY_VERSION = 1
# entry std of the obfuscation matrix, in units of std(W0)
DEFAULT_PSI_SCALE = 8.0


class LoadError(ValueError):
    """A file could not be loaded; the message names the cause."""


class SignatureSpaceExhausted(RuntimeError):
    pass


class DuplicateUser(ValueError):
    pass


def utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat().replace("+00:00", "Z")


# --- signatures --------------------------------------------------------------

@dataclass(frozen=True)
class Signature:
    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("signature bits must be 0 or 1")
        if len(self.bits) == 0:
            raise ValueError("empty signature")

    @classmethod
    def from_string(cls, s: str) -> "Signature":
        return cls(tuple(int(c) for c in s.strip()))

    def __str__(self) -> str:
        return "".join(map(str, self.bits))

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def distributable(self) -> bool:
        """All-zero and all-one strings belong to the pair itself."""
        return 0 < sum(self.bits) < len(self.bits)


def sample_signature(n: int, taken, rng: np.random.Generator) -> Signature:
    """Uniform draw over the 2^n - 2 distributable signatures not in ``taken``
    (a collection of Signature or bitstrings)."""
    taken = {str(s) for s in taken}
    space = 2 ** n - 2
    if len(taken) >= space:
        raise SignatureSpaceExhausted(f"all {space} distributable {n}-bit signatures are assigned")
    if len(taken) > space // 2:
        free = [v for v in range(1, 2 ** n - 1) if format(v, f"0{n}b") not in taken]
        return Signature.from_string(format(free[int(rng.integers(len(free)))], f"0{n}b"))
    while True:
        bits = tuple(int(b) for b in rng.integers(0, 2, size=n))
        sig = Signature(bits)
        if sig.distributable and str(sig) not in taken:
            return sig


# --- obfuscation ---------------------------------------------------------------

def obfuscation_matrix(w0: np.ndarray, seed: int, scale: float = DEFAULT_PSI_SCALE,
                       max_tries: int = 8) -> np.ndarray:
    """Gaussian matrix shaped like ``w0`` with entry std ``scale * std(w0)``.

    Redrawn until it is full rank and its Frobenius norm lies within
    [0.5, 2] of ``scale * ||w0||``.
    """
    if not scale > 0:
        raise ValueError("psi scale must be positive")
    rng = make_rng(seed)
    sigma = float(np.std(w0)) * scale
    target = scale * float(np.linalg.norm(w0))
    d, k = w0.shape
    for _ in range(max_tries):
        psi = (rng.standard_normal((d, k)) * sigma).astype(np.float32)
        if not 0.5 <= float(np.linalg.norm(psi)) / target <= 2.0:
            continue
        gram = psi @ psi.T if d <= k else psi.T @ psi
        try:
            np.linalg.cholesky(gram.astype(np.float64))
        except np.linalg.LinAlgError:
            continue
        return psi
    raise RuntimeError("could not draw a full-rank obfuscation matrix")


def obfuscate(w0: np.ndarray, deltas: list[np.ndarray], psi: np.ndarray):
    """``W0' = W0 + psi`` and ``delta'_i = delta_i - psi`` for every branch.
    Because routing weights sum to one, every input sees the same effective
    weight as before."""
    if w0.shape != psi.shape or any(d.shape != psi.shape for d in deltas):
        raise DimensionError("obfuscation needs W0, deltas and psi of one shape")
    return w0 + psi, [d - psi for d in deltas]


# --- user model -----------------------------------------------------------------

class UserModel:
    """Evaluable model built from dense per-branch deltas.

    Parameters are autograd Parameters so an attacker-side fine-tune can
    train them directly.
    """

    def __init__(self, topology: Topology, tensors: dict[str, np.ndarray]):
        self.topology = topology
        sizes = topology.sizes
        self.layers: list[Dense] = []
        for l in range(topology.num_layers):
            layer = Dense(sizes[l], sizes[l + 1], None, name=f"layers.{l}")
            layer.weight.data = _f32(tensors[f"layers.{l}.weight"], layer.weight.shape)
            layer.bias.data = _f32(tensors[f"layers.{l}.bias"], layer.bias.shape)
            self.layers.append(layer)
        # branch deltas of one layer are kept stacked: [n, d, k]
        self.deltas: dict[int, Parameter] = {}
        for l in topology.lora_layers:
            shape = (sizes[l], sizes[l + 1])
            stack = np.stack([_f32(tensors[f"lora.{l}.delta.{i}"], shape) for i in range(topology.n_bits)])
            self.deltas[l] = Parameter(stack, name=f"lora.{l}.delta")
        self.router = Router(topology.router_input_dim, topology.router_hidden, topology.n_bits)
        for p in self.router.parameters():
            p.data = _f32(tensors[p.name], p.shape)
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    @property
    def n(self) -> int:
        return self.topology.n_bits

    def parameters(self) -> list[Parameter]:
        out = [p for layer in self.layers for p in layer.parameters()]
        out += [self.deltas[l] for l in sorted(self.deltas)]
        return out + self.router.parameters()

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat tensor table in artifact naming (one entry per branch)."""
        out = {}
        for p in self.parameters():
            if p.data.ndim == 3:
                for i, d in enumerate(p.data):
                    out[f"{p.name}.{i}"] = d
            else:
                out[p.name] = p.data
        return out

    def copy(self) -> "UserModel":
        return copy.deepcopy(self)

    def forward(self, x, use_deltas: bool = True) -> ag.Tensor:
        if isinstance(x, np.ndarray) and x.ndim == 1:
            return self.forward(x[None, :], use_deltas)[0]
        h = ag._as_tensor(x)
        if h.data.ndim != 2 or h.shape[-1] != self.topology.input_dim:
            raise DimensionError(f"model expects input dim {self.topology.input_dim}, got {h.shape[-1]}")
        omega = None
        last = len(self.layers) - 1
        for l, layer in enumerate(self.layers):
            z = layer(h)
            if use_deltas and l in self.deltas:
                if omega is None:
                    omega = self.router(h)
                z = ag.add(z, ag.routed_matmul(h, omega, self.deltas[l]))
            h = ag.relu(z) if l < last else z
        return h

    __call__ = forward

    def logits_np(self, x: np.ndarray, batch: int = 1000) -> np.ndarray:
        """Plain numpy inference; the effective weight per sample is
        ``W0' + sum_i omega_i delta'_i``."""
        x = np.asarray(x, dtype=np.float32)
        single = x.ndim == 1
        x = x[None, :] if single else x
        outs = [self._np_forward(x[i:i + batch]) for i in range(0, len(x), batch)]
        out = np.concatenate(outs) if outs else np.zeros((0, self.topology.num_classes), np.float32)
        return out[0] if single else out

    def _np_forward(self, x: np.ndarray) -> np.ndarray:
        # float64 accumulation: the obfuscated terms are large and cancel
        # between W0' and the deltas, so float32 sums lose digits
        h = x.astype(np.float64)
        omega = None
        last = len(self.layers) - 1
        for l, layer in enumerate(self.layers):
            z = h @ layer.weight.data + layer.bias.data
            if l in self.deltas:
                if omega is None:
                    r = self.router
                    a = np.maximum(h @ r.fc1.weight.data + r.fc1.bias.data, 0)
                    logits = a @ r.fc2.weight.data + r.fc2.bias.data
                    e = np.exp(logits - logits.max(axis=1, keepdims=True))
                    omega = e / e.sum(axis=1, keepdims=True)
                n, d, k = self.deltas[l].shape
                mixed = (omega[:, :, None] * h[:, None, :]).reshape(len(h), n * d)
                z = z + mixed @ self.deltas[l].data.reshape(n * d, k)
            h = np.maximum(z, 0) if l < last else z
        return h.astype(np.float32)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits_np(x), axis=-1)


def _f32(arr, shape) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if tuple(arr.shape) != tuple(shape):
        raise DimensionError(f"tensor shape {arr.shape} != expected {tuple(shape)}")
    return arr.copy()


# --- artifacts -------------------------------------------------------------------

@dataclass
class UserModelArtifact:
    topology: Topology
    tensors: dict[str, np.ndarray]
    minted_at: str
    config: dict = field(default_factory=dict)
    kind: str = "user"
    format_version: int = FORMAT_VERSION

    @property
    def n(self) -> int:
        return self.topology.n_bits

    def model(self) -> UserModel:
        return UserModel(self.topology, self.tensors)

    def checksum(self) -> str:
        return _checksum(_manifest(self))


def mint(pair: ModelPair, signature: Signature, psi_seed: int | None, *, psi_scale: float = DEFAULT_PSI_SCALE,
         minted_at: str | None = None, allow_degenerate: bool = False) -> UserModelArtifact:
    """Copy branch ``i`` from the watermarked model where ``s_i = 1`` and from
    the clean model otherwise, expand to dense deltas and obfuscate with the
    matrix drawn from ``psi_seed`` (``None`` skips obfuscation; test only).
    Pure array arithmetic: no gradients are computed."""
    if len(signature) != pair.n:
        raise ValueError(f"signature has {len(signature)} bits, pair has {pair.n}")
    if not signature.distributable and not allow_degenerate:
        raise ValueError(f"signature {signature} is reserved (all zeros or all ones)")
    topo = pair.topology
    tensors: dict[str, np.ndarray] = {}
    for l, layer in enumerate(pair.inactive.layers):
        tensors[f"layers.{l}.weight"] = layer.weight.data.copy()
        tensors[f"layers.{l}.bias"] = layer.bias.data.copy()
    for p in pair.inactive.router.parameters():
        tensors[p.name] = p.data.copy()
    for j, l in enumerate(sorted(topo.lora_layers)):
        deltas = [
            branch_delta((pair.active if bit else pair.inactive).loras[l], i)
            for i, bit in enumerate(signature.bits)
        ]
        w0 = tensors[f"layers.{l}.weight"]
        if psi_seed is not None:
            psi = obfuscation_matrix(w0, _layer_seed(psi_seed, j), psi_scale)
            w0, deltas = obfuscate(w0, deltas, psi)
        tensors[f"layers.{l}.weight"] = w0.astype(np.float32)
        for i, d in enumerate(deltas):
            tensors[f"lora.{l}.delta.{i}"] = d.astype(np.float32)
    return UserModelArtifact(topo, tensors, minted_at or utc_now(), pair.config.to_dict())


def _layer_seed(psi_seed: int, j: int) -> int:
    return (int(psi_seed) + 0x9E3779B97F4A7C15 * j) & 0xFFFFFFFFFFFFFFFF


def _encode(name: str, arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {"name": name, "shape": list(arr.shape), "dtype": "f32",
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(entry: dict) -> np.ndarray:
    if entry.get("dtype") != "f32":
        raise LoadError(f"tensor {entry.get('name')!r}: unsupported dtype {entry.get('dtype')!r}")
    raw = base64.b64decode(entry["data"], validate=True)
    shape = tuple(int(s) for s in entry["shape"])
    if len(raw) != 4 * int(np.prod(shape, dtype=np.int64)):
        raise LoadError(f"tensor {entry['name']!r}: payload length does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def _checksum(manifest: dict) -> str:
    return hashlib.sha256(_canonical(manifest)).hexdigest()


def _manifest(artifact) -> dict:
    if isinstance(artifact, UserModelArtifact):
        return {
            "format_version": artifact.format_version,
            "kind": "user",
            "n": artifact.n,
            "topology": artifact.topology.to_dict(),
            "config": artifact.config,
            "minted_at": artifact.minted_at,
            "tensors": [_encode(k, artifact.tensors[k]) for k in sorted(artifact.tensors)],
        }
    if isinstance(artifact, ModelPair):
        return _pair_manifest(artifact)
    raise TypeError(f"cannot serialize {type(artifact).__name__}")


def _pair_manifest(pair: ModelPair) -> dict:
    tensors = dict(pair.inactive.state_dict())
    for l in sorted(pair.active.loras):
        for i, b in enumerate(pair.active.loras[l].B):
            tensors[f"lora.{l}.Bwm.{i}"] = b.data
    for i, x in enumerate(pair.probes_x):
        tensors[f"probe.{i}"] = x
    return {
        "format_version": FORMAT_VERSION,
        "kind": "pair",
        "n": pair.n,
        "topology": pair.topology.to_dict(),
        "config": pair.config.to_dict(),
        "triggers": [t.to_dict() for t in pair.triggers],
        "tensors": [_encode(k, tensors[k]) for k in sorted(tensors)],
    }


def dumps(artifact) -> bytes:
    manifest = _manifest(artifact)
    manifest["checksum"] = _checksum(manifest)
    return _canonical(manifest) + b"\n"


def serialize_artifact(artifact, path) -> str:
    """Write a user or pair artifact; returns its checksum."""
    data = dumps(artifact)
    _atomic_write(Path(path), data)
    return json.loads(data)["checksum"]


def _parse(data: bytes) -> dict:
    try:
        manifest = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LoadError(f"truncated or malformed artifact: {exc}") from None
    if not isinstance(manifest, dict):
        raise LoadError("truncated or malformed artifact: top level is not an object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    stored = manifest.pop("checksum", None)
    if stored is None:
        raise LoadError("artifact has no checksum field")
    if _checksum(manifest) != stored:
        raise LoadError("checksum mismatch: artifact is corrupted or was modified")
    return manifest


def loads(data: bytes):
    manifest = _parse(data)
    try:
        topology = Topology.from_dict(manifest["topology"])
        tensors = {e["name"]: _decode(e) for e in manifest["tensors"]}
        kind = manifest["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, LoadError):
            raise
        raise LoadError(f"malformed artifact: {exc}") from None
    if manifest.get("n") != topology.n_bits:
        raise LoadError(f"n mismatch inside artifact: n={manifest.get('n')} topology={topology.n_bits}")
    if kind == "user":
        return UserModelArtifact(topology, tensors, manifest["minted_at"], manifest.get("config", {}))
    if kind == "pair":
        return _pair_from(manifest, topology, tensors)
    raise LoadError(f"unknown artifact kind {kind!r}")


def deserialize_artifact(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from None
    return loads(data)


def _pair_from(manifest: dict, topology: Topology, tensors: dict) -> ModelPair:
    cfg = TrainConfig.from_dict(manifest["config"])
    inactive = LoraClassifier.create(topology, make_rng(0))
    inactive.load_state_dict(tensors)
    active = inactive.copy()
    for l in sorted(active.loras):
        for i, b in enumerate(active.loras[l].B):
            b.data = tensors[f"lora.{l}.Bwm.{i}"].copy()
    for p in inactive.parameters() + active.parameters():
        p.frozen = True
    triggers = [TriggerSpec.from_dict(t) for t in manifest["triggers"]]
    probes_x = [tensors[f"probe.{i}"] for i in range(len(triggers))]
    probes_y = [np.full(len(x), t.target, dtype=np.int64) for x, t in zip(probes_x, triggers)]
    return ModelPair(inactive, active, triggers, probes_x, probes_y, cfg)


def load_user_artifact(path, expected_n: int | None = None) -> UserModelArtifact:
    art = deserialize_artifact(path)
    if not isinstance(art, UserModelArtifact):
        raise LoadError(f"{path} is a {type(art).__name__}, not a user model")
    if expected_n is not None and art.n != expected_n:
        raise LoadError(f"n mismatch: model carries {art.n} bits, trigger bank has {expected_n}")
    return art


def load_pair(path) -> ModelPair:
    art = deserialize_artifact(path)
    if not isinstance(art, ModelPair):
        raise LoadError(f"{path} is not a pair artifact")
    return art


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


# --- registry -------------------------------------------------------------------

@dataclass(frozen=True)
class MintRecord:
    user_id: str
    signature: Signature
    minted_at: str
    psi_seed: int
    artifact_checksum: str

    def to_dict(self) -> dict:
        return {"user_id": self.user_id, "signature": str(self.signature), "psi_seed": self.psi_seed,
                "minted_at": self.minted_at, "artifact_checksum": self.artifact_checksum}

    @classmethod
    def from_dict(cls, d: dict) -> "MintRecord":
        return cls(d["user_id"], Signature.from_string(d["signature"]), d["minted_at"],
                   int(d["psi_seed"]), d["artifact_checksum"])


@dataclass
class SignatureRegistry:
    n: int
    records: dict[str, MintRecord] = field(default_factory=dict)
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, user_id: str) -> bool:
        return user_id in self.records

    def signatures(self) -> dict[str, Signature]:
        return {u: r.signature for u, r in self.records.items()}

    def add(self, record: MintRecord) -> None:
        if record.user_id in self.records:
            raise DuplicateUser(f"user {record.user_id!r} is already registered")
        if len(record.signature) != self.n:
            raise ValueError(f"signature length {len(record.signature)} != registry n {self.n}")
        if any(r.signature == record.signature for r in self.records.values()):
            raise ValueError(f"signature {record.signature} already assigned")
        self.records[record.user_id] = record

    def to_dict(self) -> dict:
        return {"version": REGISTRY_VERSION, "n": self.n,
                "users": [self.records[u].to_dict() for u in sorted(self.records)]}

    def save(self, path=None) -> None:
        path = Path(path or self.path)
        _atomic_write(path, json.dumps(self.to_dict(), indent=2, sort_keys=True).encode() + b"\n")
        self.path = path

    @classmethod
    def load(cls, path) -> "SignatureRegistry":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise LoadError(f"cannot read registry {path}: {exc}") from None
        if d.get("version") != REGISTRY_VERSION:
            raise LoadError(f"unsupported registry version {d.get('version')!r}")
        reg = cls(int(d["n"]), path=path)
        for u in d.get("users", []):
            reg.add(MintRecord.from_dict(u))
        return reg

    @classmethod
    def open(cls, path, n: int) -> "SignatureRegistry":
        """Load ``path`` if it exists, else start an empty registry there."""
        path = Path(path)
        if path.exists():
            reg = cls.load(path)
            if reg.n != n:
                raise LoadError(f"registry is for {reg.n}-bit signatures, pair has {n}")
            return reg
        return cls(n, path=path)


@contextlib.contextmanager
def registry_lock(path):
    """Exclusive advisory lock held while a registry file is rewritten."""
    lock_path = Path(str(path) + ".lock")
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    with open(lock_path, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def mint_batch(pair: ModelPair, registry: SignatureRegistry, user_ids: list[str],
               rng: np.random.Generator, *, psi_scale: float = DEFAULT_PSI_SCALE,
               minted_at: str | None = None) -> list[tuple[MintRecord, UserModelArtifact]]:
    """Mint one model per user. The registry is only updated if every user
    succeeds."""
    if len(set(user_ids)) != len(user_ids):
        raise DuplicateUser("duplicate user ids in batch")
    for u in user_ids:
        if u in registry:
            raise DuplicateUser(f"user {u!r} is already registered")
    if registry.n != pair.n:
        raise ValueError(f"registry is for {registry.n} bits, pair has {pair.n}")
    taken = {str(s) for s in registry.signatures().values()}
    out = []
    for u in user_ids:
        sig = sample_signature(pair.n, taken, rng)
        taken.add(str(sig))
        seed = int(rng.integers(0, 2 ** 63 - 1))
        art = mint(pair, sig, seed, psi_scale=psi_scale, minted_at=minted_at)
        out.append((MintRecord(u, sig, art.minted_at, seed, art.checksum()), art))
    for rec, _ in out:
        registry.add(rec)
    return out
