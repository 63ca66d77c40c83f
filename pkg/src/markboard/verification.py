"""Black-box signature extraction and leak attribution.

Everything here sees a suspect model only as a callable mapping a batch of
inputs to logits.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

ForwardFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TriggerBank:
    """Held-out triggered probes and target label for every bit."""

    probes: tuple[np.ndarray, ...]
    targets: tuple[int, ...]

    def __post_init__(self):
        if len(self.probes) != len(self.targets):
            raise ValueError("one target per probe set")

    @property
    def n(self) -> int:
        return len(self.probes)

    @classmethod
    def from_pair(cls, pair) -> "TriggerBank":
        return cls(tuple(pair.probes_x), tuple(t.target for t in pair.triggers))


@dataclass(frozen=True)
class VerificationPolicy:
    epsilon: tuple[float, ...] | float = 0.7
    tau: int | None = None          # None means n: exact match
    num_classes: int = 10

    def thresholds(self, n: int) -> list[float]:
        eps = [self.epsilon] * n if np.isscalar(self.epsilon) else list(self.epsilon)
        if len(eps) != n:
            raise ValueError(f"{len(eps)} thresholds for {n} bits")
        for e in eps:
            if not 1.0 / self.num_classes < e < 1.0:
                raise ValueError(f"threshold {e} must lie in (1/C, 1)")
        return [float(e) for e in eps]

    def resolved_tau(self, n: int) -> int:
        tau = n if self.tau is None else int(self.tau)
        if not 0 <= tau <= n:
            raise ValueError(f"tau must lie in [0, {n}], got {tau}")
        return tau


def probe_bit(model: ForwardFn, probes: np.ndarray, target: int) -> float:
    probes = np.asarray(probes)
    if len(probes) == 0:
        raise ValueError("empty probe set")
    pred = np.argmax(np.asarray(model(probes)), axis=-1)
    return float(np.mean(pred == target))


def probe_rates(model: ForwardFn, bank: TriggerBank) -> list[float]:
    return [probe_bit(model, x, t) for x, t in zip(bank.probes, bank.targets)]


def extract_signature(model: ForwardFn, bank: TriggerBank,
                      policy: VerificationPolicy = VerificationPolicy()) -> tuple[int, ...]:
    """Raw candidate bitstring; may be all zeros or all ones."""
    rates = probe_rates(model, bank)
    return tuple(int(r > e) for r, e in zip(rates, policy.thresholds(bank.n)))


def match_score(a: Sequence[int], b: Sequence[int]) -> int:
    a, b = tuple(a), tuple(b)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    return sum(x == y for x, y in zip(a, b))


def _bits(sig) -> tuple[int, ...]:
    return tuple(getattr(sig, "bits", sig))


def flag_leak(extracted, registry: Mapping[str, object], tau: int) -> tuple[bool, int]:
    if not registry:
        raise ValueError("empty registry")
    best = max(match_score(extracted, _bits(s)) for s in registry.values())
    return best >= tau, best


def attribute(extracted, registry: Mapping[str, object]) -> tuple[str, int, bool]:
    """Best-matching user. Ties go to the lexicographically smallest id and
    set the ambiguity flag."""
    if not registry:
        raise ValueError("empty registry")
    scores = {u: match_score(extracted, _bits(s)) for u, s in registry.items()}
    best = max(scores.values())
    winners = sorted(u for u, v in scores.items() if v == best)
    return winners[0], best, len(winners) > 1


@dataclass
class VerificationReport:
    rates: list[float]
    extracted: str
    best_user: str | None
    best_score: int
    tau: int
    flagged: bool
    ambiguous: bool
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def verify(model: ForwardFn, bank: TriggerBank, registry: Mapping[str, object],
           policy: VerificationPolicy = VerificationPolicy()) -> VerificationReport:
    rates = probe_rates(model, bank)
    eps = policy.thresholds(bank.n)
    extracted = tuple(int(r > e) for r, e in zip(rates, eps))
    tau = policy.resolved_tau(bank.n)
    flagged, best = flag_leak(extracted, registry, tau)
    user, _, ambiguous = attribute(extracted, registry)
    return VerificationReport(
        rates=[round(r, 6) for r in rates],
        extracted="".join(map(str, extracted)),
        best_user=user if flagged else None,
        best_score=best,
        tau=tau,
        flagged=flagged,
        ambiguous=ambiguous if flagged else False,
    )


def hot_swap_bits(forward_for: Callable[[tuple[int, ...]], ForwardFn], bank: TriggerBank,
                  policy: VerificationPolicy = VerificationPolicy(),
                  rng: np.random.Generator | None = None, trials: int = 4) -> list[bool]:
    """Per-bit check that toggling branch ``i`` between clean and watermarked
    toggles extracted bit ``i`` and nothing else. ``forward_for(bits)``
    builds a model for a signature. Tested signatures: the single-bit
    vector, its complement, and ``trials`` random backgrounds."""
    n = bank.n
    rng = rng if rng is not None else np.random.default_rng(0)
    backgrounds = [tuple([0] * n), tuple([1] * n)]
    backgrounds += [tuple(int(b) for b in rng.integers(0, 2, n)) for _ in range(trials)]
    cache: dict[tuple[int, ...], tuple[int, ...]] = {}

    def extracted(bits):
        if bits not in cache:
            cache[bits] = extract_signature(forward_for(bits), bank, policy)
        return cache[bits]

    ok = [True] * n
    for i in range(n):
        for bg in backgrounds:
            on = tuple(1 if j == i else b for j, b in enumerate(bg))
            off = tuple(0 if j == i else b for j, b in enumerate(bg))
            if extracted(on)[i] != 1 or extracted(off)[i] != 0:
                ok[i] = False
                break
    return ok
