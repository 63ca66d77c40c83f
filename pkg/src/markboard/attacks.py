"""Attacks on distributed user models and the metrics used to score them.

Every attack is a model-in, model-out transform on a copy of the user's
model; the pair, the obfuscation seeds and the registry are never touched.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .distribution import UserModel, UserModelArtifact
from .optim import Adam, make_rng
from .verification import TriggerBank, VerificationPolicy, attribute, extract_signature, match_score

Transform = Callable[..., UserModel]
ATTACKS: dict[str, Transform] = {}


def register_attack(name: str):
    """Decorator adding a transform to the harness under ``name``."""
    def wrap(fn: Transform) -> Transform:
        ATTACKS[name] = fn
        return fn
    return wrap


def _model(m) -> UserModel:
    return m.model() if isinstance(m, UserModelArtifact) else m


@register_attack("escape")
def escape_attack(model) -> UserModel:
    """Drop every branch delta and the router, leaving ``W0 + psi``."""
    out = _model(model).copy()
    out.deltas = {}
    return out


@register_attack("collude")
def collusion_swap(model_a, model_b, branches=()) -> UserModel:
    a, b = _model(model_a), _model(model_b)
    if a.topology != b.topology:
        raise ValueError("collusion needs two models of the same topology")
    out = a.copy()
    for i in branches:
        if not 0 <= i < a.n:
            raise IndexError(f"branch {i} out of range for {a.n} branches")
        for l in out.deltas:
            out.deltas[l].data[i] = b.deltas[l].data[i]
    return out


@register_attack("prune")
def prune_model(model, rate: float) -> UserModel:
    """Global magnitude pruning: zero the smallest ``rate`` fraction of all
    weight matrices (base, deltas and router) taken together."""
    if not 0 <= rate < 1:
        raise ValueError(f"prune rate must lie in [0, 1), got {rate}")
    out = _model(model).copy()
    if rate == 0:
        return out
    mats = [p for p in out.parameters() if p.data.ndim > 1]
    mags = np.concatenate([np.abs(p.data).ravel() for p in mats])
    k = int(np.floor(rate * mags.size))
    if k == 0:
        return out
    cut = np.partition(mags, k - 1)[k - 1]
    # prune exactly k entries, breaking ties by position
    budget = k - int((mags < cut).sum())
    for p in mats:
        mask = np.abs(p.data) < cut
        tie = np.flatnonzero(np.abs(p.data).ravel() == cut)
        if budget > 0 and tie.size:
            take = tie[:budget]
            mask.ravel()[take] = True
            budget -= take.size
        p.data[mask] = 0.0
    return out


@register_attack("finetune")
def finetune_model(model, x: np.ndarray, y: np.ndarray, epochs: int, *, fraction: float = 0.3,
                   lr: float = 1e-3, batch_size: int = 64, seed: int = 0) -> UserModel:
    """Full fine-tuning of every distributed tensor on a random ``fraction``
    of the clean data, with Adam."""
    out = _model(model).copy()
    if epochs <= 0 or fraction <= 0:
        return out
    rng = make_rng(seed)
    count = max(1, int(round(fraction * len(x))))
    idx = rng.choice(len(x), size=count, replace=False)
    xs, ys = x[idx], y[idx]
    params = out.parameters()
    opt = Adam(params, lr=lr)
    for _ in range(epochs):
        order = rng.permutation(count)
        for s in range(0, count, batch_size):
            b = order[s:s + batch_size]
            loss = ag.cross_entropy(out(xs[b]), ys[b])
            ag.backward(loss)
            opt.step()
    return out


@dataclass
class AttackReport:
    kind: str
    params: dict
    cdp_pre: float
    cdp_post: float
    bit_acc: float
    id_acc: int
    extracted: str
    assigned: str
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def row(self) -> dict:
        param = next(iter(self.params.values()), "") if len(self.params) == 1 else json.dumps(self.params)
        return {"attack": self.kind, "param": param, "cdp": round(self.cdp_post, 6),
                "bit_acc": round(self.bit_acc, 6), "id_acc": self.id_acc}


def clean_accuracy(model, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(_model(model).predict(x) == y))


def evaluate(model, x_test: np.ndarray, y_test: np.ndarray, bank: TriggerBank,
             registry: dict, user: str, policy: VerificationPolicy = VerificationPolicy(),
             kind: str = "none", params: dict | None = None, cdp_pre: float | None = None) -> AttackReport:
    """CDP, Bit-Acc against ``user``'s assigned signature and Id-Acc (1 when
    the leak is flagged at ``tau`` and attributed to ``user`` without a tie)."""
    m = _model(model)
    cdp = clean_accuracy(m, x_test, y_test)
    ext = extract_signature(m.logits_np, bank, policy)
    assigned = tuple(getattr(registry[user], "bits", registry[user]))
    best, score, ambiguous = attribute(ext, registry)
    flagged = score >= policy.resolved_tau(len(assigned))
    return AttackReport(
        kind=kind,
        params=dict(params or {}),
        cdp_pre=cdp if cdp_pre is None else cdp_pre,
        cdp_post=cdp,
        bit_acc=match_score(ext, assigned) / len(assigned),
        id_acc=int(flagged and best == user and not ambiguous),
        extracted="".join(map(str, ext)),
        assigned="".join(map(str, assigned)),
    )


def sweep(kind: str, values, model, x_test, y_test, bank, registry, user,
          policy: VerificationPolicy = VerificationPolicy(), **kwargs) -> list[AttackReport]:
    """Apply attack ``kind`` once per value of its main parameter."""
    fn = ATTACKS[kind]
    key = {"prune": "rate", "finetune": "epochs"}.get(kind, "value")
    base = clean_accuracy(model, x_test, y_test)
    out = []
    for v in values:
        attacked = fn(model, **{key: v}, **kwargs)
        out.append(evaluate(attacked, x_test, y_test, bank, registry, user, policy,
                            kind=kind, params={key: v}, cdp_pre=base))
    return out


CSV_FIELDS = ("attack", "param", "cdp", "bit_acc", "id_acc")


def write_csv(reports: list[AttackReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
