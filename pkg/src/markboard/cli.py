"""Command-line entry point: ``markboard <command> ...``.

Exit codes: 0 success (or leak flagged), 1 not flagged / training failure,
2 usage or schema error, 3 duplicate user, 4 signature space exhausted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import attacks
from .distribution import (
    DEFAULT_PSI_SCALE,
    DuplicateUser,
    LoadError,
    Signature,
    SignatureRegistry,
    SignatureSpaceExhausted,
    load_pair,
    load_user_artifact,
    mint,
    mint_batch,
    registry_lock,
    serialize_artifact,
)
from .optim import make_rng
from .plotting import plot_sweep
from .verification import TriggerBank, VerificationPolicy, attribute, extract_signature, verify
from .watermark import TrainConfig, TrainingFailure, clean_dataset, config_triggers, train_pair

EXIT_OK, EXIT_NOT_FLAGGED, EXIT_USAGE, EXIT_DUPLICATE, EXIT_EXHAUSTED = 0, 1, 2, 3, 4
SEED_ENV = "MARKBOARD_SEED"

log = logging.getLogger("markboard")


class UsageError(Exception):
    pass


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def load_config(path: str | None) -> TrainConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
    seed = _env_seed()
    if seed is not None:
        data = {**data, "seed": seed}
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config schema error: {exc}") from None


def _write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.jsonl")
    metrics: list[dict] = [{"phase": "config", "epoch": 0, "config": cfg.to_dict(), "format_version": 1}]
    t0 = time.perf_counter()
    try:
        pair = train_pair(clean_dataset(cfg), config_triggers(cfg), cfg, metrics)
    except TrainingFailure as exc:
        _write_jsonl(metrics_path, metrics + [{"phase": exc.phase, "error": str(exc)}])
        _say(f"training failed in phase {exc.phase}: {exc}")
        return EXIT_NOT_FLAGGED
    elapsed = time.perf_counter() - t0
    metrics.append({"phase": "done", "epoch": 0, "seconds": elapsed, "pair_checksum": pair.checksum()})
    serialize_artifact(pair, out)
    _write_jsonl(metrics_path, metrics)
    _say(f"pair written to {out} ({elapsed:.1f}s, checksum {pair.checksum()[:16]})")
    return EXIT_OK


def _mint_seed(args) -> int | None:
    env = _env_seed()
    return args.seed if args.seed is not None else env


def cmd_mint(args) -> int:
    pair = load_pair(args.pair)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.registry).parent
    users = [args.user] if args.count is None else [f"{args.user}-{i:04d}" for i in range(args.count)]
    seed = _mint_seed(args)
    rng = make_rng(seed) if seed is not None else np.random.default_rng()
    with registry_lock(args.registry):
        registry = SignatureRegistry.open(args.registry, pair.n)
        try:
            t0 = time.perf_counter()
            minted = mint_batch(pair, registry, users, rng, psi_scale=args.psi_scale)
            per_model = (time.perf_counter() - t0) / max(len(users), 1)
        except DuplicateUser as exc:
            _say(f"duplicate user: {exc}")
            return EXIT_DUPLICATE
        except SignatureSpaceExhausted as exc:
            _say(f"signature space exhausted: {exc}")
            return EXIT_EXHAUSTED
        for rec, art in minted:
            serialize_artifact(art, out_dir / f"{rec.user_id}.mbu")
        registry.save(args.registry)
    print(json.dumps({"minted": len(minted), "per_model_ms": per_model * 1e3,
                      "users": [r.user_id for r, _ in minted]}))
    _say(f"minted {len(minted)} model(s), {per_model * 1e3:.2f} ms per model")
    return EXIT_OK


def _policy(args, pair) -> VerificationPolicy:
    eps = args.epsilon if args.epsilon is not None else 0.7
    try:
        policy = VerificationPolicy(eps, args.tau, pair.topology.num_classes)
        policy.thresholds(pair.n)
        policy.resolved_tau(pair.n)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return policy


def cmd_verify(args) -> int:
    pair = load_pair(args.pair)
    art = load_user_artifact(args.model, expected_n=pair.n)
    registry = SignatureRegistry.load(args.registry)
    if registry.n != pair.n:
        raise LoadError(f"n mismatch: registry has {registry.n} bits, trigger bank has {pair.n}")
    if len(registry) == 0:
        raise UsageError("registry is empty")
    report = verify(art.model().logits_np, TriggerBank.from_pair(pair), registry.signatures(),
                    _policy(args, pair))
    print(report.to_json())
    verdict = f"flagged, attributed to {report.best_user}" if report.flagged else "not flagged"
    _say(f"extracted {report.extracted}: {verdict} (score {report.best_score}/{pair.n})")
    return EXIT_OK if report.flagged else EXIT_NOT_FLAGGED


def _attack_context(args):
    pair = load_pair(args.pair)
    registry = SignatureRegistry.load(args.registry)
    bank = TriggerBank.from_pair(pair)
    data = clean_dataset(pair.config)
    return pair, registry, bank, data


def _resolve_user(args, model, bank, registry, policy) -> str:
    if args.user:
        if args.user not in registry:
            raise UsageError(f"user {args.user!r} is not in the registry")
        return args.user
    user, _, _ = attribute(extract_signature(model.logits_np, bank, policy), registry.signatures())
    return user


def cmd_attack(args) -> int:
    pair, registry, bank, data = _attack_context(args)
    art = load_user_artifact(args.model, expected_n=pair.n)
    model = art.model()
    policy = _policy(args, pair)
    user = _resolve_user(args, model, bank, registry, policy)
    cdp_pre = attacks.clean_accuracy(model, data.x_test, data.y_test)
    if args.kind == "escape":
        attacked, params = attacks.escape_attack(model), {}
    elif args.kind == "collude":
        if not args.other:
            raise UsageError("--kind collude needs --other")
        other = load_user_artifact(args.other, expected_n=pair.n).model()
        branches = [int(b) for b in args.branches.split(",") if b.strip()] if args.branches else []
        attacked, params = attacks.collusion_swap(model, other, branches), {"branches": branches}
    elif args.kind == "prune":
        if args.rate is None:
            raise UsageError("--kind prune needs --rate")
        attacked, params = attacks.prune_model(model, args.rate), {"rate": args.rate}
    elif args.kind == "finetune":
        attacked = attacks.finetune_model(model, data.x_train, data.y_train, args.epochs,
                                          fraction=args.fraction, lr=pair.config.lr,
                                          batch_size=pair.config.batch_size, seed=args.seed or 0)
        params = {"epochs": args.epochs, "fraction": args.fraction}
    else:
        fn = attacks.ATTACKS.get(args.kind)
        if fn is None:
            raise UsageError(f"unknown attack kind {args.kind!r}")
        attacked, params = fn(model), {}
    report = attacks.evaluate(attacked, data.x_test, data.y_test, bank, registry.signatures(), user,
                              policy, kind=args.kind, params=params, cdp_pre=cdp_pre)
    report.notes["config"] = pair.config.to_dict()
    report.notes["format_version"] = 1
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report.to_json() + "\n")
    print(report.to_json())
    _say(f"{args.kind}: clean acc {report.cdp_pre:.4f} -> {report.cdp_post:.4f}, "
         f"bit acc {report.bit_acc:.3f}, id acc {report.id_acc}")
    return EXIT_OK


def _r2_linear(xs: np.ndarray, ys: np.ndarray) -> float:
    if len(xs) < 3:
        return 1.0
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    total = ((ys - ys.mean()) ** 2).sum()
    return float(1 - (resid ** 2).sum() / total) if total > 0 else 1.0


def bench_mint(pair, count: int, rng) -> dict:
    """Mint ``count`` throwaway models; latency stats and the R^2 of a line
    through cumulative time."""
    times = []
    for _ in range(count):
        bits = tuple(int(b) for b in rng.integers(0, 2, pair.n))
        if 0 < sum(bits) < pair.n:
            sig = Signature(bits)
        else:
            sig = Signature(tuple([1] + [0] * (pair.n - 1)))
        t0 = time.perf_counter()
        mint(pair, sig, int(rng.integers(0, 2 ** 62)))
        times.append(time.perf_counter() - t0)
    times = np.asarray(times)
    if count == 0:
        return {"models": 0, "n": pair.n, "mean_ms": None, "p50_ms": None, "p95_ms": None, "r2": None}
    cum = np.cumsum(times)
    return {
        "models": count,
        "n": pair.n,
        "mean_ms": float(times.mean() * 1e3),
        "p50_ms": float(np.percentile(times, 50) * 1e3),
        "p95_ms": float(np.percentile(times, 95) * 1e3),
        "r2": _r2_linear(np.arange(1, count + 1, dtype=float), cum),
    }


def cmd_bench(args) -> int:
    seed = _mint_seed(args)
    rng = make_rng(seed if seed is not None else 0)
    rows = [bench_mint(load_pair(p), args.models, rng) for p in args.pair]
    print(json.dumps({"rows": rows}))
    for r in rows:
        if r["models"]:
            _say(f"n={r['n']}: {r['models']} models, mean {r['mean_ms']:.2f} ms, "
                 f"p95 {r['p95_ms']:.2f} ms, R^2 {r['r2']:.4f}")
        else:
            _say(f"n={r['n']}: no models minted")
    if len(rows) == 2 and rows[0]["models"]:
        ratio = rows[1]["mean_ms"] / rows[0]["mean_ms"]
        _say(f"latency ratio {ratio:.2f} for n {rows[0]['n']} -> {rows[1]['n']}")
    return EXIT_OK


def cmd_report(args) -> int:
    """Prune and fine-tune sweeps for one model: CSV rows plus figures."""
    pair, registry, bank, data = _attack_context(args)
    model = load_user_artifact(args.model, expected_n=pair.n).model()
    policy = _policy(args, pair)
    user = _resolve_user(args, model, bank, registry, policy)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sigs = registry.signatures()
    rates = [float(v) for v in args.prune_rates.split(",")]
    prune = attacks.sweep("prune", rates, model, data.x_test, data.y_test, bank, sigs, user, policy)
    reports = list(prune)
    chance = 1.0 / pair.topology.num_classes
    plot_sweep(prune, out / "prune.png", "prune rate", chance)
    if args.finetune_epochs:
        epochs = [int(v) for v in args.finetune_epochs.split(",")]
        ft = []
        for e in epochs:
            tuned = attacks.finetune_model(model, data.x_train, data.y_train, e, fraction=args.fraction,
                                           lr=pair.config.lr, batch_size=pair.config.batch_size)
            ft.append(attacks.evaluate(tuned, data.x_test, data.y_test, bank, sigs, user, policy,
                                       kind="finetune", params={"epochs": e}))
        plot_sweep(ft, out / "finetune.png", "fine-tuning epochs", chance)
        reports += ft
    attacks.write_csv(reports, out / "sweep.csv")
    (out / "config.json").write_text(json.dumps({"format_version": 1, "config": pair.config.to_dict()},
                                                sort_keys=True, indent=2) + "\n")
    _say(f"wrote {len(reports)} rows and figures to {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    """Write F or F' as an unobfuscated user artifact (for negative
    controls and inspection)."""
    pair = load_pair(args.pair)
    bits = (0,) * pair.n if args.which == "inactive" else (1,) * pair.n
    art = mint(pair, Signature(bits), None, allow_degenerate=True)
    serialize_artifact(art, args.out)
    _say(f"{args.which} model written to {args.out}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="markboard", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train the model pair")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--metrics", help="JSONL metrics path (default: next to --out)")
    t.set_defaults(fn=cmd_train)

    m = sub.add_parser("mint", help="mint signed user models")
    m.add_argument("--pair", required=True)
    m.add_argument("--registry", required=True)
    m.add_argument("--user", required=True)
    m.add_argument("--count", type=int)
    m.add_argument("--out-dir")
    m.add_argument("--seed", type=int)
    m.add_argument("--psi-scale", type=float, default=DEFAULT_PSI_SCALE)
    m.set_defaults(fn=cmd_mint)

    def policy_flags(q):
        q.add_argument("--tau", type=int)
        q.add_argument("--epsilon", type=float)

    v = sub.add_parser("verify", help="extract and attribute a suspect model's signature")
    v.add_argument("--model", required=True)
    v.add_argument("--pair", required=True)
    v.add_argument("--registry", required=True)
    policy_flags(v)
    v.set_defaults(fn=cmd_verify)

    a = sub.add_parser("attack", help="run one attack and score it")
    a.add_argument("--kind", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--pair", required=True)
    a.add_argument("--registry", required=True)
    a.add_argument("--user")
    a.add_argument("--other")
    a.add_argument("--branches")
    a.add_argument("--rate", type=float)
    a.add_argument("--epochs", type=int, default=100)
    a.add_argument("--fraction", type=float, default=0.3)
    a.add_argument("--seed", type=int)
    a.add_argument("--report")
    policy_flags(a)
    a.set_defaults(fn=cmd_attack)

    b = sub.add_parser("bench", help="time minting")
    b.add_argument("--pair", required=True, action="append", help="repeat to compare two n settings")
    b.add_argument("--models", type=int, default=1000)
    b.add_argument("--seed", type=int)
    b.set_defaults(fn=cmd_bench)

    r = sub.add_parser("report", help="prune/fine-tune sweeps as CSV and figures")
    r.add_argument("--model", required=True)
    r.add_argument("--pair", required=True)
    r.add_argument("--registry", required=True)
    r.add_argument("--user")
    r.add_argument("--out-dir", required=True)
    r.add_argument("--prune-rates", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    r.add_argument("--finetune-epochs", default="")
    r.add_argument("--fraction", type=float, default=0.3)
    policy_flags(r)
    r.set_defaults(fn=cmd_report)

    e = sub.add_parser("export", help="write F or F' as a user artifact")
    e.add_argument("--pair", required=True)
    e.add_argument("--which", choices=("inactive", "active"), default="inactive")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _say(f"usage error: {exc}")
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("mint", "bench") and getattr(args, "models", 0) is not None \
            and getattr(args, "models", 0) < 0:
        _say("usage error: --models must be non-negative")
        return EXIT_USAGE
    if args.command == "mint" and args.count is not None and args.count < 0:
        _say("usage error: --count must be non-negative")
        return EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as exc:
        _say(f"usage error: {exc}")
        return EXIT_USAGE
    except LoadError as exc:
        _say(f"load error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
