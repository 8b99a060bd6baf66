"""Command line entry point: ``drmmesh {init,purchase,execute,demo,attack,bench}``.

Every command prints one JSON report on stdout (also written to ``--report``
when given) and exits nonzero on failure. ``init``/``purchase``/``execute``
keep state in ``$DRMMESH_STATE_DIR`` (default ``./.drmmesh``) as a config plus
an operation log; the world is rebuilt by replaying the log under the same
seed, so the smartcard's secrets never have to be written to disk.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import random
import statistics
import sys
import time
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

from . import pre
from .attacks import ATTACKS, run_attacks
from .client import ClientError, FileSink, HashSink
from .licenses import LicenseModel
from .pairing import make_group
from .system import ConfigError, World, load_config

STATE_FILE = "world.json"


class CommandError(Exception):
    def __init__(self, stage: str, reason: str, detail: str = "") -> None:
        super().__init__(f"{stage}/{reason}: {detail}")
        self.stage = stage
        self.reason = reason
        self.detail = detail


def _state_dir() -> Path:
    return Path(os.environ.get("DRMMESH_STATE_DIR", ".drmmesh"))


def _read_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return load_config()
    try:
        return load_config(json.loads(Path(path).read_text("utf-8")))
    except (OSError, json.JSONDecodeError) as exc:
        raise CommandError("config", "unreadable", str(exc)) from None


def _world(args: argparse.Namespace, config: dict[str, Any] | None = None) -> World:
    cfg = config if config is not None else _read_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if args.mode == "sim" and seed is None:
        raise CommandError("config", "missing_seed", "sim mode needs --seed or a seed in the config")
    return World(cfg, backend=args.backend, seed=seed, mode=args.mode)


def _hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# -- stateful commands -----------------------------------------------------------

def _load_state() -> dict[str, Any]:
    path = _state_dir() / STATE_FILE
    if not path.exists():
        raise CommandError("state", "not_initialized", f"run 'drmmesh init' first ({path})")
    return json.loads(path.read_text("utf-8"))


def _save_state(state: dict[str, Any]) -> None:
    path = _state_dir() / STATE_FILE
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(state, sort_keys=True, indent=1), "utf-8")
    tmp.replace(path)


def _apply(world: World, op: dict[str, Any], sink_path: str | None = None) -> dict[str, Any]:
    user = world.user(op["user"])
    try:
        if op["op"] == "purchase":
            model = LicenseModel(op["model"])
            out = world.purchase(user, op["content_id"], model, op["quantity"])
            return {"ok": True, "op": "purchase", "content_id": out.content_id, "locker_size": len(user.locker)}
        sink = FileSink(sink_path) if sink_path else HashSink()
        try:
            out = world.execute(user, op["distributor"], op["content_id"], sink=sink)
        finally:
            if isinstance(sink, FileSink):
                sink.close()
        report = {"ok": True, "op": "execute", "content_id": out.content_id, "distributor": op["distributor"],
                  "bytes": out.nbytes, "chunks": out.chunks}
        if isinstance(sink, HashSink):
            report["sha256"] = sink.hexdigest()
            report["matches_ingested"] = sink.hexdigest() == _hash(world.contents[op["content_id"]])
        return report
    except ClientError as exc:
        return {"ok": False, "op": op["op"], "stage": exc.stage, "reason": exc.reason}


def _replay(state: dict[str, Any]) -> World:
    world = World(state["config"], backend=state["backend"], seed=state["seed"])
    for op in state["ops"]:
        _apply(world, op)
    return world


def cmd_init(args: argparse.Namespace) -> dict[str, Any]:
    d = _state_dir()
    if (d / STATE_FILE).exists():
        raise CommandError("init", "already_initialized", str(d))
    cfg = _read_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise CommandError("config", "missing_seed")
    backend = args.backend or cfg.get("backend", "transparent")
    world = World(cfg, backend=backend, seed=seed)
    d.mkdir(parents=True, exist_ok=True)
    _save_state({"config": cfg, "seed": seed, "backend": backend, "ops": []})
    return {
        "ok": True,
        "state_dir": str(d),
        "backend": backend,
        "users": sorted(world.users),
        "distributors": sorted(world.distributors),
        "catalog": world.cp.catalog(),
    }


def _stateful(op: dict[str, Any], sink_path: str | None = None) -> dict[str, Any]:
    state = _load_state()
    world = _replay(state)
    if op["user"] not in world.users:
        raise CommandError(op["op"], "unknown_user", op["user"])
    report = _apply(world, op, sink_path)
    state["ops"].append(op)
    _save_state(state)
    return report


def cmd_purchase(args: argparse.Namespace) -> dict[str, Any]:
    return _stateful({"op": "purchase", "user": args.user, "content_id": args.content,
                      "model": args.model, "quantity": args.quantity})


def cmd_execute(args: argparse.Namespace) -> dict[str, Any]:
    return _stateful({"op": "execute", "user": args.user, "content_id": args.content,
                      "distributor": args.distributor}, args.out)


# -- scenarios -----------------------------------------------------------------

def cmd_demo(args: argparse.Namespace) -> dict[str, Any]:
    """Buy an n-times license and execute it n+1 times, alternating distributors."""
    with _world(args) as world:
        user = world.user()
        content_id = next(c["content_id"] for c in world.config["catalog"] if c.get("rating", "unrated") == "unrated")
        n = args.n
        world.purchase(user, content_id, LicenseModel.EXECUTE_AT_MOST_N, n)
        cds = sorted(world.distributors)
        expected = _hash(world.contents[content_id])
        executions = []
        for i in range(n + 1):
            cd = cds[i % len(cds)]
            sink = HashSink()
            err = world.try_execute(user, cd, content_id, sink=sink)
            executions.append({
                "distributor": cd,
                "allowed": err is None,
                "matches_ingested": err is None and sink.hexdigest() == expected,
                **({"stage": err.stage, "reason": err.reason} if err else {}),
            })
        allows = sum(e["allowed"] for e in executions)
        ok = allows == n and all(e["matches_ingested"] for e in executions if e["allowed"])
        return {
            "ok": ok,
            "backend": world.backend,
            "mode": world.mode,
            "content_id": content_id,
            "license": {"model": LicenseModel.EXECUTE_AT_MOST_N.value, "n": n},
            "allows": allows,
            "denies": len(executions) - allows,
            "distributors_used": sorted({e["distributor"] for e in executions if e["allowed"]}),
            "executions": executions,
        }


def cmd_attack(args: argparse.Namespace) -> dict[str, Any]:
    names = args.suite or list(ATTACKS)
    unknown = [n for n in names if n not in ATTACKS]
    if unknown:
        raise CommandError("attack", "unknown_attack", ", ".join(unknown))
    with _world(args) as world:
        results = run_attacks(world, names)
    return {
        "ok": all(r.rejected for r in results),
        "backend": world.backend,
        "attacks": [r.to_dict() for r in results],
    }


def _stats(samples: Sequence[float]) -> dict[str, float]:
    ms = sorted(s * 1000 for s in samples)
    p95 = ms[min(len(ms) - 1, int(round(0.95 * (len(ms) - 1))))]
    return {"median_ms": round(statistics.median(ms), 4), "p95_ms": round(p95, 4), "iterations": len(ms)}


def _time(fn: Callable[[], Any], iterations: int) -> dict[str, float]:
    samples = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return _stats(samples)


def run_bench(backend: str, iterations: int, seed: int) -> dict[str, Any]:
    if backend != "production":
        raise CommandError("bench", "transparent_backend",
                           "the transparent backend stores exponents in the clear; its timings say nothing")
    g = make_group("production")
    rng = random.Random(seed)
    alice = pre.keygen(g, rng)
    bob = pre.keygen(g, rng)
    m = g.random_g2(rng)
    c2 = pre.encrypt_second(m, alice.public.z_a1, rng)
    rk = pre.rekeygen(alice.secret.a1, bob.public.g_a2)
    c1 = pre.reencrypt(c2, rk)
    if pre.decrypt_first(c1, bob.secret.a2) != m:  # pragma: no cover - guarded by the test suite
        raise CommandError("bench", "self_check_failed")
    results = {
        "keygen": _time(lambda: pre.keygen(g, rng), iterations),
        "rekeygen": _time(lambda: pre.rekeygen(alice.secret.a1, bob.public.g_a2), iterations),
        "encrypt_second": _time(lambda: pre.encrypt_second(m, alice.public.z_a1, rng), iterations),
        "reencrypt": _time(lambda: pre.reencrypt(c2, rk), iterations),
        "decrypt_first": _time(lambda: pre.decrypt_first(c1, bob.secret.a2), iterations),
    }
    cfg = load_config()
    cfg["catalog"] = [{"content_id": "bench", "unit_price": 1, "size": 128}]
    world = World(cfg, backend="production", seed=seed, group=g)
    user = world.user()
    world.purchase(user, "bench", LicenseModel.FLATRATE, 1)
    results["execute_flow"] = _time(lambda: world.execute(user, "cd-1", "bench"), iterations)
    return {"ok": True, "backend": backend, "iterations": iterations, "operations": results}


def cmd_bench(args: argparse.Namespace) -> dict[str, Any]:
    if args.iterations < 100:
        raise CommandError("bench", "too_few_iterations", "medians and p95 need at least 100 samples")
    backend = args.backend or "production"
    seed = args.seed if args.seed is not None else 0
    return run_bench(backend, args.iterations, seed)


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="scenario config (JSON); default is the bundled scenario")
    common.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
    common.add_argument("--backend", choices=["transparent", "production"])
    common.add_argument("--mode", choices=["sim", "service"], default="sim")
    common.add_argument("--report", metavar="PATH", help="also write the JSON report here")

    parser = argparse.ArgumentParser(prog="drmmesh", description="Anonymous pay-per-use content licensing.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("init", parents=[common], help="create a new system in the state directory")

    p = sub.add_parser("purchase", parents=[common], help="buy a license")
    p.add_argument("--user", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--model", choices=[m.value for m in LicenseModel], default=LicenseModel.EXECUTE_AT_MOST_N.value)
    p.add_argument("--quantity", type=int, default=1)

    p = sub.add_parser("execute", parents=[common], help="execute purchased content")
    p.add_argument("--user", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--distributor", default="cd-1")
    p.add_argument("--out", metavar="PATH", help="write the decrypted stream here")

    p = sub.add_parser("demo", parents=[common], help="end-to-end purchase and roaming execution")
    p.add_argument("-n", type=int, default=3, help="executions bought (default 3)")

    p = sub.add_parser("attack", parents=[common], help="run the adversarial suite")
    p.add_argument("--suite", nargs="*", help=f"subset of: {', '.join(ATTACKS)}")

    p = sub.add_parser("bench", parents=[common], help="time the scheme on the production backend")
    p.add_argument("--iterations", type=int, default=100)
    return parser


COMMANDS: dict[str, Callable[[argparse.Namespace], dict[str, Any]]] = {
    "init": cmd_init,
    "purchase": cmd_purchase,
    "execute": cmd_execute,
    "demo": cmd_demo,
    "attack": cmd_attack,
    "bench": cmd_bench,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = COMMANDS[args.command](args)
    except CommandError as exc:
        report = {"ok": False, "stage": exc.stage, "reason": exc.reason, "detail": exc.detail}
    except ConfigError as exc:
        report = {"ok": False, "stage": "config", "reason": "invalid", "detail": str(exc)}
    report = {"command": args.command, **report}
    text = json.dumps(report, sort_keys=True, indent=2)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n", "utf-8")
    return 0 if report.get("ok") else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
