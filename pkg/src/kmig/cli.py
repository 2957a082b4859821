"""Command line front end: ``kmig gen|scenario|bench|validate``.

Exit status is 0 when everything holds, 1 when a scenario, sweep or
validation check fails, and 2 when the configuration cannot be used.
``KMIG_SEED`` in the environment replaces the ``seed`` of any spec file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from kmig.bench import SWEEP_KS, ScenarioSpec, check_sweep, sweep
from kmig.errors import ConfigError, KmigError
from kmig.kernel import build_guest, plant_decoy
from kmig.memory import Region
from kmig.migration import dry_run_validate
from kmig.profile import ObjectKind
from kmig.scenarios import CASES, run_case

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def load_spec(path: str) -> ScenarioSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    seed = os.environ.get("KMIG_SEED")
    if seed is not None:
        try:
            raw["seed"] = int(seed)
        except ValueError as exc:
            raise ConfigError(f"KMIG_SEED must be an integer, got {seed!r}") from exc
    return ScenarioSpec.from_dict(raw)


def parse_ks(text: str) -> list[int]:
    try:
        ks = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"--ks expects comma separated integers, got {text!r}") from exc
    if not ks:
        raise ConfigError("--ks is empty")
    return ks


def _emit(payload: dict, as_json: bool, summary: str) -> None:
    print(json.dumps(payload, indent=2) if as_json else summary)


def cmd_gen(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    state, image = build_guest(spec.guest)
    sidecar = image.dump(args.out)
    _emit(
        {"image": str(args.out), "sidecar": str(sidecar), "files": len(state.paths), "processes": len(state.processes)},
        args.json,
        f"wrote {args.out} ({image.size} bytes, {len(state.paths)} files) and {sidecar}",
    )
    return EXIT_OK


def cmd_scenario(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    outcome = run_case(args.case, spec.guest, spec.protected_base)
    lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.observed} (expected {c.expected})" for c in outcome.checks]
    _emit(outcome.to_dict(), args.json, "\n".join(lines))
    return EXIT_OK if outcome.passed else EXIT_FAIL


def cmd_bench(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    ks = parse_ks(args.ks) if args.ks else list(SWEEP_KS)
    if max(ks) > spec.guest.num_files or min(ks) < 1:
        raise ConfigError(f"every k must be in 1..{spec.guest.num_files}")
    result = sweep(spec, ks, repeats=args.repeats, workers=args.workers)
    text = result.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    problems = check_sweep(result)
    payload = dict(result.to_dict(), problems=problems)
    summary = text if not args.out else f"wrote {args.out}: {len(result.rows)} mean rows, {len(result.cells)} cells"
    if problems:
        summary += "\n" + "\n".join(f"FAIL  {p}" for p in problems)
    _emit(payload, args.json, summary)
    return EXIT_FAIL if problems else EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    if not args.dry_run:
        _emit({"spec": spec.to_dict()}, args.json, "spec is valid (pass --dry-run to validate a migration)")
        return EXIT_OK
    state, image = build_guest(spec.guest)
    capacity = spec.protected_len // state.profile.size(ObjectKind.DENTRY)
    k = spec.k or min(spec.guest.num_files, capacity)
    paths = state.paths[:k]
    sources = [state.dentries[p] for p in paths]
    for src in sources[: args.decoys]:
        plant_decoy(state, image, src)
    area = Region(spec.protected_base, spec.protected_len)
    verdict = dry_run_validate(state, image, sources, area, paths, verify=not args.no_verify)
    lines = [f"verdict: {'pass' if verdict.passed else 'fail'} ({len(verdict.reports)} dentries migrated on a clone)"]
    lines += [f"  {d}" for d in verdict.diagnostics]
    _emit(verdict.to_dict(), args.json, "\n".join(lines))
    return EXIT_OK if verdict.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kmig", description="Kernel-object migration and page-monitoring simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--spec", required=True, help="scenario spec (JSON)")
        p.add_argument("--json", action="store_true", help="print machine-readable JSON")

    gen = sub.add_parser("gen", help="build a guest and snapshot its memory image")
    common(gen)
    gen.add_argument("--out", required=True, help="raw image path; a .json sidecar is written next to it")
    gen.set_defaults(func=cmd_gen)

    scen = sub.add_parser("scenario", help="run an effectiveness script")
    common(scen)
    scen.add_argument("--case", required=True, choices=CASES)
    scen.set_defaults(func=cmd_scenario)

    bench = sub.add_parser("bench", help="run the in-place vs migrated sweep")
    common(bench)
    bench.add_argument("--ks", help="comma separated monitored-object counts (default: 10,50,...,400)")
    bench.add_argument("--repeats", type=int, default=10)
    bench.add_argument("--out", help="CSV output path (default: print CSV)")
    bench.add_argument("--workers", type=int, default=None, help="worker processes (default: $KMIG_WORKERS or 1)")
    bench.set_defaults(func=cmd_bench)

    val = sub.add_parser("validate", help="check a migration on a cloned guest")
    common(val)
    val.add_argument("--dry-run", action="store_true", help="migrate on a clone and probe it")
    val.add_argument("--decoys", type=int, default=0, help="plant this many pointer-lookalike data words")
    val.add_argument("--no-verify", action="store_true", help="rewrite unverified hits too (fault injection)")
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KmigError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
