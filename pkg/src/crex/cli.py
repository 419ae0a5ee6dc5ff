"""Command-line interface.

Every subcommand is a thin client of the engine HTTP API: by default the
engine app runs in-process (no server needed); ``--server URL`` points the
same commands at a live engine instead. ``serve`` starts the engine over
HTTP, ``serve-backend`` starts the reference simulated training service
that the ``remote`` backend mode can talk to.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import httpx
import yaml
from pydantic import ValidationError

from .orchestrator import ABLATION_FLAGS, RunConfig

logger = logging.getLogger(__name__)

# Exit codes: 0 success, 1 operation failed, 2 bad usage or config.
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(Exception):
    """User-facing CLI failure with an exit code."""

    def __init__(self, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.code = code


def load_config_file(path: str) -> dict:
    """Parse a YAML or JSON config file into a plain dict."""
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith((".yaml", ".yml")):
        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must hold a mapping", EXIT_USAGE)
    return data


def parse_overrides(pairs: List[str]) -> dict:
    """Parse repeated ``--set key=value`` overrides; values are JSON when
    they parse as JSON, raw strings otherwise."""
    out: dict = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise CliError(f"override {pair!r} is not key=value", EXIT_USAGE)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file plus flag overrides, validated into a RunConfig."""
    data: dict = {}
    if args.config:
        data.update(load_config_file(args.config))
    if getattr(args, "data", None):
        data["dataset_path"] = args.data
    named = {
        "seed": args.seed,
        "memory_size": args.memory_size,
        "k_p": args.kp,
        "k_n": args.kn,
        "backend": args.backend,
    }
    data.update({k: v for k, v in named.items() if v is not None})
    data.update(parse_overrides(args.set or []))
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        fields = ", ".join(
            ".".join(str(p) for p in err["loc"]) or "config" for err in exc.errors()
        )
        raise CliError(f"invalid config field(s): {fields}\n{exc}", EXIT_USAGE)


def make_client(args: argparse.Namespace) -> httpx.Client:
    if args.server:
        return httpx.Client(base_url=args.server.rstrip("/"), timeout=None)
    from .protocol import in_process_client
    from .service import build_engine_app

    return in_process_client(build_engine_app(runs_root=args.runs_root))


def _call(client: httpx.Client, method: str, path: str, payload: Optional[dict] = None) -> dict:
    response = client.request(method, path, json=payload)
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        raise CliError(f"{method} {path} failed ({response.status_code}): {detail}")
    return response.json()


def _print_job(job: dict) -> int:
    if job["status"] == "failed":
        print(f"job {job['job_id']} FAILED: {job['error']}", file=sys.stderr)
        return EXIT_FAILURE
    if job["status"] == "running":
        print(f"job {job['job_id']} running; poll with: crex status {job['job_id']}")
        return EXIT_OK
    print(f"job {job['job_id']} done; artifacts under {job['out_dir']}")
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace) -> int:
    client = make_client(args)
    reply = _call(
        client,
        "POST",
        "/ingest",
        {
            "dataset_path": args.data,
            "dataset_format": args.format,
            "out_path": args.out,
        },
    )
    print(
        f"normalized {reply['num_samples']} samples over "
        f"{reply['num_relations']} relations -> {reply['out_path']}"
    )
    print(f"manifest: {reply['manifest_path']} (sha256 {reply['sha256'][:12]})")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    client = make_client(args)
    job = _call(
        client,
        "POST",
        "/runs",
        {
            "config": config.model_dump(),
            "out_dir": args.out_dir,
            "wait": not args.no_wait,
        },
    )
    code = _print_job(job)
    if job["status"] == "done" and job.get("result"):
        aggregate = job["result"]["aggregate"]
        means = " ".join(f"{m:.3f}" for m in aggregate["mean_by_task"])
        print(f"mean accuracy by task: {means}")
        table = Path(job["out_dir"]) / "table.txt"
        if table.exists():
            print(table.read_text(encoding="utf-8"), end="")
    return code


def cmd_ablate(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    flags = args.flags.split(",") if args.flags else None
    client = make_client(args)
    job = _call(
        client,
        "POST",
        "/ablate",
        {
            "config": config.model_dump(),
            "out_dir": args.out_dir,
            "flags": flags,
            "wait": not args.no_wait,
        },
    )
    code = _print_job(job)
    if job["status"] == "done" and job.get("result"):
        comparison = Path(job["out_dir"]) / "comparison.txt"
        if comparison.exists():
            print(comparison.read_text(encoding="utf-8"), end="")
    return code


def cmd_status(args: argparse.Namespace) -> int:
    client = make_client(args)
    job = _call(client, "GET", f"/runs/{args.job_id}")
    print(json.dumps(job, indent=2, sort_keys=True))
    return EXIT_OK if job["status"] != "failed" else EXIT_FAILURE


def cmd_report(args: argparse.Namespace) -> int:
    client = make_client(args)
    reply = _call(client, "POST", "/report", {"run_dir": args.run_dir})
    print(reply["table"], end="")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    client = make_client(args)
    reply = _call(client, "POST", "/replay", {"run_dir": args.run_dir})
    for message in reply["messages"]:
        print(message)
    if not reply["ok"]:
        print("replay FAILED: reports are not byte-identical", file=sys.stderr)
        return EXIT_FAILURE
    print("replay ok: all reports byte-identical")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    from .corpus import serialize_samples
    from .synth import forgetting_benchmark, synthetic_corpus

    if args.kind == "toy":
        samples = synthetic_corpus(args.seed)
    else:
        samples, _ = forgetting_benchmark(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    serialize_samples(samples, out)
    relations = sorted({s.relation for s in samples})
    print(f"wrote {len(samples)} samples, {len(relations)} relations -> {out}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import build_engine_app

    app = build_engine_app(runs_root=args.runs_root)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def cmd_serve_backend(args: argparse.Namespace) -> int:
    import uvicorn

    from .backend import SimulatedBackend
    from .embedding import HashingEmbedder
    from .protocol import build_backend_app

    embedder = HashingEmbedder(args.dim)
    app = build_backend_app(
        SimulatedBackend(embedder=embedder, seed=args.seed),
        embedder=embedder,
        token_env=args.token_env,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--server",
        default=None,
        help="engine API URL; defaults to running the engine in-process",
    )
    parser.add_argument(
        "--runs-root",
        default="runs",
        help="where unnamed run directories are created (in-process mode)",
    )


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML or JSON file with run settings")
    parser.add_argument("--data", help="dataset path (overrides the config file)")
    parser.add_argument("--out-dir", help="artifact directory for this run")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--memory-size", type=int, help="memory per relation part")
    parser.add_argument("--kp", type=int, help="positive demonstrations per instruction")
    parser.add_argument("--kn", type=int, help="negative demonstrations per instruction")
    parser.add_argument("--backend", choices=["sim", "remote"], help="model backend")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override any run-config field (repeatable; JSON values accepted)",
    )
    parser.add_argument(
        "--no-wait",
        action="store_true",
        help="submit the job and return immediately (meaningful with --server)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crex",
        description="Continual relation extraction engine",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and normalize a dataset")
    p.add_argument("--data", required=True, help="input JSONL dataset")
    p.add_argument(
        "--format",
        default="tacred-like",
        choices=["tacred-like", "fewrel-like"],
        help="tacred-like drops no-relation records",
    )
    p.add_argument("--out", required=True, help="normalized JSONL output path")
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("run", help="run the continual learning pipeline")
    _add_config_options(p)
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser(
        "ablate", help="run the full pipeline plus each ablation variant"
    )
    _add_config_options(p)
    p.add_argument(
        "--flags",
        help=f"comma-separated subset of {','.join(ABLATION_FLAGS)} "
        "(default: all)",
    )
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("status", help="check a submitted job")
    p.add_argument("job_id")
    _add_common(p)
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("report", help="regenerate tables from stored reports")
    p.add_argument("--run-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser(
        "replay", help="re-execute a run from its logs and verify reports"
    )
    p.add_argument("--run-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("synth", help="generate a synthetic demo corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["toy", "benchmark"], default="toy")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="serve the engine API over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8400)
    p.add_argument("--runs-root", default="runs")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser(
        "serve-backend", help="serve the reference simulated training service"
    )
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8500)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--token-env",
        default=None,
        help="environment variable holding the required bearer token",
    )
    p.set_defaults(func=cmd_serve_backend)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
