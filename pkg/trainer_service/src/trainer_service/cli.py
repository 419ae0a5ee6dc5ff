"""Command-line entry point: build the engine and serve it over HTTP."""

from __future__ import annotations

import argparse
from typing import Optional, Sequence

from trainer_service.model import TrainerEngine
from trainer_service.service import build_trainer_app


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trainer-service",
        description="Serve a small trainable causal language model over HTTP.",
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8500)
    parser.add_argument("--seed", type=int, default=7, help="base model init seed")
    parser.add_argument("--embedding-size", type=int, default=64)
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--heads", type=int, default=2)
    parser.add_argument("--context-length", type=int, default=1024)
    parser.add_argument("--lora-rank", type=int, default=8)
    parser.add_argument("--lora-alpha", type=float, default=16.0)
    parser.add_argument("--max-new-tokens", type=int, default=32)
    parser.add_argument(
        "--token-env",
        default=None,
        help="environment variable holding the bearer token to require",
    )
    parser.add_argument(
        "--queue-capacity",
        type=int,
        default=2,
        help="max admitted concurrent /train requests before rejecting with 429",
    )
    parser.add_argument(
        "--no-analyst",
        action="store_true",
        help="disable the /analyze endpoint",
    )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    engine = TrainerEngine(
        seed=args.seed,
        embedding_size=args.embedding_size,
        num_layers=args.layers,
        num_heads=args.heads,
        context_length=args.context_length,
        lora_rank=args.lora_rank,
        lora_alpha=args.lora_alpha,
        max_new_tokens=args.max_new_tokens,
    )
    app = build_trainer_app(
        engine,
        token_env=args.token_env,
        analyst_enabled=not args.no_analyst,
        queue_capacity=args.queue_capacity,
    )
    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
