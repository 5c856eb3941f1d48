"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numeric or model error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import weights_io
from .benchmark import emit_report, load_suite, run_benchmark
from .draft import DraftConfig, S4CDraft, init_draft_params, load_draft, save_draft
from .errors import ArgumentError, S4CError
from .models import ModelSpec, TransformerModel
from .training import TrainConfig, draft_loss_and_grads, grad_check, teacher_batch, train_draft, train_target
from .verify import MAX_NORM, RESIDUAL, generate, verify_lossless

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = ("train-target", "train-draft", "generate", "bench", "verify-lossless", "grad-check", "dump-tree")

# input paths each command reads; checked before any work starts
_REQUIRED = {
    "train-target": ("corpus", "out"),
    "train-draft": ("weights", "corpus", "out"),
    "generate": ("weights", "draft_weights"),
    "bench": ("weights", "draft_weights", "suite"),
    "dump-tree": ("weights", "draft_weights"),
}
_INPUTS = ("weights", "draft_weights", "corpus", "suite", "config")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _nonneg_float(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _pos_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


@dataclass
class CliConfig:
    command: str
    weights: str | None = None
    draft_weights: str | None = None
    corpus: str | None = None
    suite: str | None = None
    out: str | None = None
    config: str | None = None
    log: str | None = None
    seed: int = 0
    temperature: float = 0.0
    max_new: int = 64
    prompt: str = "The "
    format: str = "json"
    max_norm_correction: bool = False
    draft: dict = field(default_factory=dict)  # DraftConfig overrides
    model: dict = field(default_factory=dict)  # ModelSpec fields for train-target
    epochs: int | None = None
    lr: float | None = None
    trials: int = 1000
    vocab: int = 8
    reps: int = 5
    timing: bool = True
    epsilon: float = 1e-5
    coords: int = 200

    @property
    def correction(self) -> str:
        return MAX_NORM if self.max_norm_correction else RESIDUAL


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="s4c", description="Speculative decoding with a multi-head draft and tree verification.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--weights", help="target model weights (.s4cw)")
    ap.add_argument("--draft-weights", help="draft weights (.s4cw)")
    ap.add_argument("--corpus", help="raw byte corpus file")
    ap.add_argument("--suite", help="benchmark suite JSON")
    ap.add_argument("--out", help="output file")
    ap.add_argument("--config", help="training config JSON")
    ap.add_argument("--log", help="JSON-lines training log path")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--temperature", type=_nonneg_float, default=0.0)
    ap.add_argument("--max-new", type=_nonneg_int, default=64)
    ap.add_argument("--prompt", default="The ", help="prompt text (UTF-8)")
    ap.add_argument("--heads", type=_pos_int, help="draft heads")
    ap.add_argument("--tokens-per-head", type=_pos_int)
    ap.add_argument("--topk", type=_pos_int, help="horizontal top-k per vertical node")
    ap.add_argument("--branches", type=_pos_int, help="head-1 branch count")
    ap.add_argument("--draft-layers", type=_pos_int, help="decoder layers per draft head")
    ap.add_argument("--format", choices=("json", "md"), default="json")
    ap.add_argument("--eq12-correction", action="store_true",
                    help="ablation: correct with norm(max(target, draft)); not lossless")
    ap.add_argument("--epochs", type=_nonneg_int)
    ap.add_argument("--lr", type=_nonneg_float)
    ap.add_argument("--trials", type=_nonneg_int, default=1000)
    ap.add_argument("--vocab", type=_pos_int, default=8)
    ap.add_argument("--reps", type=_pos_int, default=5, help="timed repetitions per benchmark cell")
    ap.add_argument("--no-timing", action="store_true", help="bench: skip timing for a fully reproducible report")
    ap.add_argument("--epsilon", type=float, default=1e-5)
    ap.add_argument("--coords", type=_pos_int, default=200)
    ap.add_argument("--hidden", type=_pos_int, help="train-target: hidden size")
    ap.add_argument("--layers", type=_pos_int, help="train-target: transformer layers")
    ap.add_argument("--attn-heads", type=_pos_int, help="train-target: attention heads")
    ap.add_argument("--context", type=_pos_int, help="train-target: context limit")
    return ap


def parse_args(argv) -> CliConfig:
    ns = build_parser().parse_args(argv)
    draft = {k: v for k, v in (("n_heads", ns.heads), ("tokens_per_head", ns.tokens_per_head),
                               ("horizontal_top_k", ns.topk), ("head1_branches", ns.branches),
                               ("draft_layers_per_head", ns.draft_layers)) if v is not None}
    model = {k: v for k, v in (("hidden_dim", ns.hidden), ("n_layers", ns.layers),
                               ("n_heads", ns.attn_heads), ("context_limit", ns.context)) if v is not None}
    cfg = CliConfig(ns.command, ns.weights, ns.draft_weights, ns.corpus, ns.suite, ns.out, ns.config, ns.log,
                    ns.seed, ns.temperature, ns.max_new, ns.prompt, ns.format, ns.eq12_correction, draft, model,
                    ns.epochs, ns.lr, ns.trials, ns.vocab, ns.reps, not ns.no_timing, ns.epsilon, ns.coords)
    for name in _REQUIRED.get(cfg.command, ()):
        if getattr(cfg, name) is None:
            raise UsageError(f"s4c {cfg.command}: missing required flag --{name.replace('_', '-')}")
    return cfg


def _check_inputs(cfg: CliConfig) -> None:
    for name in _INPUTS:
        path = getattr(cfg, name)
        if path is not None and not Path(path).is_file():
            raise FileNotFoundError(f"--{name.replace('_', '-')}: no such file: {path}")


def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _load_pair(cfg: CliConfig) -> tuple[TransformerModel, S4CDraft, DraftConfig]:
    target = weights_io.load_model(cfg.weights)
    draft = load_draft(cfg.draft_weights, target)
    round_cfg = DraftConfig.from_dict({**draft.cfg.to_dict(), **cfg.draft})
    return target, draft, round_cfg


def _cmd_train_target(cfg: CliConfig) -> int:
    tc = TrainConfig.from_json(cfg.config) if cfg.config else None
    spec = ModelSpec(**cfg.model)
    corpus = Path(cfg.corpus).read_bytes()
    target, log = train_target(corpus, spec, epochs=cfg.epochs if cfg.epochs is not None else 2,
                               lr=cfg.lr if cfg.lr is not None else 3e-3, seed=cfg.seed,
                               window=tc.window if tc else 128, log_path=cfg.log)
    weights_io.save_model(cfg.out, target)
    print(json.dumps({"out": cfg.out, "loss": log[-1]["loss"], "epochs": len(log) - 1}, sort_keys=True))
    return EXIT_OK


def _cmd_train_draft(cfg: CliConfig) -> int:
    base = TrainConfig.from_json(cfg.config).to_dict() if cfg.config else {"seed": cfg.seed}
    if cfg.epochs is not None:
        base["epochs"] = cfg.epochs
    if cfg.lr is not None:
        base["lr"] = cfg.lr
    tc = TrainConfig.from_dict(base)
    target = weights_io.load_model(cfg.weights)
    draft, log = train_draft(Path(cfg.corpus).read_bytes(), target, DraftConfig(**cfg.draft), tc,
                             log_path=cfg.log)
    save_draft(cfg.out, draft)
    print(json.dumps({"out": cfg.out, "initial_total": log[0]["total"], "final_total": log[-1]["total"],
                      "epochs": len(log) - 1}, sort_keys=True))
    return EXIT_OK


def _cmd_generate(cfg: CliConfig) -> int:
    target, draft, round_cfg = _load_pair(cfg)
    prompt = list(cfg.prompt.encode("utf-8"))
    tokens, stats = generate(target, draft, prompt, cfg.max_new, cfg.temperature, round_cfg, cfg.seed,
                             correction=cfg.correction)
    stats.wall_time_ns = 0  # keep the output reproducible
    out = {"prompt": cfg.prompt, "tokens": tokens, "text": bytes(tokens).decode("utf-8", errors="replace"),
           "temperature": cfg.temperature, "seed": cfg.seed, "stats": stats.to_dict(),
           "mean_accepted": stats.mean_accepted if stats.rounds else None}
    _write(_dump(out), cfg.out)
    return EXIT_OK


def _cmd_bench(cfg: CliConfig) -> int:
    suite = load_suite(cfg.suite)
    target, draft, round_cfg = _load_pair(cfg)
    report = run_benchmark(suite, target, draft, cfg=round_cfg, reps=cfg.reps, timing=cfg.timing,
                           correction=cfg.correction)
    emit_report(report, cfg.format, cfg.out)
    return EXIT_OK


def _cmd_verify_lossless(cfg: CliConfig) -> int:
    summary = verify_lossless(cfg.trials, cfg.vocab, cfg.seed, cfg.correction)
    if cfg.max_norm_correction:
        summary["note"] = (summary["note"] + "; " if summary["note"] else "") + \
            "ablation run: deviations are reported, not judged"
    _write(_dump(summary), cfg.out)
    return EXIT_OK if summary["passed"] or cfg.max_norm_correction else EXIT_NUMERIC


def _cmd_grad_check(cfg: CliConfig) -> int:
    spec = ModelSpec(vocab_size=32, hidden_dim=16, n_layers=1, n_heads=2, context_limit=32)
    target = TransformerModel.random(spec, seed=cfg.seed, scale=0.5)
    dcfg = DraftConfig(**{"n_heads": 1, **cfg.draft})
    params = init_draft_params(spec.hidden_dim, dcfg, seed=cfg.seed + 1, scale=0.3, emb_gain=2.0)
    windows = np.random.default_rng(cfg.seed).integers(0, spec.vocab_size, (2, 4 + dcfg.max_depth + 4))
    batch = teacher_batch(target, windows)
    _, grads = draft_loss_and_grads(target, dcfg, params, batch)
    err = grad_check(lambda p: draft_loss_and_grads(target, dcfg, p, batch, need_grad=False)[0].total,
                     params, grads, cfg.epsilon, cfg.coords, cfg.seed)
    passed = err < 1e-4
    _write(_dump({"max_relative_error": err, "epsilon": cfg.epsilon, "coords": max(cfg.coords, 200),
                  "passed": passed}), cfg.out)
    return EXIT_OK if passed else EXIT_NUMERIC


def _cmd_dump_tree(cfg: CliConfig) -> int:
    from .rng import Rng

    target, draft, round_cfg = _load_pair(cfg)
    prompt = list(cfg.prompt.encode("utf-8"))
    cache = target.new_cache()
    res = target.forward(prompt, cache)
    t0 = int(np.argmax(res.logits[-1]))
    state = draft.new_state()
    draft.observe(state, prompt[1:], res.features[:-1])
    tree = draft.draft_round(res.features[-1], t0, cfg.temperature, Rng.from_seed(cfg.seed), 1,
                             prompt + [t0], round_cfg, state)
    _write(_dump(tree.to_dict()), cfg.out)
    return EXIT_OK


_HANDLERS = {
    "train-target": _cmd_train_target,
    "train-draft": _cmd_train_draft,
    "generate": _cmd_generate,
    "bench": _cmd_bench,
    "verify-lossless": _cmd_verify_lossless,
    "grad-check": _cmd_grad_check,
    "dump-tree": _cmd_dump_tree,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_args(argv)
        _check_inputs(cfg)
        return _HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArgumentError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (S4CError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
