"""Synthetic byte-level task corpora for training and benchmarking.

Six generators with very different predictability, from near-verbatim
repetition to shuffled word salad. All output is printable ASCII, so byte 0
stays free for use as an end-of-text marker.

    python -m s4c.corpora --out data/ --bytes 100000 --seed 0
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

TASKS = ("repetitive", "natural", "numeric", "qa", "shuffled", "retrieval")

_NOUNS = ("cat", "river", "garden", "teacher", "market", "window", "engine", "forest", "letter",
          "city", "child", "song", "road", "island", "doctor", "station", "paper", "mountain")
_VERBS = ("sees", "finds", "builds", "carries", "paints", "follows", "opens", "keeps", "writes",
          "watches", "moves", "hears")
_ADJS = ("old", "quiet", "bright", "small", "green", "busy", "cold", "gentle", "strange", "empty")
_PLACES = ("Avalon", "Brindle", "Corvia", "Dunmore", "Elston", "Farrow", "Glenhaven", "Harlow")
_CAPS = ("Mira", "Tesk", "Oru", "Valen", "Lusk", "Perrin", "Quill", "Sable")


def _sentence(rng: np.random.Generator) -> str:
    pick = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
    s = f"the {pick(_ADJS)} {pick(_NOUNS)} {pick(_VERBS)} the {pick(_NOUNS)}"
    if rng.random() < 0.4:
        s += f" near the {pick(_ADJS)} {pick(_NOUNS)}"
    return s + ". "


def _repetitive(rng, n):
    phrases = [_sentence(rng) for _ in range(4)]
    out = []
    while sum(map(len, out)) < n:
        out.append(phrases[int(rng.integers(len(phrases)))] * int(rng.integers(2, 5)) + "\n")
    return "".join(out)


def _natural(rng, n):
    out = []
    while sum(map(len, out)) < n:
        para = "".join(_sentence(rng) for _ in range(int(rng.integers(2, 6))))
        out.append(para[0].upper() + para[1:].rstrip() + "\n")
    return "".join(out)


def _numeric(rng, n):
    out = []
    while sum(map(len, out)) < n:
        a, b = int(rng.integers(0, 100)), int(rng.integers(0, 100))
        op = "+-*"[int(rng.integers(3))]
        val = a + b if op == "+" else a - b if op == "-" else a * b
        out.append(f"{a} {op} {b} = {val}\n")
    return "".join(out)


def _qa(rng, n):
    out = []
    while sum(map(len, out)) < n:
        i = int(rng.integers(len(_PLACES)))
        if rng.random() < 0.5:
            out.append(f"Q: What is the capital of {_PLACES[i]}?\nA: The capital of {_PLACES[i]} is {_CAPS[i]}.\n")
        else:
            noun = _NOUNS[int(rng.integers(len(_NOUNS)))]
            out.append(f"Q: Where is the {noun}?\nA: The {noun} is in {_PLACES[i]}.\n")
    return "".join(out)


def _shuffled(rng, n):
    words = list(_NOUNS + _VERBS + _ADJS)
    out = []
    while sum(map(len, out)) < n:
        out.append(" ".join(words[int(rng.integers(len(words)))] for _ in range(12)) + "\n")
    return "".join(out)


def _retrieval(rng, n):
    out = []
    while sum(map(len, out)) < n:
        keys = [f"k{int(rng.integers(1000)):03d}" for _ in range(4)]
        vals = [f"v{int(rng.integers(1000)):03d}" for _ in range(4)]
        table = " ".join(f"{k}={v};" for k, v in zip(keys, vals))
        j = int(rng.integers(4))
        out.append(f"table: {table} lookup {keys[j]} -> {vals[j]}\n")
    return "".join(out)


_GENERATORS = {"repetitive": _repetitive, "natural": _natural, "numeric": _numeric,
               "qa": _qa, "shuffled": _shuffled, "retrieval": _retrieval}


def make_corpus(task: str, n_bytes: int, seed: int = 0) -> bytes:
    if task not in _GENERATORS:
        raise ValueError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    rng = np.random.default_rng([seed, TASKS.index(task)])
    return _GENERATORS[task](rng, n_bytes).encode("ascii")[:n_bytes]


def mixed_corpus(n_bytes: int, seed: int = 0, chunk: int = 512) -> bytes:
    """All six tasks interleaved in ``chunk``-byte pieces; the training corpus."""
    per = -(-n_bytes // len(TASKS))
    parts = [make_corpus(t, per, seed) for t in TASKS]
    out = bytearray()
    for off in range(0, per, chunk):
        for p in parts:
            out += p[off:off + chunk]
    return bytes(out[:n_bytes])


def make_prompts(corpus: bytes, count: int, length: int = 24, seed: int = 0) -> list[str]:
    """Line-aligned snippets of ``corpus`` used as generation prompts."""
    rng = np.random.default_rng(seed)
    starts = [0] + [i + 1 for i, b in enumerate(corpus[:-length - 1]) if b == 10]
    chosen = rng.choice(len(starts), size=min(count, len(starts)), replace=False)
    return [corpus[starts[i]:starts[i] + length].decode("ascii") for i in sorted(chosen)]


def write_suite(out_dir, n_bytes: int = 20_000, seed: int = 0, n_prompts: int = 4, max_new: int = 48,
                temperatures=(0.0,), seeds=(0,)) -> Path:
    """Write one corpus and prompt file per task plus ``suite.json``; returns the suite path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for task in TASKS:
        corpus = make_corpus(task, n_bytes, seed)
        (out / f"{task}.txt").write_bytes(corpus)
        (out / f"{task}.prompts.json").write_text(json.dumps(make_prompts(corpus, n_prompts, seed=seed)))
        tasks.append({"name": task, "corpus_path": f"{task}.txt", "prompts": f"{task}.prompts.json",
                      "max_new": max_new})
    suite = {"tasks": tasks, "temperatures": list(temperatures), "seeds": list(seeds)}
    path = out / "suite.json"
    path.write_text(json.dumps(suite, indent=2, sort_keys=True) + "\n")
    (out / "train.txt").write_bytes(mixed_corpus(max(n_bytes * len(TASKS), 10_000), seed))
    return path


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m s4c.corpora", description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--bytes", type=int, default=20_000, help="bytes per task corpus")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--prompts", type=int, default=4, help="prompts per task")
    ap.add_argument("--max-new", type=int, default=48)
    args = ap.parse_args(argv)
    print(write_suite(args.out, args.bytes, args.seed, args.prompts, args.max_new))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
