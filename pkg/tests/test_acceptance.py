"""End-to-end acceptance checks, one test group per criterion.

Every check records a ``criterion N: PASS|FAIL`` line that is printed in the
terminal summary. The trained target/draft pair is built once per session
through the CLI, which takes a few minutes on one CPU.

    pytest tests/test_acceptance.py -v
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from s4c import weights_io
from s4c.benchmark import efficiency_ratio, format_ratio, load_suite, temperature_sweep
from s4c.cli import main
from s4c.corpora import make_prompts, mixed_corpus, write_suite
from s4c.draft import DraftConfig, S4CDraft, load_draft, target_init_params
from s4c.models import ModelSpec, TabularModel, TransformerModel
from s4c.training import (corpus_windows, draft_loss_and_grads, grad_check, split_windows, teacher_batch,
                          top1_agreement)
from s4c.tree import HORIZONTAL, VERTICAL, DraftTree, build_mask, flatten
from s4c.verify import (autoregressive_generate, enumerate_sequence_distribution, generate,
                        simulate_tabular_sequences, total_variation)

pytestmark = pytest.mark.slow

DRAFT_LR = "0.05"


@pytest.fixture
def record(request):
    lines = request.config.stash[ACCEPTANCE_LINES]

    def _record(label: str, ok: bool, detail: str) -> None:
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)

    return _record


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Target (3 epochs) and draft (5 epochs) trained on a 100k-byte corpus via the CLI."""
    d = tmp_path_factory.mktemp("accept")
    (d / "corpus.txt").write_bytes(mixed_corpus(100_000, 0))
    assert main(["train-target", "--corpus", str(d / "corpus.txt"), "--out", str(d / "target.s4cw"),
                 "--epochs", "3", "--seed", "0"]) == 0
    assert main(["train-draft", "--weights", str(d / "target.s4cw"), "--corpus", str(d / "corpus.txt"),
                 "--out", str(d / "draft.s4cw"), "--log", str(d / "draft_log.jsonl"), "--epochs", "5",
                 "--lr", DRAFT_LR, "--seed", "0"]) == 0
    target = weights_io.load_model(d / "target.s4cw")
    return d, target, load_draft(d / "draft.s4cw", target)


def test_1_single_step_lossless(tmp_path, record):
    out = tmp_path / "v.json"
    start = time.perf_counter()
    rc = main(["verify-lossless", "--trials", "1000", "--vocab", "8", "--out", str(out)])
    elapsed = time.perf_counter() - start
    dev = json.loads(out.read_text())["max_l1_deviation"]
    ok = rc == 0 and dev < 1e-10 and elapsed < 10
    record("1", ok, f"max L1 deviation {dev:.2e} over 1000 pairs in {elapsed:.2f}s")
    assert ok


def test_2_multi_step_lossless(record):
    target = TabularModel.random(4, seed=21, concentration=0.6)
    draft = TabularModel.random(4, seed=22, concentration=0.6)
    start = time.perf_counter()
    seqs, _, _ = simulate_tabular_sequences(target, draft, 0, 3, 200_000, 1.0, DraftConfig(), seed=5)
    tv = total_variation(seqs, enumerate_sequence_distribution(target.matrix(), 0, 3), 4)
    elapsed = time.perf_counter() - start
    ok = tv < 0.01 and elapsed < 60
    record("2", ok, f"TV {tv:.5f} over 200000 samples in {elapsed:.2f}s")
    assert ok


def test_3_greedy_equivalence(trained, record):
    _, target, draft = trained
    prompts = make_prompts(mixed_corpus(60_000, 1), 100, length=24, seed=1)
    mismatches = 0
    for text in prompts:
        prompt = list(text.encode())
        plain, _ = autoregressive_generate(target, prompt, 64)
        fast, _ = generate(target, draft, prompt, 64)
        mismatches += plain != fast
    record("3", mismatches == 0, f"{mismatches} mismatches over {len(prompts)} prompts x 64 tokens")
    assert mismatches == 0


def _random_tree(rng: np.random.Generator, vocab: int) -> DraftTree:
    n = int(rng.integers(1, 65))
    tree = DraftTree.rooted_at(int(rng.integers(vocab)))
    for i in range(1, n):
        tree.add(int(rng.integers(vocab)), int(rng.integers(i)), 1.0, VERTICAL if rng.random() < 0.5 else HORIZONTAL)
    return tree


def test_4_tree_attention(record):
    spec = ModelSpec(vocab_size=64, hidden_dim=16, n_layers=2, n_heads=2, context_limit=96)
    model = TransformerModel.random(spec, seed=3, scale=0.3)
    rng = np.random.default_rng(4)
    worst, mask_errors = 0.0, 0
    for _ in range(1000):
        tree = _random_tree(rng, spec.vocab_size)
        prefix = [int(t) for t in rng.integers(0, spec.vocab_size, int(rng.integers(1, 8)))]
        mask = build_mask(tree)
        closure = np.zeros_like(mask)
        for i in range(len(tree)):
            j = i
            while j >= 0:
                closure[i, j] = True
                j = tree.nodes[j].parent
        mask_errors += not np.array_equal(mask, closure)
        cache = model.new_cache()
        model.forward(prefix, cache)
        tokens, pos, attn = flatten(tree, cache.length)
        logits = model.forward(tokens, cache, attn_mask=attn, positions=pos).logits
        has_child = {n.parent for n in tree.nodes}
        for leaf in (i for i in range(len(tree)) if i not in has_child):
            path = np.flatnonzero(closure[leaf])  # ancestors in root-to-leaf order
            ref = model.forward(prefix + [tree.nodes[j].token for j in path], model.new_cache()).logits
            worst = max(worst, float(np.abs(ref[len(prefix):] - logits[path]).max()))
    ok = worst < 1e-10 and mask_errors == 0
    record("4", ok, f"max logit gap {worst:.2e}, {mask_errors} mask mismatches over 1000 trees")
    assert ok


def test_5_gradient_fidelity(record):
    spec = ModelSpec(vocab_size=32, hidden_dim=16, n_layers=1, n_heads=2, context_limit=64)
    target = TransformerModel.random(spec, seed=0, scale=0.5)
    cfg = DraftConfig()
    params = target_init_params(target, cfg, seed=1)
    params = {k: v + np.random.default_rng(2).normal(0, 0.1, v.shape) for k, v in params.items()}
    batch = teacher_batch(target, np.random.default_rng(3).integers(0, spec.vocab_size, (2, cfg.max_depth + 8)))
    start = time.perf_counter()
    _, grads = draft_loss_and_grads(target, cfg, params, batch)
    err = grad_check(lambda p: draft_loss_and_grads(target, cfg, p, batch, need_grad=False)[0].total,
                     params, grads, 1e-5, 300)
    elapsed = time.perf_counter() - start
    ok = err < 1e-4 and elapsed < 120
    record("5", ok, f"max relative error {err:.2e} (weights 0.1/1.0/0.1, 3 heads) in {elapsed:.1f}s")
    assert ok


# reference (extra memory GB, acceleration) pairs and their expected rendered ratios
EFFICIENCY_ROWS = [("S4C", 9.26, 2.26, "0.2440"), ("EAGLE", 9.30, 2.12, "0.2279"),
                   ("EAGLE-2", 10.54, 2.38, "0.2258"), ("Hydra", 12.31, 2.06, "0.1674")]


@pytest.mark.parametrize("idx", range(len(EFFICIENCY_ROWS)), ids=[r[0] for r in EFFICIENCY_ROWS])
def test_6_efficiency_ratio(idx, record):
    name, mem, acc, expected = EFFICIENCY_ROWS[idx]
    got = format_ratio(efficiency_ratio(acc, mem))
    record(f"6.{idx + 1}", got == expected,
           f"{name}: r = {acc}/{mem} = {efficiency_ratio(acc, mem):.6f} renders {got}, expected {expected}")
    assert got == expected


def test_7_temperature_trend(trained, tmp_path, record):
    _, target, draft = trained
    suite = load_suite(write_suite(tmp_path, n_bytes=20_000, seed=1, n_prompts=4, max_new=48))
    sweep = temperature_sweep(suite, target, draft, (0.0, 0.5, 1.0), seeds=(0, 1, 2, 3, 4))
    vals = [sweep[t] for t in (0.0, 0.5, 1.0)]
    monotone = vals[0] >= vals[1] >= vals[2]
    progress = min(vals) >= 1.0
    record("7", monotone and progress,
           "median mean accepted over 5 seeds at T=0/0.5/1.0: " + " / ".join(f"{v:.3f}" for v in vals))
    assert progress
    assert monotone


def test_8_training_effectiveness(trained, record):
    d, target, draft = trained
    log = [json.loads(line) for line in (d / "draft_log.jsonl").read_text().splitlines()]
    held = split_windows(corpus_windows((d / "corpus.txt").read_bytes(), 128))[1]
    batch = teacher_batch(target, held)
    untrained = S4CDraft(target, draft.cfg, target_init_params(target, draft.cfg, seed=0))
    before, after = top1_agreement(untrained, batch), top1_agreement(draft, batch)
    ok = log[-1]["total"] < log[0]["total"] and after > before and len(log) == 6
    record("8", ok, f"total loss {log[0]['total']:.3f} -> {log[-1]['total']:.3f}; "
                    f"held-out top-1 agreement {before:.3f} -> {after:.3f}")
    assert ok


def test_9_determinism(trained, tmp_path, record):
    d, target, draft = trained
    small = tmp_path / "small.txt"
    small.write_bytes(mixed_corpus(20_000, 2))
    model = ["--hidden", "16", "--layers", "1", "--attn-heads", "2", "--context", "128", "--epochs", "1"]
    files = {}
    for run in ("a", "b"):
        t, dr = tmp_path / f"t_{run}.s4cw", tmp_path / f"d_{run}.s4cw"
        assert main(["train-target", "--corpus", str(small), "--out", str(t), *model]) == 0
        assert main(["train-draft", "--weights", str(t), "--corpus", str(small), "--out", str(dr),
                     "--epochs", "1", "--heads", "2"]) == 0
        files[run] = (t.read_bytes(), dr.read_bytes())
    weights_same = files["a"] == files["b"]

    pair = ["--weights", str(d / "target.s4cw"), "--draft-weights", str(d / "draft.s4cw")]
    suite = write_suite(tmp_path / "suite", n_bytes=4000, n_prompts=2, max_new=16, temperatures=(0.0, 1.0))
    outputs = {}
    for run in ("a", "b"):
        gen, rep = tmp_path / f"gen_{run}.json", tmp_path / f"rep_{run}.json"
        assert main(["generate", *pair, "--temperature", "0.8", "--seed", "7", "--out", str(gen)]) == 0
        assert main(["bench", *pair, "--suite", str(suite), "--no-timing", "--out", str(rep)]) == 0
        outputs[run] = (gen.read_bytes(), rep.read_bytes())
    outputs_same = outputs["a"] == outputs["b"]

    weights_io.save_model(tmp_path / "again.s4cw", target)
    roundtrip = ((tmp_path / "again.s4cw").read_bytes() == (d / "target.s4cw").read_bytes()
                 and all(np.array_equal(weights_io.load_model(tmp_path / "again.s4cw").params[k], v)
                         for k, v in target.params.items()))
    ok = weights_same and outputs_same and roundtrip
    record("9", ok, f"weights identical {weights_same}, generate/bench JSON identical {outputs_same}, "
                    f"round-trip bit-exact {roundtrip}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
