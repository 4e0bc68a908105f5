"""End-to-end acceptance runs: gradient oracle, causality, loss and metric
oracles, learning-above-chance on the synthetic world, modality and
pre-training effects, determinism, and format robustness.

Each test prints one PASS/FAIL line (visible under ``pytest -s``). The
synthetic-world training criteria share module-scoped fixtures; the whole
module takes roughly 25 minutes on one desktop core, dominated by the
full-scale pipeline run and the seeded comparison trainings.
"""

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from anticipate import tensor as T
from anticipate.cli import main
from anticipate.config import desk_config
from anticipate.data import Corpus, read_features, write_features
from anticipate.errors import FormatError
from anticipate.gradcheck import module_checks, op_checks
from anticipate.losses import contrastive_loss
from anticipate.metrics import (
    class_mean_accuracy,
    derive_group_scores,
    spearman_rho,
    topk_accuracy,
)
from anticipate.model import (
    AnticipationModel,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from anticipate.rngstream import rng_stream
from anticipate.train import StageSettings, evaluate, run_stage
from anticipate.world import WorldConfig, build_world, export_corpus, oracle_accuracy

SEEDS = (11, 12, 13)
FT = dict(epochs=12, warmup=3, base_lr=1e-3, batch_size=16)
PT = dict(epochs=10, warmup=2, base_lr=1e-3, batch_size=16)
FROZEN = dict(epochs=8, warmup=2, base_lr=1e-3, batch_size=16, mode="frozen")
_SALT_INIT = 505


VERDICT_LINES = []


def verdict(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    VERDICT_LINES.append(line)
    print(line)  # immediate feedback when capture is off (-s runs)
    assert ok, detail


def top1(report):
    return report["action"]["overall"]["top1"]


# ---------------------------------------------------------------------------
# shared fixtures


@pytest.fixture(scope="module")
def full_pipeline(tmp_path_factory):
    """Full-scale run: 2000/500 corpus from the default world, 30-epoch
    pre-training, 30-epoch fine-tuning with every modality, one evaluation."""
    root = tmp_path_factory.mktemp("full")
    corpus_dir = root / "corpus"
    pre, fin, rep = root / "pre.ckpt", root / "fin.ckpt", root / "report.json"
    t0 = time.time()
    assert main(["gen-world", "--out", str(corpus_dir), "--seed", "7",
                 "--videos", "220", "--frames", "220",
                 "--train-cap", "2000", "--eval-cap", "500"]) == 0
    assert main(["pretrain", "--corpus", str(corpus_dir), "--seed", "7",
                 "--out", str(pre), "--log", str(root / "pre.csv")]) == 0
    assert main(["finetune", "--corpus", str(corpus_dir), "--seed", "7",
                 "--checkpoint", str(pre), "--out", str(fin),
                 "--log", str(root / "fin.csv")]) == 0
    assert main(["eval", "--corpus", str(corpus_dir), "--checkpoint", str(fin),
                 "--report", str(rep)]) == 0
    elapsed = time.time() - t0

    corpus = Corpus(corpus_dir)
    ev = corpus.segments("eval")
    world = build_world(WorldConfig(), 7)
    oracle = oracle_accuracy(
        world, [corpus.last_observed(d) for d in ev], [d.action for d in ev]
    )
    report = json.loads(rep.read_text(encoding="utf-8"))
    return {"report": report, "oracle": oracle, "elapsed": elapsed,
            "corpus_dir": corpus_dir, "checkpoint": fin, "log_dir": root}


@pytest.fixture(scope="module")
def reduced_corpus(tmp_path_factory):
    """Smaller 800/200 corpus from the same world for the seeded comparisons."""
    out = tmp_path_factory.mktemp("reduced") / "corpus"
    exp = desk_config(7)
    world = build_world(exp.world, 7)
    export_corpus(world, out, n_videos=110, frames_per_video=220,
                  window=exp.window, train_cap=800, eval_cap=200)
    return Corpus(out)


@pytest.fixture(scope="module")
def text_effect_runs(reduced_corpus):
    """Per-seed from-scratch fine-tunes: {rgb, act_text} against {rgb}."""
    exp = desk_config(7)
    runs = {}
    for s in SEEDS:
        with_text = AnticipationModel(exp.model, rng_stream(s, _SALT_INIT))
        run_stage(with_text, reduced_corpus, StageSettings(
            "finetune", seed=s, modalities=("rgb", "act_text"), **FT))
        ra, _ = evaluate(with_text, reduced_corpus, modalities=("rgb", "act_text"))

        rgb_only = AnticipationModel(exp.model, rng_stream(s, _SALT_INIT))
        run_stage(rgb_only, reduced_corpus, StageSettings(
            "finetune", seed=s, modalities=("rgb",), **FT))
        rb, _ = evaluate(rgb_only, reduced_corpus, modalities=("rgb",))

        runs[s] = {"model": with_text, "with_text": top1(ra), "rgb": top1(rb)}
    return runs


# ---------------------------------------------------------------------------
# criteria


class TestAcceptance:
    def test_c01_gradient_oracle(self):
        t0 = time.time()
        results = [runner() for _, runner in op_checks() + module_checks()]
        elapsed = time.time() - t0
        worst = max(r.max_rel_err for r in results)
        failed = [r.name for r in results if not r.passed]
        ok = not failed and elapsed < 120.0
        detail = (f"{len(results)} op/module checks, worst rel err "
                  f"{worst:.2e} (tol 1e-5), {elapsed:.1f}s (budget 120s)")
        if failed:
            detail += f", failed: {failed}"
        verdict(1, ok, detail)

    def test_c02_causality(self):
        config = ModelConfig()
        model = AnticipationModel(config, rng_stream(0, _SALT_INIT))
        frames = config.frames
        rng = np.random.default_rng(2024)
        names = list(config.modality_dims) + list(config.text_modalities)

        def sample_features():
            feats = {}
            for name, dim in config.modality_dims.items():
                feats[name] = rng.uniform(-1, 1, (1, frames, dim)).astype(np.float32)
            for name in config.text_modalities:
                ids = rng.integers(0, config.hash_buckets, (1, frames, 3))
                w = rng.uniform(-1, 1, (1, frames, 3)).astype(np.float32)
                feats[name] = (ids, w)
            return feats

        def perturb(feats, start):
            out = dict(feats)
            name = names[int(rng.integers(len(names)))]
            stop = frames if rng.integers(2) else start + 1  # suffix or one frame
            if name in config.modality_dims:
                arr = feats[name].copy()
                arr[:, start:stop] = rng.uniform(
                    -1, 1, arr[:, start:stop].shape).astype(np.float32)
                out[name] = arr
            else:
                ids, w = feats[name]
                ids, w = ids.copy(), w.copy()
                ids[:, start:stop] = rng.integers(
                    0, config.hash_buckets, ids[:, start:stop].shape)
                w[:, start:stop] = rng.uniform(
                    -1, 1, w[:, start:stop].shape).astype(np.float32)
                out[name] = (ids, w)
            return out

        clean_trials = 0
        for _ in range(100):
            t = int(rng.integers(0, frames - 1))
            feats = sample_features()
            base = model.encode(feats).anticipated.data
            poked = model.encode(perturb(feats, t + 1)).anticipated.data
            if np.array_equal(base[:, :t + 1], poked[:, :t + 1]):
                clean_trials += 1
        verdict(2, clean_trials == 100,
                f"{clean_trials}/100 future-perturbation trials left the "
                "anticipated prefix bitwise unchanged")

    def test_c03_contrastive_oracles(self):
        log_temp = T.Tensor(np.float64(0.0))

        single = contrastive_loss(
            T.Tensor(np.array([[1.0, 0.0]])), T.Tensor(np.array([[1.0, 0.0]])),
            log_temp).cross
        exact_zero = float(single.data) == 0.0

        eye = T.Tensor(np.eye(2))
        pair = contrastive_loss(eye, eye, log_temp).cross
        expect_pair = 2.0 * math.log(1.0 + math.exp(-1.0))
        pair_err = abs(float(pair.data) - expect_pair)

        rng = np.random.default_rng(99)
        vals = []
        for _ in range(100):
            v = rng.normal(size=(32, 256))
            t = rng.normal(size=(32, 256))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            t /= np.linalg.norm(t, axis=1, keepdims=True)
            loss = contrastive_loss(T.Tensor(v), T.Tensor(t), log_temp).cross
            vals.append(float(loss.data))
        mean = float(np.mean(vals))
        mean_err = abs(mean - 2.0 * math.log(32.0))

        ok = exact_zero and pair_err < 1e-6 and mean_err < 0.2
        verdict(3, ok,
                f"B=1 loss {float(single.data)!r} (want exactly 0.0), "
                f"orthogonal-pair err {pair_err:.2e} (tol 1e-6), "
                f"random-batch mean {mean:.4f} vs 2 ln 32 = "
                f"{2 * math.log(32):.4f} (tol 0.2)")

    def test_c04_learning_above_chance(self, full_pipeline):
        for name in ("pre.csv", "fin.csv"):
            rows = (full_pipeline["log_dir"] / name).read_text().splitlines()[1:]
            totals = [float(r.split(",")[5]) for r in rows]
            assert totals[-1] < totals[0], f"{name}: loss did not decrease"
        got = top1(full_pipeline["report"])
        oracle = full_pipeline["oracle"]["label_oracle_top1"]
        chance = full_pipeline["oracle"]["chance"]
        bar = chance + 0.6 * (oracle - chance)
        elapsed = full_pipeline["elapsed"]
        ok = got >= bar and elapsed <= 1200.0
        verdict(4, ok,
                f"top1 {got:.4f} >= bar {bar:.4f} "
                f"(chance {chance:.4f}, oracle {oracle:.4f}), "
                f"pipeline {elapsed / 60:.1f} min (budget 20 min)")

    def test_c05_text_modality_effect(self, text_effect_runs):
        gaps = {s: r["with_text"] - r["rgb"] for s, r in text_effect_runs.items()}
        wins = sum(1 for g in gaps.values() if g >= 0.05)
        shown = ", ".join(f"seed {s}: {100 * g:+.1f}pts" for s, g in gaps.items())
        verdict(5, wins >= 2,
                f"{{rgb, act_text}} vs {{rgb}} gaps [{shown}]; "
                f"{wins}/3 seeds >= 5pts (need 2)")

    def test_c06_corruption_trend(self, reduced_corpus, text_effect_runs):
        s = SEEDS[0]
        model = text_effect_runs[s]["model"]
        baseline = text_effect_runs[s]["rgb"]
        p_list = (0.0, 0.2, 0.5, 0.8, 1.0)
        accs = []
        for p in p_list:
            report, _ = evaluate(model, reduced_corpus,
                                 modalities=("rgb", "act_text"), corrupt_keep=p)
            accs.append(top1(report))
        span = accs[-1] - accs[0]
        rho = spearman_rho(p_list, accs)
        crossover = [p for p, a in zip(p_list, accs) if a > baseline]
        ok = span >= 0.05 and rho > 0.8 and bool(crossover)
        curve = " -> ".join(f"{a:.3f}" for a in accs)
        verdict(6, ok,
                f"sweep {curve}, span {100 * span:+.1f}pts (need 5), "
                f"rho {rho:.2f} (need > 0.8), first win over rgb baseline "
                f"{baseline:.3f} at p*={crossover[0] if crossover else 'none'}")

    def test_c07_pretraining_effect(self, reduced_corpus):
        exp = desk_config(7)
        gaps = {}
        for s in SEEDS:
            pretrained = AnticipationModel(exp.model, rng_stream(s, _SALT_INIT))
            run_stage(pretrained, reduced_corpus,
                      StageSettings("pretrain", seed=s, **PT))
            run_stage(pretrained, reduced_corpus,
                      StageSettings("finetune", seed=s + 1, **FROZEN))
            ra, _ = evaluate(pretrained, reduced_corpus)

            scratch = AnticipationModel(exp.model, rng_stream(s + 1000, _SALT_INIT))
            run_stage(scratch, reduced_corpus,
                      StageSettings("finetune", seed=s + 1, **FROZEN))
            rb, _ = evaluate(scratch, reduced_corpus)
            gaps[s] = top1(ra) - top1(rb)
        wins = sum(1 for g in gaps.values() if g >= 0.03)
        shown = ", ".join(f"seed {s}: {100 * g:+.1f}pts" for s, g in gaps.items())
        verdict(7, wins >= 2,
                f"frozen fine-tune, pretrained vs random trunk gaps [{shown}]; "
                f"{wins}/3 seeds >= 3pts (need 2)")

    def test_c08_metric_oracles(self):
        def brute_rank(row, target):
            better = sum(1 for s in row if s > row[target])
            tied_lower = sum(1 for j in range(target) if row[j] == row[target])
            return better + tied_lower

        def brute_topk(scores, targets, k):
            hits = [brute_rank(scores[i], targets[i]) < k
                    for i in range(len(targets))]
            return sum(hits) / len(hits)

        def brute_class_mean(scores, targets, k):
            rates = []
            for c in sorted(set(targets.tolist())):
                rows = [i for i in range(len(targets)) if targets[i] == c]
                rates.append(sum(brute_rank(scores[i], targets[i]) < k
                                 for i in rows) / len(rows))
            return sum(rates) / len(rates)

        def brute_marginal(scores, group_of, mode):
            out = np.zeros((scores.shape[0], int(max(group_of)) + 1))
            for i, row in enumerate(scores):
                shifted = np.exp(row - row.max())
                probs = shifted / shifted.sum()
                for g in range(out.shape[1]):
                    members = probs[np.asarray(group_of) == g]
                    out[i, g] = members.sum() if mode == "sum" else members.max()
            return out

        fixtures = [
            # distinct scores, unbalanced classes
            (np.array([[0.9, 0.1, 0.3, 0.2, 0.4, 0.05],
                       [0.2, 0.8, 0.1, 0.6, 0.3, 0.4],
                       [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
                       [0.6, 0.5, 0.4, 0.3, 0.2, 0.1]]),
             np.array([0, 3, 5, 0])),
            # ties everywhere: the rank rule must break toward lower ids
            (np.array([[0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
                       [1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
                       [0.0, 0.0, 2.0, 2.0, 2.0, 0.0]]),
             np.array([2, 1, 4])),
            # near-one-hot rows with a repeated class
            (np.array([[9.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                       [0.0, 9.0, 0.0, 0.0, 0.0, 0.0],
                       [0.0, 0.0, 0.0, 9.0, 0.0, 0.0],
                       [0.0, 0.0, 0.0, 0.0, 0.0, 9.0],
                       [9.0, 0.0, 0.0, 0.0, 0.0, 0.0]]),
             np.array([0, 1, 2, 5, 1])),
        ]
        verb_of = np.array([0, 0, 1, 1, 2, 2])
        noun_of = np.array([0, 1, 0, 1, 0, 1])

        mismatches = []
        for fi, (scores, targets) in enumerate(fixtures):
            for k in (1, 5):
                if topk_accuracy(scores, targets, k) != brute_topk(scores, targets, k):
                    mismatches.append(f"fixture {fi} top{k}")
                if class_mean_accuracy(scores, targets, k) != \
                        brute_class_mean(scores, targets, k):
                    mismatches.append(f"fixture {fi} class-mean@{k}")
            for group_of, label in ((verb_of, "verb"), (noun_of, "noun")):
                for mode in ("sum", "max"):
                    got = derive_group_scores(scores, group_of, mode=mode)
                    want = brute_marginal(scores, group_of, mode)
                    if not np.array_equal(got, want):
                        mismatches.append(f"fixture {fi} {label}-{mode}")
                    gt = np.asarray(group_of)[targets]
                    if topk_accuracy(got, gt, 1) != brute_topk(want, gt, 1):
                        mismatches.append(f"fixture {fi} {label}-{mode} top1")
        verdict(8, not mismatches,
                "top-k, class-mean, recall@5, and verb/noun marginalization "
                "match brute force exactly on 3 fixtures"
                + (f"; mismatches: {mismatches}" if mismatches else ""))

    def test_c09_determinism(self, reduced_corpus, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        save_checkpoint(
            AnticipationModel(desk_config(7).model, rng_stream(0, _SALT_INIT)),
            ckpt)
        reports = []
        for name in ("a.json", "b.json"):
            path = tmp_path / name
            rc = main(["eval", "--corpus", str(reduced_corpus.root),
                       "--checkpoint", str(ckpt), "--seed", "0",
                       "--report", str(path)])
            assert rc == 0
            reports.append(path.read_bytes())
        eval_ok = reports[0] == reports[1]

        def tree_hashes(out):
            world = build_world(WorldConfig(), 7)
            export_corpus(world, out, n_videos=20, frames_per_video=60)
            return {
                str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(out.rglob("*")) if p.is_file()
            }

        hashes_a = tree_hashes(tmp_path / "corpus_a")
        hashes_b = tree_hashes(tmp_path / "corpus_b")
        corpus_ok = hashes_a == hashes_b and len(hashes_a) > 0
        verdict(9, eval_ok and corpus_ok,
                f"eval reports byte-identical: {eval_ok}; corpus re-export "
                f"hashes identical over {len(hashes_a)} files: {corpus_ok}")

    def test_c10_format_robustness(self, reduced_corpus, tmp_path):
        model = AnticipationModel(
            ModelConfig(dim=32, heads=2, fuser_depth=1, decoder_depth=1,
                        contrast_dim=16, hash_buckets=256),
            rng_stream(5, _SALT_INIT))
        ckpt = tmp_path / "model.ckpt"
        save_checkpoint(model, ckpt)
        loaded = load_checkpoint(ckpt)
        params_ok = all(
            name == lname and np.array_equal(p.data, lp.data)
            for (name, p), (lname, lp) in zip(model.named_params(),
                                              loaded.named_params()))
        again = tmp_path / "again.ckpt"
        save_checkpoint(loaded, again)
        bytes_ok = ckpt.read_bytes() == again.read_bytes()

        rng = np.random.default_rng(1)
        feats = rng.normal(size=(37, 16)).astype(np.float32)
        fpath = tmp_path / "feats.bin"
        write_features(fpath, feats)
        feats_ok = np.array_equal(read_features(fpath), feats) \
            and read_features(fpath).dtype == np.float32

        corrupted = tmp_path / "bad.ckpt"
        blob = bytearray(ckpt.read_bytes())
        blob[:4] = b"OOPS"
        corrupted.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(corrupted)
        rc = main(["eval", "--corpus", str(reduced_corpus.root),
                   "--checkpoint", str(corrupted),
                   "--report", str(tmp_path / "r.json")])
        magic_ok = rc == 2

        ok = params_ok and bytes_ok and feats_ok and magic_ok
        verdict(10, ok,
                f"checkpoint round-trip bitwise: {params_ok and bytes_ok}; "
                f"feature-file round-trip bitwise: {feats_ok}; "
                f"corrupted magic -> exit code 2: {magic_ok}")
