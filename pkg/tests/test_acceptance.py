"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

The trained-model criteria (7-10) share session fixtures; the whole module
takes roughly half an hour on one CPU core.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import test_gradcheck
from constructed import ten_instance_set
from lingspot.bezier import sample_bezier
from lingspot.cli import corpus_from_config, scenes_from_config
from lingspot.config import RunConfig, load_config
from lingspot.evaluation import Instance, Lexicon, analyze, edit_distance, evaluate, lexicon_correct, match_detections
from lingspot.infill import infill_corrupt, nearest_achievable
from lingspot.losses import LossBreakdown, LossWeights, focal_loss, language_loss
from lingspot.matching import hungarian
from lingspot.plm import (
    PlmConfig,
    TextDecoder,
    build_plm,
    corrupt_entry,
    entry_seed,
    greedy_decode,
    plm_loss,
    pretrain,
    reconstruct,
    reconstruction_accuracy,
)
from lingspot.spotter import (
    build_spotter,
    compute_losses,
    images_tensor,
    infer,
    init_from_plm,
    make_targets,
    train,
)
from lingspot.vocab import DEFAULT_CHARSET, WORD_INITIAL, decode, encode
from oracles import brute_force_assignment, recursive_edit_distance

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _random_text(rng, n_words):
    return " ".join("".join(rng.choice(list(DEFAULT_CHARSET), size=int(rng.integers(1, 9))))
                    for _ in range(n_words))


# 1-6, 11: no training ------------------------------------------------------------

def test_criterion_01_tokenizer(vocab, criterion):
    with criterion(1, "tokenizer") as rec:
        rng = np.random.default_rng(1)
        texts = [_random_text(rng, int(rng.integers(1, 4))) for _ in range(10_000)]
        failures = sum(decode(encode(t, vocab), vocab) != t for t in texts)
        pie = encode("apple pie", vocab).ids
        rec.detail = f"size={vocab.size} round-trip failures={failures}/10000"
        assert vocab.size == 194
        assert failures == 0
        assert vocab.entries[pie[5]].kind == WORD_INITIAL and vocab.entries[pie[5]].surface == "p"
        assert rec.elapsed < 60


def test_criterion_02_corruption(vocab, criterion):
    with criterion(2, "infilling corruption") as rec:
        rng = np.random.default_rng(2)
        in_range = flagged = order_kept = 0
        for i in range(10_000):
            y = encode(_random_text(rng, int(rng.integers(1, 4))), vocab)
            pair = infill_corrupt(y, vocab, seed=i)
            ids, out = y.content(), pair.corrupted.content()
            n_alpha = sum(vocab.is_alpha(t) for t in ids)
            kept = [t for t in ids if not vocab.is_alpha(t)] == [t for t in out if t != vocab.mask_id and not vocab.is_alpha(t)]
            order_kept += kept
            if n_alpha == 0:
                in_range += 1
            elif pair.achievable:
                in_range += 0.2 - 1e-9 <= pair.masked_fraction <= 0.4 + 1e-9
            else:
                # no integer count reaches the range: nearest count used and flagged
                flagged += 1
                in_range += len(pair.masked_positions) == nearest_achievable(n_alpha)
        rec.detail = f"in range {in_range}/10000 ({flagged} flagged short), order preserved {order_kept}/10000"
        assert in_range == 10_000
        assert order_kept == 10_000
        assert rec.elapsed < 60


def test_criterion_03_causality(criterion):
    with criterion(3, "decoder causality") as rec:
        rng = np.random.default_rng(3)
        worst = 0.0
        for trial in range(100):
            heads = int(rng.choice([1, 2, 4]))
            dim = heads * int(rng.choice([4, 8]))
            cfg = PlmConfig(dim=dim, heads=heads, encoder_layers=int(rng.integers(1, 3)),
                            decoder_layers=int(rng.integers(1, 3)), max_length=16)
            model = build_plm(cfg, seed=trial).eval()
            length = int(rng.integers(2, 12))
            t = int(rng.integers(0, length - 1))
            src = torch.from_numpy(rng.integers(6, 194, (2, int(rng.integers(1, 10)))))
            tgt = torch.from_numpy(rng.integers(6, 194, (2, length)))
            pert = tgt.clone()
            pert[:, t + 1 :] = torch.from_numpy(rng.integers(6, 194, (2, length - t - 1)))
            with torch.no_grad():
                a, b = model(src, tgt)[:, : t + 1], model(src, pert)[:, : t + 1]
            worst = max(worst, (a - b).abs().max().item())
        rec.detail = f"max change at or before t: {worst:.2e}"
        assert worst < 1e-6
        assert rec.elapsed < 60


def test_criterion_04_gradients(vocab, criterion):
    with criterion(4, "finite-difference gradients") as rec:
        test_gradcheck.test_plm_gradients(vocab)
        test_gradcheck.test_proposal_head_gradients()
        test_gradcheck.test_point_head_gradients()
        test_gradcheck.test_position_query_gradients()
        test_gradcheck.test_projection_gradients()
        rec.detail = "PLM (1 layer, D=16), proposal/point heads, position queries, projection"
        assert rec.elapsed < 300


def test_criterion_05_hungarian(criterion):
    with criterion(5, "Hungarian vs brute force") as rec:
        rng = np.random.default_rng(5)
        mismatches = 0
        for trial in range(1000):
            n, m = int(rng.integers(1, 8)), int(rng.integers(1, 8))
            # half the trials use small integers so exact ties are common
            cost = rng.normal(size=(n, m)) if trial % 2 else rng.integers(0, 4, (n, m)).astype(float)
            res = hungarian(cost)
            rows, cols = zip(*res.pairs)
            assert len(res.pairs) == min(n, m) and len(set(rows)) == len(set(cols)) == len(rows)
            mismatches += res.total != brute_force_assignment(cost)
        rec.detail = f"exact cost mismatches {mismatches}/1000"
        assert mismatches == 0
        assert rec.elapsed < 60


def test_criterion_06_loss_identities(vocab, criterion):
    with criterion(6, "loss identities") as rec:
        g = torch.Generator().manual_seed(6)
        comps = {k: torch.rand((), generator=g, dtype=torch.float64) * 10
                 for k in ("enc_cls", "enc_coord", "dec_cls", "dec_coord", "dec_bd", "text")}
        lb = LossBreakdown.combine(comps, LossWeights(enc_cls=3.0, dec_bd=0.5))
        additivity = abs((lb.total - (lb.vis_enc + lb.vis_dec + lb.lang_dec)).item())

        logits = torch.randn(200, generator=g, dtype=torch.float64) * 3
        labels = (torch.rand(200, generator=g) > 0.7).double()
        ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, labels)
        focal_gap = abs(focal_loss(logits, labels, alpha=0.5, gamma=0.0).item() - 0.5 * ce.item())

        dec = TextDecoder(PlmConfig(dim=16, heads=2, encoder_layers=1, decoder_layers=1)).double()
        with torch.no_grad():
            dec.head.weight.zero_()
            dec.head.bias.zero_()
        tokens = torch.tensor([[7, 8, 9, 10, 2, 0]])  # S = 5 tokens including </s>
        _, raw, _ = language_loss(dec, torch.randn(3, 4, 16, dtype=torch.float64), [1], tokens, 6.0,
                                  vocab.bos_id, vocab.pad_id)
        nll_gap = abs(raw.item() - 5 * math.log(194))
        nll = plm_loss(torch.zeros(1, 6, 194, dtype=torch.float64), tokens, vocab.pad_id)
        nll_gap = max(nll_gap, abs(nll.total.item() - 5 * math.log(194)))
        rec.detail = f"additivity {additivity:.1e}, focal-CE {focal_gap:.1e}, uniform NLL {nll_gap:.1e}"
        assert additivity == 0.0
        assert focal_gap < 1e-7
        assert nll_gap < 1e-6


def test_criterion_11_eval_protocol(criterion):
    with criterion(11, "evaluation protocol") as rec:
        rng = np.random.default_rng(11)
        alphabet = list("abcdeXY")

        def word():
            return "".join(rng.choice(alphabet, size=int(rng.integers(0, 8))))

        violations = 0
        for i in range(10_000):
            a, b, c = word(), word(), word()
            dab = edit_distance(a, b)
            violations += (dab == 0) != (a == b)
            violations += dab != edit_distance(b, a)
            violations += edit_distance(a, c) > dab + edit_distance(b, c)
            if i < 500:
                violations += dab != recursive_edit_distance(a, b)
        lex = Lexicon(["LOSTWORLD", "WORLD"])
        fig_case = edit_distance("TOSTWORLD", "LOSTWORLD") == 1 and lex.correct("TOSTWORLD") == "LOSTWORLD"
        entry = "abcdefghij"
        boundaries = [
            lexicon_correct("abXYefghij", Lexicon([entry])) == entry,  # distance 2: accepted
            lexicon_correct("XYZdefghij", Lexicon([entry])) is None,  # distance 3: rejected
            lexicon_correct("XYZdefghij", Lexicon([entry], "normalized")) == entry,  # 3/10 = 0.3
            lexicon_correct("WXYZefghij", Lexicon([entry], "normalized")) is None,  # 0.4
            lexicon_correct("abXde", Lexicon(["abcde"], "normalized")) == "abcde",  # 0.2
            lexicon_correct("aXYde", Lexicon(["abcde"], "normalized")) is None,  # 0.4
        ]
        gts, preds_a, preds_b = ten_instance_set()
        train_words = {"cat", "house", "dog", "sun", "window"}
        rep = analyze([match_detections(p, g) for p, g in zip(preds_a, gts)], train_words)
        bins = {k: (b.count, b.correct) for k, b in rep.length_bins.items()}
        vocab_split = {k: (b.count, b.correct) for k, b in rep.vocab.items()}
        cmp = analyze([match_detections(p, g) for p, g in zip(preds_a, gts)], train_words,
                      other=[match_detections(p, g) for p, g in zip(preds_b, gts)]).comparison
        tables = (
            (rep.n_pred, rep.n_gt, rep.detected, rep.true_positives) == (10, 10, 9, 7)
            and math.isclose(rep.hmean, 0.7)
            and bins == {"<3": (1, 1), "3-5": (4, 3), "6-10": (3, 2), "11+": (1, 1)}
            and vocab_split == {"in-vocab": (5, 4), "oov": (4, 3)}
            and cmp["intersection"] == 7
            and math.isclose(cmp["accuracy_a"], 5 / 7) and math.isclose(cmp["accuracy_b"], 6 / 7)
        )
        rec.detail = (f"metric violations {violations}, TOSTWORLD ok={fig_case}, "
                      f"threshold cases {sum(boundaries)}/{len(boundaries)}, tables ok={tables}")
        assert violations == 0
        assert fig_case
        assert all(boundaries)
        assert tables


# 7-10: trained models ------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_config():
    cfg = load_config(CONFIGS / "desk.yaml")
    assert cfg == RunConfig(), "configs/desk.yaml has drifted from the built-in defaults"
    return cfg


@pytest.fixture(scope="session")
def desk_corpus(desk_config, vocab, tmp_path_factory):
    return corpus_from_config(desk_config, vocab, tmp_path_factory.mktemp("sources"))


@pytest.fixture(scope="session")
def trained_plm(desk_config, desk_corpus, vocab):
    torch.manual_seed(desk_config.seed)
    model = build_plm(desk_config.plm.model(vocab.size), seed=desk_config.seed)
    start = time.perf_counter()
    ckpt, metrics = pretrain(desk_corpus, model, vocab, desk_config.plm.schedule(desk_config.seed))
    seconds = time.perf_counter() - start
    accuracy = reconstruction_accuracy(model, [e.text for e in desk_corpus], vocab)
    return model, ckpt, accuracy, seconds


def _train_spotter(cfg, samples, vocab, seed, plm_ckpt):
    model = build_spotter(cfg.spotter_config(vocab.size), seed=seed)
    if plm_ckpt is not None:
        init_from_plm(plm_ckpt, model, vocab)
    train(samples, model, vocab, cfg.spotter.schedule(seed))
    return model


def _evaluate(model, samples, vocab):
    results = infer(samples, model, vocab)
    preds = [[Instance(d.polygon, d.transcription, d.score) for d in r.detections] for r in results]
    gts = [[Instance(g.polygon(), g.transcription) for g in s.instances] for s in samples]
    return evaluate(preds, gts)


@pytest.fixture(scope="session")
def desk_scenes(desk_config, desk_corpus):
    return scenes_from_config(desk_config, desk_corpus)


@pytest.fixture(scope="session")
def desk_spotters(desk_config, desk_scenes, trained_plm, vocab):
    ckpt = trained_plm[1]
    return {seed: _train_spotter(desk_config, desk_scenes, vocab, seed, ckpt) for seed in (0, 1)}


def test_criterion_07_plm_pretraining(trained_plm, desk_corpus, criterion):
    _, ckpt, accuracy, seconds = trained_plm
    with criterion(7, "PLM desk pretraining") as rec:
        rec.detail = (f"{len(desk_corpus)} entries, held-in masked accuracy {accuracy:.4f}, "
                      f"{ckpt.meta['steps']} steps in {seconds:.0f}s")
        assert len(desk_corpus) == 500
        assert accuracy >= 0.95
        assert seconds <= 4 * 3600


def test_criterion_08_transfer_equivalence(trained_plm, desk_config, desk_corpus, vocab, criterion):
    plm, ckpt, _, _ = trained_plm
    with criterion(8, "decoder transfer equivalence") as rec:
        spotter = init_from_plm(ckpt, build_spotter(desk_config.spotter_config(vocab.size), seed=9), vocab).eval()
        T = desk_config.plm.max_length
        sources = [corrupt_entry(e.text, vocab, T, entry_seed(8, 0, i)).corrupted for i, e in enumerate(desk_corpus[:100])]
        expected = reconstruct(plm, sources, vocab)
        src = torch.full((100, max(s.length for s in sources)), vocab.pad_id, dtype=torch.long)
        for i, s in enumerate(sources):
            src[i, : s.length] = torch.tensor(s.content())
        pad = src == vocab.pad_id
        with torch.no_grad():
            got = greedy_decode(spotter.text_decoder, plm.encode(src, pad), T, vocab.bos_id, vocab.eos_id, pad)
        same = sum(a == b for a, b in zip(expected, got))
        rec.detail = f"{same}/100 identical token sequences"
        assert same == 100


def test_criterion_09_desk_spotting(desk_spotters, desk_scenes, vocab, criterion):
    with criterion(9, "end-to-end desk spotting") as rec:
        reports = {seed: _evaluate(m, desk_scenes, vocab) for seed, m in desk_spotters.items()}
        acc = {s: r.word_accuracy for s, r in reports.items()}
        rec_ = {s: r.det_recall for s, r in reports.items()}
        rec.detail = " | ".join(f"seed {s}: acc {acc[s]:.4f} recall {rec_[s]:.4f}" for s in reports)
        rec.detail += f" | gap {abs(acc[0] - acc[1]) * 100:.2f} pts"
        assert len(desk_scenes) == 200
        for s in reports:
            assert acc[s] >= 0.90
            assert rec_[s] >= 0.95
        assert abs(acc[0] - acc[1]) <= 0.02


def test_desk_model_audits(desk_spotters, desk_scenes, vocab):
    """Proposal recall and centre-line error of the trained desk model."""
    model = desk_spotters[0].eval()
    n_pts = model.cfg.visual.num_points
    hits = total = 0
    errors = []
    for start in range(0, len(desk_scenes), 25):
        chunk = desk_scenes[start : start + 25]
        targets = [make_targets(s.instances, vocab, n_pts, model.max_length) for s in chunk]
        with torch.no_grad():
            out, zvl = model(images_tensor(chunk))
            res = compute_losses(model, out, zvl, targets, vocab)
        for b, tgt in enumerate(targets):
            chosen = out.enc_ctrl[b][out.selected[b]]
            proposals = sample_bezier(chosen, n_pts)  # (K, N, 2)
            for g in range(len(tgt.texts)):
                half_height = (tgt.top[g] - tgt.bottom[g]).norm(dim=-1).mean() / 2
                dist = (proposals - tgt.center[g]).norm(dim=-1).mean(-1)
                hits += bool((dist < half_height).any())
                total += 1
            for r, c in res.dec_matches[b].pairs:
                errors.append((out.center[b, r] - tgt.center[c]).norm(dim=-1).mean().item())
    assert hits / total >= 0.95
    assert float(np.mean(errors)) <= 2.0


def test_criterion_10_plm_benefit(trained_plm, desk_corpus, vocab, criterion):
    cfg = load_config(CONFIGS / "plm_benefit.yaml")
    scenes = scenes_from_config(cfg, desk_corpus)
    with criterion(10, "PLM initialisation benefit") as rec:
        plm_arm = _train_spotter(cfg, scenes, vocab, cfg.seed, trained_plm[1])
        random_arm = _train_spotter(cfg, scenes, vocab, cfg.seed, None)
        a = _evaluate(plm_arm, scenes, vocab).word_accuracy
        b = _evaluate(random_arm, scenes, vocab).word_accuracy
        rec.detail = (f"degraded suite, {cfg.spotter.steps} steps each: PLM init {a:.4f} vs random {b:.4f}, "
                      f"margin {(a - b) * 100:+.2f} pts")
        assert a > b
