"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line (outside pytest's output
capture) and then asserts. Run on its own with::

    pytest tests/test_acceptance.py -v
    python tests/test_acceptance.py
"""

import math
import sys
import time

import numpy as np
import pytest

from tipformer import autodiff as ad
from tipformer.cli import main
from tipformer.data import parse_corpus, split, write_corpus
from tipformer.embeddings import EmbeddingStore, Featurizer, load_embeddings, protein_fallback, save_embeddings, toxin_fallback
from tipformer.evaluation import ConfusionCounts, compute_metrics, roc_auc
from tipformer.model import ModelConfig, TipFormer, init_params, interaction_layer, rank_hotspots
from tipformer.toy import make_toy_corpus
from tipformer.training import RAdamState, TrainConfig, fit, load_checkpoint, lookahead_sync, radam_step, save_checkpoint


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")

    return emit


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    """The default synthetic corpus written by the make-toy command."""
    root = tmp_path_factory.mktemp("acceptance_toy")
    assert main(["make-toy", "--out", str(root), "--seed", "0"]) == 0
    return root


@pytest.fixture(scope="module")
def toy_corpus(toy_dir):
    return parse_corpus(toy_dir / "toxins.tsv", toy_dir / "proteins.tsv", toy_dir / "pairs.tsv")


@pytest.fixture(scope="module")
def toy_feats(toy_corpus):
    return Featurizer(toy_corpus, toxin_fallback(), protein_fallback())


def t64(a):
    return ad.Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def read_metric_rows(path):
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    return header, [dict(zip(header, line.split("\t"))) for line in lines[1:]]


# ---------------------------------------------------------------- 1


def test_criterion_1_repeat_protocol(toy_dir, tmp_path, report):
    """Five repeats, mean/std rows and all seven metric columns on a user corpus.

    Full-scale accuracy needs a large curated corpus and pretrained language
    model embeddings, so it is not a target; only the protocol is checked.
    """
    small = tmp_path / "corpus"
    write_corpus(make_toy_corpus(n_toxins=20, n_proteins=20, n_pairs=60, seed=11), small)
    out = tmp_path / "table.tsv"
    args = ["evaluate", "--toxins", str(small / "toxins.tsv"), "--proteins", str(small / "proteins.tsv"),
            "--pairs", str(small / "pairs.tsv"), "--repeats", "5", "--seed", "1", "--epochs", "2", "--out", str(out)]
    start = time.perf_counter()
    code = main(args)
    header, rows = read_metric_rows(out) if out.exists() else ([], [])
    ok = (
        code == 0
        and header == ["run", "acc", "sn", "sp", "pre", "f1", "mcc", "auc"]
        and [r["run"] for r in rows] == ["0", "1", "2", "3", "4", "mean", "std"]
    )
    if ok:
        accs = [float(r["acc"]) for r in rows[:5]]
        ok = math.isclose(float(rows[5]["acc"]), float(np.mean(accs)), abs_tol=1e-6)
        ok = ok and math.isclose(float(rows[6]["acc"]), float(np.std(accs, ddof=1)), abs_tol=1e-6)
    report(1, ok, f"5-repeat protocol wrote run/mean/std rows x 7 metrics in {time.perf_counter() - start:.1f}s "
                  "(full-scale accuracy is not an acceptance target)")
    assert ok


# ---------------------------------------------------------------- 2


def _op_checks(rng):
    x = t64(rng.normal(size=(4, 6)))
    y = t64(rng.normal(size=(6, 3)))
    w43 = rng.normal(size=(4, 3))
    g, b = t64(rng.normal(size=6)), t64(rng.normal(size=6))
    ker, cb = t64(rng.normal(size=(3, 6, 4))), t64(rng.normal(size=4))
    table = t64(rng.normal(size=(7, 3)))
    idx = np.array([0, 3, 3, 6])
    targets = (rng.random((4, 6)) > 0.5).astype(float)

    def probe(out):
        # fixed, shape-dependent weights keep every op output in the loss
        w = np.cos(np.arange(out.data.size) * 1.7).reshape(out.shape) + 0.3
        return ad.sum(ad.mul(out, w))

    return {
        "add/sub/mul": (lambda a: probe(ad.mul(ad.sub(a, 0.3), ad.add(a, a))), [x]),
        "sigmoid": (lambda a: probe(ad.sigmoid(a)), [x]),
        "matmul": (lambda a, c: probe(ad.matmul(a, c)), [x, y]),
        "batched matmul": (lambda a: probe(ad.matmul(ad.reshape(a, (2, 2, 6)), ad.reshape(a, (2, 6, 2)))), [x]),
        "conv1d": (lambda a, k, c: probe(ad.conv1d(a, k, c)), [x, ker, cb]),
        "glu": (lambda a: probe(ad.glu(a)), [x]),
        "layer_norm": (lambda a, gg, bb: probe(ad.layer_norm(a, gg, bb)), [x, g, b]),
        "softmax": (lambda a: probe(ad.softmax(a)), [x]),
        "dropout (eval)": (lambda a: probe(ad.dropout(a, 0.2, train=False)), [x]),
        "concat/transpose/reshape": (lambda a: probe(ad.reshape(ad.transpose(ad.concat([a, a], 0)), (12, 4))), [x]),
        "take_rows": (lambda t: probe(ad.take_rows(t, idx)), [table]),
        "sum/mean": (lambda a: ad.add(probe(ad.sum(a, axis=0)), probe(ad.mean(a, axis=1))), [x]),
        "row_l2_norm": (lambda a: probe(ad.row_l2_norm(a)), [x]),
        "linear": (lambda a, c: probe(ad.linear(a, c, t64(np.ones(3)))), [x, y]),
        "bce": (lambda a: ad.bce(ad.sigmoid(a), targets), [x]),
    }


def test_criterion_2_gradient_suite(report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    failures, worst = [], 0.0
    checks = _op_checks(rng)
    for name, (f, xs) in checks.items():
        res = ad.grad_check(f, xs, h=1e-3, tol=1e-3)
        worst = max(worst, res.max_rel_error)
        if not res.passed:
            failures.append(name)

    model = TipFormer(ModelConfig(), seed=0)
    toxin, protein = rng.integers(0, 94, size=4), rng.integers(0, 21, size=6)

    def full(*_):
        prob, _ = model.forward(toxin, protein, train=False)
        return ad.bce(prob, 1.0)

    res = ad.grad_check(full, model.parameters(), h=1e-3, tol=1e-3, max_per_tensor=20, seed=0)
    worst = max(worst, res.max_rel_error)
    if not res.passed:
        failures.append("full model")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    report(2, ok, f"{len(checks)} ops + full model ({res.checked} parameter entries, 4x6 tokens) "
                  f"max rel err {worst:.2e} <= 1e-3, {elapsed:.1f}s < 60s" + (f"; failed: {failures}" if failures else ""))
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_metrics_oracle(report):
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(1000):
        tp, fp, tn, fn = (int(v) for v in rng.integers(0, 40, size=4))
        if tp + fp + tn + fn == 0:
            tn = 1
        r = compute_metrics(ConfusionCounts(tp, fp, tn, fn))
        total = tp + fp + tn + fn
        oracle = {
            "sn": tp / (tp + fn) if tp + fn else None,
            "sp": tn / (tn + fp) if tn + fp else None,
            "pre": tp / (tp + fp) if tp + fp else None,
            "acc": (tp + tn) / total,
        }
        sn, pre = oracle["sn"], oracle["pre"]
        oracle["f1"] = None if sn is None or pre is None or sn + pre == 0 else 2 * sn * pre / (sn + pre)
        den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        oracle["mcc"] = (tp * tn - fp * fn) / math.sqrt(den) if den else None
        for k, v in oracle.items():
            got = r.get(k)
            if (v is None) != (got is None) or (v is not None and abs(got - v) > 1e-12):
                bad += 1
    auc_bad = 0
    for _ in range(200):
        n = int(rng.integers(2, 50))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 8, n) / 8.0
        pos, neg = scores[labels == 1], scores[labels == 0]
        twice = sum(2 if p > q else int(p == q) for p in pos for q in neg)
        if roc_auc(scores, labels)[0] != twice / (2 * len(pos) * len(neg)):
            auc_bad += 1
    hand = compute_metrics(ConfusionCounts(tp=3, fp=1, tn=4, fn=2))
    ext = compute_metrics(ConfusionCounts(tp=109, fp=29, tn=0, fn=0))
    ok = bad == 0 and auc_bad == 0 and round(hand.mcc, 4) == 0.4082 and round(ext.pre, 3) == 0.790
    report(3, ok, f"1000 tables ({bad} mismatches), 200 AUC sets ({auc_bad} inexact), "
                  f"MCC {hand.mcc:.4f}, Pre 109/138 = {ext.pre:.3f}")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_4_optimizer(report):
    theta = np.array([1.0])
    radam_step(theta, np.array([1.0]), RAdamState(np.zeros(1), np.zeros(1)), TrainConfig(learning_rate=1e-4))
    trace_ok = abs(theta[0] - 0.9999) <= 1e-9

    x = np.array([1.0])
    state, cfg, steps = RAdamState(np.zeros(1), np.zeros(1)), TrainConfig(learning_rate=0.1), None
    for i in range(1, 501):
        radam_step(x, 2 * x, state, cfg)
        if steps is None and abs(x[0]) < 1e-3:
            steps = i
    min_ok = abs(x[0]) < 1e-3

    rng = np.random.default_rng(4)
    fast, slow = rng.normal(size=100), rng.normal(size=100)
    expected = slow + 0.5 * (fast - slow)
    lookahead_sync(fast, slow, 0.5)
    la_ok = np.array_equal(slow, expected) and np.array_equal(fast, expected)

    ok = trace_ok and min_ok and la_ok
    report(4, ok, f"step-1 theta={theta[0]:.12f}; |theta|<1e-3 after {steps} steps (final {abs(x[0]):.1e}); "
                  f"LookAhead exact={la_ok}")
    assert ok


# ---------------------------------------------------------------- 5


def _accuracy(path):
    _, rows = read_metric_rows(path)
    return float(rows[0]["acc"])


def test_criterion_5_toy_learning(toy_dir, tmp_path, report):
    ents = ["--toxins", str(toy_dir / "toxins.tsv"), "--proteins", str(toy_dir / "proteins.tsv")]
    manifest = tmp_path / "manifest.tsv"
    start = time.perf_counter()
    assert main(["split", *ents, "--pairs", str(toy_dir / "pairs.tsv"), "--seed", "0", "--out", str(manifest)]) == 0
    results = {}
    for variant in ("tipformer", "deepcnn"):
        ckpt = tmp_path / f"{variant}.tpfc"
        t0 = time.perf_counter()
        code = main(["train", *ents, "--manifest", str(manifest), "--variant", variant, "--seed", "0",
                     "--checkpoint", str(ckpt)])
        accs = {}
        for part in ("train", "test"):
            out = tmp_path / f"{variant}_{part}.tsv"
            main(["evaluate", *ents, "--manifest", str(manifest), "--checkpoint", str(ckpt),
                  "--partition", part, "--out", str(out)])
            accs[part] = _accuracy(out)
        results[variant] = (code, accs, time.perf_counter() - (start if variant == "tipformer" else t0))
    code, accs, elapsed = results["tipformer"]
    cnn_code, cnn_accs, cnn_time = results["deepcnn"]
    ok = code == 0 and accs["train"] >= 0.95 and accs["test"] >= 0.85 and elapsed < 300 and cnn_code == 0
    report(5, ok, f"tipFormer train acc {accs['train']:.3f} (>=0.95), held-out acc {accs['test']:.3f} (>=0.85), "
                  f"{elapsed:.0f}s (<300s); DeepCNN completed={cnn_code == 0} train {cnn_accs['train']:.3f} "
                  f"held-out {cnn_accs['test']:.3f} ({cnn_time:.0f}s, reported only)")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_6_split_invariants(toy_corpus, report):
    pairs = list(toy_corpus.pairs)
    key = sorted(p.key for p in pairs)
    bad = []
    for policy, attr in (("new_toxin", "toxin_id"), ("new_target", "protein_id")):
        for seed in range(100):
            ds = split(pairs, policy, (0.8, 0.1, 0.1), seed)
            seen = {getattr(p, attr) for p in ds.train + ds.validation}
            held = {getattr(p, attr) for p in ds.test}
            covered = sorted(p.key for p in ds.all_pairs()) == key and len(ds.all_pairs()) == len(pairs)
            if seen & held or not covered:
                bad.append((policy, seed))
    ok = not bad
    report(6, ok, f"200 cold splits (100 seeds x new-toxin/new-target): {len(bad)} with overlap or incomplete cover")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_determinism(toy_corpus, toy_feats, tmp_path, report):
    ds = split(toy_corpus.pairs, "random", (0.8, 0.1, 0.1), seed=0)
    cfg = TrainConfig(max_epochs=3, seed=5)
    blobs = []
    for name in ("a", "b"):
        result = fit(ds, TipFormer(ModelConfig(), seed=5), cfg, toy_feats)
        save_checkpoint(result.model, tmp_path / name, result.optimizer, cfg, result.best_metadata())
        blobs.append((tmp_path / name).read_bytes())
    same_ckpt = blobs[0] == blobs[1]

    loaded = load_checkpoint(tmp_path / "a").model
    rng = np.random.default_rng(7)
    tids, pids = list(toy_corpus.toxins), list(toy_corpus.proteins)
    mismatched = 0
    for _ in range(100):
        t, p = toy_feats.toxin(tids[rng.integers(len(tids))]), toy_feats.protein(pids[rng.integers(len(pids))])
        if result.model.predict(t, p) != loaded.predict(t, p):
            mismatched += 1

    store = EmbeddingStore(16)
    for i in range(20):
        values = rng.normal(size=(int(rng.integers(1, 30)), 16)).astype(np.float32)
        values[0, :4] = [0.0, -0.0, np.float32(1e-45), np.finfo(np.float32).max]
        store.add(f"E{i}", values)
    save_embeddings(store, tmp_path / "e.tpfe")
    back = load_embeddings(tmp_path / "e.tpfe", expected_dim=16)
    tpfe_ok = list(back) == list(store) and all(back[k].values.tobytes() == store[k].values.tobytes() for k in store)

    ok = same_ckpt and mismatched == 0 and tpfe_ok
    report(7, ok, f"3-epoch checkpoints identical={same_ckpt} ({len(blobs[0])} bytes); "
                  f"{mismatched}/100 probabilities differ after save/load; TPFE round-trip bit-exact={tpfe_ok}")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_structure(report):
    rng = np.random.default_rng(8)
    model = TipFormer(ModelConfig(), seed=8)
    worst_row = 0.0
    for _ in range(100):
        _, out = model.predict_pair(rng.integers(0, 94, size=int(rng.integers(1, 20))),
                                    rng.integers(0, 21, size=int(rng.integers(1, 40))))
        for maps in (out.attention.toxin_self, out.attention.protein_self, out.attention.cross):
            worst_row = max(worst_row, float(np.abs(maps.sum(axis=-1) - 1).max()))
    rows_ok = worst_row <= 1e-5

    cfg = ModelConfig()
    params = init_params(cfg, 9)
    equi_err = 0.0
    for _ in range(20):
        n, m = int(rng.integers(1, 10)), int(rng.integers(2, 20))
        t = ad.Tensor(rng.normal(size=(n, 32)))
        p = rng.normal(size=(m, 32)).astype(np.float32)
        perm = rng.permutation(m)
        t1, p1, a1 = interaction_layer(t, ad.Tensor(p), params, "interaction.0", cfg)
        t2, p2, a2 = interaction_layer(t, ad.Tensor(p[perm]), params, "interaction.0", cfg)
        equi_err = max(equi_err, float(np.abs(t2.data - t1.data).max()), float(np.abs(p2.data - p1.data[perm]).max()),
                       float(np.abs(a2.cross - a1.cross[..., perm]).max()))
    equi_ok = equi_err <= 1e-5

    # a width-1 convolution makes every stage before the mean pool position-wise
    cnn = TipFormer(ModelConfig(variant="deepcnn", conv_kernel=1), seed=10)
    inv_err = 0.0
    for _ in range(20):
        t, p = rng.integers(0, 94, size=int(rng.integers(1, 12))), rng.integers(0, 21, size=int(rng.integers(2, 30)))
        inv_err = max(inv_err, abs(cnn.predict(t, p) - cnn.predict(t[rng.permutation(len(t))], p[rng.permutation(len(p))])))
    inv_ok = inv_err <= 1e-5

    hot_bad = 0
    for _ in range(200):
        amap = rng.integers(-4, 5, size=(int(rng.integers(1, 8)), int(rng.integers(1, 40)))).astype(float)
        m = amap.shape[1]
        k = int(rng.integers(1, m + 1))
        hits = rank_hotspots(amap, k, residue_offset=3)
        scores = amap.mean(axis=0)
        naive = sorted(range(m), key=lambda j: (-scores[j], j))[:k]
        if [r for r, _ in hits] != [j + 4 for j in naive] or len({r for r, _ in hits}) != k:
            hot_bad += 1
    hot_ok = hot_bad == 0

    ok = rows_ok and equi_ok and inv_ok and hot_ok
    report(8, ok, f"attention row-sum err {worst_row:.1e}; cross-attention equivariance err {equi_err:.1e}; "
                  f"DeepCNN invariance err {inv_err:.1e}; hotspots {200 - hot_bad}/200 match naive sort")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
