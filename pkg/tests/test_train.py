import math

import numpy as np
import pytest

from herbid.dataset import SplitSpec, ingest_directory, stratified_split
from herbid.nnrt import build_tiny_densenet
from herbid.train import (
    HeadParams,
    TrainConfig,
    TrainError,
    TrainingDiverged,
    cross_entropy_loss,
    evaluate_on_split,
    extract_split_features,
    head_gradients,
    load_features,
    save_features,
    train_head,
)


def separable_set(seed=0, n_per=20, d=32, c=3):
    # separability confirmed against an independent logistic-regression fit
    # (100% train accuracy) before these thresholds were frozen
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((c, d)) * 3.0
    feats, labels = [], []
    for k in range(c):
        feats.append(centers[k] + rng.standard_normal((n_per, d)) * 0.1)
        labels += [k] * n_per
    return np.concatenate(feats).astype(np.float32), np.array(labels)


class TestCrossEntropy:
    def test_perfect_prediction_zero_loss(self):
        probs = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert cross_entropy_loss(probs, [0, 1]) == 0.0

    def test_half_probability(self):
        probs = np.array([[0.5, 0.5]])
        assert cross_entropy_loss(probs, [0]) == pytest.approx(0.6931472, abs=1e-7)

    def test_uniform_sixty_classes(self):
        probs = np.full((4, 60), 1.0 / 60.0)
        assert cross_entropy_loss(probs, [0, 10, 30, 59]) == pytest.approx(4.0943446, abs=1e-7)

    def test_loss_decomposition_exact(self):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(5), size=8)
        labels = rng.integers(0, 5, 8)
        w = rng.standard_normal((5, 16))
        lam = 0.037
        base = cross_entropy_loss(probs, labels)
        reg = cross_entropy_loss(probs, labels, weight=w, l2_lambda=lam)
        assert reg - base == lam * float(np.sum(w.astype(np.float64) ** 2))

    def test_clamp_keeps_loss_finite(self):
        probs = np.array([[1.0, 0.0]])
        loss = cross_entropy_loss(probs, [1])
        assert math.isfinite(loss)
        assert loss == pytest.approx(-math.log(1e-12))

    def test_bad_rows_rejected(self):
        with pytest.raises(TrainError):
            cross_entropy_loss(np.array([[0.9, 0.3]]), [0])

    def test_label_out_of_range(self):
        with pytest.raises(TrainError):
            cross_entropy_loss(np.array([[0.5, 0.5]]), [2])


class TestHeadGradients:
    def test_zero_gradient_at_optimum(self):
        # soft targets equal to the predicted distribution: dZ = (P - Y)/N = 0
        params = HeadParams(np.zeros((2, 3)), np.zeros(2))
        features = np.zeros((4, 3))
        y_soft = np.full((4, 2), 0.5)
        dw, db, _ = head_gradients(features, y_soft, params, TrainConfig(l2_lambda=0.0))
        assert np.all(dw == 0.0) and np.all(db == 0.0)

    def test_single_sample_hand_computed(self):
        # F=[[2]], label 0, W=[[0.5],[-0.5]], b=[0.1,-0.1]: z=(1.1,-1.1)
        params = HeadParams(np.array([[0.5], [-0.5]]), np.array([0.1, -0.1]))
        z = np.array([1.1, -1.1])
        e = np.exp(z - z.max())
        p = e / e.sum()
        dz = p - np.array([1.0, 0.0])
        dw, db, loss = head_gradients(np.array([[2.0]]), [0], params, TrainConfig(l2_lambda=0.0))
        assert dw == pytest.approx(np.outer(dz, [2.0]), abs=1e-12)
        assert db == pytest.approx(dz, abs=1e-12)
        assert loss == pytest.approx(-math.log(p[0]), abs=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        h = 1e-4
        worst = 0.0
        for _ in range(10):
            c, d, n = int(rng.integers(2, 6)), int(rng.integers(2, 17)), int(rng.integers(1, 9))
            feats = rng.standard_normal((n, d))
            labels = rng.integers(0, c, n)
            params = HeadParams(rng.standard_normal((c, d)) * 0.5, rng.standard_normal(c) * 0.5)
            cfg = TrainConfig(l2_lambda=float(rng.random() * 1e-2))
            dw, db, _ = head_gradients(feats, labels, params, cfg)

            def loss_at(wm, bm):
                _, _, l = head_gradients(feats, labels, HeadParams(wm, bm), cfg)
                return l

            fd_w = np.zeros_like(dw)
            for i in range(c):
                for j in range(d):
                    wp, wm = params.weight.copy(), params.weight.copy()
                    wp[i, j] += h
                    wm[i, j] -= h
                    fd_w[i, j] = (loss_at(wp, params.bias) - loss_at(wm, params.bias)) / (2 * h)
            fd_b = np.zeros_like(db)
            for i in range(c):
                bp, bm = params.bias.copy(), params.bias.copy()
                bp[i] += h
                bm[i] -= h
                fd_b[i] = (loss_at(params.weight, bp) - loss_at(params.weight, bm)) / (2 * h)
            rel_w = np.abs(dw - fd_w) / np.maximum.reduce([np.abs(dw), np.abs(fd_w), np.full_like(dw, 1e-6)])
            rel_b = np.abs(db - fd_b) / np.maximum.reduce([np.abs(db), np.abs(fd_b), np.full_like(db, 1e-6)])
            worst = max(worst, rel_w.max(), rel_b.max())
        assert worst < 1e-4

    def test_dropout_mask_accounted_in_gradient(self):
        rng = np.random.default_rng(2)
        feats = rng.standard_normal((6, 8))
        labels = rng.integers(0, 3, 6)
        params = HeadParams(rng.standard_normal((3, 8)) * 0.3, np.zeros(3))
        cfg = TrainConfig(dropout_p=0.5, l2_lambda=1e-3)
        h = 1e-4

        dw, _, _ = head_gradients(feats, labels, params, cfg, mode="train", rng=np.random.default_rng(7))

        def loss_at(wm):
            # same rng seed -> same mask: the finite difference sees the
            # identical masked objective
            _, _, l = head_gradients(feats, labels, HeadParams(wm, params.bias), cfg,
                                     mode="train", rng=np.random.default_rng(7))
            return l

        i, j = 1, 3
        wp, wm = params.weight.copy(), params.weight.copy()
        wp[i, j] += h
        wm[i, j] -= h
        fd = (loss_at(wp) - loss_at(wm)) / (2 * h)
        assert dw[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_train_mode_without_rng_rejected(self):
        params = HeadParams(np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(TrainError):
            head_gradients(np.zeros((1, 3)), [0], params, TrainConfig(dropout_p=0.5), mode="train")


class TestTrainHead:
    def test_separable_reaches_high_accuracy(self):
        feats, labels = separable_set()
        head, report = train_head(feats, labels, feats, labels, TrainConfig(max_epochs=200))
        assert max(report.train_accuracy) >= 0.99
        assert report.best_epoch < report.epochs_run

    def test_zero_learning_rate_flat(self):
        feats, labels = separable_set(n_per=10)
        head, report = train_head(feats, labels, feats, labels,
                                  TrainConfig(learning_rate=0.0, max_epochs=12, patience=20))
        assert np.all(head.weight == 0.0) and np.all(head.bias == 0.0)
        assert len(set(report.train_loss)) == 1

    def test_deterministic(self):
        feats, labels = separable_set(seed=3, n_per=15)
        cfg = TrainConfig(max_epochs=20, seed=42)
        h1, r1 = train_head(feats, labels, feats, labels, cfg)
        h2, r2 = train_head(feats, labels, feats, labels, cfg)
        assert np.array_equal(h1.weight, h2.weight)
        assert np.array_equal(h1.bias, h2.bias)
        assert r1.to_dict() == r2.to_dict()

    def test_divergence_detected(self):
        feats, labels = separable_set(seed=4, n_per=10)
        with pytest.raises(TrainingDiverged):
            train_head(feats, labels, feats, labels,
                       TrainConfig(learning_rate=1e100, max_epochs=5))

    def test_early_stopping_on_patience(self):
        rng = np.random.default_rng(5)
        feats = rng.standard_normal((40, 4)).astype(np.float32)
        labels = rng.integers(0, 2, 40)  # unlearnable noise
        val_f = rng.standard_normal((20, 4)).astype(np.float32)
        val_y = rng.integers(0, 2, 20)
        head, report = train_head(feats, labels, val_f, val_y,
                                  TrainConfig(max_epochs=100, patience=5))
        assert report.stopped_early
        assert report.epochs_run < 100
        assert report.val_loss[report.best_epoch] == min(report.val_loss)

    def test_width_mismatch_rejected(self):
        with pytest.raises(TrainError):
            train_head(np.zeros((4, 8)), [0, 1, 0, 1], np.zeros((2, 9)), [0, 1], TrainConfig())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    from conftest import CORPUS_CLASSES, build_corpus

    root = build_corpus(tmp_path_factory.mktemp("data") / "corpus", CORPUS_CLASSES, per_class=6, seed=3)
    manifest = stratified_split(ingest_directory(root).manifest, SplitSpec((0.5, 0.25, 0.25), seed=1))
    graph, weights = build_tiny_densenet(num_classes=3, seed=5)
    return graph, weights, manifest


class TestEvaluateOnSplit:
    def test_uniform_head_gives_ln_c_loss(self, pipeline):
        graph, weights, manifest = pipeline
        head = HeadParams(np.zeros((3, 48)), np.zeros(3))
        loss, acc = evaluate_on_split(graph, weights, head, manifest, "validation")
        assert loss == pytest.approx(math.log(3), abs=1e-9)
        assert 0.0 <= acc <= 1.0

    def test_trained_head_perfect_on_train(self, pipeline):
        graph, weights, manifest = pipeline
        before = {k: {p: v.tobytes() for p, v in entry.items()} for k, entry in weights.items()}
        feats, ids, labels = extract_split_features(graph, weights, manifest, "train")
        head, _ = train_head(feats, labels, feats, labels, TrainConfig(max_epochs=100, seed=2))
        loss, acc = evaluate_on_split(graph, weights, head, manifest, "train")
        assert acc == 1.0
        assert loss < math.log(3)
        # backbone untouched by training
        after = {k: {p: v.tobytes() for p, v in entry.items()} for k, entry in weights.items()}
        assert before == after

    def test_dropout_p_does_not_affect_evaluation(self, pipeline):
        _, _, manifest = pipeline
        g1, w1 = build_tiny_densenet(num_classes=3, seed=5, dropout_p=0.0)
        g2, w2 = build_tiny_densenet(num_classes=3, seed=5, dropout_p=0.9)
        head = HeadParams(np.ones((3, 48)), np.zeros(3))
        l1, a1 = evaluate_on_split(g1, w1, head, manifest, "test")
        l2, a2 = evaluate_on_split(g2, w2, head, manifest, "test")
        assert l1 == l2 and a1 == a2

    def test_empty_split_rejected(self, pipeline):
        graph, weights, manifest = pipeline
        for rec in manifest.records:
            rec.split = "train"
        head = HeadParams(np.zeros((3, 48)), np.zeros(3))
        with pytest.raises(TrainError):
            evaluate_on_split(graph, weights, head, manifest, "test")


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        feats = rng.random((5, 7), dtype=np.float32)
        ids = [f"id{i}" for i in range(5)]
        labels = [0, 1, 2, 1, 0]
        path = tmp_path / "feats.bin"
        save_features(path, feats, ids, labels, ["a", "b", "c"])
        f2, ids2, labels2, classes2 = load_features(path)
        assert np.array_equal(f2, feats)
        assert ids2 == ids and labels2 == labels and classes2 == ["a", "b", "c"]
        assert path.read_bytes()[:4] == b"HFTC"

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(TrainError):
            load_features(p)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(7)
        path = tmp_path / "feats.bin"
        save_features(path, rng.random((3, 4), dtype=np.float32), ["a", "b", "c"], [0, 1, 0], ["x", "y"])
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(TrainError):
            load_features(path)
