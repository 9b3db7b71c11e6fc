import csv

import numpy as np
import pytest
from scipy.stats import spearmanr

from robal.attacks import AttackBudget
from robal.autodiff import Tensor
from robal.data import ImbalanceProfile, LabeledDataset, make_longtail_counts, synth_gaussians
from robal.evaluate import (EvalReport, boundary_error, direction_averaging_check, evaluate,
                            feature_norm_stats, kappa_sweep, read_jsonl, vanishing_gradient_max,
                            weight_norm_profile, write_jsonl)
from robal.heads import ClassStats, CosineHead, LinearHead
from robal.models import MLP, Classifier, Network
from robal.trainer import ATConfig, train

C = 6


def identity_network(W, b):
    return Network(MLP((W.shape[1],), ()), LinearHead(Tensor(np.asarray(W, float), requires_grad=True),
                                                      Tensor(np.asarray(b, float), requires_grad=True)))


def onehot_data(per_class, classes):
    labels = np.repeat(np.arange(classes), per_class)
    x = np.full((labels.size, classes), 0.05)
    x[np.arange(labels.size), labels] = 0.95
    return LabeledDataset(x, labels, classes)


@pytest.fixture(scope="module")
def trained():
    """AT-trained linear-head MLP on a small long-tailed Gaussian set."""
    counts = make_longtail_counts(ImbalanceProfile(C, 300, 20))
    tr = synth_gaussians(C, 12, 0.25, counts, seed=100)
    te = synth_gaussians(C, 12, 0.25, [80] * C, seed=200)
    net = Network.create({"arch": "mlp", "input_shape": [12], "hidden": [32, 32]}, {"kind": "linear"}, C, 0)
    train(net, tr, ATConfig(epochs=15, lr_decay_epochs=(12,), batch=32, seed=0, steps=3))
    return net, tr, te


class TestBookkeeping:
    def test_perfect_model(self):
        data = onehot_data(5, 3)
        clf = Classifier(identity_network(np.eye(3), np.zeros(3)), ClassStats([5, 5, 5]))
        rep = evaluate(clf, data, [("pgd", AttackBudget(epsilon=0.0)), ("ensemble", AttackBudget(epsilon=0.0))])
        assert rep.a_nat == 1.0 and rep.a_rob == {"pgd": 1.0, "ensemble": 1.0}
        assert rep.r_bdy == {"pgd": 0.0, "ensemble": 0.0} and rep.gap == 0.0

    def test_table_gap_arithmetic(self):
        assert boundary_error(62.33, 28.15) == pytest.approx(34.18, abs=1e-9)

    def test_constant_model(self):
        data = onehot_data(7, 4)
        clf = Classifier(identity_network(np.zeros((4, 4)), [0, 0, 1.0, 0]), ClassStats([7] * 4))
        assert evaluate(clf, data).a_nat == 0.25

    def test_a_nat_brute_force(self, trained):
        net, tr, te = trained
        clf = Classifier(net, ClassStats(tr.class_counts))
        err = [int(np.argmax(net(te.samples[i:i + 1]).data) != te.labels[i]) for i in range(len(te))]
        assert evaluate(clf, te).a_nat == (len(err) - sum(err)) / len(err)

    def test_robust_within_clean_and_monotone(self, trained):
        net, tr, te = trained
        clf = Classifier(net, ClassStats(tr.class_counts))
        budget = AttackBudget(steps=5)
        rep = evaluate(clf, te, [("fgsm", budget), ("pgd", budget), ("mim", budget)])
        for v in rep.a_rob.values():
            assert 0 <= v <= rep.a_nat
        for name, v in rep.r_bdy.items():
            assert v == rep.a_nat - rep.a_rob[name]
        assert rep.worst_case(["fgsm", "pgd", "mim"]) <= rep.worst_case(["fgsm", "pgd"]) <= rep.worst_case(["fgsm"])

    def test_duplicate_names(self, trained):
        net, tr, te = trained
        with pytest.raises(ValueError):
            evaluate(Classifier(net, ClassStats(tr.class_counts)), te, [("pgd", AttackBudget())] * 2)

    def test_thread_count_invariant(self, trained):
        net, tr, te = trained
        clf = Classifier(net, ClassStats(tr.class_counts))
        a = evaluate(clf, te, [("pgd", AttackBudget(steps=3))], threads=1)
        b = evaluate(clf, te, [("pgd", AttackBudget(steps=3))], threads=3)
        np.testing.assert_array_equal(a.robust_masks["pgd"], b.robust_masks["pgd"])

    def test_csv_recall_multiplies_back(self, trained, tmp_path):
        net, tr, te = trained
        rep = evaluate(Classifier(net, ClassStats(tr.class_counts)), te, [("fgsm", AttackBudget())])
        acc, rec = rep.write_csv(tmp_path)
        rows = list(csv.DictReader(rec.open()))
        hits = sum(float(r["clean"]) * int(r["count"]) for r in rows)
        assert round(hits) == int(rep.correct.sum())
        assert sum(int(r["count"]) for r in rows) == len(te)
        arows = {r["attack"]: r for r in csv.DictReader(acc.open())}
        assert float(arows["fgsm"]["a_rob"]) == rep.a_rob["fgsm"]

    def test_jsonl_round_trip(self, tmp_path):
        events = [{"event": "epoch", "loss": 0.5}, {"event": "kappa", "kappa": -3.0}]
        write_jsonl(tmp_path / "e.jsonl", events)
        write_jsonl(tmp_path / "e.jsonl", events[:1])
        assert read_jsonl(tmp_path / "e.jsonl") == events + events[:1]

    def test_report_recall(self):
        rep = EvalReport(np.array([0, 0, 1, 1]), np.array([True, False, True, True]), {}, 2)
        np.testing.assert_array_equal(rep.recall(), [0.5, 1.0])
        assert rep.gap is None


@pytest.fixture(scope="module")
def sweep(trained):
    net, tr, te = trained
    clf = Classifier(net, ClassStats(tr.class_counts))
    return clf, te, kappa_sweep(clf, te, grid=(-3, 0, 3), budget=AttackBudget(steps=10))


class TestKappaSweep:
    def test_identity_at_zero(self, sweep):
        clf, te, sw = sweep
        rep = evaluate(clf, te, [("pgd", AttackBudget(steps=10)), ("ensemble", AttackBudget(steps=10))])
        p = sw.at(0.0)
        assert (p.a_nat, p.pgd, p.ensemble) == (rep.a_nat, rep.a_rob["pgd"], rep.a_rob["ensemble"])

    def test_clean_accuracy_constant(self, sweep):
        a = sweep[2].column("a_nat")
        assert np.all(a == a[0])

    def test_ratios_bounded_and_healthy_at_zero(self, sweep):
        sw = sweep[2]
        for name in ("zero_grad_ratio", "zero_grad_ratio_correct", "underflow_ratio"):
            col = sw.column(name)
            assert np.all((col >= 0) & (col <= 1))
        assert sw.at(0.0).zero_grad_ratio < 0.05

    def test_events(self, sweep):
        ev = sweep[2].events()
        assert [e["kappa"] for e in ev] == [-3.0, 0.0, 3.0] and all(e["event"] == "kappa" for e in ev)

    def test_grid_must_be_finite(self, sweep):
        clf, te, _ = sweep
        with pytest.raises(ValueError):
            kappa_sweep(clf, te, grid=(0, np.inf))


class TestNorms:
    def test_zero_epsilon_ratios_are_one(self, trained):
        net, tr, te = trained
        ns = feature_norm_stats(Classifier(net, ClassStats(tr.class_counts)), te,
                                budget=AttackBudget(epsilon=0.0))
        assert np.all(ns.ratios == 1.0)
        assert ns.broken.count == 0 and ns.broken.mean is None

    def test_ratios_positive_finite(self, trained):
        net, tr, te = trained
        ns = feature_norm_stats(Classifier(net, ClassStats(tr.class_counts)), te, budget=AttackBudget(steps=5))
        assert np.all(np.isfinite(ns.ratios)) and np.all(ns.ratios > 0)
        assert ns.robust.count + ns.broken.count == ns.ratios.size
        assert ns.robust.bin_counts.sum() == ns.robust.count

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_broken_scale_more(self, seed):
        counts = make_longtail_counts(ImbalanceProfile(C, 300, 20))
        tr = synth_gaussians(C, 12, 0.25, counts, seed=100 + seed)
        te = synth_gaussians(C, 12, 0.25, [80] * C, seed=200 + seed)
        net = Network.create({"arch": "mlp", "input_shape": [12], "hidden": [32, 32]}, {"kind": "linear"}, C, seed)
        train(net, tr, ATConfig(epochs=15, lr_decay_epochs=(12,), batch=32, seed=seed, steps=3))
        ns = feature_norm_stats(Classifier(net, ClassStats(tr.class_counts)), te, budget=AttackBudget(steps=10))
        assert ns.broken.count > 0 and ns.robust.count > 0
        assert ns.broken.mean >= ns.robust.mean
        assert spearmanr(counts, weight_norm_profile(net.head))[0] > 0

    def test_identity_weights(self):
        head = LinearHead(Tensor(np.eye(4)), None)
        np.testing.assert_array_equal(weight_norm_profile(head), np.ones(4))

    def test_brute_force(self):
        W = np.random.default_rng(0).standard_normal((5, 7))
        head = CosineHead(Tensor(W), s=10.0)
        want = [np.sqrt(sum(v * v for v in row)) for row in W]
        np.testing.assert_allclose(weight_norm_profile(head), want, rtol=1e-15, atol=0)


class TestDirectionAveraging:
    def _net(self, classes=5, dim=6, seed=0):
        rng = np.random.default_rng(seed)
        return identity_network(rng.standard_normal((classes, dim)), rng.standard_normal(classes)), rng

    def test_compressed(self):
        net, rng = self._net()
        x = rng.uniform(size=(50, 6))
        assert direction_averaging_check(net, x, rng.integers(0, 5, size=50), 1e6) <= 1e-3

    def test_uncompressed_confident(self):
        net, rng = self._net()
        net.head.W.data *= 20
        x = rng.uniform(size=(50, 6))
        y = np.argmax(net(x).data, axis=1)
        assert direction_averaging_check(net, x, y, 1.0) >= 0.1

    def test_two_classes(self):
        W = np.array([[1.0, 2.0], [-3.0, 0.5]])
        net = identity_network(W, np.zeros(2))
        x = np.array([[0.2, 0.7], [0.9, 0.1]])
        assert direction_averaging_check(net, x, np.array([0, 1]), 1e8) <= 1e-7

    def test_degenerate(self):
        net = identity_network(np.ones((3, 2)), np.zeros(3))
        with pytest.raises(ValueError):
            direction_averaging_check(net, np.full((1, 2), 0.5), np.array([0]), 1e6)

    def test_needs_linear_head(self):
        net = Network(MLP((2,), ()), CosineHead(Tensor(np.eye(2)), s=10.0))
        with pytest.raises(TypeError):
            direction_averaging_check(net, np.full((1, 2), 0.5), np.array([0]), 1e6)

    def test_gradient_vanishes_when_amplified(self, trained):
        net, tr, te = trained
        clf = Classifier(net, ClassStats(tr.class_counts))
        assert vanishing_gradient_max(clf, te.samples, te.labels, 1e6) <= 1e-8
        assert vanishing_gradient_max(clf, te.samples, te.labels, 1.0) > 1e-4
