import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ferret_lab.errors import DomainError
from ferret_lab.evaluation import advantage, auc_from_roc, evaluate_mia, mia_scores, roc_auc, roc_curve
from ferret_lab.models import init_model, make_model, synth_dataset
from ferret_lab.trainers import NonPrivate, TrainConfig, train


def pair_count_auc(pos, neg):
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


score_lists = st.lists(st.integers(-20, 20).map(float) | st.floats(-5, 5), min_size=1, max_size=100)


@given(score_lists, score_lists)
def test_sweep_auc_equals_pair_counting(pos, neg):
    assert abs(roc_auc(pos, neg).auc - pair_count_auc(pos, neg)) <= 1e-12


@given(score_lists, score_lists)
def test_swap_symmetry(pos, neg):
    assert roc_auc(neg, pos).auc == pytest.approx(1 - roc_auc(pos, neg).auc, abs=1e-12)


grid_scores = st.lists(st.integers(-400, 400).map(lambda k: k / 16), min_size=1, max_size=100)


@given(grid_scores, grid_scores)
def test_monotone_relabeling_invariance(pos, neg):
    # on a coarse grid the transform cannot merge distinct scores by rounding
    a = roc_auc(pos, neg)
    b = roc_auc(np.exp(np.array(pos) / 8) * 3 + 1, np.exp(np.array(neg) / 8) * 3 + 1)
    assert b.auc == pytest.approx(a.auc, abs=1e-12)
    assert b.advantage == pytest.approx(a.advantage, abs=1e-12)


def test_identical_multisets():
    r = roc_auc([1.0, 2.0, 2.0, 5.0], [5.0, 2.0, 1.0, 2.0])
    assert r.auc == 0.5
    assert r.advantage == 0.0


def test_perfect_separation():
    r = roc_auc([2.0, 3.0], [0.0, 1.0])
    assert r.auc == 1.0 and r.advantage == 1.0


def test_pair_count_example():
    assert roc_auc([1.0, 3.0], [2.0, 4.0]).auc == 0.25


def test_advantage_examples():
    assert advantage([(0, 0), (0.5, 0.5), (1, 1)]) == 0.0
    assert advantage([(0, 0), (0, 1), (1, 1)]) == 1.0
    assert advantage([(0, 0), (0.2, 0.6), (1, 1)]) == pytest.approx(0.4)


def test_roc_endpoints():
    _, roc = roc_curve([0.1, 0.7, 0.3], [0.2, 0.5])
    assert tuple(roc[0]) == (0.0, 0.0) and tuple(roc[-1]) == (1.0, 1.0)
    assert np.all(np.diff(roc, axis=0) >= 0)
    assert auc_from_roc(np.array([[0, 0], [1, 1]])) == 0.5


def test_equal_losses_give_equal_scores():
    model = make_model("linear", 2, [0.0, 0.0, 0.0])
    m, nm = synth_dataset("linear", 5, 2, 0.0, 0)
    m = type(m)(m.features, np.ones(5), m.split)
    nm = type(nm)(nm.features, -np.ones(5), nm.split)
    a, b = mia_scores(model, m, nm)
    assert len(set(np.concatenate([a, b]))) == 1


def test_overfit_model_scores_members_higher():
    members, nonmembers = synth_dataset("linear", 30, 40, 0.0, 1)
    model = init_model("linear", 40, 0)
    rec = train(model, members, TrainConfig(3000, 30, 0.2, NonPrivate()))
    a, b = mia_scores(rec.model, members, nonmembers)
    assert a.mean() > b.mean()
    assert evaluate_mia(rec.model, members, nonmembers).auc > 0.9


def test_untrained_model_auc_near_half():
    members, nonmembers = synth_dataset("logistic", 2000, 10, 0.5, 3)
    r = evaluate_mia(init_model("logistic", 10, 3), members, nonmembers)
    assert abs(r.auc - 0.5) < 0.05


def test_scores_reproducible():
    members, nonmembers = synth_dataset("mlp", 50, 3, 0.1, 2, hidden=4)
    model = init_model("mlp", 3, 1, hidden=4)
    a = mia_scores(model, members, nonmembers)
    b = mia_scores(model, members, nonmembers)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_report_files(tmp_path):
    r = roc_auc([2.0, 3.0], [0.0, 1.0])
    r.write(tmp_path / "roc.csv", tmp_path / "sum.txt")
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr" and lines[1] == "inf,0.0,0.0"
    assert "auc=1.0" in (tmp_path / "sum.txt").read_text()


@pytest.mark.parametrize("pos,neg", [([], [1.0]), ([1.0], []), ([float("nan")], [1.0])])
def test_rejects_bad_scores(pos, neg):
    with pytest.raises(DomainError):
        roc_auc(pos, neg)
