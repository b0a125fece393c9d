"""Tests for neighbor-vote and self-training relabelers."""
import numpy as np
import pytest

from skillrec.catalog import Candidate
from skillrec.neuralkit import FeaturizerConfig, TrainConfig
from skillrec.relabel import CollabConfig, SelfTrainConfig, collaborative_relabel, \
    nearest_neighbors, observed_feedback_loss, self_train_relabel, utterance_embeddings
from skillrec.reranker import CombinedCandidates, RerankExample, RRModel, train_rr

from helpers import toy_catalog

FZ = FeaturizerConfig()


def example(uid, text, sids, labels, observed):
    entries = tuple(Candidate(skill_id=s, source="rule", score=1.0 - 0.01 * j)
                    for j, s in enumerate(sids))
    cands = CombinedCandidates(entries=entries, k1=0, k2=len(entries))
    return RerankExample(uid, text, cands, np.array(labels, dtype=np.float64),
                         np.array(observed, dtype=bool))


def test_collab_config_validation():
    with pytest.raises(ValueError):
        CollabConfig(max_neighbors=0)
    with pytest.raises(ValueError):
        CollabConfig(min_votes=0)
    with pytest.raises(ValueError):
        CollabConfig(min_similarity=-1.0)
    with pytest.raises(ValueError):
        CollabConfig(min_positive_rate=1.1)
    with pytest.raises(ValueError):
        CollabConfig(min_positive_rate=-0.1)
    # above-one similarity is legal: it turns relabeling into the identity
    cfg = CollabConfig(min_similarity=1.5)
    assert CollabConfig.from_json(cfg.to_json()) == cfg


def test_selftrain_config_validation():
    with pytest.raises(ValueError):
        SelfTrainConfig(n_rounds=0)
    with pytest.raises(ValueError):
        SelfTrainConfig(cutoff=0.0)
    with pytest.raises(ValueError):
        SelfTrainConfig(cutoff_step=-0.1)
    # cutoff >= 1 is legal: no probability clears it
    cfg = SelfTrainConfig(cutoff=1.5)
    assert SelfTrainConfig.from_json(cfg.to_json()) == cfg


def test_round_cutoff_schedules():
    adaptive = SelfTrainConfig(cutoff=0.3, adaptive=True, cutoff_step=0.1)
    assert adaptive.round_cutoff(0) == pytest.approx(0.3)
    assert adaptive.round_cutoff(4) == pytest.approx(0.7)
    constant = SelfTrainConfig(cutoff=0.3, adaptive=False, cutoff_step=0.1)
    assert constant.round_cutoff(4) == pytest.approx(0.3)


def test_embeddings_identical_texts_agree():
    emb = utterance_embeddings(["turn on the light", "turn on the light",
                                "order a pizza"], FZ)
    assert float(emb[0] @ emb[1]) == pytest.approx(1.0, abs=1e-6)
    assert float(emb[0] @ emb[2]) < 0.999


def test_embeddings_disjoint_texts_near_orthogonal():
    emb = utterance_embeddings(["alpha bravo charlie", "delta echo foxtrot",
                                "kilo lima mike"], FZ)
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        assert abs(float(emb[i] @ emb[j])) < 0.2


def test_embeddings_unit_norm_and_empty_text():
    emb = utterance_embeddings(["play a song", "", "set a timer"], FZ)
    norms = np.linalg.norm(emb, axis=1)
    assert norms[0] == pytest.approx(1.0, abs=1e-5)
    assert norms[2] == pytest.approx(1.0, abs=1e-5)
    assert norms[1] == 0.0


def test_nearest_neighbors_hand_case():
    emb = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [0.8, 0.6]])
    got = nearest_neighbors(emb, max_neighbors=2, min_similarity=0.5)
    want = [[3, 1], [3, 2], [1, 3], [1, 0]]
    assert [list(g) for g in got] == want
    blocked = nearest_neighbors(emb, max_neighbors=2, min_similarity=0.5, block=2)
    assert [list(g) for g in blocked] == want


def test_nearest_neighbors_tie_breaks_by_index():
    emb = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    got = nearest_neighbors(emb, max_neighbors=5, min_similarity=0.5)
    assert [list(g) for g in got] == [[1, 2], [0, 2], [0, 1]]


def test_embedding_neighbors_recover_paraphrase_clusters():
    rng = np.random.default_rng(7)
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    def word():
        return "".join(rng.choice(letters, size=6))
    fillers = [word() for _ in range(50)]
    texts, cluster = [], []
    for c in range(25):
        core = f"{word()} {word()}"
        for _ in range(6):
            extra = " ".join(rng.choice(fillers, size=2, replace=False))
            texts.append(f"{core} {extra}")
            cluster.append(c)
    emb = utterance_embeddings(texts, FZ)
    nbrs = nearest_neighbors(emb, max_neighbors=1, min_similarity=0.0)
    same = [cluster[i] == cluster[int(nb[0])] for i, nb in enumerate(nbrs) if len(nb)]
    assert len(same) == len(texts)
    assert np.mean(same) >= 0.8


def vote_corpus():
    """One unlabeled target plus single-candidate voters sharing its text."""
    exs = [example("t0", "shared text", ["A", "B", "C"],
                   [0.0, 0.0, 0.0], [False, False, False])]
    for i in range(8):
        exs.append(example(f"a{i}", "shared text", ["A"], [1.0 if i < 5 else 0.0], [True]))
    for i in range(10):
        exs.append(example(f"b{i}", "shared text", ["B"], [1.0 if i < 3 else 0.0], [True]))
    for i in range(4):
        exs.append(example(f"c{i}", "shared text", ["C"], [1.0 if i < 2 else 0.0], [True]))
    return exs


def test_collab_vote_thresholds_hand_case():
    # A: 8 votes at rate 5/8 qualifies; B fails the rate (0.3); C the count (4)
    exs = vote_corpus()
    cfg = CollabConfig(max_neighbors=100, min_similarity=0.5, min_votes=6,
                       min_positive_rate=0.45, fractional=True)
    out, report = collaborative_relabel(exs, FZ, cfg)
    assert out[0].labels == pytest.approx([5 / 8, 0.0, 0.0])
    assert report["targets_touched"] == 1
    assert report["added_positives"] == 1
    assert exs[0].labels == pytest.approx([0.0, 0.0, 0.0])  # input untouched


def test_collab_binary_rate_one_always_relabels():
    exs = [example("t0", "shared text", ["A", "B"], [0.0, 0.0], [False, False])]
    for i in range(6):
        exs.append(example(f"a{i}", "shared text", ["A"], [1.0], [True]))
    cfg = CollabConfig(min_similarity=0.5, min_votes=6, min_positive_rate=0.45)
    out, report = collaborative_relabel(exs, FZ, cfg)
    assert out[0].labels == pytest.approx([1.0, 0.0])
    assert report["added_positives"] == 1
    for before, after in zip(exs, out):
        assert np.all(after.labels >= before.labels)


def test_collab_observed_positions_immutable():
    exs = [example("t0", "shared text", ["A", "B"], [0.0, 0.0], [True, False])]
    for i in range(6):
        exs.append(example(f"a{i}", "shared text", ["A"], [1.0], [True]))
        exs.append(example(f"b{i}", "shared text", ["B"], [1.0], [True]))
    out, _ = collaborative_relabel(exs, FZ, CollabConfig(min_similarity=0.5))
    # A slot carries a real rejection and must stay 0; unobserved B flips
    assert out[0].labels == pytest.approx([0.0, 1.0])
    assert np.array_equal(out[0].observed, exs[0].observed)


def test_collab_identity_when_similarity_above_one():
    exs = vote_corpus()
    out, report = collaborative_relabel(exs, FZ, CollabConfig(min_similarity=1.0 + 1e-9))
    for before, after in zip(exs, out):
        assert np.array_equal(before.labels, after.labels)
    assert report["targets_touched"] == 0
    assert report["added_positives"] == 0


def test_collab_without_observed_feedback_is_identity():
    exs = [example(f"t{i}", "shared text", ["A"], [0.0], [False]) for i in range(5)]
    out, report = collaborative_relabel(exs, FZ, CollabConfig(min_similarity=0.5))
    assert all(np.array_equal(b.labels, a.labels) for b, a in zip(exs, out))
    assert report["added_positives"] == 0


def test_collab_bernoulli_draws_are_seeded():
    # rate exactly 0.5 with 6 votes: qualified, relabeled by coin flip
    exs = [example(f"t{i}", "shared text", ["A"], [0.0], [False]) for i in range(40)]
    for i in range(6):
        exs.append(example(f"a{i}", "shared text", ["A"], [1.0 if i < 3 else 0.0], [True]))
    cfg = CollabConfig(min_similarity=0.5, min_votes=6, min_positive_rate=0.45, seed=3)
    out1, rep1 = collaborative_relabel(exs, FZ, cfg)
    out2, rep2 = collaborative_relabel(exs, FZ, cfg)
    flips1 = [float(ex.labels[0]) for ex in out1[:40]]
    assert flips1 == [float(ex.labels[0]) for ex in out2[:40]]
    assert rep1 == rep2
    assert 0 < rep1["added_positives"] < 40  # both outcomes occur at p=0.5


def observed_loss_fixture():
    catalog = toy_catalog()
    exs = [
        example("u0", "ring the alarm bell", ["sk_alarm", "sk_music"],
                [1.0, 0.0], [True, False]),
        example("u1", "play music tunes", ["sk_music", "sk_pizza"],
                [0.0, 0.0], [True, True]),
        example("u2", "order pizza food", ["sk_pizza"], [0.0], [False]),
    ]
    model = RRModel.init(FZ, catalog, "pointwise",
                         {"model": (0.0, 0.0), "rule": (0.0, 0.0)}, seed=0)
    return model, exs


def test_observed_feedback_loss_matches_manual():
    from skillrec.reranker import rr_scores
    model, exs = observed_loss_fixture()
    scores = rr_scores(model, exs)
    want, n = 0.0, 0
    for ex, sc in zip(exs, scores):
        for j in np.nonzero(ex.observed)[0]:
            p = min(max(sc[j], 1e-7), 1 - 1e-7)
            y = ex.labels[j]
            want += -(y * np.log(p) + (1 - y) * np.log(1 - p))
            n += 1
    assert n == 3
    got = observed_feedback_loss(model, exs)
    assert got == pytest.approx(want / n, rel=1e-9)


def test_observed_feedback_loss_without_feedback_is_inf():
    model, exs = observed_loss_fixture()
    unobserved = [example("u9", "hello there", ["sk_alarm"], [0.0], [False])]
    assert observed_feedback_loss(model, unobserved) == np.inf


def selftrain_fixture(n_unlabeled=6, epochs=25):
    catalog = toy_catalog()
    texts = {
        "sk_alarm": "ring the alarm bell",
        "sk_music": "play music tunes",
        "sk_pizza": "order pizza food",
    }
    others = {sid: [o for o in texts if o != sid] for sid in texts}
    train, val = [], []
    uid = 0
    for rep in range(8):
        for sid, text in texts.items():
            ex = example(f"u{uid}", text, [sid] + others[sid],
                         [1.0, 0.0, 0.0], [True, False, False])
            (val if rep >= 6 else train).append(ex)
            uid += 1
    for i in range(n_unlabeled):
        sid = list(texts)[i % 3]
        train.append(example(f"q{i}", texts[sid], [sid] + others[sid],
                             [0.0, 0.0, 0.0], [False, False, False]))
    cfg = TrainConfig(epochs=epochs, batch_size=8, seed=0)
    base, _ = train_rr(train, val, catalog, cfg, mode="pointwise")
    return train, val, catalog, base, cfg


def test_selftrain_unclearable_cutoff_is_identity():
    train, val, catalog, base, cfg = selftrain_fixture(epochs=2)
    out, model, report = self_train_relabel(
        train, val, catalog, base, cfg,
        SelfTrainConfig(n_rounds=3, cutoff=1.5, adaptive=False))
    assert report["i_star"] == -1
    assert report["rounds"] == []
    assert model is base
    for before, after in zip(train, out):
        assert np.array_equal(before.labels, after.labels)
    assert out[0] is not train[0]  # still a defensive copy


def test_selftrain_promotes_and_picks_lowest_validation_round():
    train, val, catalog, base, cfg = selftrain_fixture()
    st = SelfTrainConfig(n_rounds=3, cutoff=0.3, adaptive=True, cutoff_step=0.1)
    out, model, report = self_train_relabel(train, val, catalog, base,
                                            TrainConfig(epochs=8, batch_size=8), st)
    rounds = report["rounds"]
    assert rounds, "expected at least one promotion round"
    assert all(r["added"] > 0 for r in rounds)
    assert rounds[0]["cutoff"] == pytest.approx(0.3)
    # winner is the lowest-validation-loss round, never the untouched baseline
    best = min(rounds, key=lambda r: r["val_loss"])
    assert report["i_star"] == best["round"] >= 0
    for before, after in zip(train, out):
        obs = before.observed
        assert np.array_equal(before.labels[obs], after.labels[obs])
        assert np.all(after.labels >= before.labels)
        assert np.all(np.isin(after.labels[~obs], [0.0, 1.0]))
    promoted = sum(int(np.sum(a.labels > b.labels)) for b, a in zip(train, out))
    assert promoted > 0
    assert model is not base


def test_selftrain_is_deterministic():
    train, val, catalog, base, cfg = selftrain_fixture()
    st = SelfTrainConfig(n_rounds=2, cutoff=0.3)
    tc = TrainConfig(epochs=5, batch_size=8)
    out1, _, rep1 = self_train_relabel(train, val, catalog, base, tc, st)
    out2, _, rep2 = self_train_relabel(train, val, catalog, base, tc, st)
    assert rep1 == rep2
    for a, b in zip(out1, out2):
        assert np.array_equal(a.labels, b.labels)
