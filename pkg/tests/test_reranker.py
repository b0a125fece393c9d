"""Candidate combination, reranker losses, training, and scoring decisions."""
import math

import numpy as np
import pytest
from helpers import push_off_kinks, toy_catalog

from skillrec.catalog import Candidate, CandidateList
from skillrec.model_sl import TrainingError
from skillrec.neuralkit.featurize import FeaturizerConfig
from skillrec.neuralkit.gradcheck import grad_check
from skillrec.neuralkit.optim import TrainConfig
from skillrec.reranker import (CombinedCandidates, K_MAX, RerankExample, RRModel,
                               _batch_loss_and_grads, bin_score, combine, cutoff_for_rate,
                               fit_bin_edges, load_examples, load_rr, rr_loss, rr_scores,
                               save_examples, save_rr, suggest, suggest_from_scores,
                               train_rr)


def cand(sid, source, score):
    return Candidate(skill_id=sid, source=source, score=score)


def clist(source, pairs, k=None):
    entries = tuple(cand(sid, source, sc) for sid, sc in pairs)
    return CandidateList(entries=entries, k=k if k is not None else len(entries))


def example(uid, text, combined, positive=None, observed_at=None, accepted=1.0):
    labels = np.zeros(len(combined))
    observed = np.zeros(len(combined), dtype=bool)
    ids = combined.skill_ids()
    if positive is not None:
        labels[ids.index(positive)] = accepted
    if observed_at is not None:
        observed[ids.index(observed_at)] = True
    return RerankExample(uid, text, combined, labels, observed)


def test_combine_orders_model_then_rule_remainder():
    model = clist("model", [("a", 0.9), ("b", 0.5)])
    rule = clist("rule", [("b", 3.0), ("c", 2.0), ("d", 1.0)])
    got = combine(model, rule)
    assert got.skill_ids() == ["a", "b", "c", "d"]
    assert [c.source for c in got.entries] == ["model", "model", "rule", "rule"]
    assert got.k1 == 2 and got.k2 == 3
    rule_only = combine(None, rule)
    assert rule_only.skill_ids() == ["b", "c", "d"]
    assert rule_only.k1 == 0


def test_combine_never_duplicates_over_random_pairs():
    rng = np.random.default_rng(11)
    pool = [f"s{i}" for i in range(30)]
    for _ in range(1000):
        m_ids = rng.choice(pool, size=rng.integers(0, 12), replace=False)
        r_ids = rng.choice(pool, size=rng.integers(1, 12), replace=False)
        m_scores = np.sort(rng.random(len(m_ids)))[::-1]
        r_scores = np.sort(rng.random(len(r_ids)))[::-1]
        model = clist("model", list(zip(m_ids, m_scores))) if len(m_ids) else None
        rule = clist("rule", list(zip(r_ids, r_scores)))
        got = combine(model, rule)
        ids = got.skill_ids()
        assert len(ids) == len(set(ids))
        assert set(ids) == set(m_ids) | set(r_ids)
        n_model = len(m_ids)
        assert [c.source for c in got.entries[:n_model]] == ["model"] * n_model
        assert all(c.source == "rule" for c in got.entries[n_model:])


def test_combined_candidates_validation():
    with pytest.raises(ValueError, match="duplicate"):
        CombinedCandidates(entries=(cand("a", "model", 1.0), cand("a", "rule", 1.0)),
                           k1=1, k2=1)
    with pytest.raises(ValueError, match="precede"):
        CombinedCandidates(entries=(cand("a", "rule", 1.0), cand("b", "model", 1.0)),
                           k1=1, k2=1)


def test_bin_edges_match_quantile_oracle():
    rng = np.random.default_rng(5)
    scores = rng.random(90)
    combined = combine(None, clist("rule", [("x", 1.0)]))
    examples = []
    for i, s in enumerate(scores):
        c = CombinedCandidates(entries=(cand(f"s{i}", "rule", float(s)),), k1=0, k2=1)
        examples.append(RerankExample(f"u{i}", "text", c, np.zeros(1), np.zeros(1, bool)))
    edges = fit_bin_edges(examples)
    v = np.sort(scores)
    assert edges["rule"] == (pytest.approx(v[30]), pytest.approx(v[60]))
    assert edges["model"] == (0.0, 0.0)
    # equal thirds under the fitted edges
    bins = [bin_score(float(s), "rule", edges) for s in scores]
    assert bins.count(0) == 30 and bins.count(1) == 30 and bins.count(2) == 30


def test_bin_score_is_left_closed():
    edges = {"rule": (1.0, 2.0)}
    assert bin_score(0.999, "rule", edges) == 0
    assert bin_score(1.0, "rule", edges) == 1
    assert bin_score(1.999, "rule", edges) == 1
    assert bin_score(2.0, "rule", edges) == 2
    assert bin_score(99.0, "rule", edges) == 2


def test_rr_loss_closed_form():
    got = rr_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), np.ones(2))
    assert got == pytest.approx(2 * math.log(2), abs=1e-9)
    # mask removes the second candidate
    got = rr_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    assert got == pytest.approx(math.log(2), abs=1e-9)


def test_rr_loss_validation_and_fractional_labels():
    with pytest.raises(ValueError):
        rr_loss(np.array([1.5]), np.array([1.0]), np.ones(1))
    with pytest.raises(ValueError):
        rr_loss(np.array([0.5]), np.array([-0.1]), np.ones(1))
    with pytest.raises(ValueError):
        rr_loss(np.array([0.5]), np.array([0.5, 0.5]), np.ones(1))
    p, y = 0.8, 0.3
    want = -(y * math.log(p) + (1 - y) * math.log(1 - p))
    assert rr_loss(np.array([p]), np.array([y]), np.ones(1)) == pytest.approx(want)


def test_rerank_example_validation_and_roundtrip(tmp_path):
    combined = combine(clist("model", [("a", 0.9)]), clist("rule", [("b", 2.0)]))
    with pytest.raises(ValueError, match="shape"):
        RerankExample("u1", "text", combined, np.zeros(3), np.zeros(2, bool))
    with pytest.raises(ValueError, match="labels"):
        RerankExample("u1", "text", combined, np.array([2.0, 0.0]), np.zeros(2, bool))
    ex = RerankExample("u1", "late night pizza", combined, np.array([0.25, 1.0]),
                       np.array([False, True]))
    path = tmp_path / "examples.jsonl"
    save_examples(path, [ex])
    loaded = load_examples(path)
    assert len(loaded) == 1
    got = loaded[0]
    assert got.utterance_id == ex.utterance_id and got.text == ex.text
    assert got.candidates == ex.candidates
    np.testing.assert_array_equal(got.labels, ex.labels)
    np.testing.assert_array_equal(got.observed, ex.observed)


def tiny_featurizer():
    return FeaturizerConfig(num_buckets=1 << 10)


def toy_examples():
    """Positive candidate's tokens always overlap the utterance text."""
    cat = toy_catalog()
    texts = {"sk_alarm": "ring the alarm bell", "sk_music": "play music tunes",
             "sk_pizza": "order pizza food"}
    sids = list(texts)
    out = []
    for i in range(24):
        pos = sids[i % 3]
        others = [s for s in sids if s != pos]
        model = clist("model", [(pos, 0.8), (others[0], 0.15)])
        rule = clist("rule", [(others[1], 2.0)])
        combined = combine(model, rule)
        out.append(example(f"u{i}", texts[pos], combined, positive=pos, observed_at=pos))
    return cat, out


def test_training_learns_separable_toy():
    cat, examples_ = toy_examples()
    cfg = TrainConfig(learning_rate=1e-2, batch_size=8, epochs=30, patience=50,
                      dropout=0.0, seed=0)
    for mode in ("pointwise", "listwise"):
        model, history = train_rr(examples_, examples_[:6], cat, cfg, mode=mode,
                                  featurizer=tiny_featurizer())
        scores = rr_scores(model, examples_)
        top_correct = 0
        for ex, sc in zip(examples_, scores):
            top_correct += ex.candidates.skill_ids()[int(np.argmax(sc))] == \
                ex.candidates.skill_ids()[int(np.argmax(ex.labels))]
        assert top_correct >= 22, f"{mode}: only {top_correct}/24 correct"
        assert history["best_val_loss"] <= history["val_loss"][0] + 1e-9


def test_training_is_deterministic_per_seed():
    cat, examples_ = toy_examples()
    cfg = TrainConfig(learning_rate=1e-2, batch_size=8, epochs=3, patience=50,
                      dropout=0.2, seed=5)
    a, _ = train_rr(examples_, examples_[:6], cat, cfg, mode="listwise",
                    featurizer=tiny_featurizer())
    b, _ = train_rr(examples_, examples_[:6], cat, cfg, mode="listwise",
                    featurizer=tiny_featurizer())
    for name in a.params.names():
        np.testing.assert_array_equal(a.params[name], b.params[name])


def test_train_requires_examples_and_known_mode():
    cat, examples_ = toy_examples()
    with pytest.raises(TrainingError, match="empty training set"):
        train_rr([], [], cat, TrainConfig(epochs=1))
    with pytest.raises(ValueError, match="mode"):
        RRModel.init(tiny_featurizer(), cat, "setwise", {"rule": (0, 0), "model": (0, 0)},
                     seed=0)
    with pytest.raises(ValueError, match="feature"):
        RRModel.init(tiny_featurizer(), cat, "listwise", {"rule": (0, 0), "model": (0, 0)},
                     seed=0, ablate=("mystery",))


def make_gradcheck_model(mode):
    cat, examples_ = toy_examples()
    model = RRModel.init(tiny_featurizer(), cat, mode,
                         {"rule": (1.0, 2.5), "model": (0.3, 0.6)}, seed=0,
                         dropout=0.0, dtype=np.float64)
    batch = model.featurize_batch(examples_[:4])

    def pre_acts():
        _, cache = model.forward(batch, train=False)
        feats = cache[7]
        pre_f = feats @ model.params["fusion.W0"] + model.params["fusion.b0"]
        x_in = cache[10][0][0]
        pre_s = x_in @ model.params["score.W0"] + model.params["score.b0"]
        return [("fusion.b0", pre_f.reshape(-1, pre_f.shape[-1])),
                ("score.b0", pre_s.reshape(-1, pre_s.shape[-1]))]

    push_off_kinks(model.params, pre_acts)
    return model, batch


@pytest.mark.parametrize("mode", ["pointwise", "listwise"])
def test_reranker_gradcheck_within_tolerance(mode):
    model, batch = make_gradcheck_model(mode)

    def loss_and_grad(params):
        model.params = params
        return _batch_loss_and_grads(model, batch, None, train=False)

    report = grad_check(loss_and_grad, model.params, num_coords=60, seed=3)
    assert report.max_rel_err < 1e-3


def test_ablated_feature_does_not_affect_scores():
    cat, examples_ = toy_examples()
    edges = {"rule": (1.0, 2.5), "model": (0.3, 0.6)}
    base = RRModel.init(tiny_featurizer(), cat, "pointwise", edges, seed=0,
                        ablate=("score_bin",), dropout=0.0)
    scores_a = rr_scores(base, examples_[:3])
    # move every candidate score into a different bin; ablated model ignores it
    moved = []
    for ex in examples_[:3]:
        entries = tuple(Candidate(c.skill_id, c.source, c.score + 10.0)
                        for c in ex.candidates.entries)
        cc = CombinedCandidates(entries=entries, k1=ex.candidates.k1, k2=ex.candidates.k2)
        moved.append(RerankExample(ex.utterance_id, ex.text, cc, ex.labels, ex.observed))
    scores_b = rr_scores(base, moved)
    for a, b in zip(scores_a, scores_b):
        np.testing.assert_allclose(a, b, rtol=1e-12)
    # without the ablation the same move changes scores
    live = RRModel.init(tiny_featurizer(), cat, "pointwise", edges, seed=0, dropout=0.0)
    la = rr_scores(live, examples_[:3])
    lb = rr_scores(live, moved)
    assert any(not np.allclose(a, b) for a, b in zip(la, lb))


def test_listwise_scores_depend_on_slate():
    cat, examples_ = toy_examples()
    edges = {"rule": (1.0, 2.5), "model": (0.3, 0.6)}
    ex = examples_[0]
    shorter = CombinedCandidates(entries=ex.candidates.entries[:2], k1=2, k2=0)
    ex_short = RerankExample(ex.utterance_id, ex.text, shorter, ex.labels[:2],
                             ex.observed[:2])
    listwise = RRModel.init(tiny_featurizer(), cat, "listwise", edges, seed=0, dropout=0.0)
    pointwise = RRModel.init(tiny_featurizer(), cat, "pointwise", edges, seed=0, dropout=0.0)
    lw_full = rr_scores(listwise, [ex])[0]
    lw_short = rr_scores(listwise, [ex_short])[0]
    assert not np.allclose(lw_full[:2], lw_short)
    pw_full = rr_scores(pointwise, [ex])[0]
    pw_short = rr_scores(pointwise, [ex_short])[0]
    np.testing.assert_allclose(pw_full[:2], pw_short, rtol=1e-6)


def test_suggest_cutoff_is_strict_and_ties_keep_first():
    combined = combine(None, clist("rule", [("a", 3.0), ("b", 2.0), ("c", 1.0)]))
    ex = example("u1", "text", combined)
    sid, top = suggest_from_scores(ex, np.array([0.2, 0.7, 0.7]), cutoff=0.5)
    assert sid == "b" and top == pytest.approx(0.7)
    sid, top = suggest_from_scores(ex, np.array([0.5, 0.5, 0.5]), cutoff=0.5)
    assert sid is None and top == pytest.approx(0.5)
    sid, _ = suggest_from_scores(ex, np.array([0.51, 0.2, 0.1]), cutoff=0.5)
    assert sid == "a"


def test_cutoff_for_rate_hand_cases():
    scores = np.array([0.1, 0.2, 0.3, 0.4])
    assert cutoff_for_rate(scores, 0.5) == pytest.approx(0.2)
    assert cutoff_for_rate(scores, 0.25) == pytest.approx(0.3)
    assert cutoff_for_rate(scores, 1.0) == float("-inf")
    # ties: three of four scores exceed 0.1
    tied = np.array([0.1, 0.7, 0.7, 0.7])
    assert cutoff_for_rate(tied, 0.75) == pytest.approx(0.1)
    assert cutoff_for_rate(tied, 0.5) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        cutoff_for_rate(np.array([]), 0.5)
    # returned cutoff actually achieves the rate under strict comparison
    rng = np.random.default_rng(2)
    v = rng.random(57)
    for rate in (0.25, 0.4, 0.5, 0.75):
        c = cutoff_for_rate(v, rate)
        assert (v > c).mean() >= rate


def test_make_examples_places_labels_and_truncates():
    from helpers import accepted, rejected, toy_skill
    from skillrec.catalog import Catalog, LoggedInteraction, Utterance
    from skillrec.keyword_sl import build_index
    from skillrec.reranker import make_examples

    many = Catalog([toy_skill(f"s{i:03d}", f"widget common tool{i}") for i in range(100)])
    index = build_index(many)
    inter = [
        accepted("u0", "widget common", "s000", ts=0),
        rejected("u1", "widget common", "s001", ts=1),
        # every skill ties on this query, so id order puts s099 past K_MAX
        accepted("u2", "widget common", "s099", ts=2),
        LoggedInteraction(utterance=Utterance("u3", "widget common", 3)),
    ]
    examples, report = make_examples(inter, None, index, k1=0, k2=100)
    # the no-feedback utterance is skipped by default
    assert [ex.utterance_id for ex in examples] == ["u0", "u1", "u2"]
    assert all(len(ex.candidates) == K_MAX for ex in examples)
    ex0, ex1, ex2 = examples
    pos0 = ex0.candidates.skill_ids().index("s000")
    assert ex0.labels[pos0] == 1.0 and ex0.observed[pos0]
    assert ex0.labels.sum() == 1.0 and ex0.observed.sum() == 1
    pos1 = ex1.candidates.skill_ids().index("s001")
    assert ex1.labels[pos1] == 0.0 and ex1.observed[pos1]
    assert ex1.observed.sum() == 1
    # u2's suggestion fell below the truncation point: kept, label dropped
    assert "s099" not in ex2.candidates.skill_ids()
    assert ex2.observed.sum() == 0
    assert report["n_examples"] == 3
    assert report["n_with_feedback"] == 3
    assert report["n_observed_dropped"] == 1

    with_all, report2 = make_examples(inter, None, index, k1=0, k2=100,
                                      include_unsuggested=True)
    assert [ex.utterance_id for ex in with_all] == ["u0", "u1", "u2", "u3"]
    assert with_all[3].observed.sum() == 0 and with_all[3].labels.sum() == 0.0
    assert report2["n_examples"] == 4
    assert report2["n_with_feedback"] == 3


def test_save_load_roundtrip(tmp_path):
    cat, examples_ = toy_examples()
    cfg = TrainConfig(learning_rate=1e-2, batch_size=8, epochs=2, patience=50,
                      dropout=0.0, seed=0)
    model, _ = train_rr(examples_, examples_[:6], cat, cfg, mode="listwise",
                        featurizer=tiny_featurizer(), ablate=("popularity",))
    path = tmp_path / "rr.bin"
    save_rr(path, model)
    loaded = load_rr(path, cat)
    assert loaded.mode == "listwise"
    assert loaded.ablate == ("popularity",)
    assert loaded.bin_edges == model.bin_edges
    want = rr_scores(model, examples_[:5])
    got = rr_scores(loaded, examples_[:5])
    for a, b in zip(want, got):
        np.testing.assert_allclose(a, b, rtol=1e-6)
    sid_w, sc_w = suggest(model, examples_[0])
    sid_g, sc_g = suggest(loaded, examples_[0])
    assert sid_w == sid_g and sc_w == pytest.approx(sc_g)


def test_load_rejects_other_kinds(tmp_path):
    cat, examples_ = toy_examples()
    model = RRModel.init(tiny_featurizer(), cat, "pointwise",
                         {"rule": (0, 0), "model": (0, 0)}, seed=0)
    path = tmp_path / "rr.bin"
    save_rr(path, model)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(sidecar.read_text().replace('"rr"', '"xx"'), encoding="utf-8")
    with pytest.raises(ValueError, match="not a reranker"):
        load_rr(path, cat)
