import numpy as np
import pytest

from latentcir.config import TrainConfig
from latentcir.retrieval import (
    Gallery,
    QuerySpec,
    compose_query,
    embed_gallery,
    embed_pairs,
    evaluate_queries,
    load_gallery,
    load_queries,
    map_at_k,
    rank,
    recall_at_k,
    render_template,
    save_gallery,
    write_composite_queries,
    RankedRetrieval,
)
from latentcir.training import init_train_state
from latentcir.views import CropConfig, synth_dataset, write_dataset


# oracles ------------------------------------------------------------------


def brute_rank(query, gallery):
    q = query / np.linalg.norm(query)
    scored = []
    for cid, row in zip(gallery.ids, gallery.features):
        scored.append((cid, float(row @ q / np.linalg.norm(row))))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return tuple(cid for cid, _ in scored)


def brute_recall(rankings, truths, k):
    hits = 0
    for ranking, ts in zip(rankings, truths):
        if any(t in ranking.ids[:k] for t in ts):
            hits += 1
    return hits / len(rankings)


def brute_map(rankings, truths, k):
    total = 0.0
    for ranking, ts in zip(rankings, truths):
        hits = 0
        ap = 0.0
        for j in range(1, k + 1):
            if ranking.ids[j - 1] in ts:
                hits += 1
                ap += hits / j
        total += ap / min(k, len(ts))
    return total / len(rankings)


def random_eval_instance(rng, n_gallery=50, n_queries=4, d=8):
    gallery = Gallery(
        ids=tuple(f"g{i:03d}" for i in range(n_gallery)),
        features=rng.standard_normal((n_gallery, d)),
    )
    rankings, truths = [], []
    for _ in range(n_queries):
        q = rng.standard_normal(d)
        rankings.append(rank(q, gallery))
        n_truth = int(rng.integers(1, 4))
        ids = rng.choice(n_gallery, size=n_truth, replace=False)
        truths.append({f"g{i:03d}" for i in ids})
    return rankings, truths


# ranking -------------------------------------------------------------------


def test_rank_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gallery = Gallery(
            ids=tuple(f"g{i:03d}" for i in range(50)),
            features=rng.standard_normal((50, 8)),
        )
        q = rng.standard_normal(8)
        assert rank(q, gallery).ids == brute_rank(q, gallery)


def test_rank_self_similarity_first():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((10, 6))
    gallery = Gallery(ids=tuple(f"g{i}" for i in range(10)), features=feats)
    assert rank(feats[3], gallery).ids[0] == "g3"


def test_rank_tie_break_ascending_id():
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    gallery = Gallery(ids=("zz", "mm", "aa"), features=feats)
    out = rank(np.array([1.0, 0.0]), gallery)
    assert out.ids == ("aa", "zz", "mm")


def test_rank_invariant_to_query_rescaling():
    rng = np.random.default_rng(2)
    gallery = Gallery(ids=tuple(f"g{i}" for i in range(20)), features=rng.standard_normal((20, 5)))
    q = rng.standard_normal(5)
    assert rank(q, gallery).ids == rank(q * 137.0, gallery).ids


def test_rank_validation():
    gallery = Gallery(ids=("a",), features=np.ones((1, 4)))
    with pytest.raises(ValueError, match="width"):
        rank(np.ones(3), gallery)
    with pytest.raises(ValueError, match="empty"):
        rank(np.ones(4), Gallery(ids=(), features=np.zeros((0, 4))))
    with pytest.raises(ValueError, match="unique"):
        Gallery(ids=("a", "a"), features=np.ones((2, 4)))
    with pytest.raises(ValueError, match="metric"):
        rank(np.ones(4), gallery, metric="manhattan")


def test_dot_metric_differs_from_cosine():
    feats = np.array([[10.0, 0.0], [0.0, 1.0]])
    gallery = Gallery(ids=("big", "unit"), features=feats)
    q = np.array([0.1, 0.11])
    assert rank(q, gallery, metric="dot").ids[0] == "big"
    assert rank(q, gallery, metric="cosine").ids[0] == "unit"


# metrics --------------------------------------------------------------------


def ranking_of(ids):
    return RankedRetrieval(ids=tuple(ids), scores=tuple(float(-i) for i in range(len(ids))))


def test_recall_trivial_cases():
    ids = [f"g{i}" for i in range(10)]
    perfect = [ranking_of(ids)] * 4
    truths = [{"g0"}] * 4
    assert recall_at_k(perfect, truths, 1) == 1.0
    single = [ranking_of(ids)]
    assert recall_at_k(single, [{"g5"}], 5) == 0.0
    assert recall_at_k(single, [{"g5"}], 10) == 1.0


def test_map_trivial_cases():
    ids = [f"g{i}" for i in range(10)]
    assert map_at_k([ranking_of(ids)], [{"g0"}], 5) == 1.0
    assert map_at_k([ranking_of(ids)], [{"g1"}], 5) == 0.5


def test_metrics_match_brute_force_oracles():
    rng = np.random.default_rng(3)
    for _ in range(100):
        rankings, truths = random_eval_instance(rng)
        for k in (1, 5, 10, 25):
            assert recall_at_k(rankings, truths, k) == brute_recall(rankings, truths, k)
            assert abs(map_at_k(rankings, truths, k) - brute_map(rankings, truths, k)) <= 1e-12


def test_recall_monotone_in_k():
    rng = np.random.default_rng(4)
    rankings, truths = random_eval_instance(rng, n_queries=16)
    values = [recall_at_k(rankings, truths, k) for k in range(1, 51)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_map_bounded_by_recall_for_single_truth():
    rng = np.random.default_rng(5)
    rankings, _ = random_eval_instance(rng, n_queries=8)
    truths = [{r.ids[int(rng.integers(0, 50))]} for r in rankings]
    for k in (1, 5, 10):
        assert map_at_k(rankings, truths, k) <= recall_at_k(rankings, truths, k) + 1e-12


def test_missing_truth_errors_name_query():
    rankings, truths = random_eval_instance(np.random.default_rng(6))
    truths[2] = {"not-in-gallery"}
    with pytest.raises(ValueError, match="query 2"):
        recall_at_k(rankings, truths, 5)
    with pytest.raises(ValueError, match="query 2"):
        map_at_k(rankings, truths, 5)


# templates --------------------------------------------------------------------


def test_template_strings_exact():
    assert render_template(QuerySpec(template="domain_conversion", slots=("cartoon",))) == "a cartoon of [*]"
    assert (
        render_template(QuerySpec(template="object_composition", slots=("cat", "dog")))
        == "a photo of [*], cat and dog"
    )
    assert (
        render_template(QuerySpec(template="object_composition", slots=("cat", "dog", "bird")))
        == "a photo of [*], cat and dog, and bird"
    )
    assert render_template(QuerySpec(template="object_composition", slots=("cat",))) == "a photo of [*], cat"
    assert (
        render_template(QuerySpec(template="sentence_manipulation", text="the dog is sleeping"))
        == "a photo of [*], the dog is sleeping"
    )
    assert render_template(QuerySpec(template="sentence_manipulation", text="")) == "a photo of [*]"


def test_template_slot_validation():
    with pytest.raises(ValueError, match="unknown template"):
        QuerySpec(template="style_swap")
    with pytest.raises(ValueError, match="domain"):
        QuerySpec(template="domain_conversion")
    with pytest.raises(ValueError, match="object"):
        QuerySpec(template="object_composition")
    with pytest.raises(ValueError, match="no slots"):
        QuerySpec(template="sentence_manipulation", slots=("tag",))


# composition ------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_state():
    cfg = TrainConfig(
        seed=0, max_steps=4, batch_size=4, dtype="float64", lr=1e-3,
        encoder_d=32, encoder_g=4, predictor_blocks=2, predictor_dim=16,
    )
    return init_train_state(cfg)


@pytest.fixture(scope="module")
def corpus():
    return synth_dataset(8, np.random.default_rng(7))


def test_compose_query_deterministic(toy_state, corpus):
    spec = QuerySpec(
        text="a red circle", template="sentence_manipulation",
        reference_image=corpus[0].image, id="q0",
    )
    a = compose_query(spec, toy_state.model, toy_state.vision, toy_state.text)
    b = compose_query(spec, toy_state.model, toy_state.vision, toy_state.text)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (32,)


def test_empty_sentence_equals_bare_prompt(toy_state, corpus):
    empty = QuerySpec(template="sentence_manipulation", text="", reference_image=corpus[0].image)
    vec = compose_query(empty, toy_state.model, toy_state.vision, toy_state.text)
    assert render_template(empty) == "a photo of [*]"
    again = compose_query(empty, toy_state.model, toy_state.vision, toy_state.text)
    assert vec.tobytes() == again.tobytes()


def test_zero_gate_compose_equals_source_only_baseline(toy_state, corpus):
    # untrained fusion keeps gate_alpha at its zero init, so the composed
    # query must coincide with a pure source-mapping pipeline
    from latentcir import autodiff as ad
    from latentcir.alignment import _three_layer_map
    from latentcir.views import resize_bilinear

    assert float(toy_state.model.fusion.tensors["gate_alpha"].data) == 0.0
    spec = QuerySpec(text="a red circle", template="sentence_manipulation",
                     reference_image=corpus[1].image)
    vec = compose_query(spec, toy_state.model, toy_state.vision, toy_state.text)

    feats = toy_state.vision.encode_image(resize_bilinear(corpus[1].image, 64, 64))
    with ad.no_grad():
        token = _three_layer_map(
            ad.reshape(ad.Tensor(feats.global_vec), (1, 32)), toy_state.model.fusion, "map_src"
        )
        seq = toy_state.text.prompt_sequence(render_template(spec)).inject(
            ad.reshape(token, (32,))
        )
        baseline = toy_state.text.encode_prompt(seq).data
    assert vec.tobytes() == baseline.tobytes()


def test_compose_requires_reference_image(toy_state):
    spec = QuerySpec(text="x", template="sentence_manipulation")
    with pytest.raises(ValueError, match="reference image"):
        compose_query(spec, toy_state.model, toy_state.vision, toy_state.text)


# galleries ---------------------------------------------------------------------


def test_embed_gallery_shape_order_determinism(tmp_path, toy_state, corpus):
    manifest = write_dataset(list(corpus), tmp_path)
    g1 = embed_gallery(manifest, toy_state.vision, 64)
    g2 = embed_gallery(manifest, toy_state.vision, 64)
    assert g1.ids == tuple(p.id for p in corpus)
    assert g1.features.shape == (8, 32)
    assert g1.features.tobytes() == g2.features.tobytes()


def test_duplicate_images_give_identical_rows(toy_state, corpus):
    from latentcir.views import RawPair

    dup = [corpus[0], RawPair(image=corpus[0].image.copy(), caption="copy of it", id="dup")]
    gallery = embed_pairs(dup, toy_state.vision, 64)
    assert gallery.ids == (corpus[0].id, "dup")
    np.testing.assert_array_equal(gallery.features[0], gallery.features[1])


def test_gallery_cache_round_trip(tmp_path, toy_state, corpus):
    gallery = embed_pairs(list(corpus), toy_state.vision, 64)
    path = save_gallery(tmp_path / "gallery.npz", gallery)
    loaded = load_gallery(path)
    assert loaded.ids == gallery.ids
    assert loaded.features.tobytes() == gallery.features.tobytes()


def test_embed_gallery_unreadable_image_errors_with_path(tmp_path):
    bad = tmp_path / "manifest.jsonl"
    bad.write_text('{"id": "x", "image": "missing.png", "caption": "hi"}\n')
    from latentcir.encoders import build_toy_encoders

    vision, _ = build_toy_encoders()
    with pytest.raises(OSError, match="missing.png"):
        embed_gallery(bad, vision, 64)


# query files + evaluation ---------------------------------------------------------


def test_composite_queries_round_trip(tmp_path, corpus):
    path = write_composite_queries(list(corpus), CropConfig(), np.random.default_rng(0), tmp_path)
    queries = load_queries(path)
    assert len(queries) == 8
    assert queries[0].truths == (corpus[0].id,)
    assert queries[0].template == "sentence_manipulation"
    assert queries[0].reference_image is not None


def test_self_retrieval_image_mode_is_perfect(toy_state, corpus):
    gallery = embed_pairs(list(corpus), toy_state.vision, 64)
    queries = [
        QuerySpec(template="sentence_manipulation", text="", truths=(p.id,),
                  reference_image=p.image, id=p.id)
        for p in corpus
    ]
    report = evaluate_queries(queries, None, toy_state.vision, None, gallery,
                              ks=(1, 5), mode="image")
    assert report.recall[1] == 1.0
    assert report.mean_ap[1] == 1.0
    assert report.ranks == [1] * 8


def test_report_ks_sorted_regardless_of_input_order(toy_state, corpus):
    gallery = embed_pairs(list(corpus), toy_state.vision, 64)
    queries = [
        QuerySpec(template="sentence_manipulation", text="", truths=(p.id,),
                  reference_image=p.image, id=p.id)
        for p in corpus[:3]
    ]
    report = evaluate_queries(queries, None, toy_state.vision, None, gallery,
                              ks=(5, 1, 3, 5), mode="image")
    assert report.ks == (1, 3, 5)
    text_table = report.to_text()
    k_column = [int(line.split()[0]) for line in text_table.splitlines()[2:]]
    assert k_column == [1, 3, 5]
    assert "Recall@K" in text_table and "queries: 3" in text_table


def test_evaluate_composed_mode_runs(toy_state, corpus):
    gallery = embed_pairs(list(corpus), toy_state.vision, 64)
    queries = [
        QuerySpec(template="sentence_manipulation", text=p.caption, truths=(p.id,),
                  reference_image=p.image, id=p.id)
        for p in corpus[:3]
    ]
    report = evaluate_queries(
        queries, toy_state.model, toy_state.vision, toy_state.text, gallery, ks=(1, 3)
    )
    assert report.query_count == 3
    assert set(report.recall) == {1, 3}
    assert all(1 <= r <= 8 for r in report.ranks)
    assert 0.0 <= report.recall[1] <= report.recall[3] <= 1.0
