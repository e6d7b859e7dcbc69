import numpy as np
import pytest

from radspoof import model, nn, vecstore
from radspoof.cli import mfa_grad_check, radmfa_grad_check
from radspoof.corpus import CorpusConfig, write_corpus
from radspoof.encoder import EncoderConfig, extract_and_cache
from radspoof.errors import ConfigurationError, InvalidInputError
from radspoof.metrics import pooled_eer
from radspoof.model import (
    TrainHyper,
    baseline_forward,
    init_baseline,
    init_mfa,
    init_radmfa,
    mfa_forward,
    radmfa_forward,
    score_dataset,
    train_model,
)


def test_mfa_output_is_4f():
    rng = np.random.default_rng(0)
    params = init_mfa(4, 16, rng)
    out = mfa_forward(rng.standard_normal((2, 4, 20, 16)), params)
    assert out.data.shape == (2, 64)
    assert np.all(np.isfinite(out.data))


def test_mfa_single_frame_input_finite():
    rng = np.random.default_rng(1)
    params = init_mfa(3, 8, rng)
    out = mfa_forward(rng.standard_normal((2, 3, 1, 8)), params)
    assert np.all(np.isfinite(out.data))


def test_mfa_shape_mismatch_rejected():
    rng = np.random.default_rng(2)
    params = init_mfa(3, 8, rng)
    with pytest.raises(InvalidInputError):
        mfa_forward(rng.standard_normal((2, 4, 5, 8)), params)
    with pytest.raises(InvalidInputError):
        mfa_forward(rng.standard_normal((2, 3, 5, 9)), params)


def test_mfa_gradient_end_to_end():
    rng = np.random.default_rng(3)
    feat = rng.standard_normal((2, 3, 5, 8))
    assert mfa_grad_check(feat, rng, max_coords=120) < 1e-4


def test_radmfa_shapes():
    rng = np.random.default_rng(4)
    params = init_radmfa(4, 16, rng)
    assert params.sample_pool.attn_w.data.shape[0] == 64  # 4F in
    assert params.head_w.data.shape == (192, 2)  # 12F -> 2
    query = rng.standard_normal((1, 4, 5, 16))
    refs = rng.standard_normal((10, 4, 5, 16))
    logits = radmfa_forward(query, refs, params)
    assert logits.data.shape == (1, 2)


def test_radmfa_refs_equal_query_zero_difference():
    rng = np.random.default_rng(5)
    params = init_radmfa(3, 8, rng)
    query = rng.standard_normal((1, 3, 4, 8))
    refs = np.repeat(query, 5, axis=0)
    feat_dim = 8
    head_in = np.concatenate(
        [np.zeros(4 * feat_dim), np.full(4 * feat_dim, np.sqrt(nn.ASP_EPS))]
    )
    # query branch appended after the pooled difference
    reprs = mfa_forward(np.concatenate([query, refs], axis=0), params.mfa).data
    expected = np.concatenate([head_in, reprs[0]]) @ params.head_w.data + params.head_b.data
    logits = radmfa_forward(query, refs, params)
    assert np.array_equal(logits.data[0], expected)


def test_just_difference_constant_for_equal_refs():
    rng = np.random.default_rng(6)
    params = init_radmfa(3, 8, rng, just_difference=True)
    assert params.head_w.data.shape == (64, 2)  # 8F -> 2
    query = rng.standard_normal((1, 3, 4, 8))
    refs = np.repeat(query, 4, axis=0)
    feat_dim = 8
    head_in = np.concatenate(
        [np.zeros(4 * feat_dim), np.full(4 * feat_dim, np.sqrt(nn.ASP_EPS))]
    )
    expected = head_in @ params.head_w.data + params.head_b.data
    logits = model.just_difference_forward(query, refs, params)
    assert np.array_equal(logits.data[0], expected)
    other_query = rng.standard_normal((1, 3, 4, 8))
    again = model.just_difference_forward(other_query, np.repeat(other_query, 4, axis=0), params)
    assert np.array_equal(again.data[0], expected)


def test_just_difference_requires_matching_params():
    rng = np.random.default_rng(7)
    params = init_radmfa(3, 8, rng, just_difference=False)
    query = rng.standard_normal((1, 3, 4, 8))
    with pytest.raises(ConfigurationError):
        model.just_difference_forward(query, np.repeat(query, 2, axis=0), params)


def test_k_identical_copies_match_k1():
    rng = np.random.default_rng(8)
    params = init_radmfa(3, 8, rng)
    query = rng.standard_normal((1, 3, 4, 8))
    ref = rng.standard_normal((1, 3, 4, 8))
    one = radmfa_forward(query, ref, params).data
    many = radmfa_forward(query, np.repeat(ref, 7, axis=0), params).data
    assert np.max(np.abs(one - many)) < 1e-9


def test_reference_permutation_invariance():
    rng = np.random.default_rng(9)
    params = init_radmfa(3, 8, rng)
    query = rng.standard_normal((1, 3, 4, 8))
    refs = rng.standard_normal((6, 3, 4, 8))
    base = radmfa_forward(query, refs, params).data
    for _ in range(3):
        perm = rng.permutation(6)
        shuffled = radmfa_forward(query, refs[perm], params).data
        assert np.max(np.abs(base - shuffled)) < 1e-9


def test_radmfa_empty_refs_rejected():
    rng = np.random.default_rng(10)
    params = init_radmfa(3, 8, rng)
    query = rng.standard_normal((1, 3, 4, 8))
    with pytest.raises(InvalidInputError):
        radmfa_forward(query, np.zeros((0, 3, 4, 8)), params)


def test_radmfa_gradient_end_to_end():
    rng = np.random.default_rng(11)
    query = rng.standard_normal((1, 3, 4, 8))
    refs = rng.standard_normal((3, 3, 4, 8))
    assert radmfa_grad_check(query, refs, rng, max_coords=120) < 1e-4


def test_batched_forward_matches_single():
    rng = np.random.default_rng(12)
    params = init_radmfa(3, 8, rng)
    queries = rng.standard_normal((4, 3, 5, 8))
    refs = rng.standard_normal((4, 6, 3, 5, 8))
    batched = model._radmfa_forward_batch(queries, refs, params).data
    for i in range(4):
        single = radmfa_forward(queries[i : i + 1], refs[i], params).data
        assert np.max(np.abs(batched[i] - single[0])) < 1e-9


def test_score_sign_stable_under_positive_head_scaling():
    rng = np.random.default_rng(13)
    params = init_radmfa(3, 8, rng)
    query = rng.standard_normal((1, 3, 4, 8))
    refs = rng.standard_normal((5, 3, 4, 8))
    base = radmfa_forward(query, refs, params).data[0]
    base_score = base[model.CLASS_BONAFIDE] - base[model.CLASS_SPOOF]
    for c in (0.5, 2.0, 13.0):
        params.head_w.data *= c
        params.head_b.data *= c
        scaled = radmfa_forward(query, refs, params).data[0]
        score = scaled[model.CLASS_BONAFIDE] - scaled[model.CLASS_SPOOF]
        assert np.sign(score) == np.sign(base_score)
        params.head_w.data /= c
        params.head_b.data /= c


# --- end-to-end training on a tiny corpus ------------------------------------------


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = CorpusConfig(
        n_speakers=3,
        clips_per_speaker=20,
        spoof_fraction=0.5,
        seed=21,
        split_counts={"train": 36, "dev": 12, "eval": 12},
    )
    records, _ = write_corpus(cfg, root)
    encoder_cfg = EncoderConfig(kind="pseudo_trainable", n_layers=3, feat_dim=16, seed=3)
    cache = extract_and_cache(records, root, encoder_cfg, tau=10, cache_dir=root / "cache")
    store, _ = vecstore.build_stores(records, cache, splits={"train"})
    return root, records, encoder_cfg, cache, store


def test_baseline_forward_contract(tiny_setup):
    root, records, encoder_cfg, _, _ = tiny_setup
    from radspoof.corpus import load_segment

    segments = [load_segment(root, r) for r in records[:5]]
    rng = np.random.default_rng(14)
    params = init_baseline(3, 16, rng)
    logits = baseline_forward(segments, params, encoder_cfg, tau=10)
    assert logits.data.shape == (5, 2)
    with pytest.raises(ConfigurationError):
        baseline_forward(segments, params, EncoderConfig(kind="pseudo", n_layers=3,
                                                         feat_dim=16, seed=3), tau=10)


def test_untrained_eer_near_chance(tiny_setup):
    # the tiny eval split is too small for a tight band; the +-0.15 gate runs
    # on the full toy corpus in the acceptance suite
    root, records, encoder_cfg, cache, store = tiny_setup
    eval_records = [r for r in records if r.split == "eval"]
    lookup = model.FeatureLookup(cache)
    eers = []
    for seed in range(3):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 502)))
        params = init_radmfa(3, 16, rng)
        queries = np.stack([lookup.short(r.utt_id) for r in eval_records]).astype(float)
        refs = np.stack(
            [model.retrieve_references(r.utt_id, store, lookup, 5) for r in eval_records]
        ).astype(float)
        logits = model._radmfa_forward_batch(queries, refs, params).data
        scores = model._scores_from_logits(eval_records, logits)
        eers.append(pooled_eer(scores).eer)
    assert 0.15 <= float(np.median(eers)) <= 0.85


def test_training_reduces_loss_and_is_deterministic(tiny_setup, tmp_path):
    root, records, encoder_cfg, cache, store = tiny_setup
    hyper = TrainHyper(lr=3e-4, batch_size=12, epochs=2, seed=5, k_refs=5, tau=10)
    frozen = TrainHyper(lr=0.0, batch_size=12, epochs=1, seed=5, k_refs=5, tau=10)
    init_run = train_model(
        "radmfa", records, root, encoder_cfg, frozen, tmp_path / "a",
        store=store, cache=cache, run_name="init",
    )
    init_loss = float(init_run.log_path.read_text().split("\t")[1])
    trained = train_model(
        "radmfa", records, root, encoder_cfg, hyper, tmp_path / "b",
        store=store, cache=cache, run_name="run1",
    )
    first_epoch_loss = float(trained.log_path.read_text().splitlines()[0].split("\t")[1])
    assert first_epoch_loss < init_loss

    again = train_model(
        "radmfa", records, root, encoder_cfg, hyper, tmp_path / "c",
        store=store, cache=cache, run_name="run2",
    )
    assert trained.log_path.read_text() == again.log_path.read_text()
    assert trained.checkpoint_path.read_bytes()[:6] == again.checkpoint_path.read_bytes()[:6]
    a = nn.load_checkpoint(trained.checkpoint_path)[0]
    b = nn.load_checkpoint(again.checkpoint_path)[0]
    for name in a:
        assert np.array_equal(a[name], b[name])


def test_scoring_deterministic_and_k_sensitive(tiny_setup, tmp_path):
    root, records, encoder_cfg, cache, store = tiny_setup
    hyper = TrainHyper(lr=3e-4, batch_size=12, epochs=2, seed=6, k_refs=5, tau=10)
    trained = train_model(
        "radmfa", records, root, encoder_cfg, hyper, tmp_path,
        store=store, cache=cache, run_name="scorer",
    )
    eval_records = [r for r in records if r.split == "eval"]
    scores_a = score_dataset(
        "radmfa", trained.checkpoint_path, eval_records, root, store=store, cache=cache
    )
    scores_b = score_dataset(
        "radmfa", trained.checkpoint_path, eval_records, root, store=store, cache=cache
    )
    assert len(scores_a) == len(eval_records)
    assert [(r.utt_id, r.score) for r in scores_a] == [(r.utt_id, r.score) for r in scores_b]
    from radspoof.metrics import write_scores

    write_scores(tmp_path / "a.tsv", scores_a)
    write_scores(tmp_path / "b.tsv", scores_b)
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()

    scores_k3 = score_dataset(
        "radmfa", trained.checkpoint_path, eval_records, root,
        store=store, cache=cache, k_refs=3,
    )
    assert any(
        a.score != b.score for a, b in zip(scores_a, scores_k3)
    ), "changing K should generally change scores"


def test_baseline_training_smoke(tiny_setup, tmp_path):
    root, records, encoder_cfg, _, _ = tiny_setup
    hyper = TrainHyper(lr=3e-4, batch_size=12, epochs=2, seed=7, tau=10)
    result = train_model("baseline", records, root, encoder_cfg, hyper, tmp_path,
                         run_name="base")
    lines = result.log_path.read_text().splitlines()
    assert len(lines) == 2
    eval_records = [r for r in records if r.split == "eval"]
    scores = score_dataset(
        "baseline", result.checkpoint_path, eval_records, root, encoder_cfg=encoder_cfg
    )
    assert len(scores) == len(eval_records)
    tuned = model.tuned_encoder_from_checkpoint(result.checkpoint_path, encoder_cfg)
    assert tuned.kind == "pseudo_trainable"
    scales, _ = tuned.scale_arrays()
    assert not np.allclose(scales, 1.0)  # training moved the encoder


def test_train_requires_store_for_rad(tiny_setup, tmp_path):
    root, records, encoder_cfg, cache, _ = tiny_setup
    hyper = TrainHyper(epochs=1, seed=0)
    with pytest.raises(ConfigurationError):
        train_model("radmfa", records, root, encoder_cfg, hyper, tmp_path, cache=cache)


def test_unknown_kind_rejected(tiny_setup, tmp_path):
    root, records, encoder_cfg, _, _ = tiny_setup
    with pytest.raises(ConfigurationError):
        train_model("mystery", records, root, encoder_cfg, TrainHyper(), tmp_path)
