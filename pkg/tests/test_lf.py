import base64
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsgully.data import ABSTAIN, NEGATIVE, POSITIVE, GroundTruthSet
from wsgully.lf import (
    BenchmarkParams,
    EndpointUnreachable,
    LfSpec,
    PayloadTooLarge,
    Synthetic,
    VlmEndpointConfig,
    VlmMultiQuestion,
    VlmSingleQuestion,
    build_chat_request,
    format_transcript,
    generate_benchmark,
    parse_binary_answer,
    run_labeling_function,
    synthetic_column,
    synthetic_label,
)

GOLDEN = Path(__file__).parent / "golden"
QUESTION = "Is there an ephemeral gully in these images? Answer yes or no."


def fast_endpoint(url, **kw):
    kw = {"request_timeout_s": 5.0, "max_retries": 1, "backoff_base_s": 0.01, **kw}
    return VlmEndpointConfig(url, **kw)


def location_of(body):
    """Index k encoded in the first byte of each mock image."""
    return base64.b64decode(body["messages"][0]["images"][0])[0]


# -- synthetic labelers ----------------------------------------------------------


def _gt(k, seed=0):
    y = np.random.default_rng(seed).integers(0, 2, size=k)
    return GroundTruthSet(tuple(f"loc{i}" for i in range(k)), y)


def test_perfect_labeler_reproduces_ground_truth(manifest_factory):
    m = manifest_factory(30, n_images=1)
    gt = _gt(30)
    col = run_labeling_function(LfSpec("p", Synthetic(1.0, 0.0, 7)), m, ground_truth=gt)
    assert col.tolist() == gt.labels.tolist()


def test_coin_flip_labeler_accuracy():
    y = _gt(10_000).labels
    col = synthetic_column(y, 0.5, 0.0, seed=3)
    assert 0.48 <= np.mean(col == y) <= 0.52


def test_synthetic_label_monte_carlo():
    rng = np.random.default_rng(11)
    votes = np.array([synthetic_label(1, 0.7, 0.2, rng) for _ in range(100_000)])
    assert np.mean(votes == ABSTAIN) == pytest.approx(0.2, abs=0.01)
    assert np.mean(votes[votes != ABSTAIN] == 1) == pytest.approx(0.7, abs=0.01)


def test_near_certain_abstain():
    rng = np.random.default_rng(0)
    votes = [synthetic_label(0, 0.9, 1 - 1e-9, rng) for _ in range(1000)]
    assert all(v == ABSTAIN for v in votes)


def test_vectorized_matches_scalar_draws():
    y = _gt(500, seed=4).labels
    rng = np.random.default_rng(42)
    scalar = [synthetic_label(int(t), 0.8, 0.3, rng) for t in y]
    assert synthetic_column(y, 0.8, 0.3, seed=42).tolist() == scalar


def test_synthetic_rate_validation():
    with pytest.raises(ValueError):
        synthetic_column([0, 1], 0.0, 0.1, 1)
    with pytest.raises(ValueError):
        synthetic_column([0, 1], 0.7, 1.0, 1)


def test_pairwise_agreement_matches_independence():
    y = _gt(100_000, seed=8).labels
    a, b = 0.8, 0.65
    c1 = synthetic_column(y, a, 0.2, seed=1)
    c2 = synthetic_column(y, b, 0.3, seed=2)
    both = (c1 != ABSTAIN) & (c2 != ABSTAIN)
    assert np.mean(c1[both] == c2[both]) == pytest.approx(a * b + (1 - a) * (1 - b), abs=0.01)


def test_benchmark_lf_accuracies():
    bench = generate_benchmark(BenchmarkParams(n_locations=10_000), seed=0)
    y = bench.ground_truth.labels
    for j, a in enumerate((0.85, 0.75, 0.65)):
        col = bench.label_matrix.votes[:, j]
        voted = col != ABSTAIN
        assert np.mean(col[voted] == y[voted]) == pytest.approx(a, abs=0.02)
        assert np.mean(~voted) == pytest.approx(0.1, abs=0.02)


def test_benchmark_alignment_and_determinism():
    p = BenchmarkParams(n_locations=50, n_images=3, dim=4)
    a, b = generate_benchmark(p, 5), generate_benchmark(p, 5)
    ids = a.manifest.location_ids
    assert a.label_matrix.location_ids == ids == a.feature_store.location_ids == a.ground_truth.location_ids
    assert a.label_matrix == b.label_matrix and a.feature_store == b.feature_store
    assert a.feature_store.values.shape == (50, 3, 4)
    assert generate_benchmark(p, 6).label_matrix != a.label_matrix


def test_benchmark_params_validation():
    with pytest.raises(ValueError, match="separation"):
        BenchmarkParams(separation=0.0)
    with pytest.raises(ValueError):
        BenchmarkParams(accuracies=(0.9,), abstain_rates=(0.1, 0.1))


def test_all_positive_prior():
    bench = generate_benchmark(BenchmarkParams(n_locations=200, class_prior=1.0), seed=1)
    assert bench.ground_truth.labels.tolist() == [1] * 200


def test_benchmark_feature_means():
    bench = generate_benchmark(BenchmarkParams(n_locations=2000, separation=0.5), seed=2)
    v = bench.feature_store.values
    y = bench.ground_truth.labels.astype(bool)
    assert v[y].mean() == pytest.approx(0.5, abs=0.02)
    assert v[~y].mean() == pytest.approx(-0.5, abs=0.02)
    assert v.std(axis=(1, 2)).mean() == pytest.approx(1.0, abs=0.05)


# -- answer parsing --------------------------------------------------------------


@pytest.mark.parametrize(
    "text, vote",
    [
        ("Yes, there is an ephemeral gully.", POSITIVE),
        ("No, although one might say yes...", NEGATIVE),
        ("I cannot determine this.", ABSTAIN),
        ("YES", POSITIVE),
        ("Eyes on the nose: no.", NEGATIVE),
        ("", ABSTAIN),
    ],
)
def test_parse_binary_answer(text, vote):
    assert parse_binary_answer(text) == vote


neutral = st.text(alphabet="abcdfghijklmpqrtuvwxz ,.\n", max_size=40)


@settings(max_examples=300, deadline=None)
@given(neutral, st.text(max_size=60))
def test_neutral_prefix_does_not_change_answer(prefix, text):
    assert parse_binary_answer(prefix + " " + text) == parse_binary_answer(text)


# -- request bodies --------------------------------------------------------------


def test_request_without_images_matches_golden():
    body = build_chat_request("llava:13b", QUESTION)
    assert body == (GOLDEN / "chat_request_0_images.json").read_bytes()
    assert "images" not in json.loads(body)["messages"][0]


def test_request_with_images_matches_golden():
    images = [bytes([0, n]) * 4 for n in range(8)]
    body = build_chat_request("llava:13b", QUESTION, images)
    assert body == (GOLDEN / "chat_request_8_images.json").read_bytes()
    decoded = [base64.b64decode(s) for s in json.loads(body)["messages"][0]["images"]]
    assert decoded == images


def test_payload_cap():
    with pytest.raises(PayloadTooLarge):
        build_chat_request("m", "q", [b"x" * 1000], max_payload_bytes=500)


def test_transcript_matches_golden():
    qs = [
        "Is there a narrow channel crossing the field?",
        "Does the channel follow a natural drainage path?",
        "Is the soil surface disturbed along the channel?",
    ]
    answers = ["Yes, a thin line runs across the field.", "(no answer)", "No."]
    text = format_transcript("Given the answers below, is an ephemeral gully present? Reply yes or no.", qs, answers)
    assert text == (GOLDEN / "mq_transcript.txt").read_text(encoding="utf-8")


# -- against a mock server -------------------------------------------------------


def test_bodies_on_the_wire_match_golden(mock_ollama, tmp_path):
    from wsgully.data import DatasetManifest, ImageRef, LocationRecord

    img_dir = tmp_path / "g"
    img_dir.mkdir()
    refs = []
    for n in range(8):
        (img_dir / f"{n}.png").write_bytes(bytes([0, n]) * 4)
        refs.append(ImageRef(f"g/{n}.png", 100.0, 2010 + n))
    manifest = DatasetManifest((LocationRecord("only", tuple(refs)),))
    srv = mock_ollama(lambda body: "yes")
    spec = LfSpec("sq", VlmSingleQuestion("ep", "llava:13b", QUESTION))
    col = run_labeling_function(spec, manifest, fast_endpoint(srv.url), image_root=tmp_path)
    assert col.tolist() == [POSITIVE]
    assert srv.raw_bodies == [(GOLDEN / "chat_request_8_images.json").read_bytes()]


def test_timeout_abstains_only_that_location(mock_ollama, manifest_factory, tmp_path):
    manifest = manifest_factory(5)
    srv = mock_ollama(lambda body: None if location_of(body) == 2 else ("yes" if location_of(body) % 2 else "no"))
    spec = LfSpec("sq", VlmSingleQuestion("ep", "m", QUESTION))
    cfg = fast_endpoint(srv.url, request_timeout_s=0.2)
    col = run_labeling_function(spec, manifest, cfg, image_root=tmp_path)
    assert col.tolist() == [NEGATIVE, POSITIVE, ABSTAIN, POSITIVE, NEGATIVE]
    retried = [b for b in srv.bodies if location_of(b) == 2]
    assert len(retried) == 2  # first attempt plus one retry


def test_concurrency_bound_and_manifest_order(mock_ollama, manifest_factory, tmp_path):
    manifest = manifest_factory(10)
    # later locations answer faster, so completion order differs from manifest order
    srv = mock_ollama(lambda body: "yes" if location_of(body) % 3 == 0 else "no", delay=0.05)
    spec = LfSpec("sq", VlmSingleQuestion("ep", "m", QUESTION))
    col = run_labeling_function(spec, manifest, fast_endpoint(srv.url, max_in_flight=4), image_root=tmp_path)
    assert col.tolist() == [POSITIVE if k % 3 == 0 else NEGATIVE for k in range(10)]
    assert 1 < srv.max_in_flight <= 4
    assert len(srv.bodies) == 10


def test_known_locations_are_not_requeried(mock_ollama, manifest_factory, tmp_path):
    manifest = manifest_factory(4)
    srv = mock_ollama(lambda body: "yes")
    seen = []
    spec = LfSpec("sq", VlmSingleQuestion("ep", "m", QUESTION))
    col = run_labeling_function(
        spec,
        manifest,
        fast_endpoint(srv.url),
        image_root=tmp_path,
        known={"loc0": NEGATIVE, "loc3": ABSTAIN},
        on_result=lambda loc, v: seen.append((loc, v)),
    )
    assert col.tolist() == [NEGATIVE, POSITIVE, POSITIVE, ABSTAIN]
    assert sorted(seen) == [("loc1", POSITIVE), ("loc2", POSITIVE)]


def test_missing_images_abstain(mock_ollama, manifest_factory, tmp_path):
    manifest = manifest_factory(2)
    (tmp_path / "img" / "loc1_0.png").unlink()
    srv = mock_ollama(lambda body: "yes")
    spec = LfSpec("sq", VlmSingleQuestion("ep", "m", QUESTION))
    col = run_labeling_function(spec, manifest, fast_endpoint(srv.url), image_root=tmp_path)
    assert col.tolist() == [POSITIVE, ABSTAIN]


def _majority_echo(body):
    content = body["messages"][0]["content"]
    if body["model"] == "vlm":
        return "Yes."
    yes = content.count("Answer: Yes")
    no = content.count("Answer: No")
    return "yes" if yes > no else "no"


def test_multi_question_positive(mock_ollama, manifest_factory, tmp_path):
    manifest = manifest_factory(2)
    srv = mock_ollama(_majority_echo)
    qs = tuple(f"Question number {i}?" for i in range(15))
    spec = LfSpec("mq", VlmMultiQuestion("ep", "vlm", "llm", qs, "Aggregate these answers."))
    col = run_labeling_function(spec, manifest, fast_endpoint(srv.url), image_root=tmp_path)
    assert col.tolist() == [POSITIVE, POSITIVE]
    vlm_calls = [b for b in srv.bodies if b["model"] == "vlm"]
    llm_calls = [b for b in srv.bodies if b["model"] == "llm"]
    assert len(vlm_calls) == 30 and len(llm_calls) == 2
    assert all("images" not in b["messages"][0] for b in llm_calls)
    assert llm_calls[0]["messages"][0]["content"].startswith("Aggregate these answers.\n\n1. Question: Question number 0?\n   Answer: Yes.\n")


def test_multi_question_failed_subrequest_records_no_answer(mock_ollama, manifest_factory, tmp_path):
    manifest = manifest_factory(1)

    def reply(body):
        content = body["messages"][0]["content"]
        if body["model"] == "vlm":
            return None if content == "q2" else "no"
        return "yes" if "(no answer)" in content else "no"

    srv = mock_ollama(reply)
    spec = LfSpec("mq", VlmMultiQuestion("ep", "vlm", "llm", ("q1", "q2"), "p"))
    col = run_labeling_function(spec, manifest, fast_endpoint(srv.url, request_timeout_s=0.2, max_retries=0), image_root=tmp_path)
    assert col.tolist() == [POSITIVE]


def test_multi_question_aggregation_down(mock_ollama, manifest_factory, tmp_path):
    manifest = manifest_factory(2)
    srv = mock_ollama(lambda body: "yes" if body["model"] == "vlm" else None)
    spec = LfSpec("mq", VlmMultiQuestion("ep", "vlm", "llm", ("q1",), "p"))
    col = run_labeling_function(spec, manifest, fast_endpoint(srv.url, request_timeout_s=0.2, max_retries=0), image_root=tmp_path)
    assert col.tolist() == [ABSTAIN, ABSTAIN]


def test_unreachable_endpoint_fails_fast(dead_url, manifest_factory):
    spec = LfSpec("sq", VlmSingleQuestion("ep", "m", QUESTION))
    with pytest.raises(EndpointUnreachable):
        run_labeling_function(spec, manifest_factory(2), fast_endpoint(dead_url))


def test_malformed_reply_abstains(mock_ollama, manifest_factory, tmp_path):
    manifest = manifest_factory(1)
    srv = mock_ollama(lambda body: {"not": "a string"})
    spec = LfSpec("sq", VlmSingleQuestion("ep", "m", QUESTION))
    col = run_labeling_function(spec, manifest, fast_endpoint(srv.url, max_retries=0), image_root=tmp_path)
    assert col.tolist() == [ABSTAIN]


def test_endpoint_config_validation():
    with pytest.raises(ValueError):
        VlmEndpointConfig("http://x", request_timeout_s=0)
    with pytest.raises(ValueError):
        VlmEndpointConfig("http://x", max_in_flight=0)
    with pytest.raises(ValueError):
        VlmMultiQuestion("ep", "a", "b", (), "p")
